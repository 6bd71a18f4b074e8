#include "stflow/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <limits>

#include "stflow/binary_io.hpp"
#include "stflow/errors.hpp"

namespace stflow {

using detail::BackwardFn;
using detail::GradBuffer;
using detail::TensorImpl;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

thread_local Graph* g_active = nullptr;

}  // namespace

Tensor detail_wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

namespace {

void check_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_string(shape));
  }
}

void check_finite(std::span<const double> values, const char* name) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + name);
  }
}

// Builds the result tensor of an op and, when any input is tracked on the
// active graph, records the backward closure produced by `make_backward`.
template <typename MakeBackward>
Tensor finish(const char* name, Shape shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs, MakeBackward&& make_backward) {
  check_finite(values, name);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Graph* graph = g_active;
  if (graph != nullptr) {
    bool tracked = false;
    for (const Tensor* t : inputs) tracked = tracked || (t->defined() && t->requires_grad());
    if (tracked) {
      impl->requires_grad = true;
      detail::Op op;
      op.name = name;
      for (const Tensor* t : inputs) {
        if (t->defined()) op.inputs.push_back(t->handle());
      }
      op.output = impl;
      op.backward = make_backward();
      graph->record(std::move(op));
    }
  }
  return detail_wrap(std::move(impl));
}

void require_defined(const Tensor& t, const char* name) {
  if (!t.defined()) throw ShapeError(std::string(name) + ": undefined tensor");
}

// Number of consecutive elements of `a` sharing one element of `b`.
std::size_t broadcast_inner(const Shape& a, const Shape& b, const char* name) {
  if (a == b) return 1;
  const std::size_t bsize = shape_size(b);
  if (bsize == 1) return shape_size(a);
  if (b.size() <= a.size()) {
    Shape stripped = b;
    while (!stripped.empty() && stripped.back() == 1) stripped.pop_back();
    if (std::equal(stripped.begin(), stripped.end(), a.begin())) return shape_size(a) / bsize;
  }
  throw ShapeError(std::string(name) + ": cannot broadcast " + shape_string(b) + " over " +
                   shape_string(a));
}

template <typename F, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_defined(a, name);
  require_defined(b, name);
  const std::size_t inner = broadcast_inner(a.shape(), b.shape(), name);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(av.size());
  const std::size_t outer = bv.size();
  for (std::size_t j = 0; j < outer; ++j) {
    const double bj = bv[j];
    for (std::size_t k = 0, i = j * inner; k < inner; ++k, ++i) out[i] = f(av[i], bj);
  }
  return finish(name, a.shape(), std::move(out), {&a, &b}, [&] {
    return BackwardFn([ah = a.handle(), bh = b.handle(), inner, da, db](
                          std::span<const double> g, std::span<GradBuffer* const> gin) {
      const auto& av = ah->data;
      const auto& bv = bh->data;
      const std::size_t outer = bv.size();
      if (GradBuffer* ga = gin[0]) {
        for (std::size_t j = 0; j < outer; ++j) {
          for (std::size_t k = 0, i = j * inner; k < inner; ++k, ++i) (*ga)[i] += g[i] * da(av[i], bv[j]);
        }
      }
      if (GradBuffer* gb = gin[1]) {
        for (std::size_t j = 0; j < outer; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0, i = j * inner; k < inner; ++k, ++i) acc += g[i] * db(av[i], bv[j]);
          (*gb)[j] += acc;
        }
      }
    });
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_log_sigmoid(double x) {
  return x < 0 ? x - std::log1p(std::exp(x)) : -std::log1p(std::exp(-x));
}

template <typename F, typename D>
Tensor unary_op(const char* name, const Tensor& x, F f, D d) {
  require_defined(x, name);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  check_finite(out, name);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = x.shape();
  impl->data = std::move(out);
  Graph* graph = g_active;
  if (graph != nullptr && x.requires_grad()) {
    impl->requires_grad = true;
    detail::Op op;
    op.name = name;
    op.inputs = {x.handle()};
    op.output = impl;
    op.backward = [xh = x.handle(), yh = impl, d](std::span<const double> g,
                                                  std::span<GradBuffer* const> gin) {
      GradBuffer* gx = gin[0];
      if (gx == nullptr) return;
      const auto& xv = xh->data;
      const auto& yv = yh->data;
      for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += g[i] * d(xv[i], yv[i]);
    };
    graph->record(std::move(op));
  }
  return detail_wrap(std::move(impl));
}

// Fills cols[Cin*kh*kw, Ho*Wo] from x[Cin,H,W].
void im2col(const double* x, int cin, int h, int w, int kh, int kw, int pad, int stride, int ho,
            int wo, double* cols) {
  const std::size_t n = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        double* row = cols + (static_cast<std::size_t>(c * kh + i) * kw + j) * n;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + i;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + j;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, int cin, int h, int w, int kh, int kw, int pad, int stride,
                int ho, int wo, double* x) {
  const std::size_t n = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < cin; ++c) {
    double* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const double* row = cols + (static_cast<std::size_t>(c * kh + i) * kw + j) * n;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + i;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          double* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + j;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  check_shape(shape);
  impl_->data.assign(shape_size(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  check_shape(shape);
  if (shape_size(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " + std::to_string(shape_size(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

int Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  return impl_->shape[a];
}

std::size_t Tensor::size() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  return *this;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

// ---------------------------------------------------------------------------
// Graph

Graph::~Graph() {
  if (g_active == this) g_active = nullptr;
}

void Graph::record(detail::Op op) {
  for (const auto& in : op.inputs) {
    if (!in->requires_grad) continue;
    if (leaf_index_.count(in.get()) != 0 || produced_.count(in.get()) != 0) continue;
    leaf_index_.emplace(in.get(), leaves_.size());
    leaves_.push_back(in);
  }
  produced_.insert(op.output.get());
  ops_.push_back(std::move(op));
}

void Graph::clear() {
  ops_.clear();
  leaves_.clear();
  leaf_index_.clear();
  produced_.clear();
}

Gradients Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw GraphError("backward needs a scalar loss");
  }
  if (ops_.empty()) {
    throw GraphError("backward called without a recorded forward pass");
  }
  if (!loss.requires_grad()) throw GraphError("loss does not depend on any tracked tensor");

  std::unordered_map<const TensorImpl*, GradBuffer> grads;
  grads[loss.handle().get()] = GradBuffer{1.0};
  last_replay_.clear();
  std::vector<GradBuffer*> gin;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    auto found = grads.find(it->output.get());
    if (found == grads.end()) continue;
    GradBuffer gout = std::move(found->second);
    grads.erase(found);
    gin.assign(it->inputs.size(), nullptr);
    for (std::size_t i = 0; i < it->inputs.size(); ++i) {
      const auto& in = it->inputs[i];
      if (!in->requires_grad) continue;
      GradBuffer& buf = grads[in.get()];
      if (buf.empty()) buf.assign(in->data.size(), 0.0);
      gin[i] = &buf;
    }
    it->backward(gout, gin);
    last_replay_.emplace_back(it->name);
  }

  Gradients result;
  for (auto& [impl, buf] : grads) {
    if (leaf_index_.count(impl) != 0) result.grads_.emplace(impl, std::move(buf));
  }
  clear();
  return result;
}

bool Gradients::contains(const Tensor& leaf) const {
  return grads_.count(leaf.handle().get()) != 0;
}

Tensor Gradients::of(const Tensor& leaf) const {
  auto it = grads_.find(leaf.handle().get());
  if (it == grads_.end()) return Tensor(leaf.shape(), 0.0);
  return Tensor(leaf.shape(), it->second);
}

GraphScope::GraphScope(Graph& graph) : previous_(g_active) { g_active = &graph; }
GraphScope::~GraphScope() { g_active = previous_; }

Graph* active_graph() { return g_active; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  require_defined(x, "log");
  for (double v : x.data()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
  }
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& x) {
  return unary_op("log_sigmoid", x, stable_log_sigmoid,
                  [](double v, double) { return stable_sigmoid(-v); });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary_op(
      "add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double value) {
  return unary_op(
      "mul_scalar", x, [value](double v) { return v * value; },
      [value](double, double) { return value; });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  const auto xv = x.data();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  return finish("sum", Shape{}, {total}, {&x}, [] {
    return BackwardFn([](std::span<const double> g, std::span<GradBuffer* const> gin) {
      if (GradBuffer* gx = gin[0]) {
        for (double& v : *gx) v += g[0];
      }
    });
  });
}

Tensor mean(const Tensor& x) {
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  check_shape(shape);
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> values(x.data().begin(), x.data().end());
  return finish("reshape", std::move(shape), std::move(values), {&x}, [] {
    return BackwardFn([](std::span<const double> g, std::span<GradBuffer* const> gin) {
      if (GradBuffer* gx = gin[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
      }
    });
  });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (first.empty()) throw ShapeError("concat needs rank >= 1");
  Shape out_shape = first;
  out_shape[0] = 0;
  std::vector<std::size_t> sizes;
  for (const Tensor& p : parts) {
    require_defined(p, "concat");
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(s.begin() + 1, s.end(), first.begin() + 1)) {
      throw ShapeError("concat: " + shape_string(s) + " does not match " + shape_string(first) +
                       " off axis 0");
    }
    out_shape[0] += s[0];
    sizes.push_back(p.size());
  }
  std::vector<double> values;
  values.reserve(shape_size(out_shape));
  for (const Tensor& p : parts) values.insert(values.end(), p.data().begin(), p.data().end());

  // `finish` takes a fixed input list; record a generic op by hand here.
  Graph* graph = g_active;
  check_finite(values, "concat");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = out_shape;
  impl->data = std::move(values);
  bool tracked = false;
  for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
  if (graph != nullptr && tracked) {
    impl->requires_grad = true;
    detail::Op op;
    op.name = "concat";
    for (const Tensor& p : parts) op.inputs.push_back(p.handle());
    op.output = impl;
    op.backward = [sizes](std::span<const double> g, std::span<GradBuffer* const> gin) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        if (GradBuffer* gp = gin[k]) {
          for (std::size_t i = 0; i < sizes[k]; ++i) (*gp)[i] += g[offset + i];
        }
        offset += sizes[k];
      }
    };
    graph->record(std::move(op));
  }
  return detail_wrap(std::move(impl));
}

Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice(const Tensor& x, int begin, int end) {
  require_defined(x, "slice");
  if (x.rank() < 1) throw ShapeError("slice needs rank >= 1");
  const int n = x.dim(0);
  if (begin < 0 || end > n || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") of axis size " +
                     std::to_string(n));
  }
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::size_t stride = x.size() / static_cast<std::size_t>(n);
  const std::size_t offset = stride * static_cast<std::size_t>(begin);
  const std::size_t count = stride * static_cast<std::size_t>(end - begin);
  std::vector<double> values(x.data().begin() + offset, x.data().begin() + offset + count);
  return finish("slice", std::move(shape), std::move(values), {&x}, [&] {
    return BackwardFn([offset](std::span<const double> g, std::span<GradBuffer* const> gin) {
      if (GradBuffer* gx = gin[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[offset + i] += g[i];
      }
    });
  });
}

std::pair<Tensor, Tensor> split(const Tensor& x, int at) {
  require_defined(x, "split");
  if (x.rank() < 1 || at <= 0 || at >= x.dim(0)) {
    throw ShapeError("split at " + std::to_string(at) + " of " + shape_string(x.shape()));
  }
  return {slice(x, 0, at), slice(x, at, x.dim(0))};
}

// ---------------------------------------------------------------------------
// Linear algebra and spatial ops

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int padding, int stride) {
  require_defined(x, "conv2d");
  require_defined(kernel, "conv2d");
  if (x.rank() != 3 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects x[C,H,W] and kernel[Cout,Cin,kh,kw], got " + shape_string(x.shape()) +
                     " and " + shape_string(kernel.shape()));
  }
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel dims must be odd");
  if (padding < 0 || stride < 1) throw ShapeError("conv2d: padding must be >= 0 and stride >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(cout) + "], got " + shape_string(bias.shape()));
  }
  const int span_h = h + 2 * padding - kh;
  const int span_w = w + 2 * padding - kw;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ShapeError("conv2d: non-integral output size for input " + shape_string(x.shape()) + ", kernel " +
                     std::to_string(kh) + "x" + std::to_string(kw) + ", padding " + std::to_string(padding) +
                     ", stride " + std::to_string(stride));
  }
  const int ho = span_h / stride + 1;
  const int wo = span_w / stride + 1;
  const int k = cin * kh * kw;
  const int n = ho * wo;
  const bool pointwise = kh == 1 && kw == 1 && padding == 0 && stride == 1;

  std::vector<double> cols;
  const double* colp = x.data().data();
  if (!pointwise) {
    cols.resize(static_cast<std::size_t>(k) * n);
    im2col(x.data().data(), cin, h, w, kh, kw, padding, stride, ho, wo, cols.data());
    colp = cols.data();
  }
  std::vector<double> out(static_cast<std::size_t>(cout) * n);
  MatMap om(out.data(), cout, n);
  om.noalias() = ConstMatMap(kernel.data().data(), cout, k) * ConstMatMap(colp, k, n);
  if (bias.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), cout);

  return finish("conv2d", Shape{cout, ho, wo}, std::move(out), {&x, &kernel, &bias}, [&] {
    const bool has_bias = bias.defined();
    return BackwardFn([xh = x.handle(), kh_ = kernel.handle(), cin, h, w, cout, kh, kw, padding, stride, ho,
                       wo, k, n, pointwise,
                       has_bias](std::span<const double> g, std::span<GradBuffer* const> gin) {
      ConstMatMap gm(g.data(), cout, n);
      std::vector<double> cols;
      const double* colp = xh->data.data();
      GradBuffer* gx = gin[0];
      GradBuffer* gk = gin[1];
      GradBuffer* gb = has_bias ? gin[2] : nullptr;
      if (gk != nullptr) {
        if (!pointwise) {
          cols.resize(static_cast<std::size_t>(k) * n);
          im2col(xh->data.data(), cin, h, w, kh, kw, padding, stride, ho, wo, cols.data());
          colp = cols.data();
        }
        MatMap(gk->data(), cout, k).noalias() += gm * ConstMatMap(colp, k, n).transpose();
      }
      if (gb != nullptr) {
        for (int o = 0; o < cout; ++o) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += g[static_cast<std::size_t>(o) * n + j];
          (*gb)[o] += acc;
        }
      }
      if (gx != nullptr) {
        ConstMatMap km(kh_->data.data(), cout, k);
        if (pointwise) {
          MatMap(gx->data(), k, n).noalias() += km.transpose() * gm;
        } else {
          std::vector<double> dcols(static_cast<std::size_t>(k) * n);
          MatMap(dcols.data(), k, n).noalias() = km.transpose() * gm;
          col2im_add(dcols.data(), cin, h, w, kh, kw, padding, stride, ho, wo, gx->data());
        }
      }
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul " + shape_string(a.shape()) + " @ " + shape_string(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  return finish("matmul", Shape{m, n}, std::move(out), {&a, &b}, [&] {
    return BackwardFn([ah = a.handle(), bh = b.handle(), m, k, n](std::span<const double> g,
                                                                  std::span<GradBuffer* const> gin) {
      ConstMatMap gm(g.data(), m, n);
      if (GradBuffer* ga = gin[0]) {
        MatMap(ga->data(), m, k).noalias() += gm * ConstMatMap(bh->data.data(), k, n).transpose();
      }
      if (GradBuffer* gb = gin[1]) {
        MatMap(gb->data(), k, n).noalias() += ConstMatMap(ah->data.data(), m, k).transpose() * gm;
      }
    });
  });
}

Tensor diag_embed(const Tensor& v) {
  require_defined(v, "diag_embed");
  if (v.rank() != 1) throw ShapeError("diag_embed expects a vector, got " + shape_string(v.shape()));
  const int c = v.dim(0);
  std::vector<double> out(static_cast<std::size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i) out[static_cast<std::size_t>(i) * c + i] = v.data()[i];
  return finish("diag_embed", Shape{c, c}, std::move(out), {&v}, [&] {
    return BackwardFn([c](std::span<const double> g, std::span<GradBuffer* const> gin) {
      if (GradBuffer* gv = gin[0]) {
        for (int i = 0; i < c; ++i) (*gv)[i] += g[static_cast<std::size_t>(i) * c + i];
      }
    });
  });
}

Tensor avg_pool(const Tensor& x, int factor) {
  require_defined(x, "avg_pool");
  if (x.rank() != 3) throw ShapeError("avg_pool expects [C,H,W], got " + shape_string(x.shape()));
  if (factor < 1) throw ShapeError("avg_pool factor must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % factor != 0 || w % factor != 0) {
    throw ShapeError("avg_pool: " + shape_string(x.shape()) + " not divisible by " + std::to_string(factor));
  }
  if (factor == 1) return x;
  const int ho = h / factor, wo = w / factor;
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  std::vector<double> out(static_cast<std::size_t>(c) * ho * wo, 0.0);
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        out[(static_cast<std::size_t>(ch) * ho + y / factor) * wo + xx / factor] +=
            xv[(static_cast<std::size_t>(ch) * h + y) * w + xx];
      }
    }
  }
  for (double& v : out) v *= inv;
  return finish("avg_pool", Shape{c, ho, wo}, std::move(out), {&x}, [&] {
    return BackwardFn([c, h, w, ho, wo, factor, inv](std::span<const double> g, std::span<GradBuffer* const> gin) {
      GradBuffer* gx = gin[0];
      if (gx == nullptr) return;
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            (*gx)[(static_cast<std::size_t>(ch) * h + y) * w + xx] +=
                inv * g[(static_cast<std::size_t>(ch) * ho + y / factor) * wo + xx / factor];
          }
        }
      }
    });
  });
}

namespace {

// Flat index of the squeezed element for input position (ch, y, x).
inline std::size_t squeeze_index(int ch, int y, int x, int ho, int wo) {
  const int sub = 2 * (y & 1) + (x & 1);
  return (static_cast<std::size_t>(4 * ch + sub) * ho + (y >> 1)) * wo + (x >> 1);
}

}  // namespace

Tensor squeeze2x2(const Tensor& x) {
  require_defined(x, "squeeze");
  if (x.rank() != 3) throw ShapeError("squeeze expects [C,H,W], got " + shape_string(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) throw ShapeError("squeeze needs even H and W, got " + shape_string(x.shape()));
  const int ho = h / 2, wo = w / 2;
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        out[squeeze_index(ch, y, xx, ho, wo)] = xv[(static_cast<std::size_t>(ch) * h + y) * w + xx];
      }
    }
  }
  return finish("squeeze", Shape{4 * c, ho, wo}, std::move(out), {&x}, [&] {
    return BackwardFn([c, h, w, ho, wo](std::span<const double> g, std::span<GradBuffer* const> gin) {
      GradBuffer* gx = gin[0];
      if (gx == nullptr) return;
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            (*gx)[(static_cast<std::size_t>(ch) * h + y) * w + xx] += g[squeeze_index(ch, y, xx, ho, wo)];
          }
        }
      }
    });
  });
}

Tensor unsqueeze2x2(const Tensor& x) {
  require_defined(x, "unsqueeze");
  if (x.rank() != 3 || x.dim(0) % 4 != 0) {
    throw ShapeError("unsqueeze expects [4C,H,W], got " + shape_string(x.shape()));
  }
  const int c = x.dim(0) / 4, ho = x.dim(1), wo = x.dim(2);
  const int h = 2 * ho, w = 2 * wo;
  std::vector<double> out(x.size());
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        out[(static_cast<std::size_t>(ch) * h + y) * w + xx] = xv[squeeze_index(ch, y, xx, ho, wo)];
      }
    }
  }
  return finish("unsqueeze", Shape{c, h, w}, std::move(out), {&x}, [&] {
    return BackwardFn([c, h, w, ho, wo](std::span<const double> g, std::span<GradBuffer* const> gin) {
      GradBuffer* gx = gin[0];
      if (gx == nullptr) return;
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
          for (int xx = 0; xx < w; ++xx) {
            (*gx)[squeeze_index(ch, y, xx, ho, wo)] += g[(static_cast<std::size_t>(ch) * h + y) * w + xx];
          }
        }
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Utilities

Tensor randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

Tensor uniform(Shape shape, Rng& rng, double low, double high) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(low, high);
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

bool all_finite(const Tensor& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](double v) { return std::isfinite(v); });
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw NumericError("finite_diff_grad: eps must be positive");
  Tensor work = x.detach();
  Tensor grad(x.shape());
  auto values = work.mutable_data();
  auto g = grad.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double fp = f(work);
    values[i] = saved - eps;
    const double fm = f(work);
    values[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at element " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

void write_tensor(std::ostream& out, const Tensor& t, DType dtype) {
  io::Writer w(out);
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  if (dtype == DType::f32) {
    for (double v : t.data()) w.f32(static_cast<float>(v));
  } else {
    for (double v : t.data()) w.f64(v);
  }
}

Tensor read_tensor(std::istream& in) {
  io::Reader r(in, static_cast<std::uint64_t>(std::max<std::streamoff>(0, in.tellg())));
  const auto tag_at = r.offset();
  const auto tag = r.u8();
  if (tag > 1) r.fail(tag_at, "unknown dtype tag " + std::to_string(tag));
  const auto rank_at = r.offset();
  const auto rank = r.u32();
  if (rank > 8) r.fail(rank_at, "tensor rank " + std::to_string(rank) + " too large");
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto at = r.offset();
    const auto d = r.u32();
    if (d == 0 || d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
      r.fail(at, "invalid tensor dim " + std::to_string(d));
    }
    count *= d;
    if (count > (std::uint64_t{1} << 32)) r.fail(at, "tensor element count overflow");
    shape.push_back(static_cast<int>(d));
  }
  std::vector<double> values(count);
  if (tag == 0) {
    for (auto& v : values) v = r.f32();
  } else {
    for (auto& v : values) v = r.f64();
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace stflow
