#pragma once

// Dense N-D tensors of doubles with a tape-based reverse-mode engine.
//
// Operations record themselves on the thread's active Graph (see GraphScope)
// whenever one of their inputs requires a gradient. Without an active graph
// every op is a plain forward computation, which is how inference runs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace stflow {

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

/// Independent seed for sub-stream `stream` of `seed`.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct TensorImpl;
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  /// Size of one axis; negative axes count from the back.
  int dim(int axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  /// Writable view of the values. Reserved for parameter initialization and
  /// optimizer updates; never write into a tensor a live graph still uses.
  std::span<double> mutable_data();

  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  /// Deep copy that carries no gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl>& handle() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend Tensor detail_wrap(std::shared_ptr<detail::TensorImpl> impl);

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
};

using GradBuffer = std::vector<double>;
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<GradBuffer* const> grad_in)>;

struct Op {
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  BackwardFn backward;
};

}  // namespace detail

/// Gradients of a scalar loss with respect to the leaves of one graph.
class Gradients {
 public:
  bool contains(const Tensor& leaf) const;
  /// Gradient for `leaf`; zeros when the loss does not depend on it.
  Tensor of(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Graph;
  std::unordered_map<const detail::TensorImpl*, detail::GradBuffer> grads_;
};

/// Records operations in execution order and replays them backwards.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph();

  std::size_t size() const { return ops_.size(); }
  /// Leaf tensors (requiring grad, not produced here) seen so far.
  std::size_t leaf_count() const { return leaves_.size(); }

  /// Replays the tape in reverse from a scalar loss. The tape is consumed:
  /// calling again without recording a new forward pass is an error.
  Gradients backward(const Tensor& loss);

  /// Names of the ops visited by the most recent backward, in visit order.
  const std::vector<std::string>& last_replay() const { return last_replay_; }

  void clear();
  void record(detail::Op op);

 private:
  std::vector<detail::Op> ops_;
  std::vector<std::shared_ptr<detail::TensorImpl>> leaves_;
  std::unordered_map<const detail::TensorImpl*, std::size_t> leaf_index_;
  std::unordered_set<const detail::TensorImpl*> produced_;
  std::vector<std::string> last_replay_;
};

/// Makes `graph` the recording target of the current thread for its lifetime.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;
  ~GraphScope();

 private:
  Graph* previous_;
};

Graph* active_graph();

// Elementwise ops. `b` may broadcast over trailing dims of `a`: its shape is
// a leading prefix of a's shape, optionally padded with trailing 1s, or it
// holds a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log_sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor neg(const Tensor& x);

Tensor add_scalar(const Tensor& x, double value);
Tensor mul_scalar(const Tensor& x, double value);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(double s, const Tensor& x) { return mul_scalar(x, s); }
inline Tensor operator+(const Tensor& x, double s) { return add_scalar(x, s); }

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
/// Concatenation along axis 0 (the channel axis of a [C,H,W] tensor).
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
/// Rows [begin, end) of axis 0.
Tensor slice(const Tensor& x, int begin, int end);
/// Splits axis 0 at `at`: ([0, at), [at, C)).
std::pair<Tensor, Tensor> split(const Tensor& x, int at);

/// Cross-correlation of x[Cin,H,W] with kernel[Cout,Cin,kh,kw]. `bias` may be
/// undefined.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int padding, int stride = 1);
/// a[m,k] @ b[k,n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// v[C] -> diagonal matrix [C,C].
Tensor diag_embed(const Tensor& v);
/// Mean over non-overlapping factor x factor blocks of a [C,H,W] tensor.
Tensor avg_pool(const Tensor& x, int factor);
/// Space-to-depth [C,H,W] -> [4C,H/2,W/2]; sub-pixel order TL, TR, BL, BR.
Tensor squeeze2x2(const Tensor& x);
Tensor unsqueeze2x2(const Tensor& x);

Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
Tensor uniform(Shape shape, Rng& rng, double low, double high);

double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x);

/// Central-difference gradient of a scalar function, one element at a time.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps = 1e-5);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

/// Little-endian: dtype tag (u8), rank (u32), dims (u32 each), row-major values.
void write_tensor(std::ostream& out, const Tensor& t, DType dtype = DType::f64);
Tensor read_tensor(std::istream& in);

}  // namespace stflow
