#include "stflow/checkpoint.hpp"

#include <algorithm>
#include <fstream>

#include "stflow/binary_io.hpp"
#include "stflow/errors.hpp"

namespace stflow {

namespace {

constexpr char kMagic[] = "STFLOWCK";
constexpr std::uint32_t kVersion = 1;

io::Reader reader_here(std::istream& in) {
  return io::Reader(in, static_cast<std::uint64_t>(std::max<std::streamoff>(0, in.tellg())));
}

}  // namespace

Checkpoint Checkpoint::capture(const RunConfig& config, const Model& model, const AdamState& optim,
                               std::uint64_t seed) {
  Checkpoint ck;
  ck.config = config;
  for (const auto& p : model.parameters()) {
    ck.names.push_back(p.name);
    ck.values.push_back(p.tensor.detach());
  }
  ck.optim.step = optim.step;
  for (const auto& t : optim.m) ck.optim.m.push_back(t.defined() ? t.detach() : Tensor());
  for (const auto& t : optim.v) ck.optim.v.push_back(t.defined() ? t.detach() : Tensor());
  for (const auto& t : optim.shadow) ck.optim.shadow.push_back(t.detach());
  ck.step = optim.step;
  ck.seed = seed;
  return ck;
}

Model Checkpoint::restore_model(bool use_ema) const {
  Model model = Model::build(config.model, seed);
  const ParamList params = model.parameters();
  if (params.size() != names.size()) {
    throw FormatError("checkpoint holds " + std::to_string(names.size()) + " parameters, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != names[i]) {
      throw FormatError("checkpoint parameter " + std::to_string(i) + " is '" + names[i] + "', model expects '" +
                        params[i].name + "'");
    }
  }
  if (use_ema) {
    if (optim.shadow.size() != values.size()) throw FormatError("checkpoint has no EMA shadow");
    model.assign(optim.shadow);
  } else {
    model.assign(values);
  }
  if (step > 0) model.mark_initialized();
  return model;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  io::Writer w(out);
  w.raw(std::string(kMagic, 8));
  w.u32(kVersion);
  w.str(serialize(ck.config));
  w.u32(static_cast<std::uint32_t>(ck.values.size()));
  for (std::size_t i = 0; i < ck.values.size(); ++i) {
    w.str(ck.names[i]);
    write_tensor(out, ck.values[i]);
  }
  w.u64(ck.optim.step);
  for (std::size_t i = 0; i < ck.values.size(); ++i) {
    const bool has = i < ck.optim.m.size() && ck.optim.m[i].defined();
    w.u8(has ? 1 : 0);
    if (has) {
      write_tensor(out, ck.optim.m[i]);
      write_tensor(out, ck.optim.v[i]);
    }
  }
  w.u32(static_cast<std::uint32_t>(ck.optim.shadow.size()));
  for (const auto& t : ck.optim.shadow) write_tensor(out, t);
  w.u64(ck.step);
  w.u64(ck.seed);
}

Checkpoint read_checkpoint(std::istream& in) {
  Checkpoint ck;
  {
    io::Reader r = reader_here(in);
    if (r.raw(8, "magic") != std::string(kMagic, 8)) r.fail(0, "bad checkpoint magic");
    const auto at = r.offset();
    const auto version = r.u32();
    if (version != kVersion) r.fail(at, "unsupported checkpoint version " + std::to_string(version));
    ck.config = parse_config(r.str());
  }
  std::uint32_t count = 0;
  {
    io::Reader r = reader_here(in);
    const auto at = r.offset();
    count = r.u32();
    if (count > (1u << 20)) r.fail(at, "parameter count " + std::to_string(count) + " too large");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    io::Reader r = reader_here(in);
    ck.names.push_back(r.str(4096));
    ck.values.push_back(read_tensor(in));
  }
  ck.optim.step = reader_here(in).u64();
  for (std::uint32_t i = 0; i < count; ++i) {
    io::Reader r = reader_here(in);
    const auto at = r.offset();
    const auto has = r.u8();
    if (has > 1) r.fail(at, "bad moment flag");
    if (has == 1) {
      ck.optim.m.push_back(read_tensor(in));
      ck.optim.v.push_back(read_tensor(in));
      if (ck.optim.m.back().shape() != ck.values[i].shape() || ck.optim.v.back().shape() != ck.values[i].shape()) {
        r.fail(at, "moment shape mismatch for " + ck.names[i]);
      }
    } else {
      ck.optim.m.emplace_back();
      ck.optim.v.emplace_back();
    }
  }
  {
    io::Reader r = reader_here(in);
    const auto at = r.offset();
    const auto shadows = r.u32();
    if (shadows != count) r.fail(at, "EMA shadow count " + std::to_string(shadows) + " != " + std::to_string(count));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = static_cast<std::uint64_t>(std::max<std::streamoff>(0, in.tellg()));
    ck.optim.shadow.push_back(read_tensor(in));
    if (ck.optim.shadow.back().shape() != ck.values[i].shape()) {
      throw FormatError("EMA shadow shape mismatch for " + ck.names[i] + " at offset " + std::to_string(at));
    }
  }
  io::Reader r = reader_here(in);
  ck.step = r.u64();
  ck.seed = r.u64();
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    write_checkpoint(out, ck);
    out.flush();
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace stflow
