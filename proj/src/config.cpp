#include "stflow/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "stflow/errors.hpp"

namespace stflow {

namespace {

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    throw ConfigError("invalid value '" + text + "' for " + key);
  }
  return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("invalid value '" + text + "' for " + key + " (expected true or false)");
}

template <typename Section, typename T>
Field make_field(const std::string& key, Section RunConfig::*section, T Section::*member) {
  Field f;
  f.get = [=](const RunConfig& c) -> std::string {
    const T& v = c.*section.*member;
    if constexpr (std::is_same_v<T, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_same_v<T, double>) {
      return fmt(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, ScaleAdapt>) {
      return v == ScaleAdapt::pool ? "pool" : "conv";
    } else {
      return std::to_string(v);
    }
  };
  f.set = [=](RunConfig& c, const std::string& text) {
    T& v = c.*section.*member;
    if constexpr (std::is_same_v<T, bool>) {
      v = parse_bool(key, text);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (text.find('\n') != std::string::npos) throw ConfigError(key + " must be a single line");
      v = text;
    } else if constexpr (std::is_same_v<T, ScaleAdapt>) {
      if (text == "pool") {
        v = ScaleAdapt::pool;
      } else if (text == "conv") {
        v = ScaleAdapt::conv;
      } else {
        throw ConfigError("invalid value '" + text + "' for " + key + " (expected pool or conv)");
      }
    } else {
      v = parse_number<T>(key, text);
    }
  };
  return f;
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto add = [&](const std::string& key, auto section, auto member) { t[key] = make_field(key, section, member); };
    using R = RunConfig;
    add("model.in_channels", &R::model, &ModelConfig::in_channels);
    add("model.height", &R::model, &ModelConfig::height);
    add("model.width", &R::model, &ModelConfig::width);
    add("model.levels", &R::model, &ModelConfig::levels);
    add("model.steps", &R::model, &ModelConfig::steps);
    add("model.hidden_channels", &R::model, &ModelConfig::hidden_channels);
    add("model.coupling_hidden", &R::model, &ModelConfig::coupling_hidden);
    add("model.gated_hidden", &R::model, &ModelConfig::gated_hidden);
    add("model.gated_layers", &R::model, &ModelConfig::gated_layers);
    add("model.actnorm", &R::model, &ModelConfig::actnorm);
    add("model.squeeze", &R::model, &ModelConfig::squeeze);
    add("model.gated_residual", &R::model, &ModelConfig::gated_residual);
    add("model.scale_adapt", &R::model, &ModelConfig::scale_adapt);
    add("model.temperature", &R::model, &ModelConfig::temperature);
    add("model.jitter", &R::model, &ModelConfig::jitter);

    add("optim.lr", &R::optim, &AdamConfig::lr);
    add("optim.beta1", &R::optim, &AdamConfig::beta1);
    add("optim.beta2", &R::optim, &AdamConfig::beta2);
    add("optim.eps", &R::optim, &AdamConfig::eps);
    add("optim.ema_decay", &R::optim, &AdamConfig::ema_decay);
    add("optim.ema_warmup", &R::optim, &AdamConfig::ema_warmup);
    add("optim.decay_rate", &R::optim, &AdamConfig::decay_rate);
    add("optim.decay_every", &R::optim, &AdamConfig::decay_every);
    add("optim.clip_norm", &R::optim, &AdamConfig::clip_norm);

    add("train.steps", &R::train, &TrainConfig::steps);
    add("train.epochs", &R::train, &TrainConfig::epochs);
    add("train.batch", &R::train, &TrainConfig::batch);
    add("train.context", &R::train, &TrainConfig::context);
    add("train.log_every", &R::train, &TrainConfig::log_every);
    add("train.val_every", &R::train, &TrainConfig::val_every);
    add("train.val_windows", &R::train, &TrainConfig::val_windows);
    add("train.checkpoint_every", &R::train, &TrainConfig::checkpoint_every);

    add("data.path", &R::data, &DataConfig::path);
    add("data.kind", &R::data, &DataConfig::kind);
    add("data.length", &R::data, &DataConfig::length);
    add("data.sequences", &R::data, &DataConfig::sequences);
    add("data.vx", &R::data, &DataConfig::vx);
    add("data.vy", &R::data, &DataConfig::vy);
    add("data.blobs", &R::data, &DataConfig::blobs);
    add("data.noise_scale", &R::data, &DataConfig::noise_scale);
    add("data.diffusion", &R::data, &DataConfig::diffusion);
    add("data.seed", &R::data, &DataConfig::seed);
    add("data.train_fraction", &R::data, &DataConfig::train_fraction);
    add("data.val_fraction", &R::data, &DataConfig::val_fraction);
    add("data.test_fraction", &R::data, &DataConfig::test_fraction);

    add("eval.steps", &R::eval, &EvalConfig::steps);
    add("eval.trajectories", &R::eval, &EvalConfig::trajectories);
    add("eval.leads", &R::eval, &EvalConfig::leads);
    add("eval.windows", &R::eval, &EvalConfig::windows);
    add("eval.use_ema", &R::eval, &EvalConfig::use_ema);

    add("run.seed", &R::run, &RunSection::seed);
    add("run.out_dir", &R::run, &RunSection::out_dir);
    return t;
  }();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(*this, value);
}

std::string RunConfig::get(const std::string& key) const {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(*this);
}

std::vector<int> RunConfig::lead_list() const {
  std::vector<int> out;
  std::stringstream ss(eval.leads);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const int lead = parse_number<int>("eval.leads", item);
    if (lead < 1) throw ConfigError("eval.leads entries must be >= 1");
    out.push_back(lead);
  }
  return out;
}

void RunConfig::validate() const {
  model.validate();
  if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0) || !(optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("optim betas must lie in [0, 1)");
  }
  if (!(optim.eps > 0.0)) throw ConfigError("optim.eps must be > 0");
  if (!(optim.ema_decay >= 0.0 && optim.ema_decay < 1.0)) throw ConfigError("optim.ema_decay must lie in [0, 1)");
  if (optim.decay_every == 0) throw ConfigError("optim.decay_every must be >= 1");
  if (optim.clip_norm < 0.0) throw ConfigError("optim.clip_norm must be >= 0");
  if (train.epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (train.batch < 1) throw ConfigError("train.batch must be >= 1");
  if (train.context < 1) throw ConfigError("train.context must be >= 1");
  if (train.log_every < 1) throw ConfigError("train.log_every must be >= 1");
  if (train.val_every < 1) throw ConfigError("train.val_every must be >= 1");
  if (train.val_windows < 0 || train.checkpoint_every < 0) {
    throw ConfigError("train.val_windows and train.checkpoint_every must be >= 0");
  }
  if (data.kind != "advection" && data.kind != "stochastic") {
    throw ConfigError("data.kind must be advection or stochastic, got '" + data.kind + "'");
  }
  if (data.length < 1 || data.sequences < 1 || data.blobs < 1) {
    throw ConfigError("data.length, data.sequences and data.blobs must be >= 1");
  }
  const double total = data.train_fraction + data.val_fraction + data.test_fraction;
  if (data.train_fraction <= 0.0 || data.val_fraction < 0.0 || data.test_fraction < 0.0 ||
      std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("data fractions must be non-negative, train > 0, and sum to 1");
  }
  if (eval.steps < 1 || eval.trajectories < 1 || eval.windows < 0) {
    throw ConfigError("eval.steps and eval.trajectories must be >= 1, eval.windows >= 0");
  }
  for (int lead : lead_list()) {
    if (lead > eval.steps) {
      throw ConfigError("eval.leads entry " + std::to_string(lead) + " exceeds eval.steps");
    }
  }
}

std::string serialize(const RunConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + "=" + field.get(config) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  apply_config_text(config, text);
  return config;
}

void apply_config_text(RunConfig& config, const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  int number = 0;
  while (std::getline(ss, line)) {
    ++number;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected key=value, got '" + line + "'");
    }
    try {
      config.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + e.what());
    }
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void save_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << serialize(config);
  if (!out) throw Error("failed writing " + path.string());
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& entry : fields()) keys.push_back(entry.first);
  return keys;
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") return c;
  if (name == "full") {
    c.model.height = 128;
    c.model.width = 128;
    c.model.levels = 3;
    c.model.steps = 4;
    c.model.hidden_channels = 64;
    c.model.coupling_hidden = 512;
    c.model.gated_hidden = 128;
    c.model.gated_layers = 6;
    c.train.batch = 64;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected desk or full)");
}

void apply_environment(RunConfig& config) {
  if (const char* seed = std::getenv("STFLOW_SEED"); seed != nullptr && *seed != '\0') {
    config.run.seed = parse_number<std::uint64_t>("STFLOW_SEED", seed);
  }
}

}  // namespace stflow
