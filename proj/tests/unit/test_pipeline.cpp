#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stflow/errors.hpp"
#include "stflow/pipeline.hpp"

using namespace stflow;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.model.height = 8;
  c.model.width = 8;
  c.model.levels = 2;
  c.model.steps = 1;
  c.model.hidden_channels = 4;
  c.model.gated_hidden = 4;
  c.model.gated_layers = 1;
  c.model.coupling_hidden = 8;
  c.train.batch = 2;
  c.train.steps = 6;
  c.train.val_every = 2;
  c.train.val_windows = 3;
  c.data.length = 24;
  c.data.seed = 3;
  c.run.seed = 9;
  c.eval.steps = 4;
  c.eval.leads = "1,2,4";
  return c;
}

std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream out;
  write_checkpoint(out, ck);
  return out.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("stflow_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config round trip is a fixpoint") {
  const RunConfig defaults;
  const std::string text = serialize(defaults);
  CHECK(serialize(parse_config(text)) == text);

  RunConfig c = tiny_config();
  c.optim.lr = 0.1 + 1e-17;
  c.optim.beta2 = 1.0 / 3.0;
  c.model.temperature = 0.7;
  c.model.scale_adapt = ScaleAdapt::conv;
  c.model.actnorm = false;
  c.data.path = "some dir/data.stgrid";
  c.run.seed = 18446744073709551615ull;
  const std::string t2 = serialize(c);
  const RunConfig back = parse_config(t2);
  CHECK(serialize(back) == t2);
  CHECK(back.optim.beta2 == 1.0 / 3.0);
  CHECK(back.run.seed == 18446744073709551615ull);
  CHECK(back.model.scale_adapt == ScaleAdapt::conv);
  CHECK(back.data.path == "some dir/data.stgrid");

  // keys come out sorted, one per line
  std::istringstream lines(t2);
  std::string line, prev;
  int count = 0;
  while (std::getline(lines, line)) {
    CHECK(line > prev);
    prev = line;
    ++count;
  }
  CHECK(count == static_cast<int>(config_keys().size()));
}

TEST_CASE("config parsing rejects bad input") {
  CHECK_THROWS_AS(parse_config("model.levls=3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.levels=three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.levels=3x\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.actnorm=maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("model.scale_adapt=bilinear\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("just some words\n"), ConfigError);
  try {
    parse_config("# comment\n\nmodel.levels=3\nbogus.key=1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
    CHECK(std::string(e.what()).find("bogus.key") != std::string::npos);
  }
  const RunConfig c = parse_config("  # header\n model.levels = 3 \n\ntrain.batch=4\n");
  CHECK(c.model.levels == 3);
  CHECK(c.train.batch == 4);

  RunConfig bad;
  bad.data.train_fraction = 0.9;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig();
  bad.eval.leads = "1,20";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig();
  bad.model.height = 12;
  bad.model.levels = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = RunConfig();
  bad.data.kind = "turbulence";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(RunConfig().validate());
  CHECK(RunConfig().lead_list() == std::vector<int>{1, 3, 5, 10});
}

TEST_CASE("presets") {
  const RunConfig desk = preset("desk");
  CHECK(desk.model.height == 16);
  CHECK(desk.model.width == 16);
  CHECK(desk.model.levels == 2);
  CHECK(desk.model.steps == 2);
  CHECK(desk.model.hidden_channels == 32);
  CHECK(desk.train.batch == 16);
  CHECK(desk.optim.lr == 2e-4);
  CHECK(desk.optim.beta1 == 0.9);
  CHECK(desk.optim.beta2 == 0.99);
  CHECK(desk.train.epochs == 300);
  CHECK(desk.train.context == 2);

  const RunConfig full = preset("full");
  CHECK(full.model.levels == 3);
  CHECK(full.model.steps == 4);
  CHECK(full.train.batch == 64);
  CHECK(full.model.coupling_hidden == 512);
  CHECK(full.model.gated_hidden == 128);
  CHECK(full.model.gated_layers == 6);
  CHECK(4 * full.model.hidden_channels == 256);
  CHECK_NOTHROW(full.validate());
  CHECK_THROWS_AS(preset("huge"), ConfigError);
}

TEST_CASE("seed override from the environment") {
  RunConfig c;
  ::setenv("STFLOW_SEED", "1234", 1);
  apply_environment(c);
  CHECK(c.run.seed == 1234u);
  ::setenv("STFLOW_SEED", "12a", 1);
  CHECK_THROWS_AS(apply_environment(c), ConfigError);
  ::unsetenv("STFLOW_SEED");
  c.run.seed = 5;
  apply_environment(c);
  CHECK(c.run.seed == 5u);
}

TEST_CASE("dataset preparation") {
  const RunConfig c = tiny_config();
  const Dataset d = prepare_dataset(c);
  CHECK(d.starts.size() == 22u);
  CHECK(d.splits.train.size() + d.splits.val.size() + d.splits.test.size() == 22u);
  CHECK(d.frames.frame_shape() == Shape{1, 8, 8});
  CHECK(d.frames_after(0) == 24);
  CHECK(d.frames_after(20) == 4);

  // min/max come from training windows only, so those frames sit inside [0, 1]
  std::vector<int> train;
  for (int i : d.splits.train) train.push_back(d.starts[i]);
  double lo = 1e9, hi = -1e9;
  for (int t : frames_of_windows(train, d.context)) {
    const Tensor f = d.frames.frame(t);
    for (double v : f.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  CHECK(lo == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(hi == doctest::Approx(1.0).epsilon(1e-12));

  RunConfig wrong = c;
  wrong.model.height = 16;
  wrong.model.width = 16;
  const GridSequence small = generate_dataset(c.data, c.model);
  const auto dir = scratch_dir("prep");
  save_grid(dir / "g.stgrid", small);
  wrong.data.path = (dir / "g.stgrid").string();
  CHECK_THROWS_AS(prepare_dataset(wrong), ConfigError);
  RunConfig from_file = c;
  from_file.data.path = (dir / "g.stgrid").string();
  CHECK(max_abs_diff(prepare_dataset(from_file).frames.frames, d.frames.frames) == 0.0);
}

TEST_CASE("training is deterministic and resumable") {
  const RunConfig c = tiny_config();
  const Dataset d = prepare_dataset(c);

  std::ostringstream log_a, log_b;
  Trainer a(c, d);
  a.run(&log_a, nullptr);
  Trainer b(c, d);
  b.run(&log_b, nullptr);
  CHECK(log_a.str() == log_b.str());
  CHECK(checkpoint_bytes(a.checkpoint()) == checkpoint_bytes(b.checkpoint()));
  CHECK(a.step() == 6u);

  std::istringstream rows(log_a.str());
  std::string line;
  std::getline(rows, line);
  CHECK(line == "step,lr,train_nll,train_bpd,val_bpd");
  std::getline(rows, line);
  CHECK(line.rfind("0,0.00020000000000000001,,,", 0) == 0);
  int n = 0;
  while (std::getline(rows, line)) ++n;
  CHECK(n == 6);

  // interrupted at step 3 and resumed from the checkpoint file
  RunConfig interrupted = c;
  interrupted.train.checkpoint_every = 3;
  const auto dir = scratch_dir("resume");
  std::ostringstream log_c;
  Trainer first(c, d);
  while (first.step() < 3) log_c << format_log_row(first.step_once()) << '\n';
  save_checkpoint(dir / "mid.ckpt", first.checkpoint());

  const Checkpoint mid = load_checkpoint(dir / "mid.ckpt");
  CHECK(mid.step == 3u);
  Trainer resumed(mid, d);
  std::ostringstream tail;
  resumed.run(&tail, nullptr);
  CHECK(checkpoint_bytes(resumed.checkpoint()) == checkpoint_bytes(a.checkpoint()));

  std::string expected_tail;
  {
    std::istringstream all(log_a.str());
    int idx = 0;
    while (std::getline(all, line)) {
      if (idx++ >= 5) expected_tail += line + "\n";  // header, step 0, steps 1..3
    }
  }
  CHECK(tail.str() == expected_tail);

  // checkpoints written by run()
  const auto out = scratch_dir("ckpts");
  Trainer c2(interrupted, d);
  c2.run(nullptr, &out);
  CHECK(std::filesystem::exists(out / "step_00000003.ckpt"));
  CHECK(std::filesystem::exists(out / "step_00000006.ckpt"));
  CHECK(std::filesystem::exists(out / "final.ckpt"));
}

TEST_CASE("checkpoint reload reproduces the likelihood bit for bit") {
  const RunConfig c = tiny_config();
  const Dataset d = prepare_dataset(c);
  Trainer t(c, d);
  for (int i = 0; i < 3; ++i) t.step_once();
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir / "a.ckpt", t.checkpoint());
  const Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  CHECK(serialize(ck.config) == serialize(c));
  CHECK(ck.seed == 9u);

  const SampleTuple s = d.window(d.starts[d.splits.val[0]]);
  auto nll = [&](const Model& m) { return m.forward_nll(s.target, m.encode_context(s.context)).nll.item(); };
  CHECK(nll(ck.restore_model()) == nll(t.model()));
  CHECK(nll(ck.restore_model(true)) == nll(t.ema_model()));
  CHECK(nll(ck.restore_model(true)) != nll(t.model()));
  CHECK(checkpoint_bytes(ck) == checkpoint_bytes(t.checkpoint()));

  std::ifstream in(dir / "a.ckpt", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(bytes.rfind("STFLOWCK", 0) == 0);

  auto expect_format_error = [](const std::string& data, const std::string& fragment) {
    std::istringstream is(data);
    try {
      read_checkpoint(is);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  std::string bad = bytes;
  bad[0] = 'X';
  expect_format_error(bad, "magic at offset 0");
  bad = bytes;
  bad[8] = 7;
  expect_format_error(bad, "version 7 at offset 8");
  expect_format_error(bytes.substr(0, bytes.size() / 2), "truncated");
  expect_format_error(bytes.substr(0, bytes.size() - 3), "truncated");

  Checkpoint renamed = ck;
  renamed.names[0] = "nonsense";
  CHECK_THROWS_AS(renamed.restore_model(), FormatError);
}

TEST_CASE("non-finite loss names the layer") {
  RunConfig c = tiny_config();
  const Dataset d = prepare_dataset(c);
  Trainer t(c, d);
  for (const auto& p : t.model().parameters()) {
    if (p.name.find("actnorm.log_scale") != std::string::npos) {
      Tensor shared = p.tensor;
      for (auto& v : shared.mutable_data()) v = 800.0;
      break;
    }
  }
  try {
    t.step_once();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("actnorm") != std::string::npos);
  }
}

TEST_CASE("total steps from epochs") {
  RunConfig c = tiny_config();
  c.train.steps = 0;
  c.train.epochs = 3;
  const Dataset d = prepare_dataset(c);
  const Trainer t(c, d);
  const auto n = static_cast<std::uint64_t>(d.splits.train.size());
  CHECK(t.total_steps() == 3 * ((n + 1) / 2));
}

TEST_CASE("evaluation with oracle and persistence predictors") {
  RunConfig c = tiny_config();
  const Dataset d = prepare_dataset(c);
  const Evaluation oracle = evaluate(d, oracle_predictor(d), 4, 3, 0, 1);
  CHECK(oracle.steps == 4);
  CHECK(!oracle.truncated);
  CHECK(oracle.report.steps() == 4);
  for (int s = 0; s < 4; ++s) {
    CHECK(oracle.report.rmse[s] == 0.0);
    CHECK(oracle.report.ssim[s] == 1.0);
    CHECK(oracle.report.ens_std_mean[s] == 0.0);
  }

  RunConfig still = c;
  still.data.vx = 0.0;
  const Dataset sd = prepare_dataset(still);
  const Evaluation p = evaluate(sd, persistence_predictor(), 4, 1, 0, 1);
  for (double e : p.report.rmse) CHECK(e == 0.0);

  const Evaluation moving = evaluate(d, persistence_predictor(), 4, 1, 0, 1);
  CHECK(moving.report.rmse[0] > 0.0);

  const Evaluation cut = evaluate(d, persistence_predictor(), 40, 1, 0, 1);
  CHECK(cut.truncated);
  CHECK(cut.steps < 40);
  CHECK(cut.report.steps() == cut.steps);

  const std::vector<int> leads{1, 2, 4};
  const std::string summary = evaluation_summary(oracle, moving, leads);
  CHECK(summary.find("context=2") != std::string::npos);
  int rows = 0;
  std::istringstream is(summary);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && std::isdigit(static_cast<unsigned char>(line[0]))) ++rows;
  }
  CHECK(rows == 3);

  Trainer t(c, d);
  const Model m = t.ema_model();
  const Evaluation cold = evaluate(d, flow_predictor(m, 0.0), 3, 4, 2, 5);
  for (double v : cold.report.ens_std_mean) CHECK(v == 0.0);
  const Evaluation warm = evaluate(d, flow_predictor(m, 1.0), 3, 4, 2, 5);
  for (double v : warm.report.ens_std_mean) CHECK(v > 0.0);
}
