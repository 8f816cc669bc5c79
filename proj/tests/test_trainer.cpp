#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "wiseale/trainer.hpp"

using namespace wiseale;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "wiseale_trainer_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig small_sine(ObjectiveKind kind, std::size_t batch, std::size_t epochs, std::uint64_t seed) {
  RunConfig cfg;
  cfg.dataset = DatasetSpec::sine(200, 1);
  cfg.objective = kind;
  cfg.arch = Architecture::sine(2, 0.3);
  cfg.batch_size = batch;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return cfg;
}

Dataset sine_rows(std::size_t n, std::uint64_t seed) {
  const SineData s = generate_sine(n, seed);
  Dataset d;
  d.samples = s.samples;
  d.display = s.samples;
  d.sine = s.params;
  for (std::size_t i = 0; i < n; ++i) d.source_rows.push_back(i);
  return d;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  std::vector<DenseArray> p{DenseArray::vector({1.5, -2.0}), DenseArray::matrix(2, 2, 0.25)};
  const auto before = p;
  AdamState s;
  adam_step(p, {DenseArray::vector({0.0, 0.0}), DenseArray::matrix(2, 2, 0.0)}, s, OptimizerConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, FirstUnitStepMovesByLearningRate) {
  std::vector<DenseArray> p{DenseArray::scalar(3.0)};
  AdamState s;
  OptimizerConfig h;
  h.lr = 0.1;
  adam_step(p, {DenseArray::scalar(1.0)}, s, h);
  // bias-corrected moments are exactly g and g^2 after one step
  EXPECT_NEAR(p[0].item() - 3.0, -0.1 * 1.0 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p[0].item() - 3.0, -0.1, 1e-8);
}

TEST(Adam, MatchesHandRolledRecurrence) {
  const std::vector<double> g{0.3, -1.2, 0.05, 2.0};
  std::vector<DenseArray> p{DenseArray::scalar(0.0)};
  AdamState s;
  OptimizerConfig h;
  h.lr = 0.01;
  double x = 0, m = 0, v = 0;
  for (std::size_t t = 1; t <= g.size(); ++t) {
    adam_step(p, {DenseArray::scalar(g[t - 1])}, s, h);
    m = 0.9 * m + 0.1 * g[t - 1];
    v = 0.999 * v + 0.001 * g[t - 1] * g[t - 1];
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(p[0].item(), x, 1e-15);
  }
}

TEST(Adam, IdenticalRunsGiveIdenticalStates) {
  auto run = [] {
    std::vector<DenseArray> p{DenseArray::matrix(3, 2, 0.5)};
    AdamState s;
    for (int i = 0; i < 5; ++i) adam_step(p, {DenseArray::matrix(3, 2, 0.1 * i - 0.2)}, s, OptimizerConfig{});
    return std::make_pair(p, s.m);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeMismatchIsUsageError) {
  std::vector<DenseArray> p{DenseArray::matrix(2, 2)};
  AdamState s;
  EXPECT_THROW(adam_step(p, {DenseArray::matrix(2, 3)}, s, OptimizerConfig{}), UsageError);
  EXPECT_THROW(adam_step(p, {}, s, OptimizerConfig{}), UsageError);
}

TEST(Adam, SgdStepsAgainstGradient) {
  std::vector<DenseArray> p{DenseArray::scalar(1.0)};
  AdamState s;
  OptimizerConfig h;
  h.kind = OptimizerConfig::Kind::kSgd;
  h.lr = 0.5;
  adam_step(p, {DenseArray::scalar(2.0)}, s, h);
  EXPECT_EQ(p[0].item(), 0.0);
}

TEST(RunConfig, ValidationErrors) {
  RunConfig c = small_sine(ObjectiveKind::wise_ale(), 1, 1, 0);
  EXPECT_THROW(c.validate(), UsageError);
  c.batch_size = 8;
  c.optimizer.lr = -1;
  EXPECT_THROW(c.validate(), UsageError);
  c.optimizer.lr = 1e-3;
  c.arch = Architecture::mnist(2);
  EXPECT_THROW(c.validate(), UsageError);
  c.arch = Architecture::sine(2, 0.3);
  c.epochs = 0;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(Train, ZeroLearningRateKeepsInitialParams) {
  RunConfig cfg = small_sine(ObjectiveKind::wise_ale(), 16, 2, 4);
  cfg.optimizer.lr = 0.0;
  const TrainResult r = train(cfg, sine_rows(64, 3));
  EXPECT_EQ(r.params, init_params(cfg.arch, cfg.seed));
  EXPECT_EQ(r.metrics.size(), 8u);
}

TEST(Train, TwoAevbStepsImproveObjectiveOnFixedBatch) {
  const Dataset four = sine_rows(4, 21);
  RunConfig cfg = small_sine(ObjectiveKind::aevb(), 2, 1, 9);
  const TrainResult r = train(cfg, four);
  ASSERT_EQ(r.metrics.size(), 2u);
  // Re-evaluate on the whole 4-row subset with many common draws so that
  // Monte-Carlo noise does not mask a two-step change.
  ObjectiveKind many = ObjectiveKind::aevb();
  many.mc_samples = 4096;
  const ModelParams start = init_params(cfg.arch, cfg.seed);
  const EvalRecord before = evaluate(start, four, many, 77, 4);
  const EvalRecord after = evaluate(r.params, four, many, 77, 4);
  EXPECT_GT(after.objective, before.objective);
}

TEST(Train, SameConfigGivesBitIdenticalLogsAndCheckpoints) {
  const Dataset d = sine_rows(96, 5);
  RunConfig a = small_sine(ObjectiveKind::wise_ale(), 8, 2, 13);
  RunConfig b = a;
  a.out_dir = temp_dir("det_a");
  b.out_dir = temp_dir("det_b");
  const TrainResult ra = train(a, d), rb = train(b, d);
  EXPECT_EQ(ra.params, rb.params);
  EXPECT_EQ(mask_wall_ms(slurp(metrics_path(a.out_dir))), mask_wall_ms(slurp(metrics_path(b.out_dir))));
  EXPECT_EQ(slurp(checkpoint_path(a.out_dir)), slurp(checkpoint_path(b.out_dir)));
  EXPECT_EQ(load_checkpoint(checkpoint_path(a.out_dir)), ra.params);
}

TEST(Train, StepCountDropsShortBatchAndIsMonotone) {
  RunConfig cfg = small_sine(ObjectiveKind::aevb(), 10, 3, 2);
  std::vector<std::size_t> per_epoch;
  const TrainResult r =
      train(cfg, sine_rows(35, 6), [&](std::size_t, const std::vector<MetricsRecord>& recs) { per_epoch.push_back(recs.size()); });
  EXPECT_EQ(per_epoch, (std::vector<std::size_t>{3, 3, 3}));
  for (std::size_t i = 0; i < r.metrics.size(); ++i) {
    EXPECT_EQ(r.metrics[i].step, i + 1);
    EXPECT_EQ(r.metrics[i].epoch, i / 3 + 1);
  }
}

TEST(Train, EveryLoggedStepDecomposes) {
  for (const auto& kind : {ObjectiveKind::wise_ale(), ObjectiveKind::aevb(), ObjectiveKind::beta_vae(4.0)}) {
    const TrainResult r = train(small_sine(kind, 8, 1, 3), sine_rows(64, 7));
    for (const auto& m : r.metrics) {
      EXPECT_NEAR(m.objective, m.recon_term - m.prior_term, 1e-12 * std::max(1.0, std::abs(m.objective)));
      EXPECT_EQ(m.elbo_proxy, m.recon_term - m.aevb_kl);
      EXPECT_TRUE(std::isfinite(m.aevb_kl));
    }
  }
}

TEST(Train, WidthMismatchIsUsageError) {
  Dataset d = sine_rows(16, 1);
  d.samples = DenseArray::matrix(16, 10);
  EXPECT_THROW(train(small_sine(ObjectiveKind::aevb(), 4, 1, 1), d), UsageError);
}

TEST(Train, TrainingNeverSeesHeldOutRows) {
  const DataSplit split = load_split(DatasetSpec::sine(200, 1));
  std::set<std::size_t> train_ids(split.train.source_rows.begin(), split.train.source_rows.end());
  for (auto r : split.eval.source_rows) EXPECT_EQ(train_ids.count(r), 0u);

  // Every batch row must come from the training set: poison held-out rows and
  // check that a training run on the train split is unaffected.
  const TrainResult clean = train(small_sine(ObjectiveKind::aevb(), 20, 1, 5), split.train);
  DataSplit poisoned = split;
  for (double& v : poisoned.eval.samples.values()) v = std::nan("");
  const TrainResult again = train(small_sine(ObjectiveKind::aevb(), 20, 1, 5), poisoned.train);
  EXPECT_EQ(clean.params, again.params);
}

TEST(Metrics, CsvRoundTripsExactly) {
  const fs::path dir = temp_dir("csv");
  RunConfig cfg = small_sine(ObjectiveKind::wise_ale(), 8, 1, 1);
  cfg.out_dir = dir;
  const TrainResult r = train(cfg, sine_rows(32, 2));
  EXPECT_EQ(slurp(metrics_path(dir)).substr(0, std::string(kMetricsHeader).size()), kMetricsHeader);
  EXPECT_EQ(read_metrics_csv(metrics_path(dir)), r.metrics);
  write_metrics_csv(dir / "copy.csv", r.metrics);
  EXPECT_EQ(slurp(dir / "copy.csv"), slurp(metrics_path(dir)));
}

TEST(Metrics, MalformedLineReportsLineNumber) {
  const fs::path dir = temp_dir("csv_bad");
  std::ofstream(dir / "m.csv") << kMetricsHeader << "\n1,1,0,0,0,0,0,0,0\n1,2,abc,0,0,0,0,0,0\n";
  try {
    read_metrics_csv(dir / "m.csv");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "short.csv") << kMetricsHeader << "\n1,1,0\n";
  EXPECT_THROW(read_metrics_csv(dir / "short.csv"), FormatError);
  std::ofstream(dir / "nohdr.csv") << "a,b\n";
  EXPECT_THROW(read_metrics_csv(dir / "nohdr.csv"), FormatError);
}

TEST(Metrics, MaskDropsOnlyWallColumn) {
  EXPECT_EQ(mask_wall_ms("a,b,c,d,e,f,g,h,i\n1,2,3,4,5,6,7,8.5,9\n"), "a,b,c,d,e,f,g,i\n1,2,3,4,5,6,7,9\n");
}

TEST(Evaluate, ZeroBernoulliModelCostsLogTwoPerPixel) {
  Dataset d;
  d.samples = DenseArray::matrix(10, 784);
  std::mt19937_64 rng(3);
  for (double& v : d.samples.values()) v = static_cast<double>(rng() & 1U);
  d.display = d.samples;
  const ModelParams zero = ModelParams::zeros(Architecture::mnist(2));
  const EvalRecord e = evaluate(zero, d, ObjectiveKind::aevb(), 1);
  EXPECT_NEAR(e.recon_error_per_dim, std::log(2.0), 1e-14);
  EXPECT_NEAR(e.recon_error, 784 * std::log(2.0), 1e-10);
  EXPECT_NEAR(e.mean_sigma, 1.0, 1e-15);
  EXPECT_EQ(e.aevb_kl, 0.0);
}

TEST(Evaluate, IdempotentAndDoesNotMutate) {
  const ModelParams p = init_params(Architecture::sine(2, 0.3), 8);
  const ModelParams copy = p;
  const Dataset d = sine_rows(70, 9);
  const EvalRecord a = evaluate(p, d, ObjectiveKind::wise_ale(), 4);
  const EvalRecord b = evaluate(p, d, ObjectiveKind::wise_ale(), 4);
  EXPECT_EQ(a, b);
  EXPECT_EQ(p, copy);
  EXPECT_EQ(a.count, 70u);
  EXPECT_EQ(a.elbo_proxy, a.recon_term - a.aevb_kl);
}

TEST(Evaluate, SineErrorIsMseAgainstCleanWave) {
  const ModelParams zero = ModelParams::zeros(Architecture::sine(2, 0.3));
  const Dataset d = sine_rows(20, 10);
  double oracle = 0;
  for (std::size_t r = 0; r < 20; ++r)
    for (double v : sine_wave(d.sine[r])) oracle += v * v / 256.0;
  EXPECT_NEAR(evaluate(zero, d, ObjectiveKind::aevb(), 1).recon_error, oracle / 20.0, 1e-12);
}

TEST(Evaluate, IncompatibleModelIsUsageError) {
  const Dataset d = sine_rows(5, 1);
  EXPECT_THROW(evaluate(init_params(Architecture::mnist(2), 1), d, ObjectiveKind::aevb(), 1), UsageError);
  Dataset empty;
  EXPECT_THROW(evaluate(init_params(Architecture::sine(2, 0.3), 1), empty, ObjectiveKind::aevb(), 1), UsageError);
}
