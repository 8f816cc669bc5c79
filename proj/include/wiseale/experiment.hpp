#pragma once

// Side-by-side runs of WiSE-ALE, AEVB and beta-VAE on one dataset and seed:
// metrics, checkpoints, a joint curves figure and a summary table.

#include <cmath>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "wiseale/certify.hpp"
#include "wiseale/datasets.hpp"
#include "wiseale/model.hpp"
#include "wiseale/report.hpp"
#include "wiseale/trainer.hpp"

namespace wiseale {

/// Decoder noise scale for sine waves.
inline constexpr double kSineDecoderSigma = 0.3;

inline Architecture default_architecture(const DatasetSpec& spec, std::size_t latent_dim,
                                         double sine_sigma = kSineDecoderSigma) {
  return spec.kind == DatasetKind::kSine ? Architecture::sine(latent_dim, sine_sigma) : Architecture::mnist(latent_dim);
}

struct CompareConfig {
  DatasetSpec dataset = DatasetSpec::sine(20000, 1);
  std::uint64_t seed = 1;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::size_t latent_dim = 8;
  double beta = 4.0;
  double sine_sigma = kSineDecoderSigma;
  OptimizerConfig optimizer;
  std::size_t gap_batch = 8;
  std::size_t gap_draws = 64;
  /// Empty: nothing is written.
  std::filesystem::path out_dir;
};

struct CompareRow {
  std::string objective;
  EvalRecord eval;
  /// Mean training elbo_proxy over the steps of the last epoch.
  double final_epoch_elbo_proxy = 0.0;
  GapAudit gap;
  ModelParams params;
  std::vector<MetricsRecord> metrics;
};

inline std::vector<ObjectiveKind> comparison_objectives(double beta) {
  return {ObjectiveKind::wise_ale(), ObjectiveKind::aevb(), ObjectiveKind::beta_vae(beta)};
}

inline double final_epoch_mean(const std::vector<MetricsRecord>& records, double MetricsRecord::*field) {
  if (records.empty()) return 0.0;
  const std::size_t last = records.back().epoch;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : records) {
    if (r.epoch == last) {
      sum += r.*field;
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

inline constexpr const char* kSummaryHeader =
    "objective,eval_recon_error,eval_aevb_kl,eval_elbo_proxy,final_epoch_elbo_proxy,mean_sigma,"
    "gap_oracle,gap_simplified,gap_abs";

inline std::string format_summary(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << kSummaryHeader << '\n' << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.objective << ',' << r.eval.recon_error << ',' << r.eval.aevb_kl << ',' << r.eval.elbo_proxy << ','
       << r.final_epoch_elbo_proxy << ',' << r.eval.mean_sigma << ',' << r.gap.oracle << ',' << r.gap.simplified << ','
       << std::abs(r.gap.gap) << '\n';
  }
  return os.str();
}

inline std::vector<CompareRow> compare(const CompareConfig& cfg) {
  DatasetSpec spec = cfg.dataset;
  spec.seed = cfg.seed;
  const DataSplit split = load_split(spec);
  // Without a held-out file, score on the training rows.
  const Dataset& eval = split.eval.size() > 0 ? split.eval : split.train;

  std::vector<CompareRow> rows;
  std::vector<CurveRun> curves;
  for (const ObjectiveKind& kind : comparison_objectives(cfg.beta)) {
    RunConfig run;
    run.dataset = spec;
    run.objective = kind;
    run.arch = default_architecture(spec, cfg.latent_dim, cfg.sine_sigma);
    run.optimizer = cfg.optimizer;
    run.batch_size = cfg.batch_size;
    run.epochs = cfg.epochs;
    run.seed = cfg.seed;
    if (!cfg.out_dir.empty()) run.out_dir = cfg.out_dir / kind.name();
    TrainResult trained = train(run, split.train);

    CompareRow row{kind.name(), evaluate(trained.params, eval, kind, cfg.seed), 0.0, {}, trained.params,
                   std::move(trained.metrics)};
    row.final_epoch_elbo_proxy = final_epoch_mean(row.metrics, &MetricsRecord::elbo_proxy);
    row.gap = gap_audit(row.params, eval.samples, cfg.gap_batch, cfg.gap_draws, cfg.seed);
    curves.push_back({row.objective, row.metrics});
    rows.push_back(std::move(row));
  }
  if (!cfg.out_dir.empty()) {
    training_curves(curves, cfg.out_dir / "curves.svg");
    svg::write_file(cfg.out_dir / "summary.csv", format_summary(rows));
  }
  return rows;
}

}  // namespace wiseale
