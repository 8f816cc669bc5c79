#pragma once

// Mini-batch stochastic gradient ascent on the chosen objective.
//
// Metrics CSV header:
//   epoch,step,recon_term,prior_term,objective,aevb_kl,elbo_proxy,wall_ms,clamp_count
// One row per optimizer step. wall_ms is the only non-deterministic column.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wiseale/datasets.hpp"
#include "wiseale/diff_core.hpp"
#include "wiseale/latent_gaussian.hpp"
#include "wiseale/model.hpp"
#include "wiseale/objectives.hpp"

namespace wiseale {

struct OptimizerConfig {
  enum class Kind { kAdam, kSgd };
  Kind kind = Kind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<DenseArray> m;
  std::vector<DenseArray> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam step (or plain SGD), descending along `grads`.
inline void adam_step(std::vector<DenseArray>& params, const std::vector<DenseArray>& grads, AdamState& state,
                      const OptimizerConfig& hyper) {
  if (grads.size() != params.size()) throw UsageError("adam_step: gradient count does not match parameters");
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (grads[t].shape() != params[t].shape()) {
      throw ShapeError("adam_step", shape_string(params[t].shape()), shape_string(grads[t].shape()));
    }
  }
  ++state.step;
  if (hyper.kind == OptimizerConfig::Kind::kSgd) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) params[t][i] -= hyper.lr * grads[t][i];
    return;
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape(), 0.0);
      state.v.emplace_back(p.shape(), 0.0);
    }
  }
  const double step = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, step);
  const double c2 = 1.0 - std::pow(hyper.beta2, step);
  for (std::size_t t = 0; t < params.size(); ++t) {
    DenseArray& m = state.m[t];
    DenseArray& v = state.v[t];
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double g = grads[t][i];
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      params[t][i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

struct RunConfig {
  DatasetSpec dataset;
  ObjectiveKind objective;
  Architecture arch = Architecture::sine();
  OptimizerConfig optimizer;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  /// Metrics and checkpoints go here; empty disables file output.
  std::filesystem::path out_dir;

  void validate() const {
    objective.validate();
    arch.validate();
    if (batch_size < 1) throw UsageError("config: batch size must be >= 1");
    if (objective.variant == ObjectiveVariant::kWiseAle && batch_size < 2) {
      throw UsageError("config: wise-ale needs batch size >= 2");
    }
    if (!(optimizer.lr >= 0.0)) throw UsageError("config: learning rate must be >= 0");
    if (epochs < 1) throw UsageError("config: epochs must be >= 1");
    if (arch.input_dim != dataset.input_dim()) {
      throw UsageError("config: architecture input width " + std::to_string(arch.input_dim) + " does not match " +
                       dataset.name() + " (" + std::to_string(dataset.input_dim()) + ")");
    }
  }
};

struct MetricsRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double recon_term = 0.0;
  double prior_term = 0.0;
  double objective = 0.0;
  double aevb_kl = 0.0;
  double elbo_proxy = 0.0;
  double wall_ms = 0.0;
  std::size_t clamp_count = 0;

  bool operator==(const MetricsRecord&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "epoch,step,recon_term,prior_term,objective,aevb_kl,elbo_proxy,wall_ms,clamp_count";

inline std::string format_metrics_row(const MetricsRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.epoch << ',' << r.step << ',' << r.recon_term << ',' << r.prior_term << ','
     << r.objective << ',' << r.aevb_kl << ',' << r.elbo_proxy << ',' << r.wall_ms << ',' << r.clamp_count;
  return os.str();
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << kMetricsHeader << '\n';
  for (const auto& r : records) os << format_metrics_row(r) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

/// Parses a metrics CSV; malformed lines raise FormatError with the line number.
inline std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) {
    throw FormatError(path.string() + ": line 1: expected header '" + std::string(kMetricsHeader) + "'");
  }
  std::vector<MetricsRecord> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 9) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": expected 9 fields, got " +
                        std::to_string(cells.size()));
    }
    try {
      std::size_t used = 0;
      auto num = [&](const std::string& s) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      };
      auto count = [&](const std::string& s) {
        const auto v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
      };
      out.push_back({count(cells[0]), count(cells[1]), num(cells[2]), num(cells[3]), num(cells[4]), num(cells[5]),
                     num(cells[6]), num(cells[7]), count(cells[8])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return out;
}

/// The CSV text with the wall_ms column removed, for byte comparisons.
inline std::string mask_wall_ms(const std::string& csv_text) {
  std::istringstream is(csv_text);
  std::ostringstream os;
  std::string line;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i == 7) continue;
      if (i) os << ',';
      os << cells[i];
    }
    os << '\n';
  }
  return os.str();
}

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRecord> metrics;
};

/// Called after every epoch with the epoch number and its records.
using EpochCallback = std::function<void(std::size_t epoch, const std::vector<MetricsRecord>& epoch_records)>;

inline std::filesystem::path metrics_path(const std::filesystem::path& out_dir) { return out_dir / "metrics.csv"; }
inline std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir) { return out_dir / "model.ckpt"; }

/// Seed for the reparameterization noise of a global step.
inline std::uint64_t step_noise_seed(std::uint64_t run_seed, std::size_t step) {
  return splitmix64(splitmix64(run_seed ^ 0xa0761d6478bd642fULL) + step);
}

/// Runs epochs x floor(n / M) steps; the last short batch of every epoch is
/// dropped. Fully deterministic in config.seed.
inline TrainResult train(const RunConfig& cfg, const Dataset& data, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.samples.cols() != cfg.arch.input_dim) throw UsageError("train: dataset width does not match architecture");
  const std::size_t n = data.size();
  const std::size_t m = cfg.batch_size;
  const std::size_t steps_per_epoch = n / m;
  if (steps_per_epoch == 0) {
    throw UsageError("train: dataset has " + std::to_string(n) + " rows, fewer than one batch of " + std::to_string(m));
  }

  ModelParams model = init_params(cfg.arch, cfg.seed);
  std::vector<DenseArray> params = model.tensors();
  AdamState adam;
  std::vector<MetricsRecord> metrics;
  metrics.reserve(cfg.epochs * steps_per_epoch);

  std::ofstream csv;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    csv.open(metrics_path(cfg.out_dir), std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + metrics_path(cfg.out_dir).string());
    csv << kMetricsHeader << '\n';
  }

  std::vector<std::size_t> order(n);
  std::size_t global_step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(splitmix64(cfg.seed ^ (0x9e3779b97f4a7c15ULL * epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::size_t epoch_begin = metrics.size();

    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const auto t0 = std::chrono::steady_clock::now();
      ++global_step;
      std::span<const std::size_t> rows(order.data() + b * m, m);
      const DenseArray x = data.samples.select_rows(rows);

      Tape tape;
      std::vector<Var> vars;
      vars.reserve(params.size());
      for (const auto& p : params) vars.push_back(tape.parameter(p));
      const PosteriorNodes q = encode(cfg.arch, vars, tape.constant(x));
      const auto noise =
          draw_noise(step_noise_seed(cfg.seed, global_step), cfg.objective.mc_samples, m, cfg.arch.latent_dim);
      const DecoderFn dec = [&](Var z) { return decode(cfg.arch, vars, z); };
      const ObjectiveResult res = assemble_objective(x, q, dec, cfg.arch.likelihood, cfg.objective, noise);

      MetricsRecord rec;
      rec.epoch = epoch;
      rec.step = global_step;
      rec.recon_term = res.report.recon_term;
      rec.prior_term = res.report.prior_term;
      rec.objective = res.report.objective;
      rec.aevb_kl = res.report.per_sample_kl_mean * static_cast<double>(m);
      rec.elbo_proxy = rec.recon_term - rec.aevb_kl;
      rec.clamp_count = tape.clamp_count();

      if (!std::isfinite(rec.objective)) {
        std::string last = metrics.empty() ? "none" : format_metrics_row(metrics.back());
        throw NumericError("train: non-finite objective at step " + std::to_string(global_step) +
                           "; last finite metrics: " + last);
      }

      Var loss = negate(res.objective);
      auto grad_map = tape.backward(loss);
      std::vector<DenseArray> grads;
      grads.reserve(vars.size());
      for (const Var& v : vars) grads.push_back(std::move(grad_map.at(v.id)));
      adam_step(params, grads, adam, cfg.optimizer);

      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      metrics.push_back(rec);
      if (csv.is_open()) csv << format_metrics_row(rec) << '\n';
    }

    model.set_tensors(params);
    if (csv.is_open()) {
      csv.flush();
      if (!csv) throw std::runtime_error("write failed: " + metrics_path(cfg.out_dir).string());
      save_checkpoint(checkpoint_path(cfg.out_dir), model);
    }
    if (on_epoch) {
      on_epoch(epoch, std::vector<MetricsRecord>(metrics.begin() + static_cast<std::ptrdiff_t>(epoch_begin), metrics.end()));
    }
  }
  model.set_tensors(std::move(params));
  return {std::move(model), std::move(metrics)};
}

/// Held-out aggregate. Per-sample means throughout.
struct EvalRecord {
  std::size_t count = 0;
  /// Sine: MSE of the decoded posterior mean against the noiseless wave,
  /// averaged over samples and time steps. MNIST: Bernoulli NLL per image.
  double recon_error = 0.0;
  /// recon_error divided by the input width (per pixel for MNIST).
  double recon_error_per_dim = 0.0;
  double recon_term = 0.0;
  double prior_term = 0.0;
  double objective = 0.0;
  double aevb_kl = 0.0;
  double elbo_proxy = 0.0;
  double mean_sigma = 0.0;
  std::size_t clamp_count = 0;

  bool operator==(const EvalRecord&) const = default;
};

/// Scores `params` on `data` without modifying them. Objective terms are
/// computed over consecutive chunks of `chunk` rows with seeded noise.
inline EvalRecord evaluate(const ModelParams& params, const Dataset& data, const ObjectiveKind& kind,
                           std::uint64_t seed, std::size_t chunk = 64) {
  const Architecture& arch = params.arch();
  if (data.size() == 0) throw UsageError("evaluate: empty dataset");
  if (data.samples.cols() != arch.input_dim) {
    throw UsageError("evaluate: checkpoint expects width " + std::to_string(arch.input_dim) + ", dataset has " +
                     std::to_string(data.samples.cols()));
  }
  const bool is_sine = !data.sine.empty();
  if (!is_sine && arch.likelihood.family != Likelihood::Family::kBernoulli) {
    throw UsageError("evaluate: image data needs a Bernoulli decoder");
  }
  kind.validate();
  EvalRecord out;
  out.count = data.size();
  const std::vector<DenseArray> tensors = params.tensors();
  for (std::size_t begin = 0, c = 0; begin < data.size(); begin += chunk, ++c) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    std::vector<std::size_t> rows(end - begin);
    std::iota(rows.begin(), rows.end(), begin);
    const DenseArray x = data.samples.select_rows(rows);

    Tape tape;
    std::vector<Var> vars;
    for (const auto& t : tensors) vars.push_back(tape.constant(t));
    const PosteriorNodes q = encode(arch, vars, tape.constant(x));
    const DecoderFn dec = [&](Var z) { return decode(arch, vars, z); };
    const auto noise = draw_noise(splitmix64(seed + c), kind.mc_samples, rows.size(), arch.latent_dim);
    ObjectiveKind k = kind;
    if (k.variant == ObjectiveVariant::kWiseAle && rows.size() < 2) k.variant = ObjectiveVariant::kAevb;
    const ObjectiveResult res = assemble_objective(x, q, dec, arch.likelihood, k, noise);
    out.recon_term += res.report.recon_term;
    out.prior_term += res.report.prior_term;
    out.objective += res.report.objective;
    out.aevb_kl += res.report.per_sample_kl_mean * static_cast<double>(rows.size());
    out.clamp_count += tape.clamp_count();
    for (double lv : q.log_vars.value().values()) out.mean_sigma += std::exp(0.5 * lv);

    const DenseArray recon = decode(arch, vars, q.means).value();
    if (is_sine) {
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto clean = sine_wave(data.sine[rows[r]]);
        double se = 0.0;
        for (std::size_t t = 0; t < clean.size(); ++t) {
          const double d = recon(r, t) - clean[t];
          se += d * d;
        }
        out.recon_error += se / static_cast<double>(clean.size());
      }
    } else {
      for (double ll : recon_log_likelihood(x, recon, arch.likelihood)) out.recon_error -= ll;
    }
  }
  const double n = static_cast<double>(data.size());
  out.recon_error /= n;
  out.recon_error_per_dim = is_sine ? out.recon_error : out.recon_error / static_cast<double>(arch.input_dim);
  out.recon_term /= n;
  out.prior_term /= n;
  out.objective /= n;
  out.aevb_kl /= n;
  out.elbo_proxy = out.recon_term - out.aevb_kl;
  out.mean_sigma /= n * static_cast<double>(arch.latent_dim);
  return out;
}

}  // namespace wiseale
