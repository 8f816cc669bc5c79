#pragma once

// Self-checks that certify the maths: full-model gradient checks, the
// Monte-Carlo upper-bound test for KL_UB, its single-component and
// invariance identities, and the reconstruction-approximation gap audit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "wiseale/diff_core.hpp"
#include "wiseale/latent_gaussian.hpp"
#include "wiseale/model.hpp"
#include "wiseale/objectives.hpp"

namespace wiseale {

// ---------------------------------------------------------------------------
// Gradient certification
// ---------------------------------------------------------------------------

struct GradSuiteEntry {
  std::string objective;
  std::string likelihood;
  CheckReport report;
};

/// d_x = 6, d_z = 2, one hidden layer of 8 each side, M = 3.
inline Architecture grad_check_architecture(const Likelihood& lik) { return {6, {8}, 2, {8}, lik}; }

/// Loss = -objective for one fixed batch and one fixed noise draw, as a
/// function of every model parameter.
inline LossBuilder objective_loss(const Architecture& arch, const DenseArray& x, const ObjectiveKind& kind,
                                  const std::vector<DenseArray>& noise) {
  return [arch, x, kind, noise](Tape& tape, std::span<const Var> params) {
    const PosteriorNodes q = encode(arch, params, tape.constant(x));
    const DecoderFn dec = [&](Var z) { return decode(arch, params, z); };
    return negate(assemble_objective(x, q, dec, arch.likelihood, kind, noise).objective);
  };
}

/// Central-difference check of all three objectives under both likelihoods.
inline std::vector<GradSuiteEntry> check_grad_suite(std::uint64_t seed, const GradCheckOptions& opt = {}) {
  constexpr std::size_t kBatch = 3;
  std::vector<GradSuiteEntry> out;
  for (const Likelihood& lik : {Likelihood::gaussian(0.5), Likelihood::bernoulli()}) {
    const Architecture arch = grad_check_architecture(lik);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> weight(-0.6, 0.6), pixel(0.05, 0.95);
    ModelParams params = init_params(arch, seed);
    std::vector<DenseArray> tensors = params.tensors();
    for (auto& t : tensors)
      for (double& v : t.values()) v = weight(rng);
    DenseArray x = DenseArray::matrix(kBatch, arch.input_dim);
    for (double& v : x.values()) v = pixel(rng);
    const auto noise = draw_noise(seed, 1, kBatch, arch.latent_dim);
    for (const ObjectiveKind& kind : {ObjectiveKind::wise_ale(), ObjectiveKind::aevb(), ObjectiveKind::beta_vae(4.0)}) {
      GradCheckOptions o = opt;
      o.seed = seed;
      out.push_back({kind.name(), lik.family == Likelihood::Family::kBernoulli ? "bernoulli" : "gaussian",
                     finite_diff_check(objective_loss(arch, x, kind, noise), tensors, o)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// KL_UB certification
// ---------------------------------------------------------------------------

/// mu in [-3, 3], log sigma^2 in [-2, 1].
inline GaussianBatch random_batch(std::mt19937_64& rng, std::size_t m, std::size_t dz) {
  std::uniform_real_distribution<double> mu(-3.0, 3.0), lv(-2.0, 1.0);
  DenseArray means = DenseArray::matrix(m, dz), log_vars = DenseArray::matrix(m, dz);
  for (double& v : means.values()) v = mu(rng);
  for (double& v : log_vars.values()) v = lv(rng);
  return GaussianBatch(std::move(means), std::move(log_vars));
}

struct KlTrial {
  std::size_t batch = 0, dim = 0;
  double upper_bound = 0.0;
  McEstimate mc;
  bool passed = false;
};

struct KlSuiteResult {
  std::vector<KlTrial> trials;
  std::size_t passed_count = 0;
  /// At least 99% of trials must satisfy UB >= MC - 3 stderr.
  std::size_t required() const { return (trials.size() * 99 + 99) / 100; }
  bool passed() const { return passed_count >= required(); }
};

inline KlSuiteResult check_kl_suite(std::size_t trials, std::size_t samples, std::uint64_t seed) {
  if (trials == 0) throw UsageError("check-kl: --trials must be >= 1");
  KlSuiteResult out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_m(1, 8), pick_d(1, 4);
  for (std::size_t t = 0; t < trials; ++t) {
    KlTrial trial;
    trial.batch = pick_m(rng);
    trial.dim = pick_d(rng);
    const GaussianBatch q = random_batch(rng, trial.batch, trial.dim);
    trial.upper_bound = kl_upper_bound(q);
    trial.mc = mc_kl_mixture_to_prior(q, samples, splitmix64(seed ^ (t + 1)));
    trial.passed = trial.upper_bound >= trial.mc.estimate - 3.0 * trial.mc.std_error;
    out.passed_count += trial.passed ? 1 : 0;
    out.trials.push_back(trial);
  }
  return out;
}

/// Largest |KL_UB - KL_exact - (d_z/2)(1 - log 2)| over single-component
/// batches with d_z drawn from 1..4.
inline double single_component_gap_error(std::size_t pairs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_d(1, 4);
  double worst = 0.0;
  for (std::size_t p = 0; p < pairs; ++p) {
    const std::size_t dz = pick_d(rng);
    const GaussianBatch q = random_batch(rng, 1, dz);
    const double expected = 0.5 * static_cast<double>(dz) * (1.0 - std::log(2.0));
    const double gap = kl_upper_bound(q) - exact_kl_to_prior(q.means(), q.log_vars())[0];
    worst = std::max(worst, std::abs(gap - expected));
  }
  return worst;
}

struct InvarianceResult {
  double duplication_error = 0.0;
  double permutation_error = 0.0;
};

/// Repeats every row twice, and separately shuffles the rows, over random
/// batches with M in 1..8 and d_z in 1..4.
inline InvarianceResult invariance_errors(std::size_t batches, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_m(1, 8), pick_d(1, 4);
  InvarianceResult out;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t m = pick_m(rng), dz = pick_d(rng);
    const GaussianBatch q = random_batch(rng, m, dz);
    const double base = kl_upper_bound(q);

    std::vector<std::size_t> twice;
    for (std::size_t r = 0; r < m; ++r) twice.insert(twice.end(), {r, r});
    const GaussianBatch dup(q.means().select_rows(twice), q.log_vars().select_rows(twice));
    out.duplication_error = std::max(out.duplication_error, std::abs(kl_upper_bound(dup) - base));

    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const GaussianBatch shuffled(q.means().select_rows(perm), q.log_vars().select_rows(perm));
    out.permutation_error = std::max(out.permutation_error, std::abs(kl_upper_bound(shuffled) - base));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction-approximation gap
// ---------------------------------------------------------------------------

/// Per-sample reconstruction estimate sum_i (1/S) sum_s log p(x_i | z_is)
/// minus M log M, using the same noise rows as full_recon_oracle.
inline double simplified_recon_estimate(const DenseArray& x, const GaussianBatch& q, const DecoderValueFn& decode,
                                        const Likelihood& lik, std::size_t draws, std::uint64_t seed) {
  if (draws < 1) throw UsageError("simplified_recon_estimate: need at least one draw");
  const std::size_t m = x.rows();
  const auto noise = draw_noise(seed, draws, m, q.dim());
  double total = 0.0;
  for (std::size_t s = 0; s < draws; ++s) {
    const DenseArray z = sample_reparameterized(q.means(), q.log_vars(), noise[s]);
    for (double v : recon_log_likelihood(x, decode(z), lik)) total += v;
  }
  if (draws > 1) total *= 1.0 / static_cast<double>(draws);
  const double md = static_cast<double>(m);
  return total - md * std::log(md);
}

struct GapAudit {
  std::size_t batch = 0, draws = 0;
  double oracle = 0.0;
  double simplified = 0.0;
  /// oracle - simplified; no sign is implied.
  double gap = 0.0;
};

/// Seeded choice of `batch` rows from `data`, then both estimates with the
/// same seed.
inline GapAudit gap_audit(const ModelParams& params, const DenseArray& data, std::size_t batch, std::size_t draws,
                          std::uint64_t seed) {
  if (batch > data.rows()) throw UsageError("gap audit: dataset has fewer than " + std::to_string(batch) + " rows");
  std::vector<std::size_t> rows(data.rows());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(batch);
  const DenseArray x = data.select_rows(rows);
  const GaussianBatch q = encode(params, x);
  const DecoderValueFn dec = [&params](const DenseArray& z) { return decode(params, z); };
  GapAudit out;
  out.batch = batch;
  out.draws = draws;
  out.oracle = full_recon_oracle(x, q, dec, params.arch().likelihood, draws, seed);
  out.simplified = simplified_recon_estimate(x, q, dec, params.arch().likelihood, draws, seed);
  out.gap = out.oracle - out.simplified;
  return out;
}

}  // namespace wiseale
