#pragma once

// Training objectives: WiSE-ALE (aggregate-posterior prior constraint), AEVB
// and beta-VAE (per-sample prior constraint), plus the full N^2
// reconstruction estimate used only as an evaluation oracle.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "wiseale/diff_core.hpp"
#include "wiseale/latent_gaussian.hpp"

namespace wiseale {

enum class ObjectiveVariant { kWiseAle, kAevb, kBetaVae };

struct ObjectiveKind {
  ObjectiveVariant variant = ObjectiveVariant::kWiseAle;
  double beta = 1.0;
  /// Reparameterized draws per sample.
  std::size_t mc_samples = 1;
  /// Subtract the parameter-free M log M term (WiSE-ALE only).
  bool include_nlogn_constant = false;

  static ObjectiveKind wise_ale() { return {ObjectiveVariant::kWiseAle, 1.0}; }
  static ObjectiveKind aevb() { return {ObjectiveVariant::kAevb, 1.0}; }
  static ObjectiveKind beta_vae(double beta) { return {ObjectiveVariant::kBetaVae, beta}; }

  void validate() const {
    if (!(beta > 0)) throw UsageError("objective: beta must be > 0");
    if (mc_samples < 1) throw UsageError("objective: mc_samples must be >= 1");
  }

  std::string name() const {
    switch (variant) {
      case ObjectiveVariant::kWiseAle: return "wise-ale";
      case ObjectiveVariant::kAevb: return "aevb";
      case ObjectiveVariant::kBetaVae: return "beta-vae";
    }
    return "unknown";
  }
};

/// Decoder likelihood family. For Bernoulli the decoder emits probabilities,
/// for Gaussian it emits means with fixed standard deviation `sigma`.
struct Likelihood {
  enum class Family { kBernoulli, kGaussian };
  Family family = Family::kGaussian;
  double sigma = 0.1;

  static Likelihood bernoulli() { return {Family::kBernoulli, 1.0}; }
  static Likelihood gaussian(double sigma) { return {Family::kGaussian, sigma}; }

  bool operator==(const Likelihood&) const = default;
};

struct ObjectiveReport {
  double recon_term = 0.0;
  double prior_term = 0.0;
  double objective = 0.0;
  /// Mean exact per-sample KL to the prior, reported for every objective.
  double per_sample_kl_mean = 0.0;
  std::size_t clamp_count = 0;
  /// -M log M when it was included, otherwise 0.
  double constant = 0.0;
};

struct ObjectiveResult {
  Var objective;  // scalar, to be maximized
  ObjectiveReport report;
};

/// Maps latent samples to likelihood parameters on the same tape.
using DecoderFn = std::function<Var(Var z)>;
/// Value-only decoder used by the oracles.
using DecoderValueFn = std::function<DenseArray(const DenseArray& z)>;

// ---------------------------------------------------------------------------
// Noise
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Standard-normal draws for (draw s, batch row i), keyed only by the
/// counter triple so any evaluation order yields the same numbers.
inline std::vector<double> noise_row(std::uint64_t seed, std::size_t s, std::size_t i, std::size_t dim) {
  std::mt19937_64 rng(splitmix64(splitmix64(splitmix64(seed) ^ s) ^ i));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> out(dim);
  for (double& v : out) v = normal(rng);
  return out;
}

/// S arrays of shape M x d_z built from noise_row.
inline std::vector<DenseArray> draw_noise(std::uint64_t seed, std::size_t draws, std::size_t rows,
                                          std::size_t dim) {
  std::vector<DenseArray> out;
  out.reserve(draws);
  for (std::size_t s = 0; s < draws; ++s) {
    DenseArray a = DenseArray::matrix(rows, dim);
    for (std::size_t i = 0; i < rows; ++i) {
      const auto r = noise_row(seed, s, i, dim);
      std::copy(r.begin(), r.end(), a.row(i).begin());
    }
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction likelihood
// ---------------------------------------------------------------------------

inline void validate_likelihood_input(const DenseArray& x, const Likelihood& lik) {
  if (lik.family == Likelihood::Family::kBernoulli) {
    for (double v : x.values()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw UsageError("recon_log_likelihood: Bernoulli data must lie in [0,1], got " + std::to_string(v));
      }
    }
  } else if (!(lik.sigma > 0)) {
    throw UsageError("recon_log_likelihood: Gaussian sigma must be > 0");
  }
}

/// log p(x_i | decoder output_i) for every row, as a length-M node.
inline Var recon_log_likelihood(const DenseArray& x, Var decoder_out, const Likelihood& lik) {
  if (x.shape() != decoder_out.shape()) {
    throw ShapeError("recon_log_likelihood", shape_string(x.shape()), shape_string(decoder_out.shape()));
  }
  validate_likelihood_input(x, lik);
  Tape& tape = *decoder_out.tape;
  if (lik.family == Likelihood::Family::kBernoulli) {
    DenseArray one_minus_x = x;
    for (double& v : one_minus_x.values()) v = 1.0 - v;
    Var on = mul(tape.constant(x), log(decoder_out));
    Var off = mul(tape.constant(one_minus_x), log(add_scalar(negate(decoder_out), 1.0)));
    return sum_axis(add(on, off), 1);
  }
  const double inv_var = 1.0 / (lik.sigma * lik.sigma);
  const double norm = 0.5 * static_cast<double>(x.cols()) * std::log(kTwoPi * lik.sigma * lik.sigma);
  Var sq = square(sub(tape.constant(x), decoder_out));
  return add_scalar(scale(sum_axis(sq, 1), -0.5 * inv_var), -norm);
}

/// Value-only form of recon_log_likelihood.
inline std::vector<double> recon_log_likelihood(const DenseArray& x, const DenseArray& decoder_out,
                                                const Likelihood& lik) {
  Tape tape;
  Var v = recon_log_likelihood(x, tape.constant(decoder_out), lik);
  const auto& vals = v.value().values();
  return {vals.begin(), vals.end()};
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

namespace detail {

/// sum_i (1/S) sum_s log p(x_i | z_is), z_is reparameterized from `noise[s]`.
inline Var reconstruction_term(const DenseArray& x, const PosteriorNodes& q, const DecoderFn& decode,
                               const Likelihood& lik, const std::vector<DenseArray>& noise) {
  if (noise.empty()) throw UsageError("objective: at least one noise draw is required");
  Var total{};
  for (std::size_t s = 0; s < noise.size(); ++s) {
    Var z = sample_reparameterized(q, noise[s]);
    Var ll = sum(recon_log_likelihood(x, decode(z), lik));
    total = s == 0 ? ll : add(total, ll);
  }
  return noise.size() == 1 ? total : scale(total, 1.0 / static_cast<double>(noise.size()));
}

inline double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Mini-batch WiSE-ALE objective: reconstruction of each sample from its own
/// posterior minus the analytic upper bound on KL[aggregate posterior || prior].
inline ObjectiveResult wise_ale_objective(const DenseArray& x, const PosteriorNodes& q,
                                          const DecoderFn& decode, const Likelihood& lik,
                                          const ObjectiveKind& kind,
                                          const std::vector<DenseArray>& noise) {
  kind.validate();
  Tape& tape = *q.means.tape;
  const std::size_t clamps_before = tape.clamp_count();
  Var recon = detail::reconstruction_term(x, q, decode, lik, noise);
  Var prior = kl_upper_bound(q);
  Var objective = sub(recon, prior);
  ObjectiveReport r;
  if (kind.include_nlogn_constant) {
    const double m = static_cast<double>(x.rows());
    r.constant = -m * std::log(m);
    objective = add_scalar(objective, r.constant);
  }
  r.recon_term = recon.value().item();
  r.prior_term = prior.value().item();
  r.objective = objective.value().item();
  r.per_sample_kl_mean = detail::mean_of(exact_kl_to_prior(q.means.value(), q.log_vars.value()));
  r.clamp_count = tape.clamp_count() - clamps_before;
  return {objective, r};
}

/// AEVB (beta = 1) and beta-VAE objective: reconstruction minus beta times the
/// sum of exact per-sample KLs to the prior.
inline ObjectiveResult aevb_objective(const DenseArray& x, const PosteriorNodes& q, const DecoderFn& decode,
                                      const Likelihood& lik, double beta,
                                      const std::vector<DenseArray>& noise) {
  if (!(beta > 0)) throw UsageError("aevb_objective: beta must be > 0");
  Tape& tape = *q.means.tape;
  const std::size_t clamps_before = tape.clamp_count();
  Var recon = detail::reconstruction_term(x, q, decode, lik, noise);
  Var kl = exact_kl_to_prior(q);
  Var prior = scale(sum(kl), beta);
  Var objective = sub(recon, prior);
  ObjectiveReport r;
  r.recon_term = recon.value().item();
  r.prior_term = prior.value().item();
  r.objective = objective.value().item();
  r.per_sample_kl_mean = detail::mean_of(kl.value().values());
  r.clamp_count = tape.clamp_count() - clamps_before;
  return {objective, r};
}

/// Dispatches on the objective variant.
inline ObjectiveResult assemble_objective(const DenseArray& x, const PosteriorNodes& q,
                                          const DecoderFn& decode, const Likelihood& lik,
                                          const ObjectiveKind& kind,
                                          const std::vector<DenseArray>& noise) {
  kind.validate();
  switch (kind.variant) {
    case ObjectiveVariant::kWiseAle: return wise_ale_objective(x, q, decode, lik, kind, noise);
    case ObjectiveVariant::kAevb: return aevb_objective(x, q, decode, lik, 1.0, noise);
    case ObjectiveVariant::kBetaVae: return aevb_objective(x, q, decode, lik, kind.beta, noise);
  }
  throw UsageError("unknown objective variant");
}

inline constexpr std::size_t kFullReconOracleMaxBatch = 16;

/// Monte-Carlo estimate of sum_i E_{q_i}[(1/M) sum_j log p(x_j | z)].
/// Draw s for posterior i uses noise_row(seed, s, i), the same numbers
/// draw_noise(seed, S, M, d_z) hands to the training objectives.
inline double full_recon_oracle(const DenseArray& x, const GaussianBatch& q, const DecoderValueFn& decode,
                                const Likelihood& lik, std::size_t draws, std::uint64_t seed) {
  const std::size_t m = x.rows();
  if (m > kFullReconOracleMaxBatch) {
    throw UsageError("full_recon_oracle: batch size " + std::to_string(m) + " exceeds the cap of " +
                     std::to_string(kFullReconOracleMaxBatch));
  }
  if (q.size() != m) throw UsageError("full_recon_oracle: posterior count does not match batch");
  if (draws < 1) throw UsageError("full_recon_oracle: need at least one draw");
  const std::size_t dz = q.dim();
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < draws; ++s) {
      const auto eps = noise_row(seed, s, i, dz);
      DenseArray z = DenseArray::matrix(1, dz);
      for (std::size_t k = 0; k < dz; ++k) z[k] = q.mean(i, k) + std::exp(0.5 * q.log_vars()(i, k)) * eps[k];
      const DenseArray out = decode(z);
      // Score the single decode against every x_j.
      DenseArray tiled = DenseArray::matrix(m, out.size());
      for (std::size_t j = 0; j < m; ++j) std::copy(out.values().begin(), out.values().end(), tiled.row(j).begin());
      const auto ll = recon_log_likelihood(x, tiled, lik);
      double row_sum = 0.0;
      for (double v : ll) row_sum += v;
      acc += row_sum / static_cast<double>(m);
    }
    total += draws == 1 ? acc : acc * (1.0 / static_cast<double>(draws));
  }
  return total;
}

}  // namespace wiseale
