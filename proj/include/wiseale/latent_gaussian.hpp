#pragma once

// Closed-form Gaussian quantities for factorial (diagonal) posteriors, the
// equal-weight mixture they form over a batch, and its divergence from the
// standard-normal prior.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "wiseale/diff_core.hpp"

namespace wiseale {

inline constexpr double kLogVarMin = -12.0;
inline constexpr double kLogVarMax = 12.0;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;
inline const double kLogTwoPi = std::log(kTwoPi);

/// Per-sample diagonal Gaussian posteriors for a batch, stored as means and
/// log-variances (M x d_z each). Log-variances are clamped to
/// [kLogVarMin, kLogVarMax] on construction.
class GaussianBatch {
 public:
  GaussianBatch(DenseArray means, DenseArray log_vars)
      : means_(std::move(means)), log_vars_(std::move(log_vars)) {
    if (means_.rank() != 2 || means_.shape() != log_vars_.shape()) {
      throw ShapeError("GaussianBatch", shape_string(means_.shape()), shape_string(log_vars_.shape()));
    }
    if (means_.rows() < 1 || means_.cols() < 1) {
      throw UsageError("GaussianBatch: need M >= 1 and d_z >= 1");
    }
    for (double& v : log_vars_.values()) {
      if (v < kLogVarMin || v > kLogVarMax) {
        v = std::clamp(v, kLogVarMin, kLogVarMax);
        ++clamp_count_;
      }
    }
  }

  const DenseArray& means() const { return means_; }
  const DenseArray& log_vars() const { return log_vars_; }
  std::size_t size() const { return means_.rows(); }
  std::size_t dim() const { return means_.cols(); }
  std::size_t clamp_count() const { return clamp_count_; }

  double mean(std::size_t i, std::size_t k) const { return means_(i, k); }
  double variance(std::size_t i, std::size_t k) const { return std::exp(log_vars_(i, k)); }

 private:
  DenseArray means_;
  DenseArray log_vars_;
  std::size_t clamp_count_ = 0;
};

/// N(0, I) in d_z dimensions.
struct StandardPrior {
  std::size_t dim = 1;

  double log_density(std::span<const double> z) const {
    if (z.size() != dim) throw UsageError("StandardPrior::log_density: point has wrong length");
    double s = 0.0;
    for (double v : z) s += v * v;
    return -0.5 * (s + static_cast<double>(dim) * kLogTwoPi);
  }
};

inline double log_sum_exp(std::span<const double> xs) {
  const double hi = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(hi)) return hi;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - hi);
  return hi + std::log(s);
}

/// log N(z | mu_i, sigma_i^2) for component i.
inline double log_density_component(const GaussianBatch& batch, std::size_t i, std::span<const double> z) {
  double s = 0.0;
  for (std::size_t k = 0; k < batch.dim(); ++k) {
    const double lv = batch.log_vars()(i, k);
    const double d = z[k] - batch.mean(i, k);
    s += -0.5 * (kLogTwoPi + lv + d * d * std::exp(-lv));
  }
  return s;
}

/// Log density of the batch read as an equal-weight mixture.
inline double log_density_mixture(const GaussianBatch& batch, std::span<const double> z) {
  if (z.size() != batch.dim()) {
    throw UsageError("log_density_mixture: point has length " + std::to_string(z.size()) +
                     ", expected " + std::to_string(batch.dim()));
  }
  std::vector<double> terms(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) terms[i] = log_density_component(batch, i, z);
  return log_sum_exp(terms) - std::log(static_cast<double>(batch.size()));
}

inline void check_component(const GaussianBatch& batch, std::size_t i) {
  if (i >= batch.size()) {
    throw UsageError("component index " + std::to_string(i) + " out of range for batch of " +
                     std::to_string(batch.size()));
  }
}

/// Integral of q_i(z) q_j(z) dz, evaluated directly as a product over latent
/// dimensions. Underflows for large d_z; kl_upper_bound works in log space.
inline double gaussian_overlap(const GaussianBatch& batch, std::size_t i, std::size_t j) {
  check_component(batch, i);
  check_component(batch, j);
  double p = 1.0;
  for (std::size_t k = 0; k < batch.dim(); ++k) {
    const double v = batch.variance(i, k) + batch.variance(j, k);
    const double d = batch.mean(i, k) - batch.mean(j, k);
    p *= std::pow(kTwoPi * v, -0.5) * std::exp(-0.5 * d * d / v);
  }
  return p;
}

/// log of gaussian_overlap, accumulated in log space.
inline double log_gaussian_overlap(const GaussianBatch& batch, std::size_t i, std::size_t j) {
  check_component(batch, i);
  check_component(batch, j);
  double s = 0.0;
  for (std::size_t k = 0; k < batch.dim(); ++k) {
    const double v = batch.variance(i, k) + batch.variance(j, k);
    const double d = batch.mean(i, k) - batch.mean(j, k);
    s += -0.5 * std::log(kTwoPi * v) - 0.5 * d * d / v;
  }
  return s;
}

namespace detail {

struct KlUpperBoundParts {
  double value = 0.0;
  // Row-normalized mixture weights w_ij = overlap_ij / sum_j overlap_ij.
  std::vector<double> weights;
};

inline KlUpperBoundParts kl_upper_bound_parts(const DenseArray& means, const DenseArray& log_vars,
                                              bool keep_weights) {
  const std::size_t m = means.rows(), dz = means.cols();
  const double log_m = std::log(static_cast<double>(m));
  KlUpperBoundParts out;
  if (keep_weights) out.weights.assign(m * m, 0.0);
  std::vector<double> row(m);
  double first = 0.0;
  double second = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < dz; ++k) {
        const double v = std::exp(log_vars(i, k)) + std::exp(log_vars(j, k));
        const double d = means(i, k) - means(j, k);
        s += -0.5 * std::log(kTwoPi * v) - 0.5 * d * d / v;
      }
      row[j] = s;
    }
    const double lse = log_sum_exp(row);
    first += lse - log_m;
    if (keep_weights) {
      for (std::size_t j = 0; j < m; ++j) out.weights[i * m + j] = std::exp(row[j] - lse);
    }
    for (std::size_t k = 0; k < dz; ++k) {
      second += std::exp(log_vars(i, k)) + means(i, k) * means(i, k) + kLogTwoPi;
    }
  }
  out.value = first / static_cast<double>(m) + second / (2.0 * static_cast<double>(m));
  return out;
}

}  // namespace detail

/// Analytic upper bound on KL[(1/M) sum_i q_i || N(0, I)]:
///
///   (1/M) sum_i log[(1/M) sum_j prod_k overlap_k(i, j)]
///     + (1/2M) sum_i sum_k (sigma_ik^2 + mu_ik^2 + log 2pi)
///
/// The inner sum is a log-sum-exp over log-overlaps.
inline double kl_upper_bound(const GaussianBatch& batch) {
  return detail::kl_upper_bound_parts(batch.means(), batch.log_vars(), false).value;
}

/// KL[N(mu_i, diag sigma_i^2) || N(0, I)] for every row i.
inline std::vector<double> exact_kl_to_prior(const DenseArray& means, const DenseArray& log_vars) {
  if (means.rank() != 2 || means.shape() != log_vars.shape()) {
    throw ShapeError("exact_kl_to_prior", shape_string(means.shape()), shape_string(log_vars.shape()));
  }
  std::vector<double> out(means.rows(), 0.0);
  for (std::size_t i = 0; i < means.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < means.cols(); ++k) {
      const double mu = means(i, k), lv = log_vars(i, k);
      s += mu * mu + std::exp(lv) - lv - 1.0;
    }
    out[i] = 0.5 * s;
  }
  return out;
}

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of KL[mixture || N(0, I)]: z is drawn by picking a
/// component uniformly then sampling it, and log q(z) - log p(z) is averaged.
inline McEstimate mc_kl_mixture_to_prior(const GaussianBatch& batch, std::size_t n_samples,
                                         std::uint64_t seed) {
  if (n_samples < 1000) throw UsageError("mc_kl_mixture_to_prior: n_samples must be >= 1000");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, batch.size() - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  const StandardPrior prior{batch.dim()};
  std::vector<double> z(batch.dim());
  // Welford accumulation of the per-draw log ratio.
  double mean = 0.0, m2 = 0.0;
  for (std::size_t n = 0; n < n_samples; ++n) {
    const std::size_t i = pick(rng);
    for (std::size_t k = 0; k < batch.dim(); ++k) {
      z[k] = batch.mean(i, k) + std::exp(0.5 * batch.log_vars()(i, k)) * normal(rng);
    }
    const double term = log_density_mixture(batch, z) - prior.log_density(z);
    const double delta = term - mean;
    mean += delta / static_cast<double>(n + 1);
    m2 += delta * (term - mean);
  }
  const double var = m2 / static_cast<double>(n_samples - 1);
  return {mean, std::sqrt(var / static_cast<double>(n_samples))};
}

/// mu + exp(log_var / 2) * noise, elementwise.
inline DenseArray sample_reparameterized(const DenseArray& means, const DenseArray& log_vars,
                                         const DenseArray& noise) {
  if (means.shape() != log_vars.shape() || means.shape() != noise.shape()) {
    throw ShapeError("sample_reparameterized", shape_string(means.shape()), shape_string(noise.shape()));
  }
  DenseArray out = means;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(0.5 * log_vars[i]) * noise[i];
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable forms
// ---------------------------------------------------------------------------

/// Posterior parameters living on a tape.
struct PosteriorNodes {
  Var means;
  Var log_vars;

  GaussianBatch values() const { return GaussianBatch(means.value(), log_vars.value()); }
};

/// Clamps log-variances into the canonical range.
inline Var clamp_log_vars(Var log_vars) { return clamp(log_vars, kLogVarMin, kLogVarMax); }

inline Var sample_reparameterized(const PosteriorNodes& q, const DenseArray& noise) {
  if (noise.shape() != q.means.shape()) {
    throw ShapeError("sample_reparameterized", shape_string(q.means.shape()), shape_string(noise.shape()));
  }
  Var sigma = exp(scale(q.log_vars, 0.5));
  return add(q.means, mul(sigma, q.means.tape->constant(noise)));
}

/// Per-sample exact KL to the prior as a length-M vector node.
inline Var exact_kl_to_prior(const PosteriorNodes& q) {
  Var per_entry = sub(add(square(q.means), exp(q.log_vars)), add_scalar(q.log_vars, 1.0));
  return scale(sum_axis(per_entry, 1), 0.5);
}

/// kl_upper_bound as a scalar node with its analytic gradient.
///
/// With L_ij = sum_k [-1/2 log(2 pi v) - 1/2 d^2 / v], v = s_ik + s_jk,
/// d = mu_ik - mu_jk and w_ij the row softmax of L:
///   dKL/dmu_ik = (1/M) sum_j (w_ij + w_ji)(-d / v) + mu_ik / M
///   dKL/ds_ik  = (1/M) sum_j (w_ij + w_ji)(-1/(2v) + d^2/(2v^2)) + 1/(2M)
/// and ds/dlog_var = s.
inline Var kl_upper_bound(const PosteriorNodes& q) {
  detail::same_tape("kl_upper_bound", q.means, q.log_vars);
  const DenseArray& mv = q.means.value();
  const DenseArray& lv = q.log_vars.value();
  if (mv.rank() != 2 || mv.shape() != lv.shape()) {
    throw ShapeError("kl_upper_bound", shape_string(mv.shape()), shape_string(lv.shape()));
  }
  auto parts = detail::kl_upper_bound_parts(mv, lv, true);
  const std::size_t im = q.means.id, il = q.log_vars.id;
  return q.means.tape->record(
      "kl_upper_bound", DenseArray::scalar(parts.value), {im, il},
      [im, il, w = std::move(parts.weights)](Tape& t, const DenseArray& g) {
        const DenseArray& mu = t.value(im);
        const DenseArray& logv = t.value(il);
        const std::size_t m = mu.rows(), dz = mu.cols();
        const double inv_m = 1.0 / static_cast<double>(m);
        const double gs = g[0];
        DenseArray gmu = DenseArray::matrix(m, dz);
        DenseArray gs2 = DenseArray::matrix(m, dz);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            const double wsym = (w[i * m + j] + w[j * m + i]) * inv_m;
            for (std::size_t k = 0; k < dz; ++k) {
              const double v = std::exp(logv(i, k)) + std::exp(logv(j, k));
              const double d = mu(i, k) - mu(j, k);
              gmu(i, k) += wsym * (-d / v);
              gs2(i, k) += wsym * (-0.5 / v + 0.5 * d * d / (v * v));
            }
          }
          for (std::size_t k = 0; k < dz; ++k) {
            gmu(i, k) += mu(i, k) * inv_m;
            gs2(i, k) += 0.5 * inv_m;
          }
        }
        for (std::size_t n = 0; n < gmu.size(); ++n) {
          gmu[n] *= gs;
          gs2[n] *= gs * std::exp(logv[n]);
        }
        t.accumulate(im, gmu);
        t.accumulate(il, gs2);
      });
}

}  // namespace wiseale
