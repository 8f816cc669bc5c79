#pragma once

// Fully-connected encoder x -> (mu, log sigma^2) and decoder z -> likelihood
// parameters, with tanh hidden layers.
//
// Parameter layout (stable; also the checkpoint order). Each layer stores
// weights (out x in) followed by biases (out):
//   encoder hidden layers, in order
//   mean head        (d_z x last encoder width)
//   log-variance head (d_z x last encoder width)
//   decoder hidden layers, in order
//   decoder output   (d_x x last decoder width)
//
// Checkpoint file (all integers and floats little-endian):
//   "WISEALE1"                     8 bytes
//   u32 input_dim, u32 latent_dim
//   u32 n_enc, u32 width x n_enc
//   u32 n_dec, u32 width x n_dec
//   u8 likelihood (0 Bernoulli, 1 Gaussian), f64 sigma
//   u64 value count, f64 x count   (parameters in layout order)

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "wiseale/diff_core.hpp"
#include "wiseale/latent_gaussian.hpp"
#include "wiseale/objectives.hpp"

namespace wiseale {

struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> encoder_hidden;
  std::size_t latent_dim = 0;
  std::vector<std::size_t> decoder_hidden;
  Likelihood likelihood;

  /// 256 -> 128 -> 64 -> 2 d_z, mirrored decoder, Gaussian output.
  static Architecture sine(std::size_t latent_dim = 8, double sigma_dec = 0.1) {
    return {256, {128, 64}, latent_dim, {64, 128}, Likelihood::gaussian(sigma_dec)};
  }

  /// 784 -> 256 -> 64 -> 2 d_z, mirrored decoder, Bernoulli output.
  static Architecture mnist(std::size_t latent_dim = 2) {
    return {784, {256, 64}, latent_dim, {64, 256}, Likelihood::bernoulli()};
  }

  void validate() const {
    if (input_dim == 0 || latent_dim == 0) throw UsageError("architecture: widths must be positive");
    for (auto w : encoder_hidden)
      if (w == 0) throw UsageError("architecture: hidden widths must be positive");
    for (auto w : decoder_hidden)
      if (w == 0) throw UsageError("architecture: hidden widths must be positive");
    if (likelihood.family == Likelihood::Family::kGaussian && !(likelihood.sigma > 0)) {
      throw UsageError("architecture: decoder sigma must be > 0");
    }
  }

  std::size_t encoder_output_width() const { return 2 * latent_dim; }
  std::size_t mean_head() const { return encoder_hidden.size(); }
  std::size_t log_var_head() const { return encoder_hidden.size() + 1; }
  std::size_t decoder_begin() const { return encoder_hidden.size() + 2; }
  std::size_t layer_count() const { return encoder_hidden.size() + 2 + decoder_hidden.size() + 1; }

  /// (out, in) for every layer in layout order.
  std::vector<std::pair<std::size_t, std::size_t>> layer_shapes() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t prev = input_dim;
    for (auto w : encoder_hidden) {
      out.emplace_back(w, prev);
      prev = w;
    }
    out.emplace_back(latent_dim, prev);
    out.emplace_back(latent_dim, prev);
    prev = latent_dim;
    for (auto w : decoder_hidden) {
      out.emplace_back(w, prev);
      prev = w;
    }
    out.emplace_back(input_dim, prev);
    return out;
  }

  bool operator==(const Architecture&) const = default;
};

struct DenseLayer {
  DenseArray weights;  // out x in
  DenseArray biases;   // out

  bool operator==(const DenseLayer&) const = default;
};

class ModelParams {
 public:
  ModelParams() = default;
  ModelParams(Architecture arch, std::vector<DenseLayer> layers) : arch_(std::move(arch)), layers_(std::move(layers)) {
    arch_.validate();
    const auto shapes = arch_.layer_shapes();
    if (layers_.size() != shapes.size()) throw UsageError("ModelParams: layer count does not match architecture");
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      const auto [out, in] = shapes[l];
      if (layers_[l].weights.shape() != Shape{out, in} || layers_[l].biases.shape() != Shape{out}) {
        throw ShapeError("ModelParams layer " + std::to_string(l), shape_string(layers_[l].weights.shape()),
                         shape_string(Shape{out, in}));
      }
    }
  }

  static ModelParams zeros(const Architecture& arch) {
    std::vector<DenseLayer> layers;
    for (auto [out, in] : arch.layer_shapes()) layers.push_back({DenseArray::matrix(out, in), DenseArray(Shape{out})});
    return ModelParams(arch, std::move(layers));
  }

  const Architecture& arch() const { return arch_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  /// Weights and biases interleaved in layout order.
  std::vector<DenseArray> tensors() const {
    std::vector<DenseArray> out;
    out.reserve(2 * layers_.size());
    for (const auto& l : layers_) {
      out.push_back(l.weights);
      out.push_back(l.biases);
    }
    return out;
  }

  void set_tensors(std::vector<DenseArray> tensors) {
    if (tensors.size() != 2 * layers_.size()) throw UsageError("set_tensors: wrong tensor count");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      if (tensors[2 * l].shape() != layers_[l].weights.shape() || tensors[2 * l + 1].shape() != layers_[l].biases.shape()) {
        throw ShapeError("set_tensors", shape_string(tensors[2 * l].shape()), shape_string(layers_[l].weights.shape()));
      }
      layers_[l].weights = std::move(tensors[2 * l]);
      layers_[l].biases = std::move(tensors[2 * l + 1]);
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.biases.size();
    return n;
  }

  bool operator==(const ModelParams&) const = default;

 private:
  Architecture arch_;
  std::vector<DenseLayer> layers_;
};

/// Glorot-uniform weights, zero biases; the log-variance head is further
/// scaled by 0.01 so initial posteriors sit near unit variance.
inline ModelParams init_params(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  const auto shapes = arch.layer_shapes();
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto [out, in] = shapes[l];
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-a, a);
    DenseArray w = DenseArray::matrix(out, in);
    for (double& v : w.values()) v = u(rng);
    if (l == arch.log_var_head()) {
      for (double& v : w.values()) v *= 0.01;
    }
    layers.push_back({std::move(w), DenseArray(Shape{out})});
  }
  return ModelParams(arch, std::move(layers));
}

/// Puts every parameter tensor on the tape, in layout order.
inline std::vector<Var> register_params(Tape& tape, const ModelParams& params) {
  std::vector<Var> vars;
  for (const auto& t : params.tensors()) vars.push_back(tape.parameter(t));
  return vars;
}

namespace detail {

inline Var dense(Var x, std::span<const Var> params, std::size_t layer) {
  return add(matmul(x, params[2 * layer], true), params[2 * layer + 1]);
}

inline void check_param_vars(const Architecture& arch, std::span<const Var> params) {
  if (params.size() != 2 * arch.layer_count()) {
    throw UsageError("model: expected " + std::to_string(2 * arch.layer_count()) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
}

}  // namespace detail

inline PosteriorNodes encode(const Architecture& arch, std::span<const Var> params, Var x) {
  detail::check_param_vars(arch, params);
  if (x.value().rank() != 2 || x.value().cols() != arch.input_dim) {
    throw ShapeError("encode", shape_string(x.shape()), "[M x " + std::to_string(arch.input_dim) + "]");
  }
  Var h = x;
  for (std::size_t l = 0; l < arch.encoder_hidden.size(); ++l) h = tanh(detail::dense(h, params, l));
  Var mu = detail::dense(h, params, arch.mean_head());
  Var log_var = clamp_log_vars(detail::dense(h, params, arch.log_var_head()));
  return {mu, log_var};
}

inline Var decode(const Architecture& arch, std::span<const Var> params, Var z) {
  detail::check_param_vars(arch, params);
  if (z.value().rank() != 2 || z.value().cols() != arch.latent_dim) {
    throw ShapeError("decode", shape_string(z.shape()), "[M x " + std::to_string(arch.latent_dim) + "]");
  }
  Var h = z;
  const std::size_t first = arch.decoder_begin();
  for (std::size_t l = 0; l < arch.decoder_hidden.size(); ++l) h = tanh(detail::dense(h, params, first + l));
  Var out = detail::dense(h, params, first + arch.decoder_hidden.size());
  return arch.likelihood.family == Likelihood::Family::kBernoulli ? sigmoid(out) : out;
}

inline GaussianBatch encode(const ModelParams& params, const DenseArray& x) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : params.tensors()) vars.push_back(tape.constant(t));
  auto q = encode(params.arch(), vars, tape.constant(x));
  return q.values();
}

inline DenseArray decode(const ModelParams& params, const DenseArray& z) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : params.tensors()) vars.push_back(tape.constant(t));
  return decode(params.arch(), vars, tape.constant(z)).value();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kCheckpointMagic{'W', 'I', 'S', 'E', 'A', 'L', 'E', '1'};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  const auto offset = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw FormatError(what + ": truncated at byte offset " + std::to_string(offset));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  const Architecture& a = params.arch();
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.input_dim));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.latent_dim));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.encoder_hidden.size()));
  for (auto w : a.encoder_hidden) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.decoder_hidden.size()));
  for (auto w : a.decoder_hidden) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(w));
  detail::write_le<std::uint8_t>(os, a.likelihood.family == Likelihood::Family::kBernoulli ? 0 : 1);
  detail::write_le<double>(os, a.likelihood.sigma);
  detail::write_le<std::uint64_t>(os, params.parameter_count());
  for (const auto& t : params.tensors())
    for (double v : t.values()) detail::write_le<double>(os, v);
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open checkpoint " + path.string());
  const std::string what = "checkpoint " + path.string();
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw FormatError(what + ": bad magic, expected WISEALE1");
  }
  Architecture a;
  a.input_dim = detail::read_le<std::uint32_t>(is, what);
  a.latent_dim = detail::read_le<std::uint32_t>(is, what);
  const auto n_enc = detail::read_le<std::uint32_t>(is, what);
  if (n_enc > 64) throw FormatError(what + ": implausible encoder depth " + std::to_string(n_enc));
  for (std::uint32_t i = 0; i < n_enc; ++i) a.encoder_hidden.push_back(detail::read_le<std::uint32_t>(is, what));
  const auto n_dec = detail::read_le<std::uint32_t>(is, what);
  if (n_dec > 64) throw FormatError(what + ": implausible decoder depth " + std::to_string(n_dec));
  for (std::uint32_t i = 0; i < n_dec; ++i) a.decoder_hidden.push_back(detail::read_le<std::uint32_t>(is, what));
  const auto family = detail::read_le<std::uint8_t>(is, what);
  if (family > 1) throw FormatError(what + ": unknown likelihood code " + std::to_string(family));
  a.likelihood.family = family == 0 ? Likelihood::Family::kBernoulli : Likelihood::Family::kGaussian;
  a.likelihood.sigma = detail::read_le<double>(is, what);
  a.validate();
  ModelParams params = ModelParams::zeros(a);
  const auto count = detail::read_le<std::uint64_t>(is, what);
  if (count != params.parameter_count()) {
    throw FormatError(what + ": parameter count " + std::to_string(count) + " does not match architecture (" +
                      std::to_string(params.parameter_count()) + ")");
  }
  auto tensors = params.tensors();
  for (auto& t : tensors)
    for (double& v : t.values()) v = detail::read_le<double>(is, what);
  params.set_tensors(std::move(tensors));
  return params;
}

}  // namespace wiseale
