#pragma once

// Synthetic sine waves and the MNIST IDX reader.
//
// Sine cache file (little-endian):
//   "SINED001", u64 rows, u64 cols, f64 x rows*cols (row-major)
// with a sidecar CSV `<cache>.csv`: row,amplitude,frequency,phase

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wiseale/diff_core.hpp"
#include "wiseale/model.hpp"

namespace wiseale {

inline constexpr std::size_t kSineLength = 256;
inline constexpr double kSineNoiseStd = 0.05;
inline constexpr double kSineMaxFrequency = 20.0;
inline constexpr double kSineMaxAmplitude = 2.0;
inline constexpr std::size_t kMnistSide = 28;
inline constexpr std::size_t kMnistPixels = kMnistSide * kMnistSide;

struct SineParams {
  double amplitude = 0.0;
  double frequency = 0.0;
  double phase = 0.0;

  bool operator==(const SineParams&) const = default;
};

struct SineData {
  DenseArray samples;  // count x 256
  std::vector<SineParams> params;
};

/// Called per row after its parameters are drawn; may rewrite them and the
/// noise standard deviation. Used by tests to force special cases.
using SineOverride = std::function<void(std::size_t row, SineParams& params, double& noise_std)>;

/// Noiseless A sin(2 pi f t + phi) sampled at t = n / 256, n = 0..255.
inline std::vector<double> sine_wave(const SineParams& p) {
  std::vector<double> out(kSineLength);
  for (std::size_t n = 0; n < kSineLength; ++n) {
    const double t = static_cast<double>(n) / static_cast<double>(kSineLength);
    out[n] = p.amplitude * std::sin(2.0 * std::numbers::pi * p.frequency * t + p.phase);
  }
  return out;
}

/// `count` waves with f ~ U(0, 20), phi ~ U(0, 2 pi), A ~ U(0, 2) and
/// additive N(0, 0.05^2) noise. Deterministic in `seed`.
inline SineData generate_sine(std::size_t count, std::uint64_t seed, const SineOverride& override_hook = {}) {
  if (count < 1) throw UsageError("generate_sine: count must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> freq(0.0, kSineMaxFrequency);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> amp(0.0, kSineMaxAmplitude);
  std::normal_distribution<double> normal(0.0, 1.0);
  SineData data{DenseArray::matrix(count, kSineLength), std::vector<SineParams>(count)};
  std::vector<double> eps(kSineLength);
  for (std::size_t r = 0; r < count; ++r) {
    SineParams p;
    p.frequency = freq(rng);
    p.phase = phase(rng);
    p.amplitude = amp(rng);
    for (double& e : eps) e = normal(rng);
    double noise_std = kSineNoiseStd;
    if (override_hook) override_hook(r, p, noise_std);
    const auto wave = sine_wave(p);
    auto row = data.samples.row(r);
    for (std::size_t n = 0; n < kSineLength; ++n) row[n] = wave[n] + noise_std * eps[n];
    data.params[r] = p;
  }
  return data;
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(bytes.size()) +
                      " (need 4 bytes at offset " + std::to_string(offset) + ")");
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

}  // namespace detail

/// IDX3 image file as a count x 784 array with values byte / 255.
inline DenseArray read_idx_images(const std::filesystem::path& path) {
  const auto bytes = detail::read_all(path);
  const std::uint32_t magic = detail::read_be32(bytes, 0, path);
  if (magic != kIdxImageMagic) {
    throw FormatError(path.string() + ": bad image magic " + detail::hex32(magic) + ", expected " +
                      detail::hex32(kIdxImageMagic));
  }
  const std::size_t count = detail::read_be32(bytes, 4, path);
  const std::size_t rows = detail::read_be32(bytes, 8, path);
  const std::size_t cols = detail::read_be32(bytes, 12, path);
  if (rows != kMnistSide || cols != kMnistSide) {
    throw FormatError(path.string() + ": expected 28x28 images, got " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  }
  const std::size_t need = 16 + count * kMnistPixels;
  if (bytes.size() < need) {
    throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(need) + " bytes");
  }
  DenseArray images = DenseArray::matrix(count, kMnistPixels);
  for (std::size_t i = 0; i < count * kMnistPixels; ++i) images[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  return images;
}

inline std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const auto bytes = detail::read_all(path);
  const std::uint32_t magic = detail::read_be32(bytes, 0, path);
  if (magic != kIdxLabelMagic) {
    throw FormatError(path.string() + ": bad label magic " + detail::hex32(magic) + ", expected " +
                      detail::hex32(kIdxLabelMagic));
  }
  const std::size_t count = detail::read_be32(bytes, 4, path);
  if (bytes.size() < 8 + count) {
    throw FormatError(path.string() + ": truncated at byte offset " + std::to_string(bytes.size()) +
                      ", expected " + std::to_string(8 + count) + " bytes");
  }
  return std::vector<int>(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count));
}

struct MnistData {
  DenseArray images;  // count x 784, in [0, 1]
  std::vector<int> labels;
};

inline std::filesystem::path mnist_images_path(const std::filesystem::path& dir, const std::string& split) {
  return dir / (split == "train" ? "train-images-idx3-ubyte" : "t10k-images-idx3-ubyte");
}
inline std::filesystem::path mnist_labels_path(const std::filesystem::path& dir, const std::string& split) {
  return dir / (split == "train" ? "train-labels-idx1-ubyte" : "t10k-labels-idx1-ubyte");
}

/// Loads `split` ("train" or "test") from the standard IDX file names in `dir`.
/// A threshold in (0, 1) binarizes pixels (x >= threshold -> 1).
inline MnistData load_mnist_idx(const std::filesystem::path& dir, const std::string& split,
                                std::optional<double> binarize_threshold = std::nullopt) {
  if (split != "train" && split != "test") throw UsageError("load_mnist_idx: split must be train or test");
  MnistData d{read_idx_images(mnist_images_path(dir, split)), read_idx_labels(mnist_labels_path(dir, split))};
  if (d.labels.size() != d.images.rows()) {
    throw FormatError("MNIST " + split + ": " + std::to_string(d.images.rows()) + " images but " +
                      std::to_string(d.labels.size()) + " labels");
  }
  if (binarize_threshold) {
    const double th = *binarize_threshold;
    if (!(th > 0.0 && th < 1.0)) throw UsageError("binarize threshold must lie in (0,1)");
    for (double& v : d.images.values()) v = v >= th ? 1.0 : 0.0;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Sine cache files
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kSineCacheMagic{'S', 'I', 'N', 'E', 'D', '0', '0', '1'};

inline std::filesystem::path sine_metadata_path(const std::filesystem::path& cache) {
  auto p = cache;
  p += ".csv";
  return p;
}

inline void write_sine_cache(const std::filesystem::path& path, const SineData& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os.write(kSineCacheMagic.data(), kSineCacheMagic.size());
    detail::write_le<std::uint64_t>(os, data.samples.rows());
    detail::write_le<std::uint64_t>(os, data.samples.cols());
    for (double v : data.samples.values()) detail::write_le<double>(os, v);
    if (!os) throw std::runtime_error("failed writing " + path.string());
  }
  std::ofstream csv(sine_metadata_path(path), std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + sine_metadata_path(path).string());
  csv << "row,amplitude,frequency,phase\n" << std::setprecision(17);
  for (std::size_t r = 0; r < data.params.size(); ++r) {
    const auto& p = data.params[r];
    csv << r << ',' << p.amplitude << ',' << p.frequency << ',' << p.phase << '\n';
  }
}

inline SineData read_sine_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open " + path.string());
  const std::string what = path.string();
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kSineCacheMagic) {
    throw FormatError(what + ": bad magic, expected SINED001");
  }
  const auto rows = detail::read_le<std::uint64_t>(is, what);
  const auto cols = detail::read_le<std::uint64_t>(is, what);
  SineData data{DenseArray::matrix(rows, cols), {}};
  for (double& v : data.samples.values()) v = detail::read_le<double>(is, what);

  std::ifstream csv(sine_metadata_path(path));
  if (!csv) throw UsageError("cannot open " + sine_metadata_path(path).string());
  std::string line;
  std::getline(csv, line);
  std::size_t line_no = 1;
  while (std::getline(csv, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ls, cell, ',')) v.push_back(std::stod(cell));
    if (v.size() != 4) throw FormatError(sine_metadata_path(path).string() + ": line " + std::to_string(line_no) + " needs 4 fields");
    data.params.push_back({v[1], v[2], v[3]});
  }
  if (data.params.size() != rows) throw FormatError(what + ": metadata row count does not match samples");
  return data;
}

// ---------------------------------------------------------------------------
// Dataset specs and splits
// ---------------------------------------------------------------------------

enum class DatasetKind { kSine, kMnist };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::kSine;
  /// Sine: number of waves generated. MNIST: cap on training rows (0 = all).
  std::size_t count = 20000;
  std::uint64_t seed = 0;
  /// Fraction of generated sine rows held out for evaluation.
  double holdout_fraction = 0.1;
  std::filesystem::path mnist_dir;
  double binarize_threshold = 0.5;

  static DatasetSpec sine(std::size_t count, std::uint64_t seed) {
    DatasetSpec s;
    s.kind = DatasetKind::kSine;
    s.count = count;
    s.seed = seed;
    return s;
  }
  static DatasetSpec mnist(std::filesystem::path dir, std::size_t max_train = 0) {
    DatasetSpec s;
    s.kind = DatasetKind::kMnist;
    s.mnist_dir = std::move(dir);
    s.count = max_train;
    return s;
  }

  void validate() const {
    if (kind == DatasetKind::kSine && count < 1) throw UsageError("dataset: count must be >= 1");
    if (!(binarize_threshold > 0.0 && binarize_threshold < 1.0)) throw UsageError("dataset: threshold must lie in (0,1)");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw UsageError("dataset: holdout fraction must lie in [0,1)");
  }

  std::size_t input_dim() const { return kind == DatasetKind::kSine ? kSineLength : kMnistPixels; }
  std::string name() const { return kind == DatasetKind::kSine ? "sine" : "mnist"; }
};

/// A set of rows plus whatever metadata its source provides.
struct Dataset {
  DenseArray samples = DenseArray::matrix(0, 0);  // model input (binarized for MNIST)
  DenseArray display = DenseArray::matrix(0, 0);  // grayscale MNIST for figures; same as samples for sine
  std::vector<int> labels;            // MNIST only
  std::vector<SineParams> sine;       // sine only
  std::vector<std::size_t> source_rows;  // row ids in the originating file or generator

  std::size_t size() const { return samples.rows(); }
  bool has_labels() const { return !labels.empty(); }
};

struct DataSplit {
  Dataset train;
  Dataset eval;
};

namespace detail {

inline Dataset take_rows(const DenseArray& samples, const DenseArray& display, const std::vector<int>& labels,
                         const std::vector<SineParams>& sine, std::vector<std::size_t> rows) {
  Dataset d;
  d.samples = samples.select_rows(rows);
  d.display = display.select_rows(rows);
  for (auto r : rows) {
    if (!labels.empty()) d.labels.push_back(labels[r]);
    if (!sine.empty()) d.sine.push_back(sine[r]);
  }
  d.source_rows = std::move(rows);
  return d;
}

}  // namespace detail

/// Materializes training and held-out rows for a spec.
/// Sine: one generated set, split by a seeded permutation. MNIST: the train
/// file (optionally capped) and the test file when it is present.
inline DataSplit load_split(const DatasetSpec& spec) {
  spec.validate();
  DataSplit out;
  if (spec.kind == DatasetKind::kSine) {
    SineData data = generate_sine(spec.count, spec.seed);
    std::vector<std::size_t> perm(spec.count);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(splitmix64(spec.seed ^ 0x5eedULL));
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto n_eval = static_cast<std::size_t>(std::llround(spec.holdout_fraction * static_cast<double>(spec.count)));
    std::vector<std::size_t> eval(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_eval));
    std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_eval), perm.end());
    std::sort(eval.begin(), eval.end());
    std::sort(train.begin(), train.end());
    out.train = detail::take_rows(data.samples, data.samples, {}, data.params, std::move(train));
    out.eval = detail::take_rows(data.samples, data.samples, {}, data.params, std::move(eval));
    return out;
  }
  MnistData gray = load_mnist_idx(spec.mnist_dir, "train");
  DenseArray binary = gray.images;
  for (double& v : binary.values()) v = v >= spec.binarize_threshold ? 1.0 : 0.0;
  std::size_t n = gray.images.rows();
  if (spec.count > 0) n = std::min(n, spec.count);
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  out.train = detail::take_rows(binary, gray.images, gray.labels, {}, std::move(rows));
  if (std::filesystem::exists(mnist_images_path(spec.mnist_dir, "test"))) {
    MnistData test = load_mnist_idx(spec.mnist_dir, "test");
    DenseArray tb = test.images;
    for (double& v : tb.values()) v = v >= spec.binarize_threshold ? 1.0 : 0.0;
    std::vector<std::size_t> all(test.images.rows());
    std::iota(all.begin(), all.end(), std::size_t{0});
    out.eval = detail::take_rows(tb, test.images, test.labels, {}, std::move(all));
  }
  return out;
}

}  // namespace wiseale
