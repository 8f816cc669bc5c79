#pragma once

// Static SVG figures: 2-D posterior scatter, training curves, and
// input/reconstruction strips. Everything here is a pure function of its
// inputs; the only randomness is the seeded choice of scatter points.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "wiseale/datasets.hpp"
#include "wiseale/model.hpp"
#include "wiseale/trainer.hpp"

namespace wiseale {

namespace svg {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string header(double width, double height) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
         "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         num(width) + "\" height=\"" + num(height) + "\" viewBox=\"0 0 " + num(width) + " " + num(height) +
         "\">\n<rect x=\"0\" y=\"0\" width=\"" + num(width) + "\" height=\"" + num(height) +
         "\" fill=\"white\"/>\n";
}

inline std::string text(double x, double y, const std::string& s, double size = 12, const char* anchor = "start") {
  return "<text x=\"" + num(x) + "\" y=\"" + num(y) + "\" font-family=\"sans-serif\" font-size=\"" + num(size) +
         "\" text-anchor=\"" + anchor + "\">" + escape(s) + "</text>\n";
}

inline std::string line(double x1, double y1, double x2, double y2, const char* stroke = "#444") {
  return "<line x1=\"" + num(x1) + "\" y1=\"" + num(y1) + "\" x2=\"" + num(x2) + "\" y2=\"" + num(y2) +
         "\" stroke=\"" + stroke + "\" stroke-width=\"1\"/>\n";
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

// Tableau-10.
inline constexpr std::array<const char*, 10> kPalette{"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                                      "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};

/// Maps [lo, hi] to [a, b]; a degenerate range maps to the midpoint.
struct Scale {
  double lo, hi, a, b;
  double operator()(double v) const { return hi > lo ? a + (v - lo) / (hi - lo) * (b - a) : 0.5 * (a + b); }
};

}  // namespace svg

// ---------------------------------------------------------------------------
// Posterior scatter
// ---------------------------------------------------------------------------

struct EmbeddingPoint {
  double mu1 = 0, mu2 = 0, sigma1 = 0, sigma2 = 0;
  int label = -1;

  bool operator==(const EmbeddingPoint&) const = default;
};

struct EmbeddingSummary {
  std::vector<EmbeddingPoint> points;
  std::vector<std::size_t> rows;
  /// Mean of sigma1 and sigma2 over all points.
  double mean_sigma = 0.0;
};

inline constexpr std::size_t kDefaultScatterPoints = 64;

/// Seeded choice of `n` distinct rows.
inline std::vector<std::size_t> choose_rows(std::size_t available, std::size_t n, std::uint64_t seed) {
  if (n > available) throw UsageError("requested " + std::to_string(n) + " points from " + std::to_string(available) + " rows");
  std::vector<std::size_t> all(available);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(n);
  return all;
}

inline std::vector<EmbeddingPoint> read_embedding_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "mu1,mu2,sigma1,sigma2,label") throw FormatError(path.string() + ": line 1: unexpected header");
  std::vector<EmbeddingPoint> out;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string c;
    std::vector<std::string> cells;
    while (std::getline(ls, c, ',')) cells.push_back(c);
    if (cells.size() != 5) throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": expected 5 fields");
    try {
      out.push_back({std::stod(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]), std::stoi(cells[4])});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + ": malformed number");
    }
  }
  return out;
}

/// Encodes `n_points` seeded rows of `data` and draws each posterior as a
/// 1-sigma axis-aligned ellipse over the unit prior circle. Writes the SVG
/// and a CSV (mu1,mu2,sigma1,sigma2,label) next to it.
inline EmbeddingSummary embed_scatter(const ModelParams& params, const Dataset& data, std::size_t n_points,
                                      std::uint64_t seed, const std::filesystem::path& svg_path,
                                      const std::filesystem::path& csv_path) {
  if (params.arch().latent_dim != 2) {
    throw UsageError("embed: latent dimension is " + std::to_string(params.arch().latent_dim) +
                     "; scatter plots need a 2-D run (train with --latent-dim 2)");
  }
  EmbeddingSummary out;
  out.rows = choose_rows(data.size(), n_points, seed);
  const GaussianBatch q = encode(params, data.samples.select_rows(out.rows));
  double sigma_sum = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    EmbeddingPoint p{q.mean(i, 0), q.mean(i, 1), std::sqrt(q.variance(i, 0)), std::sqrt(q.variance(i, 1)),
                     data.has_labels() ? data.labels[out.rows[i]] : -1};
    sigma_sum += p.sigma1 + p.sigma2;
    out.points.push_back(p);
  }
  out.mean_sigma = out.points.empty() ? 0.0 : sigma_sum / (2.0 * static_cast<double>(out.points.size()));

  // Symmetric square extent covering every ellipse and the prior circle.
  double extent = 1.2;
  for (const auto& p : out.points) {
    extent = std::max({extent, std::abs(p.mu1) + p.sigma1, std::abs(p.mu2) + p.sigma2});
  }
  extent *= 1.05;
  const double size = 520, margin = 40;
  const svg::Scale sx{-extent, extent, margin, size - margin};
  const svg::Scale sy{-extent, extent, size - margin, margin};
  const double unit = (size - 2 * margin) / (2 * extent);

  std::string s = svg::header(size, size + 30);
  s += svg::text(size / 2, 22, "Posterior embeddings (" + std::to_string(out.points.size()) + " points, 1-sigma)", 14, "middle");
  s += svg::line(margin, sy(0), size - margin, sy(0), "#bbb");
  s += svg::line(sx(0), margin, sx(0), size - margin, "#bbb");
  s += "<circle class=\"prior\" cx=\"" + svg::num(sx(0)) + "\" cy=\"" + svg::num(sy(0)) + "\" r=\"" + svg::num(unit) +
       "\" fill=\"none\" stroke=\"#222\" stroke-width=\"1.5\" stroke-dasharray=\"4 3\"/>\n";
  for (const auto& p : out.points) {
    const char* color = p.label >= 0 ? svg::kPalette[static_cast<std::size_t>(p.label) % svg::kPalette.size()] : svg::kPalette[0];
    s += "<ellipse class=\"posterior\" cx=\"" + svg::num(sx(p.mu1)) + "\" cy=\"" + svg::num(sy(p.mu2)) + "\" rx=\"" +
         svg::num(p.sigma1 * unit) + "\" ry=\"" + svg::num(p.sigma2 * unit) + "\" fill=\"" + color +
         "\" fill-opacity=\"0.25\" stroke=\"" + color + "\" stroke-width=\"1\"/>\n";
  }
  if (data.has_labels()) {
    for (std::size_t d = 0; d < 10; ++d) {
      const double y = size + 10 - 0.0;
      const double x = margin + static_cast<double>(d) * 44;
      s += "<rect x=\"" + svg::num(x) + "\" y=\"" + svg::num(y) + "\" width=\"10\" height=\"10\" fill=\"" + svg::kPalette[d] + "\"/>\n";
      s += svg::text(x + 14, y + 10, std::to_string(d), 11);
    }
  }
  s += "</svg>\n";
  svg::write_file(svg_path, s);

  std::ostringstream csv;
  csv << "mu1,mu2,sigma1,sigma2,label\n" << std::setprecision(17);
  for (const auto& p : out.points) csv << p.mu1 << ',' << p.mu2 << ',' << p.sigma1 << ',' << p.sigma2 << ',' << p.label << '\n';
  svg::write_file(csv_path, csv.str());
  return out;
}

// ---------------------------------------------------------------------------
// Training curves
// ---------------------------------------------------------------------------

struct CurveRun {
  std::string name;
  std::vector<MetricsRecord> records;
};

/// Every `stride`-th record plus the last; stride 1 keeps all.
inline std::vector<std::size_t> curve_vertices(std::size_t n, std::size_t max_points) {
  std::vector<std::size_t> idx;
  if (n == 0) return idx;
  const std::size_t stride = (max_points == 0 || n <= max_points) ? 1 : (n + max_points - 1) / max_points;
  for (std::size_t i = 0; i < n; i += stride) idx.push_back(i);
  if (idx.back() != n - 1) idx.push_back(n - 1);
  return idx;
}

/// Three stacked panels (reconstruction term, AEVB KL yardstick, ELBO
/// proxy), one polyline per run. `max_points` = 0 plots every logged step.
inline void training_curves(const std::vector<CurveRun>& runs, const std::filesystem::path& out_path,
                            std::size_t max_points = 0) {
  if (runs.empty()) throw UsageError("curves: need at least one metrics file");
  struct Panel {
    const char* title;
    double MetricsRecord::*field;
  };
  const std::array<Panel, 3> panels{{{"Reconstruction log-likelihood (per batch)", &MetricsRecord::recon_term},
                                     {"AEVB KL divergence (per batch)", &MetricsRecord::aevb_kl},
                                     {"ELBO proxy (per batch)", &MetricsRecord::elbo_proxy}}};
  const double width = 760, panel_h = 220, left = 90, right = 170, top = 40, gap = 50;
  const double height = top + 3 * panel_h + 2 * gap + 40;
  std::size_t max_step = 1;
  for (const auto& r : runs)
    for (const auto& m : r.records) max_step = std::max(max_step, m.step);

  std::string s = svg::header(width, height);
  s += svg::text(width / 2, 24, "Training curves", 15, "middle");
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const double y0 = top + static_cast<double>(p) * (panel_h + gap);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& r : runs)
      for (const auto& m : r.records) {
        lo = std::min(lo, m.*(panels[p].field));
        hi = std::max(hi, m.*(panels[p].field));
      }
    if (!std::isfinite(lo)) lo = hi = 0.0;
    const svg::Scale sx{0.0, static_cast<double>(max_step), left, width - right};
    const svg::Scale sy{lo, hi, y0 + panel_h, y0 + 10};
    s += "<g class=\"panel\">\n";
    s += svg::text(left, y0 - 6, panels[p].title, 12);
    s += "<rect x=\"" + svg::num(left) + "\" y=\"" + svg::num(y0) + "\" width=\"" + svg::num(width - left - right) +
         "\" height=\"" + svg::num(panel_h) + "\" fill=\"none\" stroke=\"#444\"/>\n";
    s += svg::text(left - 6, y0 + 14, svg::num(hi), 10, "end");
    s += svg::text(left - 6, y0 + panel_h, svg::num(lo), 10, "end");
    s += svg::text(width - right, y0 + panel_h + 14, "step " + std::to_string(max_step), 10, "end");
    for (std::size_t r = 0; r < runs.size(); ++r) {
      const auto& recs = runs[r].records;
      std::string pts;
      for (std::size_t i : curve_vertices(recs.size(), max_points)) {
        if (!pts.empty()) pts += ' ';
        pts += svg::num(sx(static_cast<double>(recs[i].step))) + "," + svg::num(sy(recs[i].*(panels[p].field)));
      }
      s += "<polyline class=\"run\" data-run=\"" + svg::escape(runs[r].name) + "\" points=\"" + pts +
           "\" fill=\"none\" stroke=\"" + svg::kPalette[r % svg::kPalette.size()] + "\" stroke-width=\"1.2\"/>\n";
    }
    s += "</g>\n";
  }
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const double y = top + 10 + static_cast<double>(r) * 20;
    const double x = width - right + 16;
    s += "<g class=\"legend\">" + svg::line(x, y, x + 22, y, svg::kPalette[r % svg::kPalette.size()]);
    s += svg::text(x + 28, y + 4, runs[r].name, 12) + "</g>\n";
  }
  s += "</svg>\n";
  svg::write_file(out_path, s);
}

// ---------------------------------------------------------------------------
// Reconstruction strips
// ---------------------------------------------------------------------------

/// Maps a batch of inputs to reconstructions (decoder likelihood means).
using Reconstructor = std::function<DenseArray(const DenseArray& x)>;

/// Reconstructs from the posterior mean: decode(encode(x).mu).
inline Reconstructor posterior_mean_reconstructor(const ModelParams& params) {
  return [&params](const DenseArray& x) { return decode(params, encode(params, x).means()); };
}

namespace detail {

inline std::string waveform_panel(std::span<const double> v, double w, double h, double lo, double hi, const char* color) {
  const svg::Scale sx{0.0, static_cast<double>(v.size() - 1), 0.0, w};
  const svg::Scale sy{lo, hi, h, 0.0};
  std::string pts;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) pts += ' ';
    pts += svg::num(sx(static_cast<double>(i))) + "," + svg::num(sy(v[i]));
  }
  return "<rect x=\"0\" y=\"0\" width=\"" + svg::num(w) + "\" height=\"" + svg::num(h) +
         "\" fill=\"none\" stroke=\"#ccc\"/><polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
         "\" stroke-width=\"1\"/>";
}

inline std::string image_panel(std::span<const double> v, double cell) {
  std::string out;
  for (std::size_t r = 0; r < kMnistSide; ++r) {
    for (std::size_t c = 0; c < kMnistSide; ++c) {
      const int g = 255 - static_cast<int>(std::lround(std::clamp(v[r * kMnistSide + c], 0.0, 1.0) * 255.0));
      out += "<rect x=\"" + svg::num(static_cast<double>(c) * cell) + "\" y=\"" + svg::num(static_cast<double>(r) * cell) +
             "\" width=\"" + svg::num(cell) + "\" height=\"" + svg::num(cell) + "\" fill=\"rgb(" + std::to_string(g) + "," +
             std::to_string(g) + "," + std::to_string(g) + ")\"/>";
    }
  }
  return out;
}

}  // namespace detail

/// One row per index: input panel on the left, reconstruction on the right.
/// Sine rows are waveforms; 784-wide rows are drawn as 28x28 grayscale.
inline void recon_strip(const Dataset& data, std::span<const std::size_t> indices, const Reconstructor& reconstruct,
                        const std::filesystem::path& out_path) {
  if (indices.empty()) throw UsageError("recon: no indices given");
  for (auto i : indices) {
    if (i >= data.size()) {
      throw UsageError("recon: index " + std::to_string(i) + " out of range (dataset has " + std::to_string(data.size()) + " rows)");
    }
  }
  const std::vector<std::size_t> rows(indices.begin(), indices.end());
  const DenseArray x = data.samples.select_rows(rows);
  const DenseArray shown = data.display.select_rows(rows);
  const DenseArray y = reconstruct(x);
  if (y.shape() != x.shape()) throw ShapeError("recon_strip", shape_string(y.shape()), shape_string(x.shape()));
  const bool image = x.cols() == kMnistPixels;

  const double panel_w = image ? 112 : 300, panel_h = image ? 112 : 80, pad = 16, left = 20, top = 40;
  const double width = left + 2 * panel_w + 3 * pad;
  const double height = top + static_cast<double>(rows.size()) * (panel_h + pad) + pad;
  std::string s = svg::header(width, height);
  s += svg::text(left + panel_w / 2, 24, "input", 13, "middle");
  s += svg::text(left + pad + 1.5 * panel_w, 24, "reconstruction", 13, "middle");
  for (std::size_t r = 0; r < rows.size(); ++r) {
    double lo = 0, hi = 1;
    if (!image) {
      lo = std::min(*std::min_element(shown.row(r).begin(), shown.row(r).end()), *std::min_element(y.row(r).begin(), y.row(r).end()));
      hi = std::max(*std::max_element(shown.row(r).begin(), shown.row(r).end()), *std::max_element(y.row(r).begin(), y.row(r).end()));
    }
    const double y0 = top + static_cast<double>(r) * (panel_h + pad);
    for (int side = 0; side < 2; ++side) {
      const auto values = side == 0 ? shown.row(r) : y.row(r);
      const double x0 = left + static_cast<double>(side) * (panel_w + pad);
      s += "<g class=\"panel\" data-kind=\"" + std::string(side == 0 ? "input" : "reconstruction") + "\" data-index=\"" +
           std::to_string(rows[r]) + "\" transform=\"translate(" + svg::num(x0) + "," + svg::num(y0) + ")\">";
      s += image ? detail::image_panel(values, panel_w / static_cast<double>(kMnistSide))
                 : detail::waveform_panel(values, panel_w, panel_h, lo, hi, "#4e79a7");
      s += "</g>\n";
    }
  }
  s += "</svg>\n";
  svg::write_file(out_path, s);
}

inline void recon_strip(const ModelParams& params, const Dataset& data, std::span<const std::size_t> indices,
                        const std::filesystem::path& out_path) {
  recon_strip(data, indices, posterior_mean_reconstructor(params), out_path);
}

}  // namespace wiseale
