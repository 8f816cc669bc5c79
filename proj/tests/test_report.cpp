#include <gtest/gtest.h>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "wiseale/experiment.hpp"
#include "wiseale/report.hpp"

using namespace wiseale;
namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "wiseale_report_tests" / name;
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

pt::ptree parse_svg(const fs::path& p) {
  pt::ptree tree;
  std::ifstream is(p);
  pt::read_xml(is, tree);
  return tree;
}

// All elements with the given tag anywhere below `node`.
void collect(const pt::ptree& node, const std::string& tag, std::vector<const pt::ptree*>& out) {
  for (const auto& [key, child] : node) {
    if (key == tag) out.push_back(&child);
    collect(child, tag, out);
  }
}

std::vector<const pt::ptree*> elements(const pt::ptree& tree, const std::string& tag) {
  std::vector<const pt::ptree*> out;
  collect(tree, tag, out);
  return out;
}

std::string attr(const pt::ptree* e, const std::string& name) { return e->get<std::string>("<xmlattr>." + name); }

std::vector<std::pair<double, double>> points_of(const std::string& s) {
  std::vector<std::pair<double, double>> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    const auto comma = tok.find(',');
    out.emplace_back(std::stod(tok.substr(0, comma)), std::stod(tok.substr(comma + 1)));
  }
  return out;
}

Dataset labelled_images(std::size_t n) {
  Dataset d;
  d.samples = DenseArray::matrix(n, 784);
  for (std::size_t i = 0; i < d.samples.size(); ++i) d.samples[i] = static_cast<double>((i * 7) % 3 == 0);
  d.display = d.samples;
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<int>(i % 10));
  return d;
}

Dataset sine_set(std::size_t n, std::uint64_t seed) {
  const SineData s = generate_sine(n, seed);
  Dataset d;
  d.samples = s.samples;
  d.display = s.samples;
  d.sine = s.params;
  return d;
}

std::vector<MetricsRecord> constant_records(std::size_t n, double v) {
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({1, i + 1, v, 1.0, v - 1.0, 2.0, v - 2.0, 0.5, 0});
  return out;
}

}  // namespace

TEST(EmbedScatter, ZeroModelDrawsUnitEllipsesAtOrigin) {
  const fs::path dir = temp_dir("zero");
  const ModelParams zero = ModelParams::zeros(Architecture::mnist(2));
  const EmbeddingSummary s = embed_scatter(zero, labelled_images(80), 64, 3, dir / "e.svg", dir / "e.csv");
  ASSERT_EQ(s.points.size(), 64u);
  for (const auto& p : s.points) {
    EXPECT_EQ(p.mu1, 0.0);
    EXPECT_EQ(p.mu2, 0.0);
    EXPECT_EQ(p.sigma1, 1.0);
    EXPECT_EQ(p.sigma2, 1.0);
  }
  EXPECT_EQ(s.mean_sigma, 1.0);

  const pt::ptree tree = parse_svg(dir / "e.svg");
  const auto circles = elements(tree, "circle");
  ASSERT_EQ(circles.size(), 1u);
  const auto ellipses = elements(tree, "ellipse");
  ASSERT_EQ(ellipses.size(), 64u);
  for (const auto* e : ellipses) {
    EXPECT_EQ(attr(e, "cx"), attr(circles[0], "cx"));
    EXPECT_EQ(attr(e, "cy"), attr(circles[0], "cy"));
    EXPECT_EQ(attr(e, "rx"), attr(circles[0], "r"));
    EXPECT_EQ(attr(e, "ry"), attr(circles[0], "r"));
  }
}

TEST(EmbedScatter, CsvHasOneRowPerPointAndRoundTrips) {
  const fs::path dir = temp_dir("csv");
  const ModelParams p = init_params(Architecture::mnist(2), 5);
  const EmbeddingSummary s = embed_scatter(p, labelled_images(50), 17, 9, dir / "e.svg", dir / "e.csv");
  const auto back = read_embedding_csv(dir / "e.csv");
  EXPECT_EQ(back.size(), 17u);
  EXPECT_EQ(back, s.points);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i].label, static_cast<int>(s.rows[i] % 10));
}

TEST(EmbedScatter, DefaultsToSixtyFourPoints) { EXPECT_EQ(kDefaultScatterPoints, 64u); }

TEST(EmbedScatter, NonTwoDimensionalLatentIsUsageError) {
  const fs::path dir = temp_dir("dz");
  try {
    embed_scatter(init_params(Architecture::mnist(3), 1), labelled_images(10), 5, 1, dir / "e.svg", dir / "e.csv");
    FAIL() << "expected UsageError";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("--latent-dim 2"), std::string::npos) << e.what();
  }
}

TEST(EmbedScatter, TooManyPointsIsUsageError) {
  const fs::path dir = temp_dir("many");
  EXPECT_THROW(embed_scatter(init_params(Architecture::mnist(2), 1), labelled_images(10), 11, 1, dir / "e.svg", dir / "e.csv"),
               UsageError);
}

TEST(EmbedScatter, MalformedCsvReportsLine) {
  const fs::path dir = temp_dir("badcsv");
  std::ofstream(dir / "e.csv") << "mu1,mu2,sigma1,sigma2,label\n0,0,1,1,3\n0,x,1,1,3\n";
  try {
    read_embedding_csv(dir / "e.csv");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(TrainingCurves, ConstantMetricsGiveHorizontalLines) {
  const fs::path dir = temp_dir("flat");
  training_curves({{"aevb", constant_records(30, -5.0)}}, dir / "c.svg");
  const pt::ptree tree = parse_svg(dir / "c.svg");
  const auto lines = elements(tree, "polyline");
  ASSERT_EQ(lines.size(), 3u);
  for (const auto* l : lines) {
    const auto pts = points_of(attr(l, "points"));
    ASSERT_EQ(pts.size(), 30u);
    for (const auto& [x, y] : pts) EXPECT_EQ(y, pts.front().second);
    for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_GT(pts[i].first, pts[i - 1].first);
  }
}

TEST(TrainingCurves, TwoRunsGiveTwoLegendEntries) {
  const fs::path dir = temp_dir("two");
  training_curves({{"wise-ale", constant_records(10, 1.0)}, {"beta-vae", constant_records(10, 2.0)}}, dir / "c.svg");
  const pt::ptree tree = parse_svg(dir / "c.svg");
  std::size_t legends = 0;
  std::vector<std::string> names;
  for (const auto* g : elements(tree, "g")) {
    if (attr(g, "class") != "legend") continue;
    ++legends;
    names.push_back(g->get<std::string>("text"));
  }
  EXPECT_EQ(legends, 2u);
  EXPECT_EQ(names, (std::vector<std::string>{"wise-ale", "beta-vae"}));
  EXPECT_EQ(elements(tree, "polyline").size(), 6u);
}

TEST(TrainingCurves, VertexCountMatchesStepsOrDownsample) {
  const fs::path dir = temp_dir("verts");
  std::vector<MetricsRecord> recs;
  for (std::size_t i = 0; i < 101; ++i) recs.push_back({1, i + 1, std::sin(0.1 * i), 0, 0, static_cast<double>(i), 0, 0, 0});
  training_curves({{"aevb", recs}}, dir / "all.svg");
  const pt::ptree all = parse_svg(dir / "all.svg");
  for (const auto* l : elements(all, "polyline")) EXPECT_EQ(points_of(attr(l, "points")).size(), 101u);

  training_curves({{"aevb", recs}}, dir / "down.svg", 20);
  // stride ceil(101/20) = 6 gives rows 0,6,...,96 and the final row 100
  const pt::ptree down = parse_svg(dir / "down.svg");
  for (const auto* l : elements(down, "polyline")) EXPECT_EQ(points_of(attr(l, "points")).size(), 18u);
  EXPECT_EQ(curve_vertices(101, 20).size(), 18u);
  EXPECT_EQ(curve_vertices(5, 20).size(), 5u);
  EXPECT_EQ(curve_vertices(5, 0).size(), 5u);
}

TEST(TrainingCurves, PolylineTracksCsvValuesExactly) {
  const fs::path dir = temp_dir("values");
  std::vector<MetricsRecord> recs;
  const std::vector<double> kl{3.0, 1.0, 4.0, 1.5, 5.0};
  for (std::size_t i = 0; i < kl.size(); ++i) recs.push_back({1, i + 1, 0, 0, 0, kl[i], 0, 0, 0});
  write_metrics_csv(dir / "m.csv", recs);
  training_curves({{"run", read_metrics_csv(dir / "m.csv")}}, dir / "c.svg");
  const pt::ptree tree = parse_svg(dir / "c.svg");
  const auto lines = elements(tree, "polyline");
  const auto pts = points_of(attr(lines[1], "points"));
  ASSERT_EQ(pts.size(), kl.size());
  // y is an affine image of the value: check ratios of differences
  const double scale = (pts[2].second - pts[1].second) / (kl[2] - kl[1]);
  EXPECT_LT(scale, 0.0);
  for (std::size_t i = 0; i < kl.size(); ++i) EXPECT_NEAR(pts[i].second - pts[1].second, scale * (kl[i] - kl[1]), 2e-4);
}

TEST(TrainingCurves, NoRunsIsUsageError) { EXPECT_THROW(training_curves({}, temp_dir("none") / "c.svg"), UsageError); }

TEST(TrainingCurves, RunNamesAreEscaped) {
  const fs::path dir = temp_dir("escape");
  training_curves({{"a<b>&\"c\"", constant_records(3, 1.0)}}, dir / "c.svg");
  const pt::ptree tree = parse_svg(dir / "c.svg");
  const auto lines = elements(tree, "polyline");
  EXPECT_EQ(attr(lines[0], "data-run"), "a<b>&\"c\"");
}

TEST(ReconStrip, IdentityStubPanelsAreIdentical) {
  const fs::path dir = temp_dir("identity");
  const Dataset sine = sine_set(8, 2);
  const std::vector<std::size_t> idx{1, 5, 7};
  recon_strip(sine, idx, [](const DenseArray& x) { return x; }, dir / "r.svg");
  const pt::ptree tree = parse_svg(dir / "r.svg");
  std::map<std::string, std::map<std::string, std::string>> body;
  for (const auto* g : elements(tree, "g")) {
    pt::ptree content = *g;
    content.erase("<xmlattr>");
    std::ostringstream os;
    pt::write_xml(os, content);
    body[attr(g, "data-index")][attr(g, "data-kind")] = os.str();
  }
  ASSERT_EQ(body.size(), 3u);
  for (const auto& [index, kinds] : body) EXPECT_EQ(kinds.at("input"), kinds.at("reconstruction")) << "index " << index;
}

TEST(ReconStrip, MnistPanelCountIsTwicePerIndex) {
  const fs::path dir = temp_dir("mnist");
  const ModelParams p = init_params(Architecture::mnist(2), 4);
  const std::vector<std::size_t> idx{0, 3, 4, 9};
  recon_strip(p, labelled_images(12), idx, dir / "r.svg");
  const pt::ptree tree = parse_svg(dir / "r.svg");
  std::size_t panels = 0;
  for (const auto* g : elements(tree, "g"))
    if (attr(g, "class") == "panel") {
      ++panels;
      EXPECT_EQ(g->count("rect"), 784u);
    }
  EXPECT_EQ(panels, 8u);
}

TEST(ReconStrip, DeterministicOutput) {
  const fs::path dir = temp_dir("det");
  const ModelParams p = init_params(Architecture::sine(2, 0.3), 4);
  const Dataset d = sine_set(6, 3);
  const std::vector<std::size_t> idx{2, 0};
  recon_strip(p, d, idx, dir / "a.svg");
  recon_strip(p, d, idx, dir / "b.svg");
  EXPECT_EQ(slurp(dir / "a.svg"), slurp(dir / "b.svg"));
  EXPECT_NO_THROW(parse_svg(dir / "a.svg"));
}

TEST(ReconStrip, OutOfRangeIndexIsUsageError) {
  const fs::path dir = temp_dir("range");
  const std::vector<std::size_t> idx{0, 6};
  EXPECT_THROW(recon_strip(init_params(Architecture::sine(2, 0.3), 4), sine_set(6, 3), idx, dir / "r.svg"), UsageError);
}

TEST(Summary, FormatsOneRowPerObjective) {
  CompareRow row;
  row.objective = "aevb";
  row.eval.recon_error = 0.25;
  row.gap.gap = -3.5;
  const std::string s = format_summary({row, row});
  std::istringstream is(s);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kSummaryHeader);
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    EXPECT_EQ(line.substr(0, 10), "aevb,0.25,");
    EXPECT_EQ(line.substr(line.size() - 4), ",3.5");
  }
  EXPECT_EQ(n, 2u);
}

TEST(Compare, SmallSineRunWritesAllArtifacts) {
  const fs::path dir = temp_dir("compare");
  CompareConfig cfg;
  cfg.dataset = DatasetSpec::sine(160, 0);
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.latent_dim = 2;
  cfg.out_dir = dir;
  const auto rows = compare(cfg);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].objective, "wise-ale");
  EXPECT_EQ(rows[1].objective, "aevb");
  EXPECT_EQ(rows[2].objective, "beta-vae");
  for (const auto& r : rows) {
    EXPECT_TRUE(fs::exists(dir / r.objective / "metrics.csv"));
    EXPECT_TRUE(fs::exists(dir / r.objective / "model.ckpt"));
    EXPECT_EQ(read_metrics_csv(dir / r.objective / "metrics.csv"), r.metrics);
    EXPECT_TRUE(std::isfinite(r.gap.gap));
    EXPECT_EQ(r.final_epoch_elbo_proxy, final_epoch_mean(r.metrics, &MetricsRecord::elbo_proxy));
  }
  EXPECT_EQ(slurp(dir / "summary.csv"), format_summary(rows));
  EXPECT_NO_THROW(parse_svg(dir / "curves.svg"));
}
