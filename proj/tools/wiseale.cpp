// wiseale: data generation, training, evaluation, figures and self-checks.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "wiseale/certify.hpp"
#include "wiseale/datasets.hpp"
#include "wiseale/experiment.hpp"
#include "wiseale/model.hpp"
#include "wiseale/report.hpp"
#include "wiseale/trainer.hpp"

namespace fs = std::filesystem;
using namespace wiseale;

namespace {

enum Exit : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kFormat = 3, kNumeric = 4, kIo = 5 };

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << "wiseale: error kind=" << kind << " message=" << quote(message) << "\n";
  return code;
}

struct DataOptions {
  std::string dataset = "sine";
  std::size_t count = 20000;
  std::uint64_t seed = 1;
  std::string mnist_dir = "data/mnist";

  void add_to(CLI::App* app, bool with_seed = true) {
    app->add_option("--dataset", dataset, "sine or mnist")->check(CLI::IsMember({"sine", "mnist"}))->capture_default_str();
    app->add_option("--count", count, "sine: waves generated; mnist: cap on training images (0 = all)")->capture_default_str();
    app->add_option("--mnist-dir", mnist_dir, "directory holding the IDX files")->capture_default_str();
    if (with_seed) app->add_option("--seed", seed, "dataset and run seed")->capture_default_str();
  }

  DatasetSpec spec() const {
    DatasetSpec s = dataset == "sine" ? DatasetSpec::sine(count, seed) : DatasetSpec::mnist(mnist_dir, count);
    s.seed = seed;
    return s;
  }
};

ObjectiveKind parse_objective(const std::string& name, CLI::Option* beta_opt, double beta) {
  if (name == "beta-vae") {
    if (beta_opt->count() == 0) throw UsageError("--objective beta-vae requires --beta");
    return ObjectiveKind::beta_vae(beta);
  }
  if (beta_opt->count() != 0) throw UsageError("--beta only applies to --objective beta-vae");
  return name == "aevb" ? ObjectiveKind::aevb() : ObjectiveKind::wise_ale();
}

const Dataset& pick_split(const DataSplit& split, const std::string& which) {
  if (which == "train" || split.eval.size() == 0) return split.train;
  return split.eval;
}

void write_resolved_config(const CLI::App* app, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  svg::write_file(out_dir / "config.txt", app->config_to_str(true, false));
}

std::vector<std::size_t> parse_indices(const std::string& text) {
  std::vector<std::size_t> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("--indices: not a non-negative integer: '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--indices: empty list");
  return out;
}

/// Splices the items of a `--config` file in front of the subcommand's own
/// flags, so that flags given on the command line win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 1; i < args.size(); ++i) {
    std::string path;
    std::size_t used = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      used = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      used = 1;
    } else {
      continue;
    }
    std::vector<std::string> spliced{"--config=" + path};
    for (const auto& item : CLI::ConfigINI().from_file(path)) {
      if (!item.parents.empty()) throw UsageError("--config: sections are not supported (" + item.fullname() + ")");
      if (item.name == "config") continue;
      for (const auto& value : item.inputs) {
        if (!value.empty()) spliced.push_back("--" + item.name + "=" + value);
      }
    }
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + used));
    args.insert(args.begin() + 1, spliced.begin(), spliced.end());
    break;
  }
  return args;
}

/// "valid subcommands: ..." at top level, else the flags of the chosen subcommand.
std::string valid_choices(CLI::App& app) {
  std::string out;
  const auto chosen = app.get_subcommands();
  if (chosen.empty()) {
    out = "valid subcommands:";
    for (const auto* sub : app.get_subcommands({})) out += " " + sub->get_name();
    return out;
  }
  out = "valid options for " + chosen.front()->get_name() + ":";
  for (const auto* opt : chosen.front()->get_options()) {
    if (opt->get_name() != "--help") out += " " + opt->get_name();
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WiSE-ALE auto-encoder: data, training, evaluation, figures and self-checks", "wiseale"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::function<int()> action;

  // gen-data -----------------------------------------------------------------
  DataOptions gen;
  std::string gen_out = "data/sine.bin";
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the sine dataset cache, or verify MNIST files");
  gen.add_to(gen_cmd);
  gen_cmd->add_option("--out", gen_out, "sine cache path (a .csv sidecar is written next to it)")->capture_default_str();
  gen_cmd->callback([&] {
    action = [&] {
      if (gen.dataset == "sine") {
        const SineData data = generate_sine(gen.count, gen.seed);
        write_sine_cache(gen_out, data);
        std::cout << "dataset=sine rows=" << data.samples.rows() << " cols=" << data.samples.cols() << " path=" << gen_out << "\n";
      } else {
        const MnistData train = load_mnist_idx(gen.mnist_dir, "train");
        std::cout << "dataset=mnist split=train rows=" << train.images.rows() << "\n";
        if (fs::exists(mnist_images_path(gen.mnist_dir, "test"))) {
          std::cout << "dataset=mnist split=test rows=" << load_mnist_idx(gen.mnist_dir, "test").images.rows() << "\n";
        }
      }
      return kOk;
    };
  });

  // train --------------------------------------------------------------------
  DataOptions tr_data;
  std::string tr_objective = "wise-ale", tr_optimizer = "adam";
  double tr_beta = 4.0, tr_lr = 1e-3, tr_sigma = kSineDecoderSigma;
  std::size_t tr_latent = 8, tr_batch = 64, tr_epochs = 20, tr_mc = 1;
  bool tr_nlogn = false;
  std::string tr_out = "runs/train";
  auto* tr_cmd = app.add_subcommand("train", "train one model");
  tr_cmd->add_option("--config", "key=value file mirroring the flags; flags override it");
  tr_data.add_to(tr_cmd);
  tr_cmd->add_option("--objective", tr_objective)->check(CLI::IsMember({"wise-ale", "aevb", "beta-vae"}))->capture_default_str();
  auto* beta_opt = tr_cmd->add_option("--beta", tr_beta, "prior weight; required for beta-vae");
  tr_cmd->add_option("--latent-dim", tr_latent)->check(CLI::PositiveNumber)->capture_default_str();
  tr_cmd->add_option("--batch-size", tr_batch)->check(CLI::PositiveNumber)->capture_default_str();
  tr_cmd->add_option("--epochs", tr_epochs)->capture_default_str();
  tr_cmd->add_option("--lr", tr_lr)->capture_default_str();
  tr_cmd->add_option("--optimizer", tr_optimizer)->check(CLI::IsMember({"adam", "sgd"}))->capture_default_str();
  tr_cmd->add_option("--sigma-dec", tr_sigma, "Gaussian decoder sigma (sine only)")->capture_default_str();
  tr_cmd->add_option("--mc-samples", tr_mc, "reparameterized draws per sample")->check(CLI::PositiveNumber)->capture_default_str();
  tr_cmd->add_flag("--nlogn-constant", tr_nlogn, "add -M log M to the WiSE-ALE objective");
  tr_cmd->add_option("--out", tr_out, "output directory")->capture_default_str();
  tr_cmd->callback([&] {
    action = [&] {
      RunConfig cfg;
      cfg.dataset = tr_data.spec();
      cfg.objective = parse_objective(tr_objective, beta_opt, tr_beta);
      cfg.objective.mc_samples = tr_mc;
      cfg.objective.include_nlogn_constant = tr_nlogn;
      cfg.arch = default_architecture(cfg.dataset, tr_latent, tr_sigma);
      cfg.optimizer.kind = tr_optimizer == "sgd" ? OptimizerConfig::Kind::kSgd : OptimizerConfig::Kind::kAdam;
      cfg.optimizer.lr = tr_lr;
      cfg.batch_size = tr_batch;
      cfg.epochs = tr_epochs;
      cfg.seed = tr_data.seed;
      cfg.out_dir = tr_out;
      cfg.validate();
      write_resolved_config(tr_cmd, tr_out);
      const DataSplit split = load_split(cfg.dataset);
      const TrainResult r = train(cfg, split.train, [&](std::size_t epoch, const std::vector<MetricsRecord>& recs) {
        std::cout << "epoch=" << epoch << " objective=" << std::setprecision(8)
                  << final_epoch_mean(recs, &MetricsRecord::objective)
                  << " elbo_proxy=" << final_epoch_mean(recs, &MetricsRecord::elbo_proxy) << "\n";
      });
      std::cout << "metrics=" << metrics_path(tr_out).string() << " checkpoint=" << checkpoint_path(tr_out).string()
                << " steps=" << r.metrics.size() << "\n";
      return kOk;
    };
  });

  // eval ---------------------------------------------------------------------
  DataOptions ev_data;
  std::string ev_ckpt, ev_split = "eval", ev_objective = "wise-ale";
  double ev_beta = 4.0;
  auto* ev_cmd = app.add_subcommand("eval", "score a checkpoint on held-out data");
  ev_cmd->add_option("--checkpoint", ev_ckpt)->required();
  ev_data.add_to(ev_cmd);
  ev_cmd->add_option("--split", ev_split)->check(CLI::IsMember({"eval", "train"}))->capture_default_str();
  ev_cmd->add_option("--objective", ev_objective, "objective whose terms are reported")
      ->check(CLI::IsMember({"wise-ale", "aevb", "beta-vae"}))
      ->capture_default_str();
  auto* ev_beta_opt = ev_cmd->add_option("--beta", ev_beta);
  ev_cmd->callback([&] {
    action = [&] {
      const ModelParams params = load_checkpoint(ev_ckpt);
      const DataSplit split = load_split(ev_data.spec());
      const Dataset& data = pick_split(split, ev_split);
      const EvalRecord r = evaluate(params, data, parse_objective(ev_objective, ev_beta_opt, ev_beta), ev_data.seed);
      std::cout << std::setprecision(17) << "count=" << r.count << " recon_error=" << r.recon_error
                << " recon_error_per_dim=" << r.recon_error_per_dim << " recon_term=" << r.recon_term
                << " prior_term=" << r.prior_term << " objective=" << r.objective << " aevb_kl=" << r.aevb_kl
                << " elbo_proxy=" << r.elbo_proxy << " mean_sigma=" << r.mean_sigma << " clamp_count=" << r.clamp_count
                << "\n";
      return kOk;
    };
  });

  // embed --------------------------------------------------------------------
  DataOptions em_data;
  em_data.dataset = "mnist";
  em_data.count = 0;
  std::string em_ckpt, em_out = "runs/embed.svg", em_split = "eval";
  std::size_t em_n = kDefaultScatterPoints;
  auto* em_cmd = app.add_subcommand("embed", "scatter 2-D posteriors as 1-sigma ellipses");
  em_cmd->add_option("--checkpoint", em_ckpt)->required();
  em_data.add_to(em_cmd);
  em_cmd->add_option("--n", em_n, "number of points")->check(CLI::PositiveNumber)->capture_default_str();
  em_cmd->add_option("--split", em_split)->check(CLI::IsMember({"eval", "train"}))->capture_default_str();
  em_cmd->add_option("--out", em_out, "SVG path; the CSV goes next to it")->capture_default_str();
  em_cmd->callback([&] {
    action = [&] {
      const ModelParams params = load_checkpoint(em_ckpt);
      const DataSplit split = load_split(em_data.spec());
      fs::path csv = em_out;
      csv.replace_extension(".csv");
      const EmbeddingSummary s = embed_scatter(params, pick_split(split, em_split), em_n, em_data.seed, em_out, csv);
      std::cout << std::setprecision(17) << "points=" << s.points.size() << " mean_sigma=" << s.mean_sigma
                << " svg=" << em_out << " csv=" << csv.string() << "\n";
      return kOk;
    };
  });

  // curves -------------------------------------------------------------------
  std::vector<std::string> cu_metrics;
  std::string cu_out = "runs/curves.svg";
  std::size_t cu_max_points = 0;
  auto* cu_cmd = app.add_subcommand("curves", "plot training curves from metrics CSVs");
  cu_cmd->add_option("--metrics", cu_metrics, "metrics.csv paths, optionally name=path")->required();
  cu_cmd->add_option("--out", cu_out)->capture_default_str();
  cu_cmd->add_option("--max-points", cu_max_points, "downsample each polyline (0 = every step)")->capture_default_str();
  cu_cmd->callback([&] {
    action = [&] {
      std::vector<CurveRun> runs;
      for (const auto& item : cu_metrics) {
        const auto eq = item.find('=');
        const fs::path path = eq == std::string::npos ? fs::path(item) : fs::path(item.substr(eq + 1));
        std::string name = eq == std::string::npos ? path.parent_path().filename().string() : item.substr(0, eq);
        if (name.empty()) name = path.stem().string();
        runs.push_back({name, read_metrics_csv(path)});
      }
      training_curves(runs, cu_out, cu_max_points);
      std::cout << "runs=" << runs.size() << " svg=" << cu_out << "\n";
      return kOk;
    };
  });

  // recon --------------------------------------------------------------------
  DataOptions rc_data;
  std::string rc_ckpt, rc_indices = "0,1,2,3", rc_out = "runs/recon.svg", rc_split = "eval";
  auto* rc_cmd = app.add_subcommand("recon", "draw inputs next to their reconstructions");
  rc_cmd->add_option("--checkpoint", rc_ckpt)->required();
  rc_data.add_to(rc_cmd);
  rc_cmd->add_option("--indices", rc_indices, "comma-separated row indices")->capture_default_str();
  rc_cmd->add_option("--split", rc_split)->check(CLI::IsMember({"eval", "train"}))->capture_default_str();
  rc_cmd->add_option("--out", rc_out)->capture_default_str();
  rc_cmd->callback([&] {
    action = [&] {
      const ModelParams params = load_checkpoint(rc_ckpt);
      const DataSplit split = load_split(rc_data.spec());
      const auto idx = parse_indices(rc_indices);
      recon_strip(params, pick_split(split, rc_split), idx, rc_out);
      std::cout << "rows=" << idx.size() << " svg=" << rc_out << "\n";
      return kOk;
    };
  });

  // check-grad ---------------------------------------------------------------
  std::uint64_t cg_seed = 7;
  double cg_tol = 1e-4;
  auto* cg_cmd = app.add_subcommand("check-grad", "finite-difference check of every objective's gradient");
  cg_cmd->add_option("--seed", cg_seed)->capture_default_str();
  cg_cmd->add_option("--tolerance", cg_tol)->capture_default_str();
  cg_cmd->callback([&] {
    action = [&] {
      GradCheckOptions opt;
      opt.tolerance = cg_tol;
      bool ok = true;
      std::cout << "objective,likelihood,coordinates,max_rel_error,status\n";
      for (const auto& e : check_grad_suite(cg_seed, opt)) {
        ok = ok && e.report.passed();
        std::cout << e.objective << ',' << e.likelihood << ',' << e.report.checked << ',' << std::scientific
                  << std::setprecision(3) << e.report.max_rel_error << std::defaultfloat << ','
                  << (e.report.passed() ? "pass" : "FAIL") << "\n";
      }
      return ok ? kOk : kCheckFailed;
    };
  });

  // check-kl -----------------------------------------------------------------
  std::size_t ck_trials = 100, ck_samples = 100000;
  std::uint64_t ck_seed = 7;
  auto* ck_cmd = app.add_subcommand("check-kl", "Monte-Carlo certification of the KL upper bound");
  ck_cmd->add_option("--trials", ck_trials)->check(CLI::PositiveNumber)->capture_default_str();
  ck_cmd->add_option("--samples", ck_samples)->check(CLI::Range(std::size_t{1000}, std::size_t{100000000}))->capture_default_str();
  ck_cmd->add_option("--seed", ck_seed)->capture_default_str();
  ck_cmd->callback([&] {
    action = [&] {
      const KlSuiteResult r = check_kl_suite(ck_trials, ck_samples, ck_seed);
      std::cout << "trial,M,d_z,upper_bound,mc_estimate,mc_stderr,status\n" << std::setprecision(10);
      for (std::size_t t = 0; t < r.trials.size(); ++t) {
        const auto& k = r.trials[t];
        std::cout << t << ',' << k.batch << ',' << k.dim << ',' << k.upper_bound << ',' << k.mc.estimate << ','
                  << k.mc.std_error << ',' << (k.passed ? "pass" : "FAIL") << "\n";
      }
      std::cout << "passed=" << r.passed_count << "/" << r.trials.size() << " required=" << r.required() << "\n";
      return r.passed() ? kOk : kCheckFailed;
    };
  });

  // compare ------------------------------------------------------------------
  DataOptions cm_data;
  std::size_t cm_epochs = 20, cm_latent = 8, cm_batch = 64;
  double cm_beta = 4.0, cm_sigma = kSineDecoderSigma;
  std::string cm_out = "runs/compare";
  auto* cm_cmd = app.add_subcommand("compare", "train all three objectives on one dataset and seed");
  cm_cmd->add_option("--config", "key=value file mirroring the flags; flags override it");
  cm_data.add_to(cm_cmd);
  cm_cmd->add_option("--epochs", cm_epochs)->capture_default_str();
  cm_cmd->add_option("--latent-dim", cm_latent)->check(CLI::PositiveNumber)->capture_default_str();
  cm_cmd->add_option("--batch-size", cm_batch)->check(CLI::PositiveNumber)->capture_default_str();
  cm_cmd->add_option("--beta", cm_beta, "beta of the beta-VAE run")->capture_default_str();
  cm_cmd->add_option("--sigma-dec", cm_sigma, "Gaussian decoder sigma (sine only)")->capture_default_str();
  cm_cmd->add_option("--out", cm_out)->capture_default_str();
  cm_cmd->callback([&] {
    action = [&] {
      CompareConfig cfg;
      cfg.dataset = cm_data.spec();
      cfg.seed = cm_data.seed;
      cfg.epochs = cm_epochs;
      cfg.latent_dim = cm_latent;
      cfg.batch_size = cm_batch;
      cfg.beta = cm_beta;
      cfg.sine_sigma = cm_sigma;
      cfg.out_dir = cm_out;
      write_resolved_config(cm_cmd, cm_out);
      const auto rows = compare(cfg);
      std::cout << format_summary(rows);
      return kOk;
    };
  });

  try {
    std::vector<std::string> args = expand_config({argv + 1, argv + argc});
    std::reverse(args.begin(), args.end());
    app.parse(args);
    return action ? action() : kOk;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", std::string(e.what()) + "; " + valid_choices(app), kUsage);
  } catch (const UsageError& e) {
    return fail("usage", e.what(), kUsage);
  } catch (const FormatError& e) {
    return fail("format", e.what(), kFormat);
  } catch (const NumericError& e) {
    return fail("numeric", e.what(), kNumeric);
  } catch (const std::exception& e) {
    return fail("io", e.what(), kIo);
  }
}
