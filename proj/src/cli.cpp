#include "trajdistill/cli.hpp"

#include "trajdistill/gradcheck.hpp"
#include "trajdistill/report.hpp"
#include "trajdistill/rng.hpp"
#include "trajdistill/serialize.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <map>
#include <optional>
#include <sstream>
#include <thread>

namespace trajdistill {

namespace fs = std::filesystem;

int thread_cap() {
  if (const char* env = std::getenv("TOOL_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace {

std::string fmt(double v, int prec = 6) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

void write_config_echo(const RunConfig& cfg, const fs::path& dir, nlohmann::json extra = nullptr) {
  nlohmann::json j = config_to_json(cfg);
  if (!extra.is_null()) j["resolved"] = std::move(extra);
  write_text(dir / "config.json", j.dump(2) + "\n");
}

std::vector<Trajectory> load_buffer(const fs::path& root) {
  if (root.empty()) throw ConfigError("distill.buffer: path to a buffer output directory is required");
  if (!fs::is_directory(root)) throw ConfigError("distill.buffer: " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  if (fs::exists(root / "manifest.json")) {
    dirs.push_back(root);
  } else {
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
  }
  if (dirs.empty()) throw ConfigError("distill.buffer: no trajectories under " + root.string());
  std::vector<Trajectory> out;
  for (const auto& d : dirs) {
    out.push_back(load_trajectory(d));
    if (!(out.back().spec == out.front().spec)) {
      throw ConfigError("distill.buffer: " + d.filename().string() + " uses a different model spec than " +
                        dirs.front().filename().string());
    }
  }
  return out;
}

std::vector<std::uint64_t> eval_seeds(const RunConfig& cfg) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t k : eval_seed_indices(cfg)) seeds.push_back(eval_seed(cfg, k));
  return seeds;
}

std::string run_log_csv(const std::vector<DistillLogRow>& log, std::size_t points) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,trajectory,start_epoch,nu";
  for (std::size_t i = 1; i <= points; ++i) os << ",match_loss_" << i;
  os << ",loss,alpha,grad_norm_images,grad_alpha,skipped\n";
  for (const auto& r : log) {
    os << r.iteration << ',' << r.trajectory << ',' << r.start_epoch << ',' << r.nu;
    for (std::size_t i = 0; i < points; ++i) {
      os << ',';
      if (i < r.match_losses.size()) os << r.match_losses[i];
      else os << "nan";
    }
    os << ',' << (std::isnan(r.loss) ? std::string("nan") : fmt(r.loss, 17)) << ',' << r.alpha << ','
       << r.grad_norm_images << ',' << r.grad_alpha << ',' << (r.skipped ? 1 : 0) << '\n';
  }
  return os.str();
}

nlohmann::json resolved_distill(const DistillConfig& d, const std::string& ablation) {
  return {{"ablation", ablation},
          {"expert_epochs", d.expert_epochs},
          {"student_steps", d.student_steps},
          {"max_start", d.max_start},
          {"ipc", d.ipc},
          {"beta", to_string(d.beta)},
          {"rho", d.rho},
          {"vartheta", d.vartheta},
          {"alpha0", d.alpha0},
          {"outer_iters", d.outer_iters},
          {"lr_images", d.lr_images},
          {"lr_alpha", d.lr_alpha},
          {"balance", d.balance},
          {"intermediate", d.intermediate},
          {"syn_batch", d.syn_batch},
          {"seed", d.seed}};
}

}  // namespace

void cmd_buffer(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  validate_config(cfg);
  const auto [train, test] = load_datasets(cfg);
  const ModelSpec spec = model_spec(cfg, train.sample_shape(), train.class_count);
  const SmoothnessConfig sc = smoothness(cfg);
  const ExpertOptimizer opt = expert_optimizer(cfg);
  const int n = cfg.buffer.experts;

  std::vector<std::optional<Trajectory>> trajs(static_cast<std::size_t>(n));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        trajs[static_cast<std::size_t>(i)] =
            train_expert(train, spec, sc, opt, cfg.buffer.epochs, expert_seed(cfg, i), &test);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  const int workers = std::min(n, thread_cap());
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  fs::create_directories(out_dir);
  double var_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const Trajectory& t = *trajs[static_cast<std::size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof name, "expert_%03d", i);
    save_trajectory(t, out_dir / name);
    log << "expert " << i << " epoch 0 train_acc " << fmt(t.meta.initial_train_accuracy, 4) << " test_acc "
        << fmt(t.meta.initial_test_accuracy, 4) << '\n';
    for (const auto& m : t.meta.metrics) {
      log << "expert " << i << " epoch " << m.epoch << " loss " << fmt(m.loss, 5) << " train_acc "
          << fmt(m.train_accuracy, 4) << " test_acc " << fmt(m.test_accuracy, 4) << " lr " << fmt(m.learning_rate)
          << '\n';
    }
    const double v = avg_var(t);
    var_sum += v;
    log << "expert " << i << " avg_var " << fmt(v) << '\n';
  }
  log << "avg_var mean " << fmt(var_sum / n) << " over " << n << " experts\n";
  write_config_echo(cfg, out_dir);
}

void cmd_distill(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  validate_config(cfg);
  const std::vector<Trajectory> trajs = load_buffer(cfg.distill.buffer);
  const auto [train, test] = load_datasets(cfg);
  const ModelSpec& spec = trajs.front().spec;
  if (spec.input_shape != train.sample_shape() || spec.num_classes != train.class_count) {
    throw ConfigError("data.shape: trajectories were trained on " + shape_str(spec.input_shape) + " x " +
                      std::to_string(spec.num_classes) + " classes, data provides " +
                      shape_str(train.sample_shape()) + " x " + std::to_string(train.class_count));
  }
  if (trajs.front().meta.dataset_fingerprint != fingerprint(train)) {
    log << "warning: training data fingerprint differs from the one recorded with the trajectories\n";
  }

  const DistillConfig dcfg = distill_config(cfg);
  dcfg.validate(std::min_element(trajs.begin(), trajs.end(), [](const auto& a, const auto& b) {
                  return a.epochs() < b.epochs();
                })->epochs());
  SyntheticDataset init =
      cfg.distill.init == "representative"
          ? representative_init(train, trajs.front(), dcfg.ipc, dcfg.alpha0, derive_seed(dcfg.seed, "init"))
          : baseline_random_subset(train, dcfg.ipc, derive_seed(dcfg.seed, "init"), dcfg.alpha0);

  const ModelSpec espec = eval_spec(cfg, spec);
  const EvalOptions eopt = eval_options(cfg);
  const std::vector<std::uint64_t> seeds = eval_seeds(cfg);
  std::ostringstream eval_rows;
  eval_rows.precision(17);
  auto eval_at = [&](int it, const SyntheticDataset& s) {
    const EvalReport r = evaluate(s, espec, test, seeds, eopt, "synthetic");
    eval_rows << it << ',' << r.mean << ',' << r.std << '\n';
    log << "iteration " << it << " eval accuracy " << fmt(r.mean, 4) << " +- " << fmt(r.std, 3) << '\n';
  };
  if (cfg.distill.eval_every > 0) eval_at(0, init);
  DistillObserver observer;
  if (cfg.distill.eval_every > 0) {
    observer = [&](int it, const SyntheticDataset& s) {
      if (it % cfg.distill.eval_every == 0) eval_at(it, s);
    };
  }

  const DistillResult res = run_distillation(trajs, std::move(init), dcfg, observer);

  fs::create_directories(out_dir);
  save_synthetic(res.syn, out_dir);
  const auto points = match_schedule(dcfg.student_steps, dcfg.expert_epochs, dcfg.intermediate).size();
  write_text(out_dir / "run_log.csv", run_log_csv(res.log, points));
  if (cfg.distill.eval_every > 0) {
    write_text(out_dir / "eval_log.csv", "iteration,accuracy_mean,accuracy_std\n" + eval_rows.str());
  }
  write_config_echo(cfg, out_dir, {{"distill", resolved_distill(dcfg, cfg.distill.ablate)}});

  log << "distilled " << res.syn.size() << " images (ipc " << res.syn.ipc << ") from " << trajs.size()
      << " trajectories; " << dcfg.outer_iters << " outer iterations, " << res.skipped << " skipped\n";
  if (!res.log.empty()) {
    log << "final loss " << fmt(res.log.back().loss) << " alpha " << fmt(res.syn.alpha) << '\n';
  }
  if (cfg.distill.ablate != "none") log << "ablation: " << cfg.distill.ablate << '\n';
}

void cmd_eval(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  validate_config(cfg);
  const auto [train, test] = load_datasets(cfg);
  const ModelSpec trained = model_spec(cfg, train.sample_shape(), train.class_count);
  const ModelSpec spec = eval_spec(cfg, trained);
  const EvalOptions opt = eval_options(cfg);
  const std::vector<std::uint64_t> seeds = eval_seeds(cfg);

  std::vector<EvalReport> reports;
  int ipc = cfg.distill.ipc;
  if (!cfg.eval.synthetic.empty()) {
    SyntheticDataset syn;
    try {
      syn = load_synthetic(cfg.eval.synthetic);
    } catch (const FormatError& e) {
      throw ConfigError(std::string("eval.synthetic: ") + e.what());
    }
    if (syn.sample_shape() != train.sample_shape() || syn.class_count != train.class_count) {
      throw ConfigError("eval.synthetic: synthetic samples " + shape_str(syn.sample_shape()) + " x " +
                        std::to_string(syn.class_count) + " classes do not match the data " +
                        shape_str(train.sample_shape()) + " x " + std::to_string(train.class_count));
    }
    ipc = syn.ipc;
    reports.push_back(evaluate(syn, spec, test, seeds, opt, "synthetic"));
  }
  std::stringstream bl(cfg.eval.baselines);
  std::string b;
  while (std::getline(bl, b, ',')) {
    b.erase(std::remove_if(b.begin(), b.end(), [](unsigned char c) { return std::isspace(c); }), b.end());
    if (b == "random") {
      std::vector<std::uint64_t> subset;
      for (std::uint64_t k : eval_seed_indices(cfg)) subset.push_back(derive_seed(cfg.run.seed, "subset", k));
      reports.push_back(
          evaluate_random_baseline(train, ipc, cfg.distill.alpha0, spec, test, seeds, subset, opt));
    } else if (b == "full") {
      reports.push_back(evaluate(as_synthetic(train, cfg.distill.alpha0), spec, test, seeds, opt, "full"));
    }
  }
  if (reports.empty()) {
    throw ConfigError("eval.synthetic: nothing to evaluate; set eval.synthetic or eval.baselines");
  }

  fs::create_directories(out_dir);
  nlohmann::json j = {{"format_version", 1}, {"reports", nlohmann::json::array()}};
  std::string csv;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    j["reports"].push_back(reports[i].to_json());
    csv += reports[i].to_csv(i == 0);
    const auto& r = reports[i];
    log << r.tag << " accuracy " << fmt(r.mean, 4) << " +- " << fmt(r.std, 3) << " over " << r.seeds.size()
        << " seeds";
    if (!r.diverged.empty()) log << " (" << r.diverged.size() << " diverged)";
    log << '\n';
  }
  write_text(out_dir / "report.json", j.dump(2) + "\n");
  write_text(out_dir / "report.csv", csv);
  write_config_echo(cfg, out_dir);
}

bool cmd_gradcheck(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  validate_config(cfg);
  GradcheckOptions opt;
  opt.eps = cfg.gradcheck.eps;
  opt.first_order_tol = cfg.gradcheck.first_tol;
  opt.second_order_tol = cfg.gradcheck.second_tol;
  opt.include_models = false;
  GradcheckReport rep = run_gradcheck_suite(opt);
  rep.results.push_back(check_penalty_gradient(opt.eps, opt.second_order_tol));
  for (auto& r : check_meta_gradient(opt.eps, opt.second_order_tol, cfg.gradcheck.steps)) rep.results.push_back(r);

  for (const auto& r : rep.results) {
    log << (r.passed() ? "ok   " : "FAIL ") << r.name << " rel_error " << fmt(r.rel_error, 3) << " (tol "
        << fmt(r.tolerance, 2) << ")\n";
  }
  const double sweep_eps[] = {1e-4, 1e-5, 1e-6};
  const EpsSweep sweep = eps_sweep(sweep_eps, cfg.gradcheck.steps);
  const double floor = 1e-2 * opt.second_order_tol;
  for (std::size_t i = 0; i < sweep.eps.size(); ++i)
    log << "sweep eps " << fmt(sweep.eps[i], 2) << " max rel_error " << fmt(sweep.max_error[i], 3) << '\n';
  const bool stable = sweep.stable(floor);
  log << "sweep " << (stable ? "stable" : "UNSTABLE") << " within a factor of 10 (floor " << fmt(floor, 2) << ")\n";
  const bool ok = rep.passed() && stable;
  log << "max relative error " << fmt(rep.max_rel_error(), 3) << "; " << (ok ? "all checks passed" : "FAILED")
      << '\n';

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    nlohmann::json j = {{"passed", ok}, {"max_rel_error", rep.max_rel_error()}, {"checks", nlohmann::json::array()}};
    for (const auto& r : rep.results)
      j["checks"].push_back({{"name", r.name}, {"rel_error", r.rel_error}, {"tolerance", r.tolerance}});
    j["sweep"] = {{"eps", sweep.eps}, {"max_error", sweep.max_error}, {"stable", stable}};
    write_text(out_dir / "gradcheck.json", j.dump(2) + "\n");
    write_config_echo(cfg, out_dir);
  }
  return ok;
}

void cmd_report(std::span<const fs::path> runs, const fs::path& out_dir, std::ostream& log, std::ostream& warn) {
  if (runs.empty()) throw ConfigError("report: no run directories given");
  const ReportResult res = collect_report(runs);
  for (const auto& w : res.warnings) warn << "warning: " << w << '\n';
  fs::create_directories(out_dir);
  write_text(out_dir / "report.csv", report_csv(res.rows));
  log << res.rows.size() << " rows from " << runs.size() - res.warnings.size() << " of " << runs.size()
      << " run directories\n";
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dataset distillation by expert trajectory matching", "trajdistill"};
  std::string command, config_path, out_dir;
  std::vector<std::string> runs;
  app.add_option("command", command, "buffer | distill | eval | gradcheck | report")
      ->required()
      ->check(CLI::IsMember({"buffer", "distill", "eval", "gradcheck", "report"}));
  app.add_option("runs", runs, "Run directories to merge (report)");
  app.add_option("--config", config_path, "Config file (sectioned key = value, or a config.json echo)");
  app.add_option("--out", out_dir, "Output directory");

  const auto& schema = config_schema();
  std::map<std::string, int> key_count;
  for (const auto& f : schema) ++key_count[f.key];
  std::vector<std::string> values(schema.size());
  std::vector<CLI::Option*> options;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const auto& f = schema[i];
    auto dashed = [](std::string s) {
      std::replace(s.begin(), s.end(), '_', '-');
      return s;
    };
    std::vector<std::string> names{f.path()};
    if (dashed(f.path()) != f.path()) names.push_back(dashed(f.path()));
    if (key_count[f.key] == 1) {
      names.push_back(f.key);
      if (dashed(f.key) != f.key) names.push_back(dashed(f.key));
    }
    std::string spec;
    for (const auto& n : names) spec += (spec.empty() ? "--" : ",--") + n;
    options.push_back(app.add_option(spec, values[i], f.type)->take_last()->group("Config overrides"));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    for (std::size_t i = 0; i < schema.size(); ++i)
      if (options[i]->count() > 0) set_config_value(cfg, schema[i].path(), values[i]);

    if (command != "gradcheck" && out_dir.empty()) throw ConfigError("--out: an output directory is required");
    if (command != "report" && !runs.empty()) {
      throw ConfigError("unexpected positional arguments; run directories only apply to report");
    }
    if (command == "buffer") cmd_buffer(cfg, out_dir, out);
    else if (command == "distill") cmd_distill(cfg, out_dir, out);
    else if (command == "eval") cmd_eval(cfg, out_dir, out);
    else if (command == "gradcheck") return cmd_gradcheck(cfg, out_dir, out) ? kExitOk : kExitVerification;
    else {
      std::vector<fs::path> paths(runs.begin(), runs.end());
      cmd_report(paths, out_dir, out, err);
    }
    return kExitOk;
  } catch (const TrainingAborted& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DistillAborted& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }
}

}  // namespace trajdistill
