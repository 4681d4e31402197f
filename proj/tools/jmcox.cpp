// jmcox command-line tool: simulate, fit, mc-study, compare.
// Log verbosity comes from JMCOX_LOG (0 quiet, 1 info [default], 2 debug).

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "jmcox/jmcox.hpp"

namespace fs = std::filesystem;
using namespace jmcox;

namespace {

enum Exit { ok = 0, generic = 1, usage = 2, no_convergence = 3, io = 4 };

int log_level() {
  const char* v = std::getenv("JMCOX_LOG");
  if (!v || !*v) return 1;
  return std::atoi(v);
}

template <class... Args>
void log(int level, const char* fmt, Args... args) {
  if (log_level() < level) return;
  std::fprintf(stderr, "[jmcox] ");
  if constexpr (sizeof...(Args) == 0)
    std::fputs(fmt, stderr);
  else
    std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

// A config file may hold the section directly or wrap it under `key`.
json section(const json& j, const char* key) { return j.contains(key) && j[key].is_object() ? j[key] : j; }

int cmd_simulate(const std::string& config_path, const fs::path& out) {
  json cj = read_json(config_path);
  SimConfig cfg = sim_config_from_json(section(cj, "sim"));
  SimulatedData sd = gen_dataset(cfg);
  write_text(out / "dataset.json", dataset_json_text(sd.data));
  DatasetCsv csv = dataset_csv_text(sd.data);
  write_text(out / "subjects.csv", csv.subjects);
  write_text(out / "measurements.csv", csv.measurements);
  write_text(out / "truths.csv", truths_csv_text(sd.truths));
  json manifest{{"seed", cfg.seed},
                {"config", to_json(cfg)},
                {"config_hash", config_hash(to_json(cfg))},
                {"subjects", sd.data.size()},
                {"events", sd.data.event_count()},
                {"files", {"dataset.json", "subjects.csv", "measurements.csv", "truths.csv"}}};
  write_text(out / "manifest.json", manifest.dump(1) + "\n");
  log(1, "simulated %zu subjects (%zu events) into %s", sd.data.size(), sd.data.event_count(), out.string().c_str());
  return ok;
}

int cmd_fit(const std::string& data_path, const std::string& method, const std::string& config_path,
            const fs::path& out, bool dump_atoms) {
  FitConfig cfg;
  if (!config_path.empty()) cfg = fit_config_from_json(section(read_json(config_path), "fit"));
  if (method == "lvcf" && cfg.beta_box == 0.0)
    throw validation_error("method lvcf cannot be combined with beta_box = 0 (frozen beta)");
  Dataset data = load_dataset_json(data_path);
  log(2, "loaded %zu subjects, %zu events", data.size(), data.event_count());

  if (method == "lvcf") {
    BaselineFit r = partial_lik_fit(data, CovariatePath::lvcf, cfg.beta_box);
    write_text(out / "fit.json", fit_json(r).dump(1) + "\n");
    log(1, "lvcf-cox beta = %.6f (converged: %s)", r.beta_pl, r.converged ? "yes" : "no");
    return r.converged ? ok : no_convergence;
  }

  FitResult r = em_fit(data, cfg);
  json fj = fit_json(r);
  fj["quadrature_order"] = cfg.quadrature_order;
  write_text(out / "fit.json", fj.dump(1) + "\n");
  for (const auto& w : r.warnings) log(1, "warning: %s", w.c_str());
  if (dump_atoms) write_text(out / "atoms.csv", atoms_csv_text(data, r.atoms));
  std::vector<double> band;
  for (int i = 1; i <= 10; ++i) band.push_back(data.tau * i / 10.0);
  VarianceReport v = variance_report(data, r.theta_hat, r.atoms, band);
  for (const auto& w : v.warnings) log(1, "variance warning: %s", w.c_str());
  write_text(out / "variance.json", variance_json(v).dump(1) + "\n");
  log(1, "npml beta = %.6f after %d iterations (converged: %s, score %.3g)", r.theta_hat.beta, r.iterations,
      r.converged ? "yes" : "no", r.score_norm);
  return r.converged ? ok : no_convergence;
}

int cmd_mc_study(const std::string& config_path, const std::string& out_opt) {
  StudyConfig cfg = study_config_from_json(read_json(config_path));
  fs::path out = out_opt.empty() ? fs::path(cfg.output_dir) : fs::path(out_opt);
  log(1, "study %s: %d replications, n = %zu", cfg.hash().c_str(), cfg.replications, cfg.sim.n);
  int done = 0;
  StudyReport rep = run_study(cfg, [&](const ReplicationResult& r) {
    ++done;
    for (std::size_t e = 0; e < r.fits.size(); ++e)
      if (!r.fits[e].ok) log(1, "replication %d (%s) failed: %s", r.replication, cfg.estimators[e].c_str(),
                             r.fits[e].error.c_str());
    if (done % 25 == 0) log(2, "%d / %d replications", done, cfg.replications);
  });
  write_text(out / "report.csv", report_csv_text(rep));
  write_text(out / "replications.csv", replications_csv_text(cfg, rep));
  write_text(out / "report.json", report_json(cfg, rep).dump(1) + "\n");
  std::cout << report_csv_text(rep);
  log(1, "study finished in %.1f s", rep.wall_seconds);
  if (!rep.valid) {
    log(0, "study invalid: more than 10%% of replications failed for some estimator");
    return no_convergence;
  }
  return ok;
}

int cmd_compare(const std::vector<std::string>& reports) {
  if (reports.size() != 2) throw validation_error("compare needs exactly two report files");
  ReportTable a = parse_report_csv(read_text(reports[0]), reports[0]);
  ReportTable b = parse_report_csv(read_text(reports[1]), reports[1]);
  if (a.config_hash == b.config_hash) log(1, "both reports come from the same configuration");
  std::cout << compare_reports(a, b);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint longitudinal / Cox model fitting via NPML-EM"};
  app.require_subcommand(1);

  std::string config, data, method = "npml", out;
  bool dump_atoms = false;
  std::vector<std::string> reports;

  auto* sim = app.add_subcommand("simulate", "simulate a dataset from the joint model");
  sim->add_option("--config", config, "simulation config JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", out, "output directory")->required();

  auto* fit = app.add_subcommand("fit", "fit a dataset");
  fit->add_option("--data", data, "dataset JSON")->required();
  fit->add_option("--method", method, "npml or lvcf")->check(CLI::IsMember({"npml", "lvcf"}));
  fit->add_option("--config", config, "fit config JSON");
  fit->add_option("--out", out, "output directory")->required();
  fit->add_flag("--dump-atoms", dump_atoms, "write posterior atoms per subject (npml)");

  auto* study = app.add_subcommand("mc-study", "Monte Carlo study");
  study->add_option("--config", config, "study config JSON")->required()->check(CLI::ExistingFile);
  study->add_option("--out", out, "output directory (default: output_dir from the config)");

  auto* cmp = app.add_subcommand("compare", "compare two study reports");
  cmp->add_option("--report", reports, "two report CSV files")->required()->expected(2);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*sim) return cmd_simulate(config, out);
    if (*fit) return cmd_fit(data, method, config, out, dump_atoms);
    if (*study) return cmd_mc_study(config, out);
    if (*cmp) return cmd_compare(reports);
  } catch (const validation_error& e) {
    log(0, "validation error: %s", e.what());
    return usage;
  } catch (const convergence_error& e) {
    log(0, "convergence failure: %s", e.what());
    return no_convergence;
  } catch (const io_error& e) {
    log(0, "I/O error: %s", e.what());
    return io;
  } catch (const std::exception& e) {
    log(0, "error: %s", e.what());
    return generic;
  }
  return generic;
}
