#pragma once

// Monte Carlo study: replicate simulate -> fit for each estimator and
// summarize bias, spread, standard errors, Wald coverage and hazard error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "jmcox/baseline_cox.hpp"
#include "jmcox/errors.hpp"
#include "jmcox/io.hpp"
#include "jmcox/npml_fit.hpp"
#include "jmcox/simulate.hpp"
#include "jmcox/variance.hpp"

namespace jmcox {

struct StudyConfig {
  SimConfig sim;
  FitConfig fit;
  int replications = 300;
  std::vector<std::string> estimators{"npml", "lvcf"};
  double ci_level = 0.95;
  std::string output_dir = "study_out";
  int threads = 0;  // 0: hardware concurrency
  int lambda_grid_points = 50;

  void validate() const {
    sim.validate();
    fit.validate();
    if (replications < 1) throw validation_error("study: replications must be >= 1");
    if (!(ci_level > 0.0 && ci_level < 1.0)) throw validation_error("study: ci_level must be in (0, 1)");
    if (estimators.empty()) throw validation_error("study: no estimators requested");
    for (const auto& e : estimators)
      if (e != "npml" && e != "lvcf") throw validation_error("study: unknown estimator '" + e + "'");
    for (std::size_t i = 0; i < estimators.size(); ++i)
      for (std::size_t k = i + 1; k < estimators.size(); ++k)
        if (estimators[i] == estimators[k]) throw validation_error("study: duplicate estimator '" + estimators[i] + "'");
    if (threads < 0) throw validation_error("study: threads must be >= 0");
    if (lambda_grid_points < 1) throw validation_error("study: lambda_grid_points must be >= 1");
  }

  // Everything that determines the numbers in the report.
  json canonical() const {
    return json{{"sim", to_json(sim)},
                {"fit", to_json(fit)},
                {"replications", replications},
                {"estimators", estimators},
                {"ci_level", ci_level},
                {"lambda_grid_points", lambda_grid_points}};
  }
  std::string hash() const { return config_hash(canonical()); }
};

inline StudyConfig study_config_from_json(const json& j) {
  check_keys(j, {"sim", "fit", "replications", "estimators", "ci_level", "output_dir", "threads", "lambda_grid_points"},
             "study config");
  StudyConfig c;
  if (j.contains("sim")) c.sim = sim_config_from_json(j["sim"]);
  if (j.contains("fit")) c.fit = fit_config_from_json(j["fit"]);
  c.replications = get_field<int>(j, "replications", c.replications);
  c.estimators = get_field<std::vector<std::string>>(j, "estimators", c.estimators);
  c.ci_level = get_field<double>(j, "ci_level", c.ci_level);
  c.output_dir = get_field<std::string>(j, "output_dir", c.output_dir);
  c.threads = get_field<int>(j, "threads", c.threads);
  c.lambda_grid_points = get_field<int>(j, "lambda_grid_points", c.lambda_grid_points);
  c.validate();
  return c;
}

// One estimator on one replication.
struct ReplicationFit {
  bool ok = false;
  bool converged = false;
  double beta_hat = 0.0;
  double se_simple = 0.0;
  std::optional<double> se_full;
  double lambda_sup_err = 0.0;
  std::string error;
};

struct ReplicationResult {
  int replication = 0;
  std::size_t events = 0;
  std::vector<ReplicationFit> fits;  // aligned with StudyConfig::estimators
};

// sup over t_i = tau * i / m, i = 1..m, of |Lambda_hat(t_i) - lambda0 t_i|.
inline double lambda_sup_error(const SieveHazard& h, double lambda0, double tau, int points) {
  double e = 0.0;
  for (int i = 1; i <= points; ++i) {
    double t = tau * static_cast<double>(i) / points;
    e = std::max(e, std::abs(h(t) - lambda0 * t));
  }
  return e;
}

inline ReplicationFit fit_npml(const Dataset& d, const StudyConfig& cfg) {
  ReplicationFit f;
  FitResult r = em_fit(d, cfg.fit);
  f.converged = r.converged;
  f.beta_hat = r.theta_hat.beta;
  f.lambda_sup_err = lambda_sup_error(r.theta_hat.hazard, cfg.sim.lambda0, cfg.sim.tau, cfg.lambda_grid_points);
  double n = static_cast<double>(d.size());
  f.se_simple = std::sqrt(var_beta_simple(d, r.theta_hat, r.atoms) / n);
  DiscretizedOperator op = build_sigma_hat(d, r.theta_hat, r.atoms);
  try {
    SigmaInverse inv(op);
    Probe g = beta_probe(op.events());
    double v = var_form(inv, op, g, g);
    if (v > 0.0) f.se_full = std::sqrt(v / n);
  } catch (const singular_operator_error&) {
    // full-inversion SE unavailable; the simple one still counts
  }
  f.ok = f.converged;
  if (!f.converged) f.error = "not converged";
  return f;
}

inline ReplicationFit fit_lvcf(const Dataset& d, const StudyConfig& cfg) {
  ReplicationFit f;
  BaselineFit r = partial_lik_fit(d, CovariatePath::lvcf, cfg.fit.beta_box > 0.0 ? cfg.fit.beta_box : 10.0);
  f.converged = r.converged;
  f.beta_hat = r.beta_pl;
  f.lambda_sup_err = lambda_sup_error(r.breslow, cfg.sim.lambda0, cfg.sim.tau, cfg.lambda_grid_points);
  if (r.information > 0.0) {
    f.se_simple = std::sqrt(1.0 / r.information);
    f.se_full = f.se_simple;
  }
  f.ok = f.converged && r.information > 0.0;
  if (!f.ok) f.error = r.boundary ? "beta on the box boundary" : "not converged";
  return f;
}

inline ReplicationResult run_replication(const StudyConfig& cfg, int r) {
  ReplicationResult out;
  out.replication = r;
  SimConfig sc = cfg.sim;
  sc.seed = derive_seed(cfg.sim.seed, static_cast<std::uint64_t>(r));
  SimulatedData sd = gen_dataset(sc);
  out.events = sd.data.event_count();
  for (const auto& est : cfg.estimators) {
    ReplicationFit f;
    try {
      if (sd.data.event_count() == 0) throw validation_error("no events in replication");
      f = est == "npml" ? fit_npml(sd.data, cfg) : fit_lvcf(sd.data, cfg);
    } catch (const std::exception& e) {
      f = ReplicationFit{};
      f.error = e.what();
    }
    out.fits.push_back(std::move(f));
  }
  return out;
}

struct StudyRow {
  std::string estimator;
  std::size_t n = 0;
  int replications = 0;
  int successes = 0;
  int failures = 0;
  double convergence_rate = 0.0;
  double mean_beta = 0.0;
  double mean_bias = 0.0;
  double emp_sd = 0.0;
  double rmse = 0.0;
  double mean_se_simple = 0.0;
  double mean_se_full = 0.0;
  double coverage_simple = 0.0;
  double coverage_full = 0.0;
  double mean_lambda_sup_err = 0.0;
  bool valid = true;
  std::string config_hash;
};

struct StudyReport {
  std::vector<StudyRow> rows;
  std::vector<ReplicationResult> replications;
  std::string config_hash;
  double wall_seconds = 0.0;
  bool valid = true;
};

inline StudyRow summarize(const StudyConfig& cfg, const std::vector<ReplicationResult>& reps, std::size_t e) {
  StudyRow row;
  row.estimator = cfg.estimators[e];
  row.n = cfg.sim.n;
  row.replications = cfg.replications;
  row.config_hash = cfg.hash();
  const double zq = normal_quantile(0.5 + cfg.ci_level / 2.0);
  const double beta0 = cfg.sim.beta0;
  std::vector<double> beta;
  double se_s = 0, se_f = 0, lam = 0;
  int hit_s = 0, hit_f = 0, n_full = 0, conv = 0;
  for (const auto& rep : reps) {
    const ReplicationFit& f = rep.fits[e];
    if (f.converged) ++conv;
    if (!f.ok) {
      ++row.failures;
      continue;
    }
    beta.push_back(f.beta_hat);
    se_s += f.se_simple;
    if (std::abs(f.beta_hat - beta0) <= zq * f.se_simple) ++hit_s;
    if (f.se_full) {
      ++n_full;
      se_f += *f.se_full;
      if (std::abs(f.beta_hat - beta0) <= zq * *f.se_full) ++hit_f;
    }
    lam += f.lambda_sup_err;
  }
  row.successes = static_cast<int>(beta.size());
  row.convergence_rate = static_cast<double>(conv) / static_cast<double>(reps.size());
  row.valid = row.failures * 10 <= cfg.replications;
  if (beta.empty()) {
    row.valid = false;
    return row;
  }
  const double m = static_cast<double>(beta.size());
  double sum = 0, sq = 0, mse = 0;
  for (double b : beta) sum += b;
  row.mean_beta = sum / m;
  for (double b : beta) {
    sq += (b - row.mean_beta) * (b - row.mean_beta);
    mse += (b - beta0) * (b - beta0);
  }
  row.mean_bias = row.mean_beta - beta0;
  row.emp_sd = beta.size() > 1 ? std::sqrt(sq / (m - 1)) : 0.0;
  row.rmse = std::sqrt(mse / m);
  row.mean_se_simple = se_s / m;
  row.coverage_simple = hit_s / m;
  row.mean_se_full = n_full ? se_f / n_full : std::nan("");
  row.coverage_full = n_full ? static_cast<double>(hit_f) / n_full : std::nan("");
  row.mean_lambda_sup_err = lam / m;
  return row;
}

// Replications run on worker threads into fixed slots; aggregation is in
// replication order, so the report does not depend on scheduling.
template <class Progress = std::nullptr_t>
StudyReport run_study(const StudyConfig& cfg, Progress progress = nullptr) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  const int R = cfg.replications;
  std::vector<ReplicationResult> slots(static_cast<std::size_t>(R));
  int workers = cfg.threads > 0 ? cfg.threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::min(workers, R);
  std::atomic<int> next{0};
  std::mutex progress_mu;
  auto work = [&] {
    for (int r; (r = next.fetch_add(1)) < R;) {
      slots[static_cast<std::size_t>(r)] = run_replication(cfg, r);
      if constexpr (!std::is_same_v<Progress, std::nullptr_t>) {
        std::lock_guard<std::mutex> lock(progress_mu);
        progress(slots[static_cast<std::size_t>(r)]);
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  StudyReport rep;
  rep.config_hash = cfg.hash();
  for (std::size_t e = 0; e < cfg.estimators.size(); ++e) {
    rep.rows.push_back(summarize(cfg, slots, e));
    rep.valid = rep.valid && rep.rows.back().valid;
  }
  rep.replications = std::move(slots);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline constexpr const char* report_header =
    "estimator,n,replications,successes,failures,convergence_rate,mean_beta,mean_bias,emp_sd,rmse,mean_se_simple,"
    "mean_se_full,coverage_simple,coverage_full,mean_lambda_sup_err,valid,config_hash";

// Deterministic summary table (no timing columns).
inline std::string report_csv_text(const StudyReport& rep) {
  std::string out = std::string(report_header) + "\n";
  for (const auto& r : rep.rows) {
    out += r.estimator + "," + std::to_string(r.n) + "," + std::to_string(r.replications) + "," +
           std::to_string(r.successes) + "," + std::to_string(r.failures) + "," + format_double(r.convergence_rate) +
           "," + format_double(r.mean_beta) + "," + format_double(r.mean_bias) + "," + format_double(r.emp_sd) + "," +
           format_double(r.rmse) + "," + format_double(r.mean_se_simple) + "," + format_double(r.mean_se_full) + "," +
           format_double(r.coverage_simple) + "," + format_double(r.coverage_full) + "," +
           format_double(r.mean_lambda_sup_err) + "," + (r.valid ? "1" : "0") + "," + r.config_hash + "\n";
  }
  return out;
}

inline std::string replications_csv_text(const StudyConfig& cfg, const StudyReport& rep) {
  std::string out = "replication,estimator,events,ok,converged,beta_hat,se_simple,se_full,lambda_sup_err,error\n";
  for (const auto& r : rep.replications)
    for (std::size_t e = 0; e < r.fits.size(); ++e) {
      const auto& f = r.fits[e];
      std::string err = f.error;
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out += std::to_string(r.replication) + "," + cfg.estimators[e] + "," + std::to_string(r.events) + "," +
             (f.ok ? "1" : "0") + "," + (f.converged ? "1" : "0") + "," + format_double(f.beta_hat) + "," +
             format_double(f.se_simple) + "," + (f.se_full ? format_double(*f.se_full) : std::string("nan")) + "," +
             format_double(f.lambda_sup_err) + "," + err + "\n";
    }
  return out;
}

inline json report_json(const StudyConfig& cfg, const StudyReport& rep) {
  json rows = json::array();
  for (const auto& r : rep.rows) {
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    rows.push_back(json{{"estimator", r.estimator},
                        {"n", r.n},
                        {"replications", r.replications},
                        {"successes", r.successes},
                        {"failures", r.failures},
                        {"convergence_rate", r.convergence_rate},
                        {"mean_beta", r.mean_beta},
                        {"mean_bias", r.mean_bias},
                        {"emp_sd", r.emp_sd},
                        {"rmse", r.rmse},
                        {"mean_se_simple", r.mean_se_simple},
                        {"mean_se_full", num(r.mean_se_full)},
                        {"coverage_simple", r.coverage_simple},
                        {"coverage_full", num(r.coverage_full)},
                        {"mean_lambda_sup_err", r.mean_lambda_sup_err},
                        {"valid", r.valid},
                        {"config_hash", r.config_hash}});
  }
  return json{{"config", cfg.canonical()},
              {"config_hash", rep.config_hash},
              {"valid", rep.valid},
              {"wall_seconds", rep.wall_seconds},
              {"rows", std::move(rows)}};
}

// Rows of a report CSV keyed by column name. Refuses files mixing config hashes.
struct ReportTable {
  std::vector<std::string> columns;
  std::vector<std::map<std::string, std::string>> rows;
  std::string config_hash;
};

inline ReportTable parse_report_csv(const std::string& text, const std::string& what) {
  ReportTable t;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw validation_error(what + ": empty report");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  {
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) t.columns.push_back(c);
  }
  if (std::find(t.columns.begin(), t.columns.end(), "config_hash") == t.columns.end() ||
      std::find(t.columns.begin(), t.columns.end(), "estimator") == t.columns.end())
    throw validation_error(what + ": not a study report (missing estimator/config_hash columns)");
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    if (cells.size() != t.columns.size()) throw validation_error(what + ": ragged row");
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < cells.size(); ++i) row[t.columns[i]] = cells[i];
    if (t.config_hash.empty()) t.config_hash = row["config_hash"];
    if (row["config_hash"] != t.config_hash)
      throw validation_error(what + ": rows from different configurations (config hash " + t.config_hash + " vs " +
                             row["config_hash"] + ")");
    t.rows.push_back(std::move(row));
  }
  return t;
}

// Side-by-side table of the numeric columns shared by two reports.
inline std::string compare_reports(const ReportTable& a, const ReportTable& b) {
  static const char* metrics[] = {"mean_bias", "emp_sd", "rmse", "mean_se_simple", "mean_se_full", "coverage_simple",
                                  "coverage_full", "mean_lambda_sup_err", "convergence_rate"};
  std::string out = "estimator,metric,a,b,b_over_a\n";
  for (const auto& ra : a.rows) {
    for (const auto& rb : b.rows) {
      if (rb.at("estimator") != ra.at("estimator")) continue;
      for (const char* m : metrics) {
        if (!ra.count(m) || !rb.count(m)) continue;
        double va = detail::to_double(ra.at(m), "report a"), vb = detail::to_double(rb.at(m), "report b");
        out += ra.at("estimator") + "," + m + "," + format_double(va) + "," + format_double(vb) + "," +
               format_double(vb / va) + "\n";
      }
    }
  }
  return out;
}

}  // namespace jmcox
