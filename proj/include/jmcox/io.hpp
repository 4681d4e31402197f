#pragma once

// File formats: dataset (JSON, or subjects + measurements CSV), truths CSV,
// fit and variance JSON, and config parsing for simulation and fitting.
// Doubles in JSON use shortest round-trip decimal form, so reading back gives
// the identical bits; CSV uses %.17g for the same reason.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "jmcox/baseline_cox.hpp"
#include "jmcox/errors.hpp"
#include "jmcox/model.hpp"
#include "jmcox/npml_fit.hpp"
#include "jmcox/simulate.hpp"
#include "jmcox/variance.hpp"

namespace jmcox {

using json = nlohmann::json;

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw io_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw io_error("read failed: " + p.string());
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
    if (ec) throw io_error("cannot create directory " + p.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + p.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw io_error("write failed: " + p.string());
}

inline json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw validation_error(what + ": malformed JSON: " + e.what());
  }
}

inline json read_json(const std::filesystem::path& p) { return parse_json(read_text(p), p.string()); }

// Field access that reports the key on type errors.
template <class T>
T get_field(const json& j, const char* key) {
  if (!j.contains(key)) throw validation_error(std::string("missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw validation_error(std::string("bad field '") + key + "': " + e.what());
  }
}

template <class T>
T get_field(const json& j, const char* key, T fallback) {
  return j.contains(key) ? get_field<T>(j, key) : fallback;
}

// ---- transition parameters

inline json to_json(const TransitionParams& p) {
  return json{{"mu0", p.mu0}, {"s0sq", p.s0sq}, {"a", p.a}, {"b", p.b}, {"ssq", p.ssq}};
}

inline TransitionParams alpha_from_json(const json& j) {
  return {get_field<double>(j, "mu0"), get_field<double>(j, "s0sq"), get_field<double>(j, "a"),
          get_field<double>(j, "b"), get_field<double>(j, "ssq")};
}

// ---- dataset

inline json to_json(const Dataset& d) {
  json subs = json::array();
  for (const auto& s : d.subjects) {
    json r{{"id", s.id}, {"x", s.x}, {"delta", s.delta}, {"z", s.z}};
    if (s.terminal) r["terminal"] = *s.terminal;
    subs.push_back(std::move(r));
  }
  return json{{"tau", d.tau}, {"grid", d.grid.times}, {"subjects", std::move(subs)}};
}

inline Dataset dataset_from_json(const json& j, ValidationOptions opt = {}) {
  Dataset d;
  d.tau = get_field<double>(j, "tau");
  d.grid.times = get_field<std::vector<double>>(j, "grid");
  if (!j.contains("subjects") || !j["subjects"].is_array()) throw validation_error("dataset: 'subjects' must be an array");
  for (const auto& r : j["subjects"]) {
    Subject s;
    s.id = get_field<subject_id>(r, "id");
    s.x = get_field<double>(r, "x");
    s.delta = get_field<int>(r, "delta");
    s.z = get_field<std::vector<double>>(r, "z");
    if (r.contains("terminal")) s.terminal = get_field<double>(r, "terminal");
    d.subjects.push_back(std::move(s));
  }
  d.validate(opt);
  return d;
}

inline std::string dataset_json_text(const Dataset& d) { return to_json(d).dump(1) + "\n"; }

inline Dataset load_dataset_json(const std::filesystem::path& p, ValidationOptions opt = {}) {
  return dataset_from_json(read_json(p), opt);
}

// CSV pair: subjects (id,x,delta) and measurements (id,measure_index,value).
// A terminal value is stored as measure_index a_x + 1.
struct DatasetCsv {
  std::string subjects;
  std::string measurements;
};

inline DatasetCsv dataset_csv_text(const Dataset& d) {
  DatasetCsv out;
  out.subjects = "id,x,delta\n";
  out.measurements = "id,measure_index,value\n";
  for (const auto& s : d.subjects) {
    out.subjects += std::to_string(s.id) + "," + format_double(s.x) + "," + std::to_string(s.delta) + "\n";
    for (std::size_t k = 0; k < s.z.size(); ++k)
      out.measurements += std::to_string(s.id) + "," + std::to_string(k) + "," + format_double(s.z[k]) + "\n";
    if (s.terminal)
      out.measurements +=
          std::to_string(s.id) + "," + std::to_string(s.z.size()) + "," + format_double(*s.terminal) + "\n";
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<std::string>> parse_csv(const std::string& text, const std::string& header,
                                                       const std::string& what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw validation_error(what + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != header) throw validation_error(what + ": expected header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double to_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw validation_error(what + ": not a number: '" + s + "'");
  }
  if (pos != s.size()) throw validation_error(what + ": trailing characters in '" + s + "'");
  return v;
}

inline long long to_int(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw validation_error(what + ": not an integer: '" + s + "'");
  }
  if (pos != s.size()) throw validation_error(what + ": trailing characters in '" + s + "'");
  return v;
}

}  // namespace detail

// Grid and tau are not part of the CSV pair and come from the caller.
inline Dataset dataset_from_csv(const std::string& subjects_csv, const std::string& measurements_csv,
                                const MeasurementGrid& grid, double tau, ValidationOptions opt = {}) {
  Dataset d;
  d.grid = grid;
  d.tau = tau;
  std::map<subject_id, std::size_t> index;
  for (const auto& r : detail::parse_csv(subjects_csv, "id,x,delta", "subjects csv")) {
    if (r.size() != 3) throw validation_error("subjects csv: expected 3 columns");
    Subject s;
    s.id = detail::to_int(r[0], "subjects csv");
    s.x = detail::to_double(r[1], "subjects csv");
    s.delta = static_cast<int>(detail::to_int(r[2], "subjects csv"));
    if (!index.emplace(s.id, d.subjects.size()).second)
      throw validation_error("subjects csv: duplicate id " + std::to_string(s.id));
    d.subjects.push_back(std::move(s));
  }
  std::map<subject_id, std::map<long long, double>> values;
  for (const auto& r : detail::parse_csv(measurements_csv, "id,measure_index,value", "measurements csv")) {
    if (r.size() != 3) throw validation_error("measurements csv: expected 3 columns");
    subject_id id = detail::to_int(r[0], "measurements csv");
    long long k = detail::to_int(r[1], "measurements csv");
    if (!index.count(id)) throw validation_error("measurements csv: unknown id " + std::to_string(id));
    if (k < 0 || !values[id].emplace(k, detail::to_double(r[2], "measurements csv")).second)
      throw validation_error("measurements csv: bad or duplicate index for id " + std::to_string(id));
  }
  for (auto& s : d.subjects) {
    if (!(s.x > 0.0)) throw validation_error("subject " + std::to_string(s.id) + ": x must be positive");
    std::size_t count = last_index(std::min(s.x, tau), grid) + 1;
    const auto& m = values[s.id];
    for (std::size_t k = 0; k < count; ++k) {
      auto it = m.find(static_cast<long long>(k));
      if (it == m.end())
        throw validation_error("subject " + std::to_string(s.id) + ": missing measurement " + std::to_string(k));
      s.z.push_back(it->second);
    }
    auto term = m.find(static_cast<long long>(count));
    if (term != m.end()) s.terminal = term->second;
    if (m.size() != s.z.size() + (s.terminal ? 1 : 0))
      throw validation_error("subject " + std::to_string(s.id) + ": measurement indices beyond the follow-up time");
  }
  d.validate(opt);
  return d;
}

// ---- truths

inline std::string truths_csv_text(const std::vector<SimTruth>& truths) {
  std::string out = "id,latent_z,T,C\n";
  for (const auto& t : truths)
    out += std::to_string(t.id) + "," + format_double(t.latent_z) + "," + format_double(t.event_time) + "," +
           format_double(t.censor_time) + "\n";
  return out;
}

// ---- hazard and fits

inline json to_json(const SieveHazard& h) { return json{{"times", h.times()}, {"jumps", h.jumps()}}; }

inline SieveHazard hazard_from_json(const json& j) {
  return SieveHazard(get_field<std::vector<double>>(j, "times"), get_field<std::vector<double>>(j, "jumps"));
}

inline json fit_json(const FitResult& r) {
  return json{{"method", "npml"},
              {"alpha", to_json(r.theta_hat.alpha)},
              {"beta", r.theta_hat.beta},
              {"hazard", to_json(r.theta_hat.hazard)},
              {"loglik_trace", r.loglik_trace},
              {"loglik", r.loglik_trace.empty() ? 0.0 : r.loglik_trace.back()},
              {"iterations", r.iterations},
              {"converged", r.converged},
              {"score_norm", r.score_norm},
              {"warnings", r.warnings}};
}

inline json fit_json(const BaselineFit& r) {
  return json{{"method", "lvcf-cox"},
              {"beta", r.beta_pl},
              {"hazard", to_json(r.breslow)},
              {"log_partial_lik", r.log_partial_lik},
              {"iterations", r.iterations},
              {"converged", r.converged},
              {"score_norm", std::abs(r.score)},
              {"information", r.information},
              {"flat", r.flat},
              {"boundary", r.boundary}};
}

// Parameters of an npml fit JSON document.
inline Theta theta_from_fit_json(const json& j) {
  if (get_field<std::string>(j, "method") != "npml") throw validation_error("fit JSON is not an npml fit");
  Theta t;
  t.alpha = alpha_from_json(j.at("alpha"));
  t.beta = get_field<double>(j, "beta");
  t.hazard = hazard_from_json(j.at("hazard"));
  return t;
}

inline json variance_json(const VarianceReport& v) {
  json band = json::array();
  for (auto [t, var] : v.lambda_band) band.push_back(json::array({t, var}));
  json out{{"var_beta_simple", v.var_beta_simple},
           {"var_beta_full", v.var_beta_full ? json(*v.var_beta_full) : json(nullptr)},
           {"var_alpha", v.var_alpha},
           {"lambda_band", std::move(band)},
           {"cond_B", std::isfinite(v.cond_B) ? json(v.cond_B) : json(nullptr)},
           {"warnings", v.warnings}};
  return out;
}

inline std::string atoms_csv_text(const Dataset& d, const std::vector<PosteriorAtoms>& atoms) {
  std::string out = "id,node,weight\n";
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t q = 0; q < atoms[i].size(); ++q)
      out += std::to_string(d.subjects[i].id) + "," + format_double(atoms[i].nodes[q]) + "," +
             format_double(atoms[i].weights[q]) + "\n";
  return out;
}

// ---- configs

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& what) {
  if (!j.is_object()) throw validation_error(what + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw validation_error(what + ": unknown key '" + it.key() + "'");
  }
}

inline SimConfig sim_config_from_json(const json& j) {
  check_keys(j, {"n", "grid_step", "tau", "alpha0", "beta0", "lambda0", "censor_rate", "seed", "truncation"},
             "sim config");
  SimConfig c;
  long long n = get_field<long long>(j, "n", static_cast<long long>(c.n));
  if (n < 1) throw validation_error("sim: n must be >= 1");
  c.n = static_cast<std::size_t>(n);
  c.grid_step = get_field<double>(j, "grid_step", c.grid_step);
  c.tau = get_field<double>(j, "tau", c.tau);
  if (j.contains("alpha0")) c.alpha0 = alpha_from_json(j["alpha0"]);
  c.beta0 = get_field<double>(j, "beta0", c.beta0);
  c.lambda0 = get_field<double>(j, "lambda0", c.lambda0);
  c.censor_rate = get_field<double>(j, "censor_rate", c.censor_rate);
  c.seed = get_field<std::uint64_t>(j, "seed", c.seed);
  if (j.contains("truncation")) {
    c.truncation.enabled = true;
    c.truncation.c = get_field<double>(j, "truncation");
  }
  c.validate();
  return c;
}

inline json to_json(const SimConfig& c) {
  json j{{"n", c.n},           {"grid_step", c.grid_step},     {"tau", c.tau},   {"alpha0", to_json(c.alpha0)},
         {"beta0", c.beta0},   {"lambda0", c.lambda0},         {"censor_rate", c.censor_rate},
         {"seed", c.seed}};
  if (c.truncation.enabled) j["truncation"] = c.truncation.c;
  return j;
}

inline FitConfig fit_config_from_json(const json& j) {
  check_keys(j,
             {"quadrature_order", "max_iter", "tol_param", "tol_score", "inner_cycles", "beta_box", "step_halving_max",
              "fixed_alpha", "alpha_box"},
             "fit config");
  FitConfig c;
  c.quadrature_order = get_field<int>(j, "quadrature_order", c.quadrature_order);
  c.max_iter = get_field<int>(j, "max_iter", c.max_iter);
  c.tol_param = get_field<double>(j, "tol_param", c.tol_param);
  c.tol_score = get_field<double>(j, "tol_score", c.tol_score);
  c.inner_cycles = get_field<int>(j, "inner_cycles", c.inner_cycles);
  c.beta_box = get_field<double>(j, "beta_box", c.beta_box);
  c.step_halving_max = get_field<int>(j, "step_halving_max", c.step_halving_max);
  if (j.contains("fixed_alpha")) c.fixed_alpha = alpha_from_json(j["fixed_alpha"]);
  if (j.contains("alpha_box")) {
    const json& b = j["alpha_box"];
    check_keys(b, {"lo", "hi", "var_floor"}, "alpha_box");
    if (b.contains("lo")) c.alpha_box.lo = alpha_from_json(b["lo"]).to_array();
    if (b.contains("hi")) c.alpha_box.hi = alpha_from_json(b["hi"]).to_array();
    c.alpha_box.var_floor = get_field<double>(b, "var_floor", c.alpha_box.var_floor);
  }
  c.validate();
  return c;
}

inline json to_json(const FitConfig& c) {
  json j{{"quadrature_order", c.quadrature_order},
         {"max_iter", c.max_iter},
         {"tol_param", c.tol_param},
         {"tol_score", c.tol_score},
         {"inner_cycles", c.inner_cycles},
         {"beta_box", c.beta_box},
         {"step_halving_max", c.step_halving_max},
         {"alpha_box", {{"lo", to_json(TransitionParams::from_array(c.alpha_box.lo))},
                        {"hi", to_json(TransitionParams::from_array(c.alpha_box.hi))},
                        {"var_floor", c.alpha_box.var_floor}}}};
  if (c.fixed_alpha) j["fixed_alpha"] = to_json(*c.fixed_alpha);
  return j;
}

// FNV-1a over the canonical (sorted-key, compact) JSON text.
inline std::string config_hash(const json& canonical) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

}  // namespace jmcox
