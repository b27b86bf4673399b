#pragma once

// Aggregation of training runs into per-phase summaries: entropy, value loss
// and gradient-norm variance over the 0-20%, 40-60% and 80-100% windows of
// training, plus final and best evaluation returns, as mean +- std over runs.

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"

#include "bitrl/error.hpp"
#include "bitrl/ppo.hpp"

namespace bitrl {

struct PhaseWindow {
  const char* name;
  double lo, hi;  // fraction of training, (lo, hi]; lo = 0 includes 0
};

inline constexpr std::array<PhaseWindow, 3> kPhases{{{"initial", 0.0, 0.2}, {"middle", 0.4, 0.6}, {"final", 0.8, 1.0}}};

struct PhaseStats {
  double entropy = std::numeric_limits<double>::quiet_NaN();
  double value_loss = std::numeric_limits<double>::quiet_NaN();
  double grad_variance = std::numeric_limits<double>::quiet_NaN();
  std::size_t updates = 0;
};

struct RunSummary {
  std::string name;
  std::array<PhaseStats, 3> phases;
  double final_eval = std::numeric_limits<double>::quiet_NaN();
  double best_eval = std::numeric_limits<double>::quiet_NaN();
  std::size_t failed_updates = 0;
};

inline RunSummary summarize_run(const std::vector<UpdateMetrics>& updates, const std::vector<EvalResult>& evals,
                                std::string name = {}) {
  RunSummary s;
  s.name = std::move(name);
  if (updates.empty()) throw Error(ErrorKind::invalid_argument, "report: run has no updates");
  const double total = static_cast<double>(updates.back().step);
  for (std::size_t p = 0; p < kPhases.size(); ++p) {
    std::vector<double> ent, vl, gn;
    for (const auto& m : updates) {
      const double f = static_cast<double>(m.step) / total;
      const bool in = (f > kPhases[p].lo || (kPhases[p].lo == 0.0 && f >= 0.0)) && f <= kPhases[p].hi;
      if (!in || m.failed) continue;
      ent.push_back(m.entropy);
      vl.push_back(m.value_loss);
      gn.push_back(m.grad_norm);
    }
    PhaseStats& st = s.phases[p];
    st.updates = ent.size();
    if (!ent.empty()) {
      st.entropy = mean(ent);
      st.value_loss = mean(vl);
      const double sd = stddev(gn);
      st.grad_variance = sd * sd;
    }
  }
  for (const auto& m : updates) s.failed_updates += m.failed ? 1 : 0;
  if (!evals.empty()) {
    s.final_eval = evals.back().mean;
    s.best_eval = evals.front().mean;
    for (const auto& e : evals) s.best_eval = std::max(s.best_eval, e.mean);
  }
  return s;
}

namespace detail {

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::format, path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace detail

inline RunSummary load_run_summary(const std::string& dir) {
  std::vector<UpdateMetrics> updates;
  std::vector<EvalResult> evals;
  try {
    for (const auto& j : detail::read_jsonl(dir + "/metrics.jsonl")) updates.push_back(metrics_from_json(j));
    for (const auto& j : detail::read_jsonl(dir + "/evals.jsonl")) {
      EvalResult e;
      e.step = j.at("step").get<std::size_t>();
      e.mean = j.at("mean_return").get<double>();
      e.std = j.at("std_return").get<double>();
      evals.push_back(e);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, dir + ": " + e.what());
  }
  return summarize_run(updates, evals, dir);
}

struct MeanStd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;  // runs contributing (finite values only)
};

// Population standard deviation, so a single run reports 0.
inline MeanStd mean_std(const std::vector<double>& values) {
  std::vector<double> v;
  for (double x : values) {
    if (std::isfinite(x)) v.push_back(x);
  }
  MeanStd r;
  r.n = v.size();
  if (!v.empty()) {
    r.mean = mean(v);
    r.std = stddev(v);
  }
  return r;
}

struct ReportRow {
  std::string label;
  MeanStd value;
};

inline std::vector<ReportRow> aggregate(const std::vector<RunSummary>& runs) {
  if (runs.empty()) throw Error(ErrorKind::invalid_argument, "report: no runs");
  std::vector<ReportRow> rows;
  auto col = [&](auto get) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(get(r));
    return mean_std(v);
  };
  rows.push_back({"final eval return", col([](const RunSummary& r) { return r.final_eval; })});
  rows.push_back({"best eval return", col([](const RunSummary& r) { return r.best_eval; })});
  for (std::size_t p = 0; p < kPhases.size(); ++p) {
    const std::string ph = kPhases[p].name;
    rows.push_back({ph + " entropy", col([p](const RunSummary& r) { return r.phases[p].entropy; })});
    rows.push_back({ph + " value loss", col([p](const RunSummary& r) { return r.phases[p].value_loss; })});
    rows.push_back({ph + " grad-norm variance", col([p](const RunSummary& r) { return r.phases[p].grad_variance; })});
  }
  return rows;
}

inline std::string format_table(const std::vector<ReportRow>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-28s %14s %14s %5s\n", "metric", "mean", "std", "runs");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-28s %14.6g %14.6g %5zu\n", r.label.c_str(), r.value.mean, r.value.std, r.value.n);
    out += buf;
  }
  return out;
}

inline nlohmann::ordered_json to_json(const std::vector<ReportRow>& rows) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json e;
    e["metric"] = r.label;
    if (r.value.n > 0) {
      e["mean"] = r.value.mean;
      e["std"] = r.value.std;
    } else {
      e["mean"] = nullptr;
      e["std"] = nullptr;
    }
    e["runs"] = r.value.n;
    j.push_back(e);
  }
  return j;
}

}  // namespace bitrl
