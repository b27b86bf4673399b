#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "bitrl/report.hpp"

namespace bitrl {
namespace {

std::vector<UpdateMetrics> ramp(std::size_t n, double offset) {
  std::vector<UpdateMetrics> out;
  for (std::size_t i = 1; i <= n; ++i) {
    UpdateMetrics m;
    m.step = i * 100;
    m.entropy = offset + static_cast<double>(i);
    m.value_loss = 2.0 * static_cast<double>(i);
    m.grad_norm = static_cast<double>(i % 3);
    out.push_back(m);
  }
  return out;
}

TEST(Report, SingleRunHasZeroSpread) {
  const RunSummary s = summarize_run(ramp(10, 0.0), {{1000, 42.0, 1.0, {}}}, "a");
  for (const auto& row : aggregate({s})) {
    if (row.value.n == 0) continue;
    EXPECT_EQ(row.value.std, 0.0) << row.label;
  }
  EXPECT_EQ(aggregate({s})[0].value.mean, 42.0);
}

TEST(Report, PhaseWindows) {
  // Steps 100..1000: fractions 0.1..1.0. Initial holds 0.1, 0.2; middle 0.5, 0.6; final 0.9, 1.0.
  const RunSummary s = summarize_run(ramp(10, 0.0), {});
  EXPECT_EQ(s.phases[0].updates, 2u);
  EXPECT_DOUBLE_EQ(s.phases[0].entropy, 1.5);
  EXPECT_EQ(s.phases[1].updates, 2u);
  EXPECT_DOUBLE_EQ(s.phases[1].entropy, 5.5);
  EXPECT_DOUBLE_EQ(s.phases[1].value_loss, 11.0);
  EXPECT_EQ(s.phases[2].updates, 2u);
  EXPECT_DOUBLE_EQ(s.phases[2].entropy, 9.5);
  // grad norms in the final window: 9 % 3 = 0, 10 % 3 = 1; population variance 0.25.
  EXPECT_DOUBLE_EQ(s.phases[2].grad_variance, 0.25);
  EXPECT_TRUE(std::isnan(s.final_eval));
}

TEST(Report, FailedUpdatesAreExcludedAndCounted) {
  auto u = ramp(10, 0.0);
  u[9].failed = true;
  u[9].entropy = NAN;
  const RunSummary s = summarize_run(u, {});
  EXPECT_EQ(s.failed_updates, 1u);
  EXPECT_EQ(s.phases[2].updates, 1u);
  EXPECT_DOUBLE_EQ(s.phases[2].entropy, 9.0);
}

TEST(Report, MeanStdAcrossRuns) {
  std::vector<RunSummary> runs;
  const std::vector<double> finals{10.0, 20.0, 60.0};
  for (std::size_t i = 0; i < finals.size(); ++i) {
    runs.push_back(summarize_run(ramp(10, static_cast<double>(i)), {{500, 0.0, 0.0, {}}, {1000, finals[i], 0.0, {}}}));
  }
  const auto rows = aggregate(runs);
  EXPECT_DOUBLE_EQ(rows[0].value.mean, 30.0);
  EXPECT_NEAR(rows[0].value.std, std::sqrt((400.0 + 100.0 + 900.0) / 3.0), 1e-12);
  EXPECT_EQ(rows[0].value.n, 3u);
  EXPECT_DOUBLE_EQ(rows[1].value.mean, 30.0);  // best equals final here
  EXPECT_DOUBLE_EQ(rows[2].value.mean, 2.5);   // initial entropy: 1.5, 2.5, 3.5
  EXPECT_NEAR(rows[2].value.std, std::sqrt(2.0 / 3.0), 1e-12);
  EXPECT_EQ(rows.size(), 2u + 3u * 3u);
  EXPECT_NE(format_table(rows).find("final eval return"), std::string::npos);
  EXPECT_EQ(to_json(rows).size(), rows.size());
}

TEST(Report, NonFiniteValuesAreSkipped) {
  const MeanStd m = mean_std({1.0, NAN, 3.0, INFINITY});
  EXPECT_EQ(m.n, 2u);
  EXPECT_DOUBLE_EQ(m.mean, 2.0);
  EXPECT_DOUBLE_EQ(m.std, 1.0);
  const MeanStd e = mean_std({NAN});
  EXPECT_EQ(e.n, 0u);
  EXPECT_TRUE(to_json(std::vector<ReportRow>{{"x", e}})[0]["mean"].is_null());
}

TEST(Report, Errors) {
  EXPECT_THROW(summarize_run({}, {}), Error);
  EXPECT_THROW(aggregate({}), Error);
  EXPECT_THROW(load_run_summary("/nonexistent/run"), Error);
}

TEST(Report, LoadsRunDirectory) {
  const auto dir = std::filesystem::temp_directory_path() / "bitrl_report_test";
  std::filesystem::remove_all(dir);
  TrainResult r;
  r.updates = ramp(5, 0.0);
  r.updates[2].mean_return = 12.5;
  r.evals = {{300, 7.0, 1.0, {6.0, 8.0}}, {500, 9.0, 0.0, {9.0}}};
  write_run(r, dir.string());
  const RunSummary s = load_run_summary(dir.string());
  const RunSummary direct = summarize_run(r.updates, r.evals, dir.string());
  EXPECT_EQ(s.final_eval, 9.0);
  EXPECT_EQ(s.best_eval, 9.0);
  for (std::size_t p = 0; p < 3; ++p) {
    EXPECT_EQ(s.phases[p].updates, direct.phases[p].updates);
    EXPECT_EQ(s.phases[p].entropy, direct.phases[p].entropy);
  }
  {
    std::ofstream bad(dir / "evals.jsonl", std::ios::app);
    bad << "{not json\n";
  }
  try {
    load_run_summary(dir.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace bitrl
