#pragma once

#include <charconv>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retrieval.hpp"
#include "training.hpp"

namespace nr {

inline constexpr char kSweepCsvHeader[] = "ratio,pool_size,mrr,hit1,hit5,hit10";
inline constexpr char kSummaryLabel[] = "mean±std";
inline constexpr char kPlusMinus[] = "±";

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const MetricsReport& m) {
  return {{"mask_ratio", m.mask_ratio}, {"pool_size", m.pool_size}, {"n_queries", m.n_queries},
          {"mrr", m.mrr},               {"hit1", m.hit1},           {"hit5", m.hit5},
          {"hit10", m.hit10}};
}

inline nlohmann::json to_json(const MetricSummary& s) { return {{"mean", s.mean}, {"std", s.std}}; }

inline nlohmann::json to_json(const SweepReport& r) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : r.levels) levels.push_back(to_json(l));
  return {{"label", r.label},
          {"levels", levels},
          {"summary",
           {{"mrr", to_json(r.mrr)}, {"hit1", to_json(r.hit1)}, {"hit5", to_json(r.hit5)}, {"hit10", to_json(r.hit10)}}}};
}

inline SweepReport sweep_from_json(const nlohmann::json& j) {
  try {
    std::vector<MetricsReport> levels;
    for (const auto& l : j.at("levels")) {
      MetricsReport m;
      m.mask_ratio = l.at("mask_ratio").get<double>();
      m.pool_size = l.at("pool_size").get<std::size_t>();
      m.n_queries = l.value("n_queries", std::size_t{0});
      m.mrr = l.at("mrr").get<double>();
      m.hit1 = l.at("hit1").get<double>();
      m.hit5 = l.at("hit5").get<double>();
      m.hit10 = l.at("hit10").get<double>();
      levels.push_back(m);
    }
    return make_sweep_report(j.value("label", std::string{}), std::move(levels));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad sweep report: ") + e.what(), 0);
  }
}

/// JSON has no infinities; non-finite values are written as strings.
inline nlohmann::json json_number(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

inline nlohmann::json to_json(const std::vector<MetricComparison>& cmp) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : cmp) {
    out.push_back({{"metric", c.metric}, {"t", json_number(c.test.t)}, {"df", c.test.df}, {"p", c.test.p}, {"significant", c.significant}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

/// One row per ratio plus a "mean±std" summary row. Numbers are written in their
/// shortest round-trip form, so parse_sweep_csv recovers them exactly.
inline std::string sweep_csv(const SweepReport& r) {
  std::string out = std::string(kSweepCsvHeader) + "\n";
  for (const auto& l : r.levels) {
    out += format_number(l.mask_ratio) + "," + std::to_string(l.pool_size) + "," + format_number(l.mrr) + "," +
           format_number(l.hit1) + "," + format_number(l.hit5) + "," + format_number(l.hit10) + "\n";
  }
  auto cell = [](const MetricSummary& s) { return format_number(s.mean) + kPlusMinus + format_number(s.std); };
  out += std::string(kSummaryLabel) + ",," + cell(r.mrr) + "," + cell(r.hit1) + "," + cell(r.hit5) + "," +
         cell(r.hit10) + "\n";
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline double parse_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("line " + std::to_string(line) + ": '" + s + "' is not a number", 0);
  }
  return v;
}

inline std::size_t parse_size(const std::string& s, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("line " + std::to_string(line) + ": '" + s + "' is not a count", 0);
  }
  return v;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

/// Inverse of sweep_csv. The summary row, when present, must agree with the
/// recomputed summary. n_queries is not part of the CSV and reads back as 0.
inline SweepReport parse_sweep_csv(const std::string& text, std::string label = {}) {
  const auto lines = detail::lines_of(text);
  if (lines.empty() || lines[0] != kSweepCsvHeader) {
    throw FormatError(std::string("sweep CSV must start with header \"") + kSweepCsvHeader + "\"", 0);
  }
  std::vector<MetricsReport> levels;
  std::string summary;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = detail::split_csv_line(lines[i]);
    if (cells.size() != 6) throw FormatError("line " + std::to_string(i + 1) + ": expected 6 fields", 0);
    if (cells[0] == kSummaryLabel) {
      summary = lines[i];
      continue;
    }
    MetricsReport m;
    m.mask_ratio = detail::parse_double(cells[0], i + 1);
    m.pool_size = detail::parse_size(cells[1], i + 1);
    m.mrr = detail::parse_double(cells[2], i + 1);
    m.hit1 = detail::parse_double(cells[3], i + 1);
    m.hit5 = detail::parse_double(cells[4], i + 1);
    m.hit10 = detail::parse_double(cells[5], i + 1);
    levels.push_back(m);
  }
  auto report = make_sweep_report(std::move(label), std::move(levels));
  if (!summary.empty()) {
    const auto expect = detail::lines_of(sweep_csv(report)).back();
    if (summary != expect) throw FormatError("summary row does not match the per-ratio rows", 0);
  }
  return report;
}

inline std::string comparison_csv(const std::vector<MetricComparison>& cmp) {
  std::string out = "metric,t,df,p,significant\n";
  for (const auto& c : cmp) {
    out += c.metric + "," + format_number(c.test.t) + "," + std::to_string(c.test.df) + "," + format_number(c.test.p) +
           "," + (c.significant ? "1" : "0") + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Results table: one row per (training, pooling, eval data), cells as
// mean±std over masking levels, and combined-vs-individual significance.

struct Table2Row {
  std::string training;   // "individual", "combined", "text", "random"
  std::string pooling;    // pooling name, "bm25" or "noise"
  std::string eval_data;  // "auditory", "visual" or "-"
  SweepReport sweep;
};

struct Table2Test {
  std::string pooling;
  std::string eval_data;
  MetricComparison comparison;  // combined minus individual
  bool combined_better = false;  // significant and t > 0
};

struct Table2Report {
  std::vector<Table2Row> rows;
  std::vector<Table2Test> tests;
};

inline std::string fixed3(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 3);
  return std::string(buf, ptr);
}

/// Adds the significance tests for every (pooling, eval data) that has both an
/// individual and a combined row.
inline void add_significance(Table2Report& t, double alpha = 0.05) {
  t.tests.clear();
  for (const auto& comb : t.rows) {
    if (comb.training != "combined") continue;
    for (const auto& ind : t.rows) {
      if (ind.training != "individual" || ind.pooling != comb.pooling || ind.eval_data != comb.eval_data) continue;
      for (auto& c : compare_sweeps(comb.sweep, ind.sweep, alpha)) {
        const bool better = c.significant && c.test.t > 0.0;
        t.tests.push_back({comb.pooling, comb.eval_data, std::move(c), better});
      }
    }
  }
}

inline bool flagged(const Table2Report& t, const Table2Row& row, const std::string& metric) {
  if (row.training != "combined") return false;
  for (const auto& test : t.tests) {
    if (test.pooling == row.pooling && test.eval_data == row.eval_data && test.comparison.metric == metric) {
      return test.combined_better;
    }
  }
  return false;
}

/// Cells "mean±std" to three decimals; a trailing '*' marks a combined cell that
/// is significantly better than its individual counterpart.
inline std::string table2_csv(const Table2Report& t) {
  std::string out = "training,pooling,eval_data,mrr,hit1,hit5,hit10\n";
  for (const auto& row : t.rows) {
    out += row.training + "," + row.pooling + "," + row.eval_data;
    const MetricSummary* cells[] = {&row.sweep.mrr, &row.sweep.hit1, &row.sweep.hit5, &row.sweep.hit10};
    for (std::size_t m = 0; m < 4; ++m) {
      out += "," + fixed3(cells[m]->mean) + kPlusMinus + fixed3(cells[m]->std);
      if (flagged(t, row, kMetricNames[m])) out += "*";
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::json to_json(const Table2Report& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"training", r.training}, {"pooling", r.pooling}, {"eval_data", r.eval_data}, {"sweep", to_json(r.sweep)}});
  }
  nlohmann::json tests = nlohmann::json::array();
  for (const auto& s : t.tests) {
    tests.push_back({{"pooling", s.pooling},
                     {"eval_data", s.eval_data},
                     {"metric", s.comparison.metric},
                     {"t", json_number(s.comparison.test.t)},
                     {"df", s.comparison.test.df},
                     {"p", s.comparison.test.p},
                     {"significant", s.comparison.significant},
                     {"combined_better", s.combined_better}});
  }
  return {{"rows", rows},
          {"tests", tests},
          {"pairing", "paired t-test over masking levels, combined minus individual, two-sided, alpha 0.05"}};
}

}  // namespace nr
