#pragma once

#include <algorithm>
#include <array>
#include <istream>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "medrag/codec.hpp"
#include "medrag/error.hpp"

namespace medrag::harness {

/// Percentages in [0, 100]; counts are with respect to the positive label.
struct MetricsReport {
  std::string label;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::uint64_t total = 0;  // all instances, including non-binary labels
};

inline double f1_score(double precision, double recall) {
  const double s = precision + recall;
  return s > 0.0 ? 2.0 * precision * recall / s : 0.0;
}

/// Precision/recall/F1 from binary counts; accuracy is `correct / total`.
inline MetricsReport metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                                         std::uint64_t tn, std::uint64_t correct,
                                         std::uint64_t total, std::string label = {}) {
  if (total == 0) throw PreconditionError("metrics: empty input");
  MetricsReport m;
  m.label = std::move(label);
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.total = total;
  m.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
  m.precision = tp + fp ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? 100.0 * static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

inline MetricsReport metrics_from_counts(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                                         std::uint64_t tn, std::string label = {}) {
  return metrics_from_counts(tp, fp, fn, tn, tp + tn, tp + fp + fn + tn, std::move(label));
}

inline MetricsReport metrics(std::span<const std::string> predictions,
                             std::span<const std::string> golds, std::string_view positive_label,
                             std::string label = {}) {
  if (predictions.size() != golds.size()) {
    throw PreconditionError("metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                            std::to_string(golds.size()) + " gold labels");
  }
  if (golds.empty()) throw PreconditionError("metrics: empty input");
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0, correct = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const bool pp = predictions[i] == positive_label;
    const bool gp = golds[i] == positive_label;
    correct += predictions[i] == golds[i];
    if (pp && gp) ++tp;
    else if (pp) ++fp;
    else if (gp) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, fn, tn, correct, golds.size(), std::move(label));
}

inline std::string fixed2(double v) { return codec::format_fixed(v, 2); }

enum class ReportFormat { markdown, csv };

namespace detail {

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string md_cell(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '|') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out;
}

}  // namespace detail

/// One row per report. The smallest rendered value in each metric column is
/// flagged: bold in Markdown, listed in the `minimum` column in CSV.
inline std::string emit_report(std::span<const MetricsReport> reports, ReportFormat format) {
  if (reports.empty()) throw PreconditionError("emit_report: no reports");
  static constexpr std::array<const char*, 4> kCols = {"accuracy", "precision", "recall", "f1"};
  auto cell = [](const MetricsReport& r, std::size_t c) {
    const double v[] = {r.accuracy, r.precision, r.recall, r.f1};
    return fixed2(v[c]);
  };
  std::array<double, 4> mins;
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 1e300;
    for (const auto& r : reports) {
      double v;
      codec::parse_double(cell(r, c), v);
      m = std::min(m, v);
    }
    mins[c] = m;
  }
  auto is_min = [&](const MetricsReport& r, std::size_t c) {
    double v;
    codec::parse_double(cell(r, c), v);
    return v == mins[c];
  };

  std::string out;
  if (format == ReportFormat::markdown) {
    out += "| Condition | Acc | Pre | Rec | F1 |\n|---|---:|---:|---:|---:|\n";
    for (const auto& r : reports) {
      out += "| " + detail::md_cell(r.label) + " |";
      for (std::size_t c = 0; c < 4; ++c) {
        out += is_min(r, c) ? " **" + cell(r, c) + "** |" : " " + cell(r, c) + " |";
      }
      out += '\n';
    }
    return out;
  }
  out += "condition,accuracy,precision,recall,f1,minimum\n";
  for (const auto& r : reports) {
    out += detail::csv_field(r.label);
    std::string flags;
    for (std::size_t c = 0; c < 4; ++c) {
      out += ',' + cell(r, c);
      if (is_min(r, c)) flags += flags.empty() ? kCols[c] : std::string(" ") + kCols[c];
    }
    out += ',' + flags + '\n';
  }
  return out;
}

namespace detail {

/// One RFC 4180 record; embedded newlines inside quotes are not supported.
inline std::vector<std::string> parse_csv_line(std::string_view line, const std::string& where) {
  std::vector<std::string> out;
  std::string cur;
  std::size_t i = 0;
  while (true) {
    cur.clear();
    if (i < line.size() && line[i] == '"') {
      ++i;
      while (true) {
        if (i >= line.size()) throw FormatError(where + ": unterminated quoted field");
        if (line[i] == '"') {
          if (i + 1 < line.size() && line[i + 1] == '"') {
            cur += '"';
            i += 2;
            continue;
          }
          ++i;
          break;
        }
        cur += line[i++];
      }
      if (i < line.size() && line[i] != ',') throw FormatError(where + ": text after closing quote");
    } else {
      while (i < line.size() && line[i] != ',') cur += line[i++];
    }
    out.push_back(cur);
    if (i >= line.size()) return out;
    ++i;  // the comma
  }
}

}  // namespace detail

/// Reads a table written by emit_report(..., csv). Counts are not carried.
inline std::vector<MetricsReport> read_report_csv(std::istream& in, const std::string& origin = "report") {
  std::string line;
  std::size_t lineno = 0;
  std::vector<MetricsReport> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto f = detail::parse_csv_line(line, where);
    if (lineno == 1) {
      if (f.size() < 5 || f[0] != "condition") throw FormatError(where + ": not a report table");
      continue;
    }
    if (f.size() != 6) throw FormatError(where + ": expected 6 fields");
    MetricsReport r;
    r.label = f[0];
    double* dst[] = {&r.accuracy, &r.precision, &r.recall, &r.f1};
    for (std::size_t c = 0; c < 4; ++c) {
      if (!codec::parse_double(f[c + 1], *dst[c])) {
        throw FormatError(where + ": bad number '" + f[c + 1] + "'");
      }
    }
    out.push_back(std::move(r));
  }
  if (lineno == 0) throw FormatError(origin + ": empty report");
  return out;
}

}  // namespace medrag::harness
