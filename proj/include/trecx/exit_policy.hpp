#pragma once

// Confidence-threshold exit policy over cached per-sample head outputs. Every
// aggregate is derived from exact integer counters so results do not depend on
// record order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace trecx {

enum class Exit { Early, Final };

inline const char* to_string(Exit e) { return e == Exit::Early ? "early" : "final"; }

// FLOPs spent by a sample leaving at either exit (C_E-e and C_E-f).
struct ExitCosts {
  std::uint64_t early = 0;
  std::uint64_t final = 0;
  std::uint64_t of(Exit e) const { return e == Exit::Early ? early : final; }
};

struct EvalRecord {
  std::uint64_t id = 0;
  int label = 0;
  std::vector<double> ee;  // early-exit softmax
  std::vector<double> ef;  // final-exit softmax
  ExitCosts costs;

  const std::vector<double>& head(Exit e) const { return e == Exit::Early ? ee : ef; }
};

struct ExitDecision {
  Exit exit = Exit::Final;
  int label = 0;
  double confidence = 0;
  std::uint64_t cost = 0;
};

// Index of the largest entry; ties go to the lowest index.
inline int argmax(const std::vector<double>& p) {
  int best = 0;
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i] > p[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

inline double max_value(const std::vector<double>& p) { return p[static_cast<std::size_t>(argmax(p))]; }

// Throws std::invalid_argument unless both heads have k entries summing to 1 within 1e-6.
inline void validate(const EvalRecord& r) {
  const auto fail = [&](const std::string& why) {
    throw std::invalid_argument("record " + std::to_string(r.id) + ": " + why);
  };
  if (r.ee.empty() || r.ee.size() != r.ef.size()) fail("heads must be non-empty and of equal length");
  if (r.label < 0 || static_cast<std::size_t>(r.label) >= r.ee.size()) fail("label out of range");
  for (const auto* h : {&r.ee, &r.ef}) {
    double s = 0;
    for (double v : *h) {
      if (!std::isfinite(v) || v < 0) fail("softmax entries must be finite and non-negative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) fail("softmax does not sum to 1");
  }
}

// Exits early iff max(softmax_Ee) >= rho. rho > 1 forces the final exit.
inline ExitDecision decide(const EvalRecord& r, double rho) {
  ExitDecision d;
  const double conf_ee = max_value(r.ee);
  d.exit = conf_ee >= rho ? Exit::Early : Exit::Final;
  const auto& p = r.head(d.exit);
  d.label = argmax(p);
  d.confidence = max_value(p);
  d.cost = r.costs.of(d.exit);
  return d;
}

// Counters behind the policy metrics: N_e/N_f correct samples, eta_e/eta_f exits taken.
struct ExitCounts {
  std::uint64_t correct_early = 0, correct_final = 0;
  std::uint64_t exits_early = 0, exits_final = 0;
  std::uint64_t cost_sum = 0;

  std::uint64_t total() const { return exits_early + exits_final; }
  double accuracy() const { return static_cast<double>(correct_early + correct_final) / static_cast<double>(total()); }
  double ee_rate() const { return static_cast<double>(exits_early) / static_cast<double>(total()); }
  double mean_flops() const { return static_cast<double>(cost_sum) / static_cast<double>(total()); }
};

inline ExitCounts count_exits(const std::vector<EvalRecord>& records, double rho) {
  if (records.empty()) throw std::invalid_argument("exit policy: empty record set");
  ExitCounts c;
  for (const auto& r : records) {
    const auto d = decide(r, rho);
    const bool ok = d.label == r.label;
    if (d.exit == Exit::Early) {
      ++c.exits_early;
      c.correct_early += ok;
    } else {
      ++c.exits_final;
      c.correct_final += ok;
    }
    c.cost_sum += d.cost;
  }
  return c;
}

inline double total_accuracy(const std::vector<EvalRecord>& records, double rho) {
  return count_exits(records, rho).accuracy();
}
inline double ee_rate(const std::vector<EvalRecord>& records, double rho) { return count_exits(records, rho).ee_rate(); }
inline double mean_flops(const std::vector<EvalRecord>& records, double rho) {
  return count_exits(records, rho).mean_flops();
}

inline double standalone_accuracy(const std::vector<EvalRecord>& records, Exit head) {
  if (records.empty()) throw std::invalid_argument("standalone_accuracy: empty record set");
  std::uint64_t correct = 0;
  for (const auto& r : records) correct += argmax(r.head(head)) == r.label;
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

struct OverthinkingReport {
  std::uint64_t early_correct_final_wrong = 0;
  std::uint64_t early_wrong_final_correct = 0;
  std::uint64_t both_correct = 0;
  std::uint64_t both_wrong = 0;
  std::uint64_t total() const {
    return early_correct_final_wrong + early_wrong_final_correct + both_correct + both_wrong;
  }
};

inline OverthinkingReport overthinking_report(const std::vector<EvalRecord>& records) {
  OverthinkingReport rep;
  for (const auto& r : records) {
    const bool e = argmax(r.ee) == r.label, f = argmax(r.ef) == r.label;
    if (e && !f) ++rep.early_correct_final_wrong;
    else if (!e && f) ++rep.early_wrong_final_correct;
    else if (e) ++rep.both_correct;
    else ++rep.both_wrong;
  }
  return rep;
}

struct ConfidenceBand {
  double lo = 0.65, hi = 0.9;  // half-open [lo, hi)
};

struct ConfidenceDistribution {
  std::vector<double> values;  // in record order
  std::size_t count = 0;
  double q1 = std::numeric_limits<double>::quiet_NaN();
  double median = std::numeric_limits<double>::quiet_NaN();
  double q3 = std::numeric_limits<double>::quiet_NaN();
};

// Quantile by linear interpolation between order statistics of a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

inline ConfidenceDistribution confidence_distribution(const std::vector<EvalRecord>& records, Exit head,
                                                      ConfidenceBand band = {}) {
  ConfidenceDistribution d;
  for (const auto& r : records) {
    const double c = max_value(r.head(head));
    if (c >= band.lo && c < band.hi) d.values.push_back(c);
  }
  d.count = d.values.size();
  auto sorted = d.values;
  std::sort(sorted.begin(), sorted.end());
  d.q1 = quantile_sorted(sorted, 0.25);
  d.median = quantile_sorted(sorted, 0.5);
  d.q3 = quantile_sorted(sorted, 0.75);
  return d;
}

// Nine significant digits, the precision of every CSV writer.
inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_records_csv(std::ostream& out, const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("write_records_csv: no records");
  const std::size_t k = records.front().ee.size();
  out << "id,label,k";
  for (std::size_t i = 0; i < k; ++i) out << ",ee_p" << i;
  for (std::size_t i = 0; i < k; ++i) out << ",ef_p" << i;
  out << '\n';
  for (const auto& r : records) {
    if (r.ee.size() != k || r.ef.size() != k) throw std::invalid_argument("write_records_csv: ragged class count");
    out << r.id << ',' << r.label << ',' << k;
    for (double v : r.ee) out << ',' << format_g9(v);
    for (double v : r.ef) out << ',' << format_g9(v);
    out << '\n';
  }
}

class CsvError : public std::runtime_error {
 public:
  CsvError(const std::string& origin, std::size_t line, const std::string& what)
      : std::runtime_error(origin + ":" + std::to_string(line) + ": " + what) {}
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_double(const std::string& s, const std::string& origin, std::size_t line) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw CsvError(origin, line, "not a number: '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& origin, std::size_t line) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    throw CsvError(origin, line, "not a non-negative integer: '" + s + "'");
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw CsvError(origin, line, "integer out of range: '" + s + "'");
  }
}

}  // namespace detail

// Parses the records CSV written by write_records_csv. Costs are left at zero.
inline std::vector<EvalRecord> read_records_csv(std::istream& in, const std::string& origin = "records") {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw CsvError(origin, lineno, "empty file");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 5 || header[0] != "id" || header[1] != "label" || header[2] != "k" || (header.size() - 3) % 2)
    throw CsvError(origin, lineno, "bad header");
  const std::size_t k = (header.size() - 3) / 2;
  for (std::size_t i = 0; i < k; ++i)
    if (header[3 + i] != "ee_p" + std::to_string(i) || header[3 + k + i] != "ef_p" + std::to_string(i))
      throw CsvError(origin, lineno, "bad header column '" + header[3 + i] + "'");

  std::vector<EvalRecord> records;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw CsvError(origin, lineno,
                     "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    EvalRecord r;
    r.id = detail::parse_uint(cells[0], origin, lineno);
    const auto label = detail::parse_uint(cells[1], origin, lineno);
    if (detail::parse_uint(cells[2], origin, lineno) != k) throw CsvError(origin, lineno, "k disagrees with header");
    if (label >= k) throw CsvError(origin, lineno, "label out of range");
    r.label = static_cast<int>(label);
    for (std::size_t i = 0; i < k; ++i) r.ee.push_back(detail::parse_double(cells[3 + i], origin, lineno));
    for (std::size_t i = 0; i < k; ++i) r.ef.push_back(detail::parse_double(cells[3 + k + i], origin, lineno));
    try {
      validate(r);
    } catch (const std::invalid_argument& e) {
      throw CsvError(origin, lineno, e.what());
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw CsvError(origin, lineno, "no records");
  return records;
}

}  // namespace trecx
