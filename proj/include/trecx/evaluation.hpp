#pragma once

// Benefit curves replayed from cached records, trade-off lookup, and run comparison.

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "trecx/dataset.hpp"
#include "trecx/exit_policy.hpp"
#include "trecx/graph.hpp"

namespace trecx {

// One inference pass over `data`; both heads' softmax are cached per sample.
// Record ids are the sample indices offset by `first_id`.
template <typename T>
std::vector<EvalRecord> collect_records(GraphModel<T>& model, const Dataset& data, std::size_t batch_size = 256,
                                        std::uint64_t first_id = 0) {
  if (!model.has_early_exit()) throw std::logic_error("collect_records: model has no early exit");
  if (batch_size == 0) throw std::invalid_argument("collect_records: batch_size must be positive");
  data.validate();
  const auto flops = model.count_flops();
  const ExitCosts costs{flops.early_path(), flops.final_path()};
  const std::size_t k = model.num_classes();
  std::vector<EvalRecord> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    const auto x = gather_samples(data, idx).template cast<T>();
    const auto o = model.forward(x, Mode::Infer);
    for (std::size_t i = 0; i < n; ++i) {
      EvalRecord r;
      r.id = first_id + start + i;
      r.label = data.labels[start + i];
      r.ee.resize(k);
      r.ef.resize(k);
      for (std::size_t j = 0; j < k; ++j) {
        r.ee[j] = static_cast<double>(o.softmax_ee.at(i, j));
        r.ef[j] = static_cast<double>(o.softmax_ef.at(i, j));
      }
      r.costs = costs;
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline void assign_costs(std::vector<EvalRecord>& records, ExitCosts costs) {
  for (auto& r : records) r.costs = costs;
}

struct BenefitCurvePoint {
  double rho = 0;
  double accuracy = 0;
  double flops = 0;
  double ee_rate = 0;
  friend bool operator==(const BenefitCurvePoint&, const BenefitCurvePoint&) = default;
};

inline constexpr int kCurveSteps = 100;

inline double curve_rho(int i) { return static_cast<double>(i) / kCurveSteps; }

// 101 points at rho = 0.00, 0.01, ..., 1.00.
inline std::vector<BenefitCurvePoint> benefit_curve(const std::vector<EvalRecord>& records) {
  std::vector<BenefitCurvePoint> curve;
  curve.reserve(kCurveSteps + 1);
  for (int i = 0; i <= kCurveSteps; ++i) {
    const double rho = curve_rho(i);
    const auto c = count_exits(records, rho);
    curve.push_back({rho, c.accuracy(), c.mean_flops(), c.ee_rate()});
  }
  return curve;
}

struct TradeoffPoint {
  double drop = 0;    // accuracy given up relative to the baseline
  double target = 0;  // baseline - drop
  BenefitCurvePoint point;
};

// For each drop d, the curve point whose accuracy is nearest to baseline - d;
// ties go to lower FLOPs, then lower rho, so the result ignores point order.
inline std::vector<TradeoffPoint> tradeoff_table(const std::vector<BenefitCurvePoint>& curve, double baseline_accuracy,
                                                 const std::vector<double>& drops = {0.01, 0.02, 0.03}) {
  if (curve.empty()) throw std::invalid_argument("tradeoff_table: empty curve");
  std::vector<TradeoffPoint> out;
  for (double d : drops) {
    const double target = baseline_accuracy - d;
    const BenefitCurvePoint* best = nullptr;
    auto key = [&](const BenefitCurvePoint& p) { return std::make_tuple(std::abs(p.accuracy - target), p.flops, p.rho); };
    for (const auto& p : curve)
      if (!best || key(p) < key(*best)) best = &p;
    out.push_back({d, target, *best});
  }
  return out;
}

inline void write_curve_csv(std::ostream& out, const std::vector<BenefitCurvePoint>& curve) {
  out << "rho,accuracy,flops,ee_rate\n";
  for (const auto& p : curve)
    out << format_g9(p.rho) << ',' << format_g9(p.accuracy) << ',' << format_g9(p.flops) << ','
        << format_g9(p.ee_rate) << '\n';
}

inline std::vector<BenefitCurvePoint> read_curve_csv(std::istream& in, const std::string& origin = "curve") {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != "rho,accuracy,flops,ee_rate") throw CsvError(origin, lineno, "bad header");
  std::vector<BenefitCurvePoint> curve;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 4) throw CsvError(origin, lineno, "expected 4 fields");
    curve.push_back({detail::parse_double(cells[0], origin, lineno), detail::parse_double(cells[1], origin, lineno),
                     detail::parse_double(cells[2], origin, lineno), detail::parse_double(cells[3], origin, lineno)});
  }
  return curve;
}

using NamedCurve = std::pair<std::string, std::vector<BenefitCurvePoint>>;

// Long format: one row per (run, rho), runs in the given order.
inline void compare_runs(std::ostream& out, const std::vector<NamedCurve>& runs) {
  out << "run,rho,accuracy,flops,ee_rate\n";
  for (const auto& [name, curve] : runs) {
    if (name.empty() || name.find_first_of(",\n\"") != std::string::npos)
      throw std::invalid_argument("compare_runs: run name '" + name + "' must be non-empty without commas or quotes");
    for (const auto& p : curve)
      out << name << ',' << format_g9(p.rho) << ',' << format_g9(p.accuracy) << ',' << format_g9(p.flops) << ','
          << format_g9(p.ee_rate) << '\n';
  }
}

// The early-exit feature-map concatenation ablation built from a trained T-RecX model:
// same common and early-exit weights, no early-view head, no weight transfer.
template <typename T>
GraphModel<T> build_fmap_concat_variant(const GraphModel<T>& model) {
  if (model.spec().ee_variant != EeVariant::TRecX)
    throw std::logic_error("build_fmap_concat_variant requires the trecx early exit");
  ArchitectureSpec spec = model.spec();
  spec.early_view = false;
  BuildOptions opts;
  opts.fmap_concat = true;
  auto out = GraphModel<T>::build(spec, model.seed(), opts);
  out.copy_matching_params(model);
  return out;
}

}  // namespace trecx
