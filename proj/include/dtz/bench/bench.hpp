#pragma once

#include <unistd.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dtz/modelio/dataset.hpp"
#include "dtz/worlds/session.hpp"

namespace dtz {

struct SweepConfig {
  std::string cfg_text;
  Bytes weights;  // plain weights of the whole model
  Dataset data;   // workload: one epoch (train) or one pass (infer)
  std::optional<std::vector<std::size_t>> boundaries;  // default: 0..L
  std::size_t trials = 20;
  Mode mode = Mode::infer;
  SecureBudget budget;
  Policy policy = Policy::top1();
  bool grouping = true;
  TransportKind transport = TransportKind::in_process;
  std::string ta_executable;  // two-process only
};

struct TrialMetrics {
  std::size_t trial = 0;
  double rich_ms = 0;
  double trusted_ms = 0;
  std::uint64_t rich_mem_bytes = 0;
  std::uint64_t trusted_mem_bytes = 0;
  std::uint64_t crossings = 0;
  std::uint64_t bytes_to_trusted = 0;
  std::uint64_t bytes_to_rich = 0;
};

struct Aggregate {
  double mean = 0;
  double ci95 = 0;  // Student-t half-width
  std::size_t n = 0;
};

/// Mean and 95% Student-t half-width; the half-width is 0 below two samples.
inline Aggregate aggregate(const std::vector<double>& xs) {
  Aggregate a;
  a.n = xs.size();
  if (xs.empty()) return a;
  for (double x : xs) a.mean += x;
  a.mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return a;
  double ss = 0;
  for (double x : xs) ss += (x - a.mean) * (x - a.mean);
  const double n = static_cast<double>(xs.size());
  const double sd = std::sqrt(ss / (n - 1));
  const boost::math::students_t t(n - 1);
  a.ci95 = boost::math::quantile(t, 0.975) * sd / std::sqrt(n);
  return a;
}

struct SweepPoint {
  std::size_t requested = 0;
  std::size_t boundary = 0;  // effective
  bool feasible = true;
  std::string reason;  // "infeasible: <bytes> bytes over budget"
  std::vector<TrialMetrics> trials;

  /// Trials that enter the aggregates: all but the first warm-up trial when there are several.
  std::vector<TrialMetrics> measured() const {
    if (trials.size() < 2) return trials;
    return {trials.begin() + 1, trials.end()};
  }

  template <typename F>
  Aggregate stat(F field) const {
    std::vector<double> xs;
    for (const auto& t : measured()) xs.push_back(static_cast<double>(field(t)));
    return aggregate(xs);
  }
};

struct MetricsReport {
  Mode mode = Mode::infer;
  std::size_t layer_count = 0;
  std::vector<SweepPoint> points;
};

// Reference figures from the original hardware evaluation, reported but never asserted.
inline constexpr double kReferenceLastLayerOverheadPct = 3.0;
inline constexpr double kReferenceFullTrustedTrainOverheadPct = 10.0;

namespace detail {

struct ScratchDir {
  std::filesystem::path path;
  ScratchDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "dtz-bench-XXXXXX").string();
    require(::mkdtemp(tmpl.data()) != nullptr, ErrorKind::io, "cannot create a scratch directory");
    path = tmpl;
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline double ms(std::uint64_t ns) { return static_cast<double>(ns) / 1e6; }

}  // namespace detail

/// Runs the workload at every requested boundary, `trials` times each, with a fresh
/// session (and teardown) per trial. Boundaries whose plan exceeds the budget are
/// recorded as infeasible.
inline MetricsReport run_sweep(const SweepConfig& c) {
  require(c.trials >= 1, ErrorKind::validation, "trials must be at least 1");
  auto net = parse_cfg(c.cfg_text, false);
  load_weights(net, c.weights);
  const auto L = net.layers.size();
  require(c.data.size() > 0, ErrorKind::validation, "empty workload dataset");
  require(c.data.shape() == net.input_shape, ErrorKind::validation,
          "dataset images are " + c.data.shape().str() + ", network expects " + net.input_shape.str());

  std::vector<std::size_t> boundaries;
  if (c.boundaries) {
    boundaries = *c.boundaries;
  } else {
    for (std::size_t l = 0; l <= L; ++l) boundaries.push_back(l);
  }
  for (auto l : boundaries)
    require(l <= L, ErrorKind::validation, "boundary " + std::to_string(l) + " outside 0.." + std::to_string(L));

  std::vector<Sample> samples;
  for (std::size_t i = 0; i < c.data.size(); ++i) samples.push_back(c.data.at(i));

  const auto key = random_key();
  const auto transport = resolve_transport(c.transport);
  std::optional<detail::ScratchDir> scratch;
  if (transport == TransportKind::two_process) {
    scratch.emplace();
    write_binary_file((scratch->path / "key.bin").string(), key);
  }

  MetricsReport report;
  report.mode = c.mode;
  report.layer_count = L;
  for (auto l : boundaries) {
    SweepPoint p;
    p.requested = l;
    const auto plan = plan_partition(net, l, c.budget, c.mode, c.grouping);
    p.boundary = plan.boundary;
    if (!plan.valid) {
      p.feasible = false;
      p.reason = "infeasible: " + std::to_string(plan.shortfall()) + " bytes over budget";
      report.points.push_back(std::move(p));
      continue;
    }
    SessionSpec spec;
    spec.cfg_text = c.cfg_text;
    spec.plan = plan;
    spec.policy = c.policy;
    spec.budget = c.budget;
    spec.transport = transport;
    spec.allow_raw = c.policy.kind() == OutputPolicy::raw;
    spec.model = plan.has_trusted_layers() ? seal_layers(net, plan.boundary, key) : c.weights;
    if (scratch) {
      spec.ta_executable = c.ta_executable;
      spec.sealed_path = (scratch->path / "model.dtzs").string();
      spec.key_path = (scratch->path / "key.bin").string();
      write_binary_file(spec.sealed_path, spec.model);
    }

    for (std::size_t t = 0; t < c.trials; ++t) {
      auto trial_spec = spec;
      if (!scratch) trial_spec.key = key;
      auto s = open_session(std::move(trial_spec));
      const auto loaded = s.stats();  // LoadSealed is session setup, not workload
      for (const auto& x : samples) {
        if (c.mode == Mode::train)
          s.train_step(x.image, x.label, net.learning_rate);
        else
          s.infer(x.image);
      }
      const auto stats = s.stats() - loaded;
      TrialMetrics m;
      m.trial = t;
      m.rich_ms = detail::ms(stats.rich_ns);
      m.trusted_ms = detail::ms(stats.trusted_ns);
      m.rich_mem_bytes = estimate_rich_memory(net, plan.boundary, c.mode);
      m.trusted_mem_bytes = s.teardown();
      m.crossings = stats.crossings;
      m.bytes_to_trusted = stats.bytes_to_trusted;
      m.bytes_to_rich = stats.bytes_to_rich;
      p.trials.push_back(m);
    }
    report.points.push_back(std::move(p));
  }
  return report;
}

namespace detail {

inline std::string g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// The value a reader of the CSV would parse back, so both formats carry identical numbers.
inline double round6(double v) { return std::stod(g6(v)); }

}  // namespace detail

inline constexpr const char* kCsvHeader =
    "boundary,trial,mode,rich_ms,trusted_ms,rich_mem_bytes,trusted_mem_bytes,crossings,bytes_to_trusted,bytes_to_rich";

inline const char* mode_name(Mode m) { return m == Mode::train ? "train" : "infer"; }

/// One row per (boundary, trial); infeasible points contribute no rows.
inline void emit_csv(const MetricsReport& r, std::ostream& out) {
  out << kCsvHeader << "\n";
  for (const auto& p : r.points)
    for (const auto& t : p.trials)
      out << p.requested << "," << t.trial << "," << mode_name(r.mode) << "," << detail::g6(t.rich_ms) << ","
          << detail::g6(t.trusted_ms) << "," << t.rich_mem_bytes << "," << t.trusted_mem_bytes << "," << t.crossings
          << "," << t.bytes_to_trusted << "," << t.bytes_to_rich << "\n";
  out.flush();
  require(out.good(), ErrorKind::io, "writing the CSV report failed");
}

inline nlohmann::json to_json(const Aggregate& a) {
  return {{"mean", detail::round6(a.mean)}, {"ci95", detail::round6(a.ci95)}, {"n", a.n}};
}

inline nlohmann::json to_json(const MetricsReport& r) {
  using nlohmann::json;
  json points = json::array();
  for (const auto& p : r.points) {
    json j{{"boundary", p.requested}, {"effective_boundary", p.boundary}, {"feasible", p.feasible}};
    if (!p.feasible) {
      j["reason"] = p.reason;
      points.push_back(std::move(j));
      continue;
    }
    json trials = json::array();
    for (const auto& t : p.trials)
      trials.push_back({{"trial", t.trial},
                        {"rich_ms", detail::round6(t.rich_ms)},
                        {"trusted_ms", detail::round6(t.trusted_ms)},
                        {"rich_mem_bytes", t.rich_mem_bytes},
                        {"trusted_mem_bytes", t.trusted_mem_bytes},
                        {"crossings", t.crossings},
                        {"bytes_to_trusted", t.bytes_to_trusted},
                        {"bytes_to_rich", t.bytes_to_rich}});
    j["trials"] = std::move(trials);
    j["aggregate"] = {{"rich_ms", to_json(p.stat([](const auto& t) { return t.rich_ms; }))},
                      {"trusted_ms", to_json(p.stat([](const auto& t) { return t.trusted_ms; }))},
                      {"trusted_mem_bytes", to_json(p.stat([](const auto& t) { return t.trusted_mem_bytes; }))},
                      {"crossings", to_json(p.stat([](const auto& t) { return t.crossings; }))}};
    points.push_back(std::move(j));
  }
  return {{"mode", mode_name(r.mode)},
          {"layer_count", r.layer_count},
          {"points", std::move(points)},
          {"reference",
           {{"last_layer_overhead_pct", kReferenceLastLayerOverheadPct},
            {"full_trusted_train_overhead_pct", kReferenceFullTrustedTrainOverheadPct},
            {"note", "hardware figures from the original evaluation; not reproduced or asserted here"}}}};
}

inline void emit_json(const MetricsReport& r, std::ostream& out) {
  out << to_json(r).dump(2) << "\n";
  out.flush();
  require(out.good(), ErrorKind::io, "writing the JSON report failed");
}

struct OverheadRow {
  std::size_t requested = 0;
  std::size_t boundary = 0;
  std::optional<double> time_overhead_pct;  // null for infeasible points
  std::optional<double> traffic_bytes;      // mean bytes both directions per trial
  std::optional<std::uint64_t> ledger_bytes;
  std::string reason;
};

/// Time overhead of each point against the baseline (no trusted layers):
/// (mean(rich + trusted) − baseline) / baseline × 100.
inline std::vector<OverheadRow> overhead_table(const MetricsReport& r) {
  auto total = [](const SweepPoint& p) { return p.stat([](const auto& t) { return t.rich_ms + t.trusted_ms; }).mean; };
  const SweepPoint* base = nullptr;
  for (const auto& p : r.points)
    if (p.feasible && p.boundary == r.layer_count && !p.trials.empty()) base = &p;
  require(base != nullptr, ErrorKind::contract, "report has no baseline point (boundary " +
                                                    std::to_string(r.layer_count) + ", nothing trusted)");
  const double b = total(*base);
  require(b > 0, ErrorKind::contract, "baseline time is zero");

  std::vector<OverheadRow> rows;
  for (const auto& p : r.points) {
    OverheadRow row;
    row.requested = p.requested;
    row.boundary = p.boundary;
    if (!p.feasible || p.trials.empty()) {
      row.reason = p.reason;
    } else {
      row.time_overhead_pct = (total(p) - b) / b * 100.0;
      row.traffic_bytes =
          p.stat([](const auto& t) { return static_cast<double>(t.bytes_to_trusted + t.bytes_to_rich); }).mean;
      std::uint64_t hw = 0;
      for (const auto& t : p.trials) hw = std::max(hw, t.trusted_mem_bytes);
      row.ledger_bytes = hw;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void print_overhead_table(const std::vector<OverheadRow>& rows, Mode mode, std::ostream& out) {
  out << "boundary  effective  time_overhead_%  traffic_bytes  ledger_bytes\n";
  for (const auto& row : rows) {
    char line[160];
    if (row.time_overhead_pct)
      std::snprintf(line, sizeof line, "%8zu  %9zu  %15.2f  %13.0f  %12llu\n", row.requested, row.boundary,
                    *row.time_overhead_pct, *row.traffic_bytes, static_cast<unsigned long long>(*row.ledger_bytes));
    else
      std::snprintf(line, sizeof line, "%8zu  %9zu  %s\n", row.requested, row.boundary, row.reason.c_str());
    out << line;
  }
  out << "reference (original hardware, not asserted): last layer trusted <= " << kReferenceLastLayerOverheadPct
      << "% CPU time; full trusted-world use in training <= " << kReferenceFullTrustedTrainOverheadPct << "%"
      << (mode == Mode::train ? "" : " (training figure)") << "\n";
}

}  // namespace dtz
