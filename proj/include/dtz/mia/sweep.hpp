#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "dtz/mia/attack.hpp"

namespace dtz {

struct AttackRun {
  std::uint64_t seed = 0;
  AttackMetrics metrics;
};

/// Mean metrics over independently seeded attacks on one exposure.
struct ExposureResult {
  std::string setting;  // "first", "last" or a free label
  std::size_t k = 0;
  Phase phase = Phase::inference;
  double precision = 0, recall = 0, accuracy = 0;
  std::vector<AttackRun> runs;
  bool no_access = false;  // nothing exposed: recorded as the 0.5 baseline
};

/// Splits members/non-members with `seed`, collects features under `exposure`, trains
/// an attack seeded with `seed` and evaluates it on the held-out halves.
inline AttackMetrics run_attack(Network<float>& target, const Dataset& train_set, const Dataset& test_set,
                                const ExposureSet& exposure, AttackHyper hyper, std::uint64_t seed) {
  const auto splits = build_attack_splits(train_set, test_set, seed);
  const auto train = collect_attack_data(target, splits.train_members, splits.train_non_members, exposure);
  const auto eval = collect_attack_data(target, splits.eval_members, splits.eval_non_members, exposure);
  hyper.seed = seed;
  auto model = train_attack(train, hyper);
  return evaluate_attack(model, eval);
}

inline ExposureResult attack_exposure(Network<float>& target, const Dataset& train_set, const Dataset& test_set,
                                      const ExposureSet& exposure, const AttackHyper& hyper,
                                      const std::vector<std::uint64_t>& seeds) {
  require(!seeds.empty(), ErrorKind::contract, "at least one attack seed is needed");
  ExposureResult r;
  r.phase = exposure.phase;
  if (exposure.empty()) {
    r.no_access = true;
    r.precision = r.recall = r.accuracy = 0.5;
    for (auto s : seeds) r.runs.push_back({s, {}});
    return r;
  }
  for (auto s : seeds) {
    const auto m = run_attack(target, train_set, test_set, exposure, hyper, s);
    r.runs.push_back({s, m});
    r.precision += m.precision();
    r.recall += m.recall();
    r.accuracy += m.accuracy();
  }
  const double n = static_cast<double>(seeds.size());
  r.precision /= n;
  r.recall /= n;
  r.accuracy /= n;
  return r;
}

/// Attack results for k = 0..L hidden layers under `setting`.
inline std::vector<ExposureResult> sweep_exposure(Network<float>& target, const Dataset& train_set,
                                                  const Dataset& test_set, Setting setting, Phase phase,
                                                  const AttackHyper& hyper, const std::vector<std::uint64_t>& seeds) {
  std::vector<ExposureResult> out;
  for (std::size_t k = 0; k <= target.layers.size(); ++k) {
    auto r = attack_exposure(target, train_set, test_set, exposure_for(target, setting, k, phase), hyper, seeds);
    r.setting = to_string(setting);
    r.k = k;
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json to_json(const ExposureResult& r) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& run : r.runs) seeds.push_back(run.seed);
  nlohmann::json j{{"setting", r.setting},   {"k", r.k},           {"phase", to_string(r.phase)},
                   {"precision", r.precision}, {"recall", r.recall}, {"accuracy", r.accuracy},
                   {"seeds", seeds}};
  if (r.no_access) j["no_access"] = true;
  return j;
}

}  // namespace dtz
