// dtz: train, infer, seal, plan, attack and bench partitioned models.
//
// Exit codes: 0 ok, 1 usage, 2 validation/contract, 3 authentication/sealing,
// 4 out of secure memory. Diagnostics go to stderr; stdout carries only results.

#include <sys/stat.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "dtz/bench/bench.hpp"
#include "dtz/mia/sweep.hpp"
#include "dtz/mia/target.hpp"

namespace {

using namespace dtz;
using nlohmann::json;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::authentication:
    case ErrorKind::integrity: return 3;
    case ErrorKind::out_of_secure_memory: return 4;
    default: return 2;
  }
}

std::string ta_executable() {
  std::error_code ec;
  const auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
  return ec ? std::string("dtz_ta") : (self.parent_path() / "dtz_ta").string();
}

/// Loads the key at `path`, creating a fresh random one when the file does not exist.
Key128 key_or_create(const std::string& path) {
  if (std::filesystem::exists(path)) return load_key(path);
  const auto key = random_key();
  write_binary_file(path, key);
  ::chmod(path.c_str(), 0600);
  std::cerr << "dtz: wrote new key " << path << "\n";
  return key;
}

Tensor read_input(const std::string& path, Dims shape) {
  const auto raw = read_binary_file(path);
  require(raw.size() == 4 * shape.count(), ErrorKind::validation,
          "input " + path + " has " + std::to_string(raw.size()) + " bytes, expected " +
              std::to_string(4 * shape.count()) + " (float32 " + shape.str() + ")");
  Tensor t = Tensor::of(shape);
  std::memcpy(t.data(), raw.data(), raw.size());
  return t;
}

json to_json(const SanitizedOutput& s) {
  json entries = json::array();
  for (const auto& e : s.entries) {
    json j{{"class", e.cls}};
    if (e.score) j["score"] = *e.score;
    entries.push_back(j);
  }
  return {{"policy", to_string(s.policy)}, {"downgraded", s.downgraded}, {"entries", entries}};
}

json to_json(const PartitionPlan& p, const Network<float>& net) {
  json j{{"requested", p.requested},       {"boundary", p.boundary},   {"layer_count", p.layer_count},
         {"mode", mode_name(p.mode)},       {"estimate_bytes", p.estimate}, {"budget_bytes", p.budget},
         {"valid", p.valid}};
  if (!p.valid) j["reason"] = p.reason;
  const auto b = estimate_breakdown(net, p.boundary, p.mode);
  json parts;
  for (std::size_t c = 0; c < kMemoryCategories; ++c)
    parts[to_string(static_cast<MemoryCategory>(c))] = b.bytes[c];
  j["breakdown"] = parts;
  return j;
}

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot open " + path + " for writing");
  out << text;
  require(out.good(), ErrorKind::io, "writing " + path + " failed");
}

struct TrainArgs {
  std::string cfg, data = "synthetic", key, out_sealed, out_weights, budget = "14MiB";
  std::optional<std::size_t> boundary;
  std::size_t epochs = 1;
  std::optional<float> lr;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  auto net = load_cfg(a.cfg);
  if (a.seed) {
    net.seed = *a.seed;
    initialize_parameters(net);
  }
  const auto L = net.layers.size();
  const auto l = a.boundary.value_or(L);
  const float lr = a.lr.value_or(net.learning_rate);
  const auto budget = SecureBudget::with_available(parse_byte_size(a.budget));
  const auto plan = plan_partition(net, l, budget, Mode::train);
  require(plan.valid, ErrorKind::out_of_secure_memory, "plan refused: " + plan.reason);
  if (!a.out_sealed.empty())
    require(plan.has_trusted_layers(), ErrorKind::validation, "--out-sealed needs trusted layers (boundary < L)");
  if (!a.out_weights.empty())
    require(!plan.has_trusted_layers(), ErrorKind::validation,
            "--out-weights exports plain weights and needs --boundary " + std::to_string(L));

  const auto handle = parse_dataset_spec(a.data);
  const auto train = load_dataset(handle, Split::train);
  const auto test = load_dataset(handle, Split::test);
  require(train.shape() == net.input_shape, ErrorKind::validation,
          "dataset images are " + train.shape().str() + ", network expects " + net.input_shape.str());

  SessionSpec spec;
  spec.cfg_text = emit_cfg(net);
  spec.plan = plan;
  spec.budget = budget;
  if (plan.has_trusted_layers()) {
    require(!a.key.empty(), ErrorKind::authentication, "--key is required when layers are trusted");
    spec.key = key_or_create(a.key);
    spec.model = seal_layers(net, plan.boundary, *spec.key);
  } else {
    spec.model = save_weights(net);
  }
  auto s = open_session(std::move(spec));

  std::vector<Sample> samples;
  for (std::size_t i = 0; i < train.size(); ++i) samples.push_back(train.at(i));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(hash_combine(net.seed, 0x747261696e));
  std::optional<double> loss;
  for (std::size_t e = 0; e < a.epochs; ++e) {
    rng.shuffle(order.begin(), order.end());
    double sum = 0;
    bool visible = true;
    for (auto i : order) {
      const auto r = s.train_step(samples[i].image, samples[i].label, lr);
      if (r.loss) sum += *r.loss;
      else visible = false;
    }
    if (visible) loss = sum / static_cast<double>(samples.size());
    std::cerr << "epoch " << e + 1 << "/" << a.epochs << "\n";
  }
  auto acc = [&](const Dataset& d) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto x = d.at(i);
      hits += s.infer(x.image).entries.at(0).cls == x.label;
    }
    return d.size() ? static_cast<double>(hits) / static_cast<double>(d.size()) : 0.0;
  };
  json out{{"requested", plan.requested},     {"boundary", plan.boundary},
           {"epochs", a.epochs},              {"steps", a.epochs * samples.size()},
           {"train_accuracy", acc(train)},    {"test_accuracy", acc(test)}};
  if (loss) out["final_epoch_loss"] = *loss;
  if (!a.out_sealed.empty()) write_binary_file(a.out_sealed, s.save_sealed());
  if (!a.out_weights.empty()) write_binary_file(a.out_weights, save_weights(s.rich()));
  out["crossings"] = s.stats().crossings;
  out["trusted_high_water_bytes"] = s.teardown();
  std::cout << out.dump() << "\n";
  return 0;
}

struct InferArgs {
  std::string cfg, sealed, key, input, policy = "top1", transport = "in-process", budget = "14MiB";
  bool ranks_only = false;
};

int cmd_infer(const InferArgs& a) {
  auto net = parse_cfg(read_text_file(a.cfg), false);
  const auto sealed = read_binary_file(a.sealed);
  const auto file = parse_sealed(sealed);
  const BaselineMode baseline;
  const auto policy = Policy::parse(a.policy, a.ranks_only, &baseline);
  const auto budget = SecureBudget::with_available(parse_byte_size(a.budget));
  require(file.layer_count == net.layers.size(), ErrorKind::validation,
          "sealed container has " + std::to_string(file.layer_count) + " layers, architecture has " +
              std::to_string(net.layers.size()));
  const auto plan = plan_partition(net, file.boundary, budget, Mode::infer, false);

  SessionSpec spec;
  spec.cfg_text = read_text_file(a.cfg);
  spec.model = sealed;
  spec.plan = plan;
  spec.policy = policy;
  spec.budget = budget;
  spec.allow_raw = policy.kind() == OutputPolicy::raw;
  spec.transport = parse_transport(a.transport);
  if (resolve_transport(spec.transport) == TransportKind::two_process) {
    key_from_bytes(read_binary_file(a.key));  // refuse a malformed key before spawning
    spec.ta_executable = ta_executable();
    spec.sealed_path = a.sealed;
    spec.key_path = a.key;
  } else {
    spec.key = load_key(a.key);
  }
  auto s = open_session(std::move(spec));
  const auto out = s.infer(read_input(a.input, net.input_shape));
  std::cout << to_json(out).dump() << "\n";
  return 0;
}

struct SealArgs {
  std::string cfg, weights, key, out;
  std::size_t boundary = 0;
};

int cmd_seal(const SealArgs& a) {
  auto net = parse_cfg(read_text_file(a.cfg), false);
  load_weights(net, read_binary_file(a.weights));
  require(a.boundary < net.layers.size(), ErrorKind::validation,
          "boundary " + std::to_string(a.boundary) + " leaves no layer to seal");
  const auto b = effective_boundary(net, a.boundary);
  const auto key = key_or_create(a.key);
  write_binary_file(a.out, seal_layers(net, b, key));
  std::cout << json{{"requested", a.boundary}, {"boundary", b}, {"sealed_layers", net.layers.size() - b}}.dump()
            << "\n";
  return 0;
}

struct PlanArgs {
  std::string cfg, budget = "14MiB";
  std::size_t boundary = 0;
  bool train_mode = false;
  bool no_grouping = false;
};

int cmd_plan(const PlanArgs& a) {
  const auto net = parse_cfg(read_text_file(a.cfg), false);
  const auto mode = a.train_mode ? Mode::train : Mode::infer;
  const auto plan = plan_partition(net, a.boundary, SecureBudget::with_available(parse_byte_size(a.budget)), mode,
                                   !a.no_grouping);
  std::cout << to_json(plan, net).dump() << "\n";
  if (!plan.valid) {
    std::cerr << "dtz: plan refused: " << plan.reason << "\n";
    return 4;
  }
  return 0;
}

struct AttackArgs {
  std::string cfg, weights, data = "synthetic", setting = "last", phase = "infer", out, features_out;
  std::optional<std::size_t> k;
  std::size_t seeds = 1;
  std::uint64_t seed = 1;
  std::size_t epochs = 50;
};

int cmd_attack(const AttackArgs& a) {
  auto net = parse_cfg(read_text_file(a.cfg), false);
  load_weights(net, read_binary_file(a.weights));
  const auto setting = parse_setting(a.setting);
  const auto phase = parse_phase(a.phase);
  require(a.seeds >= 1, ErrorKind::validation, "--seeds must be at least 1");
  require(a.features_out.empty() || a.k, ErrorKind::validation, "--features-out needs --k");
  const auto handle = parse_dataset_spec(a.data);
  const auto train = load_dataset(handle, Split::train);
  const auto test = load_dataset(handle, Split::test);
  AttackHyper hyper;
  hyper.epochs = a.epochs;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.seed + i);

  json records = json::array();
  std::vector<std::size_t> ks;
  if (a.k) {
    ks.push_back(*a.k);
  } else {
    for (std::size_t k = 0; k <= net.layers.size(); ++k) ks.push_back(k);
  }
  for (auto k : ks) {
    const auto exposure = exposure_for(net, setting, k, phase);
    if (!a.features_out.empty() && !exposure.empty()) {
      const auto splits = build_attack_splits(train, test, seeds[0]);
      save_attack_data(a.features_out,
                       collect_attack_data(net, splits.train_members, splits.train_non_members, exposure));
    }
    auto r = attack_exposure(net, train, test, exposure, hyper, seeds);
    r.setting = to_string(setting);
    r.k = k;
    std::cerr << "k=" << k << " precision " << r.precision << (r.no_access ? " (no access)" : "") << "\n";
    records.push_back(to_json(r));
  }
  write_output(a.out, records.dump(2) + "\n");
  return 0;
}

struct BenchArgs {
  std::string cfg, weights, data = "synthetic:n=50,test=1", sweep = "all", mode = "infer", out, format,
                                    budget = "14MiB", policy = "top1", transport = "in-process";
  std::size_t trials = 20;
};

int cmd_bench(const BenchArgs& a) {
  SweepConfig c;
  c.cfg_text = read_text_file(a.cfg);
  auto net = parse_cfg(c.cfg_text, a.weights.empty());
  if (!a.weights.empty()) load_weights(net, read_binary_file(a.weights));
  c.weights = save_weights(net);
  c.data = load_dataset(parse_dataset_spec(a.data), Split::train);
  c.trials = a.trials;
  c.mode = a.mode == "train" ? Mode::train : Mode::infer;
  require(a.mode == "train" || a.mode == "infer", ErrorKind::validation, "--mode must be train or infer");
  c.budget = SecureBudget::with_available(parse_byte_size(a.budget));
  const BaselineMode baseline;
  c.policy = Policy::parse(a.policy, false, &baseline);
  c.transport = parse_transport(a.transport);
  c.ta_executable = ta_executable();
  if (a.sweep != "all") {
    std::vector<std::size_t> b;
    std::stringstream in(a.sweep);
    for (std::string part; std::getline(in, part, ',');) {
      try {
        b.push_back(std::stoul(part));
      } catch (const std::exception&) {
        fail(ErrorKind::validation, "--sweep takes 'all' or a comma-separated list of boundaries, got '" + a.sweep + "'");
      }
    }
    c.boundaries = b;
  }
  auto format = a.format;
  if (format.empty()) format = a.out.size() >= 5 && a.out.substr(a.out.size() - 5) == ".json" ? "json" : "csv";
  require(format == "csv" || format == "json", ErrorKind::validation, "--format must be csv or json");

  const auto report = run_sweep(c);
  std::ostringstream text;
  if (format == "json") emit_json(report, text);
  else emit_csv(report, text);
  write_output(a.out, text.str());
  try {
    print_overhead_table(overhead_table(report), report.mode, std::cerr);
  } catch (const Error&) {
    std::cerr << "dtz: no baseline point in the sweep; overhead table omitted\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partitioned DNN execution with a simulated trusted world"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a model with its suffix in the trusted world");
  train->add_option("--cfg", ta.cfg, "network cfg file")->required();
  train->add_option("--data", ta.data, "dataset: synthetic[:k=v,...] | cifar10:<dir>[,n=,seed=] | cifar100:<dir>");
  train->add_option("--boundary", ta.boundary, "layers 1..l run rich-side (default L: nothing trusted)");
  train->add_option("--budget", ta.budget, "secure bytes for the trusted application (B, KiB, MiB, GiB)");
  train->add_option("--epochs", ta.epochs, "passes over the training split");
  train->add_option("--lr", ta.lr, "learning rate (default from cfg)");
  train->add_option("--seed", ta.seed, "re-initialize parameters and order samples with this seed");
  train->add_option("--out-sealed", ta.out_sealed, "write the trained model as a sealed container");
  train->add_option("--out-weights", ta.out_weights, "write plain weights (only when nothing is trusted)");
  train->add_option("--key", ta.key, "16-byte key file; created when missing");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "classify one input through a sealed model");
  infer->add_option("--cfg", ia.cfg, "network cfg file")->required();
  infer->add_option("--sealed", ia.sealed, "sealed model container")->required();
  infer->add_option("--key", ia.key, "16-byte key file")->required();
  infer->add_option("--input", ia.input, "raw float32 image, height x width x channels")->required();
  infer->add_option("--policy", ia.policy, "output release: top1 | top5 | all | raw");
  infer->add_flag("--ranks-only", ia.ranks_only, "release class ranks without scores");
  infer->add_option("--transport", ia.transport, "in-process | two-process (DTZ_TRANSPORT overrides)");
  infer->add_option("--budget", ia.budget, "secure bytes for the trusted application");

  SealArgs sa;
  auto* seal = app.add_subcommand("seal", "encrypt the trusted suffix of a model");
  seal->add_option("--cfg", sa.cfg, "network cfg file")->required();
  seal->add_option("--weights", sa.weights, "plain weights file")->required();
  seal->add_option("--boundary", sa.boundary, "layers after l are sealed (grouping rule applies)")->required();
  seal->add_option("--key", sa.key, "16-byte key file; created when missing")->required();
  seal->add_option("--out", sa.out, "output container")->required();

  PlanArgs pa;
  auto* plan = app.add_subcommand("plan", "estimate trusted memory for a boundary");
  plan->add_option("--cfg", pa.cfg, "network cfg file")->required();
  plan->add_option("--boundary", pa.boundary, "requested boundary l")->required();
  plan->add_option("--budget", pa.budget, "secure bytes for the trusted application");
  plan->add_flag("--train-mode", pa.train_mode, "account for training buffers");
  plan->add_flag("--no-grouping", pa.no_grouping, "do not move the boundary before a trainable layer");

  AttackArgs aa;
  auto* attack = app.add_subcommand("attack", "white-box membership inference under an exposure sweep");
  attack->add_option("--cfg", aa.cfg, "network cfg file")->required();
  attack->add_option("--weights", aa.weights, "plain weights of the target")->required();
  attack->add_option("--data", aa.data, "dataset the target was trained on (train split = members)");
  attack->add_option("--setting", aa.setting, "first | last: which end of the network is hidden");
  attack->add_option("--phase", aa.phase, "infer | train: train also exposes gradients");
  attack->add_option("--k", aa.k, "hide exactly k layers instead of sweeping k = 0..L");
  attack->add_option("--seeds", aa.seeds, "independent attacks per point");
  attack->add_option("--seed", aa.seed, "first attack seed");
  attack->add_option("--epochs", aa.epochs, "attack training epochs");
  attack->add_option("--features-out", aa.features_out, "write the attack training features (needs --k)");
  attack->add_option("--out", aa.out, "JSON records (default stdout)");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "time and account a partition sweep");
  bench->add_option("--cfg", ba.cfg, "network cfg file")->required();
  bench->add_option("--weights", ba.weights, "plain weights (default: cfg initialization)");
  bench->add_option("--data", ba.data, "workload dataset (train split)");
  bench->add_option("--sweep", ba.sweep, "all | comma-separated boundaries");
  bench->add_option("--mode", ba.mode, "train | infer");
  bench->add_option("--trials", ba.trials, "trials per boundary; the first is warm-up");
  bench->add_option("--budget", ba.budget, "secure bytes for the trusted application");
  bench->add_option("--policy", ba.policy, "output release: top1 | top5 | all | raw");
  bench->add_option("--transport", ba.transport, "in-process | two-process (DTZ_TRANSPORT overrides)");
  bench->add_option("--format", ba.format, "csv | json (default from --out extension, else csv)");
  bench->add_option("--out", ba.out, "report file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*infer) return cmd_infer(ia);
    if (*seal) return cmd_seal(sa);
    if (*plan) return cmd_plan(pa);
    if (*attack) return cmd_attack(aa);
    if (*bench) return cmd_bench(ba);
  } catch (const Error& e) {
    std::cerr << "dtz: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "dtz: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
