#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "dtz/modelio/cfg.hpp"
#include "dtz/modelio/seal.hpp"
#include "dtz/modelio/weights.hpp"
#include "dtz/worlds/budget.hpp"
#include "test_support.hpp"

namespace dtz {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using test::error_kind;

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    char tmpl[] = "/tmp/dtz_cli_XXXXXX";
    ASSERT_NE(::mkdtemp(tmpl), nullptr);
    dir_ = tmpl;
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  static std::string cfg() { return std::string(DTZ_MODELS_DIR) + "/mini_alexnet.cfg"; }

  CliResult run(const std::string& args) const {
    const auto err = path("stderr.txt");
    const std::string cmd = "env -u DTZ_TRANSPORT " + std::string(DTZ_CLI_EXECUTABLE) + " " + args + " 2>" + err;
    CliResult r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_text_file(err);
    return r;
  }

  /// Trains mini_alexnet with nothing trusted and returns the weights path.
  std::string plain_weights(const std::string& name = "w.dtzw") const {
    const auto r = run("train --cfg " + cfg() + " --data synthetic:n=12,test=4 --epochs 1 --seed 5 --out-weights " +
                       path(name));
    EXPECT_EQ(r.code, 0) << r.err;
    return path(name);
  }

  std::string write_input(const Network<float>& net, std::uint64_t seed) const {
    Rng rng(seed);
    const auto x = test::random_tensor<float>(net.input_shape, rng, 0, 1);
    const auto p = path("x" + std::to_string(seed) + ".bin");
    std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(x.data()), 4 * x.size());
    return p;
  }

  fs::path dir_;
};

TEST(ByteSize, UnitsAreBaseTwo) {
  EXPECT_EQ(parse_byte_size("4096"), 4096u);
  EXPECT_EQ(parse_byte_size("7B"), 7u);
  EXPECT_EQ(parse_byte_size("3KiB"), 3u * 1024);
  EXPECT_EQ(parse_byte_size("14MiB"), 14u * kMiB);
  EXPECT_EQ(parse_byte_size("1GiB"), 1024u * kMiB);
  for (const char* bad : {"", "MiB", "-1MiB", "5MB", "5 MiB", "99999999999999999999GiB"})
    EXPECT_EQ(error_kind([&] { parse_byte_size(bad); }), ErrorKind::validation) << bad;
}

TEST_F(Cli, HelpListsSubcommandsAndFlags) {
  const auto top = run("--help");
  EXPECT_EQ(top.code, 0);
  for (const char* sub : {"train", "infer", "seal", "plan", "attack", "bench"})
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
  const auto train = run("train --help");
  EXPECT_EQ(train.code, 0);
  for (const char* flag : {"--cfg", "--data", "--boundary", "--budget", "--epochs", "--lr", "--seed", "--out-sealed",
                           "--key"})
    EXPECT_NE(train.out.find(flag), std::string::npos) << flag;
  const auto bench = run("bench --help");
  for (const char* flag : {"--sweep", "--mode", "--trials", "--out"})
    EXPECT_NE(bench.out.find(flag), std::string::npos) << flag;
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("plan --cfg " + cfg()).code, 1);
  EXPECT_EQ(run("plan --cfg " + cfg() + " --boundary 0 --bogus").code, 1);
}

TEST_F(Cli, PlanPrintsEstimateAndRefusesOverBudget) {
  const auto net = load_cfg(cfg());
  for (std::size_t l = 0; l <= net.layers.size(); ++l) {
    const auto r = run("plan --cfg " + cfg() + " --boundary " + std::to_string(l) + " --train-mode");
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = json::parse(r.out);
    const auto b = effective_boundary(net, l);
    EXPECT_EQ(j["boundary"], b);
    EXPECT_EQ(j["estimate_bytes"], estimate_ta_memory(net, b, Mode::train));
    EXPECT_EQ(j["valid"], true);
  }
  const auto r = run("plan --cfg " + cfg() + " --boundary 0 --budget 64KiB");
  EXPECT_EQ(r.code, 4);
  const auto j = json::parse(r.out);
  EXPECT_EQ(j["valid"], false);
  EXPECT_EQ(j["estimate_bytes"], estimate_ta_memory(net, 0, Mode::infer));
  EXPECT_NE(r.err.find("over the"), std::string::npos) << r.err;
}

TEST_F(Cli, BadInputsExitTwo) {
  EXPECT_EQ(run("plan --cfg " + path("missing.cfg") + " --boundary 0").code, 2);
  EXPECT_EQ(run("plan --cfg " + cfg() + " --boundary 0 --budget 12MB").code, 2);
  EXPECT_EQ(run("train --cfg " + cfg() + " --data nosuch:x --epochs 1").code, 2);
  EXPECT_EQ(run("train --cfg " + cfg() + " --data synthetic:n=4,test=1 --boundary 3").code, 3);  // no key
}

TEST_F(Cli, SealInferMatchesPlainForward) {
  auto net = load_cfg(cfg());
  const auto weights = plain_weights();
  load_weights(net, read_binary_file(weights));
  const auto seal = run("seal --cfg " + cfg() + " --weights " + weights + " --boundary 4 --key " + path("k.bin") +
                        " --out " + path("m.dtzs"));
  ASSERT_EQ(seal.code, 0) << seal.err;
  EXPECT_EQ(json::parse(seal.out)["boundary"], effective_boundary(net, 4));
  EXPECT_TRUE(fs::exists(path("k.bin")));
  EXPECT_EQ(fs::file_size(path("k.bin")), 16u);

  for (std::uint64_t seed : {1, 2, 3}) {
    const auto input = write_input(net, seed);
    Rng rng(seed);
    const auto x = test::random_tensor<float>(net.input_shape, rng, 0, 1);
    const auto& probs = forward_net(net, x, net.all(), Mode::infer);
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.size(); ++c)
      if (probs[c] > probs[best]) best = c;
    for (const char* transport : {"in-process", "two-process"}) {
      const auto r = run("infer --cfg " + cfg() + " --sealed " + path("m.dtzs") + " --key " + path("k.bin") +
                         " --input " + input + " --transport " + transport);
      ASSERT_EQ(r.code, 0) << r.err;
      const auto j = json::parse(r.out);
      ASSERT_EQ(j["entries"].size(), 1u);
      EXPECT_EQ(j["entries"][0]["class"], best) << transport;
      EXPECT_NEAR(j["entries"][0]["score"].get<double>(), probs[best], 1e-6) << transport;
    }
  }
}

TEST_F(Cli, TamperedOrWrongKeyExitsThree) {
  const auto weights = plain_weights();
  ASSERT_EQ(run("seal --cfg " + cfg() + " --weights " + weights + " --boundary 2 --key " + path("k.bin") + " --out " +
                path("m.dtzs"))
                .code,
            0);
  const auto net = load_cfg(cfg());
  const auto input = write_input(net, 9);
  auto sealed = read_binary_file(path("m.dtzs"));
  for (std::size_t at : {kSealedHeaderSize + 40, sealed.size() / 2, sealed.size() - 1}) {
    auto bad = sealed;
    bad[at] ^= 0x01;
    write_binary_file(path("bad.dtzs"), bad);
    const auto r = run("infer --cfg " + cfg() + " --sealed " + path("bad.dtzs") + " --key " + path("k.bin") +
                       " --input " + input);
    EXPECT_EQ(r.code, 3) << at << " " << r.err;
    EXPECT_TRUE(r.out.empty());
  }
  write_binary_file(path("other.bin"), random_key());
  EXPECT_EQ(run("infer --cfg " + cfg() + " --sealed " + path("m.dtzs") + " --key " + path("other.bin") + " --input " +
                input)
                .code,
            3);
  write_binary_file(path("short.bin"), Bytes(15, 7));
  for (const char* transport : {"in-process", "two-process"})
    EXPECT_EQ(run("infer --cfg " + cfg() + " --sealed " + path("m.dtzs") + " --key " + path("short.bin") +
                  " --input " + input + " --transport " + transport)
                  .code,
              3);
}

TEST_F(Cli, TrainIsReproducibleForFixedSeed) {
  std::string outs[2];
  std::vector<LayerParams> params[2];
  Key128 key;
  for (int i = 0; i < 2; ++i) {
    const auto name = "m" + std::to_string(i) + ".dtzs";
    const auto r = run("train --cfg " + cfg() + " --data synthetic:n=10,test=4 --boundary 5 --epochs 2 --seed 11 --key " +
                       path("k.bin") + " --out-sealed " + path(name));
    ASSERT_EQ(r.code, 0) << r.err;
    outs[i] = r.out;
    key = load_key(path("k.bin"));
    const auto file = parse_sealed(read_binary_file(path(name)));
    params[i] = file.prefix;
    for (auto& p : unseal_layers(file, key)) params[i].push_back(std::move(p));
  }
  EXPECT_EQ(outs[0], outs[1]);
  EXPECT_EQ(params[0], params[1]);
  const auto j = json::parse(outs[0]);
  EXPECT_EQ(j["steps"], 20);
  EXPECT_EQ(j["crossings"], 1 + 2 * 20 + 14 + 1);  // load, two per step, one per accuracy query, save
  EXPECT_FALSE(j.contains("final_epoch_loss"));
}

TEST_F(Cli, AttackWritesRecordsAndFeatures) {
  const auto weights = plain_weights();
  const auto r = run("attack --cfg " + cfg() + " --weights " + weights +
                     " --data synthetic:n=8,test=8 --setting last --phase infer --k 2 --epochs 2 --seeds 2 --out " +
                     path("a.json") + " --features-out " + path("f.dtza"));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = json::parse(read_text_file(path("a.json")));
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["setting"], "last");
  EXPECT_EQ(j[0]["k"], 2);
  EXPECT_EQ(j[0]["seeds"].size(), 2u);
  for (const char* m : {"precision", "recall", "accuracy"}) {
    EXPECT_GE(j[0][m].get<double>(), 0.0);
    EXPECT_LE(j[0][m].get<double>(), 1.0);
  }
  EXPECT_TRUE(fs::exists(path("f.dtza")));
  EXPECT_EQ(run("attack --cfg " + cfg() + " --weights " + weights + " --setting middle").code, 2);
}

TEST_F(Cli, BenchEmitsCsvAndJson) {
  const auto net = load_cfg(cfg());
  const auto csv = run("bench --cfg " + cfg() + " --data synthetic:n=2,test=1 --sweep 9,5,0 --trials 2 --mode train");
  ASSERT_EQ(csv.code, 0) << csv.err;
  std::istringstream in(csv.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("boundary,trial,mode", 0), 0u);
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3u * 2);
  EXPECT_NE(csv.err.find("overhead"), std::string::npos) << csv.err;

  const auto js = run("bench --cfg " + cfg() + " --data synthetic:n=2,test=1 --sweep 9,0 --trials 1 --budget 64KiB --out " +
                      path("r.json"));
  ASSERT_EQ(js.code, 0) << js.err;
  const auto j = json::parse(read_text_file(path("r.json")));
  EXPECT_EQ(j["points"][1]["feasible"], false);
  EXPECT_EQ(run("bench --cfg " + cfg() + " --sweep 1,x").code, 2);
}

}  // namespace
}  // namespace dtz
