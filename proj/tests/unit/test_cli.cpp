#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "xmae/run_config.hpp"

using namespace xmae;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

struct Run {
  int code;
  std::string err;
};

// Runs the binary with the given arguments; stdout is discarded.
Run xmae_run(const std::string& args, const fs::path& scratch) {
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + XMAE_BIN + "\" " + args + " > /dev/null 2> \"" + err.string() + "\"";
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(err)};
}

const char* kSmallSynth = R"({"synth":{"n_subjects":3,"segs_per_subject":2,"seed":11}})";

const char* kSmallTrain = R"({
  "synth":{"n_subjects":3,"segs_per_subject":2,"seed":11},
  "model":{"embed_dim":8,"ff_dim":12,"heads":2,"conv_widths":[4,4,4],"conv_out":2,
           "depth_ppg":1,"depth_ecg":1,"depth_bridge":1,"depth_decoder":1},
  "train":{"epochs":1,"patience":1,"batch_size":4}
})";

}  // namespace

TEST_CASE("run config parsing") {
  const auto c = run_config_from_json(json::object());
  CHECK(c.train.objective == Objective::Xmae);
  CHECK(c.train.mask_mode == MaskMode::Contiguous);
  CHECK(c.train.curriculum);

  CHECK(th::error_kind([] { run_config_from_json(json{{"bogus", json::object()}}); }) == ErrorKind::Config);
  CHECK(th::error_kind([] { run_config_from_json(json{{"train", {{"epochz", 3}}}}); }) == ErrorKind::Config);
  CHECK(th::error_kind([] { run_config_from_json(json{{"model", {{"objective", "xmae"}}}}); }) == ErrorKind::Config);
  CHECK(th::error_kind([] { run_config_from_json(json{{"train", {{"base_lr", "fast"}}}}); }) == ErrorKind::Config);
  CHECK(th::error_kind([] { run_config_from_json(json{{"eval", {{"mask_ratio", 1.0}}}}); }) == ErrorKind::Config);

  CHECK(run_config_from_json(json{{"train", {{"objective", "mm"}}}}).train.objective == Objective::MmBaseline);
  CHECK(run_config_from_json(json{{"train", {{"objective", "mm_baseline"}}}}).train.objective == Objective::MmBaseline);
}

TEST_CASE("run config round trip") {
  auto c = run_config_from_json(json::parse(kSmallTrain));
  const auto j = run_config_to_json(c);
  CHECK(run_config_to_json(run_config_from_json(j)) == j);
  CHECK(j["synth"]["n_subjects"] == 3);
  CHECK(j["model"]["embed_dim"] == 8);
}

TEST_CASE("parse errors name the location") {
  try {
    parse_json_text("{\n  \"train\": {\n    \"epochs\": ,\n  }\n}", "bad.json");
    FAIL("expected a parse error");
  } catch (const Error& e) {
    const std::string m = e.what();
    CHECK(m.find("bad.json") != std::string::npos);
    CHECK(m.find("line 3") != std::string::npos);
    CHECK(m.find("column") != std::string::npos);
  }
}

TEST_CASE("synth command") {
  const auto d = th::temp_dir("cli_synth");
  spit(d / "c.json", kSmallSynth);
  const auto a = d / "a", b = d / "b";
  REQUIRE(xmae_run("synth --config " + (d / "c.json").string() + " --out " + a.string(), d).code == 0);
  REQUIRE(xmae_run("synth --config " + (d / "c.json").string() + " --out " + b.string(), d).code == 0);
  CHECK(fs::exists(a / "manifest.json"));
  CHECK(fs::exists(a / "resolved_config.json"));
  int n = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++n;
    CHECK(slurp(e.path()) == slurp(b / fs::relative(e.path(), a)));
  }
  CHECK(n > 6);

  // Non-empty output directory needs --force.
  CHECK(xmae_run("synth --config " + (d / "c.json").string() + " --out " + a.string(), d).code == 3);
  CHECK(xmae_run("synth --config " + (d / "c.json").string() + " --out " + a.string() + " --force", d).code == 0);
}

TEST_CASE("configuration and input errors") {
  const auto d = th::temp_dir("cli_errors");
  spit(d / "bad.json", "{\"synth\": {\"n_subjects\": 3,,}}");
  const auto r = xmae_run("synth --config " + (d / "bad.json").string() + " --out " + (d / "o").string(), d);
  CHECK(r.code == 2);
  CHECK(r.err.find("line") != std::string::npos);
  CHECK(r.err.find("column") != std::string::npos);

  spit(d / "unknown.json", "{\"synth\": {\"subjects\": 3}}");
  CHECK(xmae_run("synth --config " + (d / "unknown.json").string() + " --out " + (d / "o").string(), d).code == 2);
  CHECK(xmae_run("pretrain --objective nope --data x --out " + (d / "o").string(), d).code == 2);
  CHECK(xmae_run("pretrain --data " + (d / "missing").string() + " --out " + (d / "o").string(), d).code == 3);
  CHECK(xmae_run("synth --config " + (d / "nothere.json").string() + " --out " + (d / "o").string(), d).code == 3);
}

TEST_CASE("pretrain and eval") {
  const auto d = th::temp_dir("cli_train");
  spit(d / "c.json", kSmallTrain);
  const auto cfg = " --config " + (d / "c.json").string();
  REQUIRE(xmae_run("synth" + cfg + " --out " + (d / "data").string(), d).code == 0);
  const auto r = xmae_run("--threads 1 pretrain" + cfg + " --data " + (d / "data").string() + " --out " + (d / "x").string(), d);
  INFO(r.err);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(d / "x" / "checkpoint.bin"));
  const auto resolved = json::parse(slurp(d / "x" / "resolved_config.json"));
  CHECK(resolved["train"]["objective"] == "xmae");
  CHECK(resolved["train"]["mask_mode"] == "contiguous");
  CHECK(resolved["train"]["curriculum"] == true);

  REQUIRE(xmae_run("--threads 1 pretrain" + cfg + " --objective mm --data " + (d / "data").string() + " --out " +
                       (d / "m").string(),
                   d)
              .code == 0);
  CHECK(json::parse(slurp(d / "m" / "resolved_config.json"))["train"]["objective"] == "mm_baseline");

  // Reconstruction needs the cross-modal decoder.
  CHECK(xmae_run("eval" + cfg + " --checkpoint " + (d / "m" / "checkpoint.bin").string() + " --data " +
                     (d / "data").string() + " --suite recon --out " + (d / "e").string(),
                 d)
            .code == 5);
  CHECK(!fs::exists(d / "e"));

  const auto e = xmae_run("eval" + cfg + " --checkpoint " + (d / "x" / "checkpoint.bin").string() + " --checkpoint " +
                              (d / "m" / "checkpoint.bin").string() + " --data " + (d / "data").string() +
                              " --suite delay --out " + (d / "e").string(),
                          d);
  INFO(e.err);
  REQUIRE(e.code == 0);
  const auto s = json::parse(slurp(d / "e" / "summary.json"));
  CHECK(s["models"].contains("x"));
  CHECK(s["models"].contains("m"));
  CHECK(fs::exists(d / "e" / "delay_cdf.svg"));
}

TEST_CASE("oracle command") {
  const auto d = th::temp_dir("cli_oracle");
  REQUIRE(xmae_run("oracle --out " + (d / "o").string(), d).code == 0);
  const auto s = json::parse(slurp(d / "o" / "summary.json"));
  CHECK(s["cross"]["argmin"] == 2);
  CHECK(s["cross"]["unique"] == true);
  CHECK(s["degenerate"]["unique"] == false);
  CHECK(s["symmetric"]["constant_in_delay"] == true);
  CHECK(slurp(d / "o" / "cross" / "risk_curve.csv").rfind("assumed_delay,risk\n", 0) == 0);

  spit(d / "big.json", R"({"oracle":{"horizon":40,"true_delay":2}})");
  const auto big = xmae_run("oracle --config " + (d / "big.json").string() + " --out " + (d / "b").string(), d);
  CHECK(big.code == 6);
  CHECK(big.err.find("atoms") != std::string::npos);
  CHECK(!fs::exists(d / "b"));

  spit(d / "mc.json", R"({"oracle":{"mc_samples":20000}})");
  REQUIRE(xmae_run("oracle --mc-check --config " + (d / "mc.json").string() + " --out " + (d / "m").string(), d).code == 0);
  CHECK(slurp(d / "m" / "cross" / "risk_curve.csv").rfind("assumed_delay,risk,mc_risk,mc_se\n", 0) == 0);
  CHECK(json::parse(slurp(d / "m" / "summary.json"))["cross"].contains("mc_within_3se"));
}
