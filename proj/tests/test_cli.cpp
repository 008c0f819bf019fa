#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "anchorlab/datasets.hpp"
#include "anchorlab/prototypes.hpp"
#include "anchorlab/rng.hpp"
#include "helpers.hpp"

using namespace anchorlab;
using nlohmann::json;

namespace {

int run_cli(const std::string& args, const std::filesystem::path& log) {
  const std::string cmd = std::string("\"") + ANCHORLAB_CLI_PATH + "\" " + args + " > \"" +
                          log.string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

json log_json(const std::filesystem::path& log) { return json::parse(slurp(log)); }

}  // namespace

TEST_CASE("cli usage errors exit 2 and help exits 0") {
  auto dir = fresh_dir("cli_usage");
  const auto log = dir / "log";
  REQUIRE(run_cli("--help", log) == 0);
  REQUIRE(run_cli("frobnicate", log) == 2);
  REQUIRE(run_cli("", log) == 2);
  REQUIRE(run_cli("protogen --k 4 --d 8", log) == 2);  // missing --out
  REQUIRE(run_cli("--out \"" + (dir / "p").string() + "\" protogen --k 1 --d 4", log) == 2);
  REQUIRE(run_cli("--out \"" + dir.string() + "\" analyze --data x", log) == 2);  // missing --ckpt
}

TEST_CASE("protogen writes a loadable verified prototype set") {
  auto dir = fresh_dir("cli_protogen");
  const auto log = dir / "log";
  const auto prefix = (dir / "p").string();
  REQUIRE(run_cli("--json --out \"" + prefix + "\" protogen --k 4 --d 8", log) == 0);
  REQUIRE(std::filesystem::exists(prefix + ".proto.json"));
  REQUIRE(std::filesystem::exists(prefix + ".proto.bin"));
  REQUIRE(std::filesystem::exists(prefix + ".resolved_config.json"));

  auto rep = log_json(log);
  REQUIRE(rep.at("kind") == "protogen_report");
  REQUIRE(rep.at("pass").get<bool>());

  auto p = load_prototypes(prefix);
  REQUIRE(p.k == 4);
  REQUIRE(p.d == 8);
  REQUIRE(max_gram_deviation(p.vectors) <= 1e-10);

  // the self-check suite accepts the file
  REQUIRE(run_cli("verify --grad-instances 2 --samples 2000 --skip-optimized --proto \"" +
                      prefix + "\"",
                  log) == 0);

  // a well-formed file with broken geometry fails the audit
  PrototypeSet bad = p;
  bad.vectors.row(0) *= 1.5;
  save_prototypes(bad, ProtoFileMeta{}, (dir / "bad").string());
  REQUIRE(run_cli("verify --grad-instances 2 --samples 2000 --skip-optimized --proto \"" +
                      (dir / "bad").string() + "\"",
                  log) == 1);
  REQUIRE(slurp(log).find("[FAIL] prototype_file") != std::string::npos);

  // an unreadable file is an I/O failure, not a verification verdict
  spit(dir / "garbage.proto.json", "{not json");
  REQUIRE(run_cli("verify --grad-instances 2 --samples 2000 --skip-optimized --proto \"" +
                      (dir / "garbage").string() + "\"",
                  log) == 3);
}

TEST_CASE("verify runs the theory suite clean") {
  auto dir = fresh_dir("cli_verify");
  const auto log = dir / "log";
  REQUIRE(run_cli("--json verify --grad-instances 2 --samples 2000 --skip-optimized", log) == 0);
  auto rep = log_json(log);
  REQUIRE(rep.at("kind") == "verify_report");
  REQUIRE(rep.at("pass").get<bool>());
  REQUIRE(rep.at("checks").size() >= 8);
  for (const auto& c : rep["checks"]) REQUIRE(c.at("pass").get<bool>());
}

TEST_CASE("synth writes deterministic bundles") {
  auto base = fresh_dir("cli_synth");
  const auto log = base / "log";
  const std::string flags = " synth --k 3 --m 4 --per-class 40 --eval-fraction 0.25";
  REQUIRE(run_cli("--json --seed 5 --out \"" + (base / "one").string() + "\"" + flags, log) == 0);

  auto rep = log_json(log);
  REQUIRE(rep.at("train_n") == 90);
  REQUIRE(rep.at("eval_n") == 30);
  REQUIRE(rep.at("imbalance_ratio") == 1.0);

  auto train = load_bundle((base / "one" / "train").string());
  REQUIRE(train.k == 3);
  REQUIRE(train.n() == 90);
  REQUIRE(class_counts(train) == std::vector<long>{30, 30, 30});
  auto eval = load_bundle((base / "one" / "eval").string());
  REQUIRE(eval.n() == 30);

  auto resolved = json::parse(slurp(base / "one" / "resolved_config.json"));
  REQUIRE(resolved.at("master_seed") == 5);
  REQUIRE(resolved.at("blobs").at("seed") == derive_seed(5, 20));
  REQUIRE(resolved.at("split_seed") == derive_seed(5, 23));

  REQUIRE(run_cli("--json --seed 5 --out \"" + (base / "two").string() + "\"" + flags, log) == 0);
  REQUIRE(slurp(base / "one" / "train" / "data.bin") == slurp(base / "two" / "train" / "data.bin"));
  REQUIRE(slurp(base / "one" / "train" / "labels.bin") ==
          slurp(base / "two" / "train" / "labels.bin"));

  // a different master seed moves the data
  REQUIRE(run_cli("--json --seed 6 --out \"" + (base / "three").string() + "\"" + flags, log) == 0);
  REQUIRE(slurp(base / "one" / "train" / "data.bin") !=
          slurp(base / "three" / "train" / "data.bin"));
}

TEST_CASE("synth applies imbalance and noise on the train split only") {
  auto base = fresh_dir("cli_synth_lt");
  const auto log = base / "log";
  REQUIRE(run_cli("--seed 9 --out \"" + (base / "out").string() +
                      "\" synth --k 4 --m 6 --per-class 100 --eval-fraction 0.2 "
                      "--imbalance longtail --rho 10 --noise symmetric --eta 0.2",
                  log) == 0);
  auto train = load_bundle((base / "out" / "train").string());
  // the long-tail profile lives in the clean labels; symmetric noise smooths
  // the observed counts toward uniform
  std::vector<long> clean_counts(4, 0);
  for (int y : train.clean_labels) ++clean_counts[static_cast<std::size_t>(y)];
  REQUIRE(clean_counts == std::vector<long>{80, 37, 17, 8});
  REQUIRE(train.n() == 142);
  long flips = 0;
  for (std::size_t i = 0; i < train.labels.size(); ++i)
    if (train.labels[i] != train.clean_labels[i]) ++flips;
  REQUIRE(flips > 0);

  auto eval = load_bundle((base / "out" / "eval").string());
  REQUIRE(class_counts(eval) == std::vector<long>{20, 20, 20, 20});
  REQUIRE(eval.labels == eval.clean_labels);
}

TEST_CASE("train runs a config end to end, deterministically") {
  auto base = fresh_dir("cli_train");
  const auto log = base / "log";
  json cfg;
  cfg["seed"] = 123;
  cfg["data"] = {{"source", "synth"}, {"k", 3},         {"m", 4},
                 {"per_class", 40},   {"eval_fraction", 0.25}, {"center_scale", 6.0},
                 {"noise_sigma", 0.5}};
  cfg["model"] = {{"hidden_dims", json::array({8})}, {"feature_dim", 4}, {"anchored", true}};
  cfg["prototypes"] = {{"mode", "closed_form"}};
  cfg["loss"] = {{"variant", "softmax"}, {"anchored", true}, {"feature_normalize", true},
                 {"scale", 4.0}};
  cfg["optim"] = {{"learning_rate", 0.1}, {"epochs", 5}, {"batch_size", 16}};
  spit(base / "run.json", cfg.dump(2));

  const std::string invoke = "--json --config \"" + (base / "run.json").string() + "\" --out \"";
  REQUIRE(run_cli(invoke + (base / "t1").string() + "\" train", log) == 0);
  for (const char* f : {"resolved_config.json", "metrics.csv", "model.ckpt.json",
                        "model.ckpt.bin", "summary.json"})
    REQUIRE(std::filesystem::exists(base / "t1" / f));

  auto summary = log_json(log);
  REQUIRE(summary.at("kind") == "train_summary");
  REQUIRE(summary.at("epochs_run") == 5);
  REQUIRE(summary.at("final_eval_acc").get<double>() >= 0.8);
  REQUIRE(summary.at("grouped").at("overall").get<double>() ==
          summary.at("final_eval_acc").get<double>());

  auto resolved = json::parse(slurp(base / "t1" / "resolved_config.json"));
  REQUIRE(resolved.at("master_seed") == 123);
  REQUIRE(resolved.at("data").at("master_seed") == derive_seed(123, 20));
  REQUIRE(resolved.at("model").at("init_seed") == derive_seed(123, 30));
  REQUIRE(resolved.at("optim").at("seed") == derive_seed(123, 40));
  REQUIRE(resolved.at("prototypes").at("k") == 3);

  REQUIRE(run_cli(invoke + (base / "t2").string() + "\" train", log) == 0);
  REQUIRE(slurp(base / "t1" / "metrics.csv") == slurp(base / "t2" / "metrics.csv"));
  REQUIRE(slurp(base / "t1" / "model.ckpt.bin") == slurp(base / "t2" / "model.ckpt.bin"));

  // --seed on the command line overrides the config seed
  REQUIRE(run_cli("--seed 124 " + invoke + (base / "t3").string() + "\" train", log) == 0);
  REQUIRE(slurp(base / "t1" / "metrics.csv") != slurp(base / "t3" / "metrics.csv"));
}

TEST_CASE("train reports config and io errors distinctly") {
  auto base = fresh_dir("cli_train_err");
  const auto log = base / "log";
  REQUIRE(run_cli("--config \"" + (base / "missing.json").string() + "\" --out \"" +
                      (base / "out").string() + "\" train",
                  log) == 3);

  json cfg;
  cfg["data"] = {{"k", 3}, {"m", 4}, {"per_class", 20}, {"eval_fraction", 0.25}};
  cfg["model"] = {{"hidden_dims", json::array({4})}, {"feature_dim", 4}, {"anchored", true}};
  cfg["loss"] = {{"variant", "bogus"}, {"anchored", true}};
  spit(base / "bad.json", cfg.dump());
  REQUIRE(run_cli("--config \"" + (base / "bad.json").string() + "\" --out \"" +
                      (base / "out").string() + "\" train",
                  log) == 2);
}

TEST_CASE("analyze reads a checkpoint and a bundle") {
  auto base = fresh_dir("cli_analyze");
  const auto log = base / "log";

  // train a small model, synthesizing the eval bundle separately with the
  // same data parameters so dimensions line up
  REQUIRE(run_cli("--seed 5 --out \"" + (base / "data").string() +
                      "\" synth --k 3 --m 4 --per-class 40 --eval-fraction 0.25",
              log) == 0);
  json cfg;
  cfg["seed"] = 123;
  cfg["data"] = {{"source", "bundle"},
                 {"train_dir", (base / "data" / "train").string()},
                 {"eval_dir", (base / "data" / "eval").string()}};
  cfg["model"] = {{"hidden_dims", json::array({8})}, {"feature_dim", 4}, {"anchored", true}};
  cfg["loss"] = {{"variant", "softmax"}, {"anchored", true}, {"feature_normalize", true},
                 {"scale", 4.0}};
  cfg["optim"] = {{"learning_rate", 0.1}, {"epochs", 5}, {"batch_size", 16}};
  spit(base / "run.json", cfg.dump());
  REQUIRE(run_cli("--config \"" + (base / "run.json").string() + "\" --out \"" +
                      (base / "train").string() + "\" train",
                  log) == 0);

  REQUIRE(run_cli("--json --out \"" + (base / "a1").string() + "\" analyze --ckpt \"" +
                      (base / "train" / "model").string() + "\" --data \"" +
                      (base / "data" / "eval").string() + "\"",
                  log) == 0);
  for (const char* f : {"resolved_config.json", "margin_report.json", "calibration.json",
                        "calibration_bins.csv", "norm_stats.json", "feature_norm_hist.csv",
                        "summary.json"})
    REQUIRE(std::filesystem::exists(base / "a1" / f));

  auto summary = log_json(log);
  REQUIRE(summary.at("kind") == "analyze_summary");
  REQUIRE(summary.contains("accuracy"));
  REQUIRE(summary.contains("ece"));
  REQUIRE(summary.contains("min_margin"));
  REQUIRE(summary.contains("grouped"));
  REQUIRE(summary.at("min_prototype_angle_deg").get<double>() > 80.0);

  auto margin = json::parse(slurp(base / "a1" / "margin_report.json"));
  REQUIRE(margin.at("per_class_mean").size() == 3);

  REQUIRE(run_cli("--out \"" + (base / "a2").string() + "\" analyze --ckpt \"" +
                      (base / "nope").string() + "\" --data \"" +
                      (base / "data" / "eval").string() + "\"",
                  log) == 3);
}
