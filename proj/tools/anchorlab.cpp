// anchorlab command line: prototype generation, dataset synthesis, training,
// analysis, and the self-check suite. Exit codes: 0 success, 1 verification
// failure, 2 usage/config error, 3 I/O error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "anchorlab/analysis.hpp"
#include "anchorlab/common.hpp"
#include "anchorlab/datasets.hpp"
#include "anchorlab/losses.hpp"
#include "anchorlab/prototypes.hpp"
#include "anchorlab/rng.hpp"
#include "anchorlab/trainer.hpp"
#include "anchorlab/verify.hpp"

namespace al = anchorlab;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

json json_from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw al::IoError("cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw al::FormatError(path + ": " + e.what());
  }
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw al::IoError("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw al::IoError("short write to " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw al::IoError("cannot create directory " + dir + ": " + ec.message());
}

double json_num(const json& j, const char* key, double fallback) {
  return j.contains(key) ? j.at(key).get<double>() : fallback;
}

// seeds must not round-trip through double (loses bits above 2^53)
std::uint64_t json_u64(const json& j, const char* key, std::uint64_t fallback) {
  return j.contains(key) ? j.at(key).get<std::uint64_t>() : fallback;
}

std::vector<std::pair<int, int>> parse_class_map(const std::string& s) {
  std::vector<std::pair<int, int>> map;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    const std::string entry = s.substr(pos, comma - pos);
    const std::size_t colon = entry.find(':');
    if (colon == std::string::npos)
      throw al::MapError("class map entry '" + entry + "' is not src:dst");
    try {
      map.emplace_back(std::stoi(entry.substr(0, colon)), std::stoi(entry.substr(colon + 1)));
    } catch (const std::exception&) {
      throw al::MapError("class map entry '" + entry + "' is not numeric");
    }
    pos = comma + 1;
  }
  return map;
}

// ---- synth ----------------------------------------------------------------

struct SynthConfig {
  al::BlobSpec blobs;
  double eval_fraction = 0.2;
  std::string imbalance = "none";  // none|longtail|step
  double rho = 100.0;
  double minority_fraction = 0.5;
  std::string noise = "none";  // none|symmetric|asymmetric
  double eta = 0.0;
  std::string class_map;
  std::uint64_t master_seed = 0;
  bool seeds_resolved = false;
  std::uint64_t split_seed = 0, imbalance_seed = 0, noise_seed = 0;

  void resolve_seeds() {
    if (seeds_resolved) return;
    blobs.seed = al::derive_seed(master_seed, 20);
    split_seed = al::derive_seed(master_seed, 23);
    imbalance_seed = al::derive_seed(master_seed, 21);
    noise_seed = al::derive_seed(master_seed, 22);
    seeds_resolved = true;
  }

  json resolved() const {
    json j;
    j["kind"] = "synth_config";
    j["blobs"] = {{"k", blobs.k},
                  {"m", blobs.m},
                  {"per_class", blobs.per_class},
                  {"center_scale", blobs.center_scale},
                  {"noise_sigma", blobs.noise_sigma},
                  {"seed", blobs.seed}};
    j["eval_fraction"] = eval_fraction;
    j["imbalance"] = {{"profile", imbalance}, {"rho", rho},
                      {"minority_fraction", minority_fraction}, {"seed", imbalance_seed}};
    j["noise"] = {{"kind", noise}, {"eta", eta}, {"class_map", class_map}, {"seed", noise_seed}};
    j["split_seed"] = split_seed;
    j["master_seed"] = master_seed;
    return j;
  }
};

SynthConfig synth_config_from_json(const json& j) {
  SynthConfig c;
  c.blobs.k = static_cast<int>(json_num(j, "k", c.blobs.k));
  c.blobs.m = static_cast<int>(json_num(j, "m", c.blobs.m));
  c.blobs.per_class = static_cast<long>(json_num(j, "per_class", c.blobs.per_class));
  c.blobs.center_scale = json_num(j, "center_scale", c.blobs.center_scale);
  c.blobs.noise_sigma = json_num(j, "noise_sigma", c.blobs.noise_sigma);
  c.eval_fraction = json_num(j, "eval_fraction", c.eval_fraction);
  c.imbalance = j.value("imbalance", c.imbalance);
  c.rho = json_num(j, "rho", c.rho);
  c.minority_fraction = json_num(j, "minority_fraction", c.minority_fraction);
  c.noise = j.value("noise", c.noise);
  c.eta = json_num(j, "eta", c.eta);
  c.class_map = j.value("class_map", c.class_map);
  c.master_seed = json_u64(j, "seed", 0);
  return c;
}

// blobs -> stratified split -> imbalance on train -> noise on train;
// the eval split stays balanced and clean
std::pair<al::LabeledDataset, std::optional<al::LabeledDataset>> run_synth(SynthConfig& cfg) {
  cfg.resolve_seeds();
  al::LabeledDataset base = al::synth_blobs(cfg.blobs);
  std::optional<al::LabeledDataset> eval;
  al::LabeledDataset train = std::move(base);
  if (cfg.eval_fraction > 0) {
    auto [tr, ev] = al::split_stratified(train, cfg.eval_fraction, cfg.split_seed);
    train = std::move(tr);
    eval = std::move(ev);
  }
  if (cfg.imbalance == "longtail") {
    train = al::apply_longtail(train, cfg.rho, cfg.imbalance_seed);
  } else if (cfg.imbalance == "step") {
    train = al::apply_step(train, cfg.rho, cfg.minority_fraction, cfg.imbalance_seed);
  } else if (cfg.imbalance != "none") {
    throw al::ConfigError("unknown imbalance profile: " + cfg.imbalance);
  }
  if (cfg.noise == "symmetric") {
    train = al::apply_symmetric_noise(train, cfg.eta, cfg.noise_seed);
  } else if (cfg.noise == "asymmetric") {
    train = al::apply_asymmetric_noise(train, cfg.eta, parse_class_map(cfg.class_map),
                                       cfg.noise_seed);
  } else if (cfg.noise != "none") {
    throw al::ConfigError("unknown noise kind: " + cfg.noise);
  }
  return {std::move(train), std::move(eval)};
}

// ---- train ----------------------------------------------------------------

struct TrainRunConfig {
  json raw;
  std::uint64_t master_seed = 0;
};

al::PrototypeSet prototypes_from_config(const json& pj, int feature_dim,
                                        std::uint64_t default_seed) {
  const std::string mode = pj.value("mode", "closed_form");
  if (mode == "file") return al::load_prototypes(pj.at("path").get<std::string>());
  const int k = pj.at("k").get<int>();
  const int d = static_cast<int>(json_num(pj, "d", feature_dim));
  if (mode == "closed_form") return al::generate_closed_form(k, d);
  if (mode == "optimized") {
    al::ProtoGenConfig pc;
    pc.seed = json_u64(pj, "seed", default_seed);
    pc.tolerance = json_num(pj, "tolerance", pc.tolerance);
    pc.epochs = static_cast<long>(json_num(pj, "epochs", static_cast<double>(pc.epochs)));
    return al::generate_optimized(k, d, pc);
  }
  throw al::ConfigError("unknown prototype mode: " + mode);
}

al::LossSpec loss_spec_from_config(const json& lj, const std::vector<long>& train_counts) {
  al::LossSpec spec;
  spec.variant = al::loss_variant_from_name(lj.value("variant", "softmax"));
  spec.scale = json_num(lj, "scale", 1.0);
  spec.feature_normalize = lj.value("feature_normalize", false);
  spec.anchored = lj.value("anchored", false);
  if (lj.contains("margins")) spec.margins = lj["margins"].get<std::vector<double>>();
  if (al::variant_uses_margins(spec.variant) && spec.margins.empty() && lj.contains("ldam_c"))
    spec.margins = al::ldam_margins(train_counts, lj["ldam_c"].get<double>());
  if (lj.contains("q")) spec.q = lj["q"].get<double>();
  if (lj.contains("focal_gamma")) spec.focal_gamma = lj["focal_gamma"].get<double>();
  return spec;
}

json metrics_to_json(const al::EpochMetrics& m) {
  json j;
  j["epoch"] = m.epoch;
  j["train_loss"] = m.train_loss;
  j["train_acc"] = m.train_acc;
  j["eval_acc"] = m.eval_acc;
  j["min_sample_margin"] = m.min_sample_margin;
  j["mean_feature_norm"] = m.mean_feature_norm;
  j["mean_prototype_norm"] = m.mean_prototype_norm;
  j["min_prototype_angle_deg"] = m.min_prototype_angle_deg;
  j["learning_rate"] = m.learning_rate;
  return j;
}

json grouped_to_json(const al::GroupedAccuracy& g) {
  json j;
  j["kind"] = "grouped_accuracy";
  j["overall"] = g.overall;
  j["many_acc"] = g.many_acc;
  j["medium_acc"] = g.medium_acc;
  j["few_acc"] = g.few_acc;
  j["many_classes"] = g.many_classes;
  j["medium_classes"] = g.medium_classes;
  j["few_classes"] = g.few_classes;
  j["excluded_classes"] = g.excluded_classes;
  return j;
}

json run_train(const TrainRunConfig& rc, const std::string& out_dir) {
  ensure_dir(out_dir);
  const json& cfg = rc.raw;
  const std::uint64_t master = rc.master_seed;

  // data
  al::LabeledDataset train, eval;
  json data_resolved;
  const json dj = cfg.value("data", json::object());
  const std::string source = dj.value("source", "synth");
  if (source == "bundle") {
    train = al::load_bundle(dj.at("train_dir").get<std::string>());
    eval = al::load_bundle(dj.at("eval_dir").get<std::string>());
    data_resolved = {{"source", "bundle"},
                     {"train_dir", dj.at("train_dir")},
                     {"eval_dir", dj.at("eval_dir")}};
  } else if (source == "synth") {
    SynthConfig sc = synth_config_from_json(dj);
    if (!dj.contains("seed")) sc.master_seed = al::derive_seed(master, 20);
    if (sc.eval_fraction <= 0) throw al::ConfigError("synth training data needs eval_fraction > 0");
    auto [tr, ev] = run_synth(sc);
    train = std::move(tr);
    eval = std::move(*ev);
    data_resolved = sc.resolved();
    data_resolved["source"] = "synth";
  } else {
    throw al::ConfigError("unknown data source: " + source);
  }
  const auto train_counts = al::class_counts(train);

  // model
  const json mj = cfg.value("model", json::object());
  al::ModelConfig mc;
  mc.input_dim = train.m();
  mc.hidden_dims = mj.value("hidden_dims", std::vector<int>{128, 128});
  mc.feature_dim = static_cast<int>(json_num(mj, "feature_dim", 16));
  mc.activation = al::activation_from_name(mj.value("activation", "relu"));
  mc.anchored = mj.value("anchored", true);
  const std::uint64_t init_seed = json_u64(mj, "init_seed", al::derive_seed(master, 30));

  json proto_resolved;
  if (mc.anchored) {
    const json pj = cfg.value("prototypes", json::object());
    json pj_eff = pj;
    if (!pj_eff.contains("k")) pj_eff["k"] = train.k;
    mc.prototypes = prototypes_from_config(pj_eff, mc.feature_dim, al::derive_seed(master, 10));
    if (mc.prototypes.d != mc.feature_dim)
      throw al::ConfigError("prototype dim " + std::to_string(mc.prototypes.d) +
                            " != feature_dim " + std::to_string(mc.feature_dim));
    proto_resolved = {{"mode", pj_eff.value("mode", "closed_form")},
                      {"k", mc.prototypes.k},
                      {"d", mc.prototypes.d}};
  } else {
    mc.num_classes = train.k;
  }

  // loss + optim
  al::LossSpec spec = loss_spec_from_config(cfg.value("loss", json::object()), train_counts);
  const json oj = cfg.value("optim", json::object());
  al::OptimConfig opt;
  opt.learning_rate = json_num(oj, "learning_rate", opt.learning_rate);
  opt.momentum = json_num(oj, "momentum", opt.momentum);
  opt.weight_decay = json_num(oj, "weight_decay", opt.weight_decay);
  opt.epochs = static_cast<long>(json_num(oj, "epochs", static_cast<double>(opt.epochs)));
  opt.batch_size = static_cast<long>(json_num(oj, "batch_size", static_cast<double>(opt.batch_size)));
  opt.cosine = oj.value("cosine", true);
  opt.cosine_period = static_cast<long>(json_num(oj, "cosine_period", 0));
  opt.seed = json_u64(oj, "seed", al::derive_seed(master, 40));

  al::GroupThresholds thresholds;
  const json tj = cfg.value("thresholds", json::object());
  thresholds.many_min = static_cast<long>(json_num(tj, "many_min", 100));
  thresholds.few_max = static_cast<long>(json_num(tj, "few_max", 20));

  json resolved;
  resolved["kind"] = "train_config";
  resolved["master_seed"] = master;
  resolved["data"] = data_resolved;
  resolved["model"] = {{"input_dim", mc.input_dim},
                       {"hidden_dims", mc.hidden_dims},
                       {"feature_dim", mc.feature_dim},
                       {"activation", al::activation_name(mc.activation)},
                       {"anchored", mc.anchored},
                       {"init_seed", init_seed}};
  if (mc.anchored) resolved["prototypes"] = proto_resolved;
  resolved["loss"] = al::loss_spec_to_json(spec);
  resolved["optim"] = {{"learning_rate", opt.learning_rate},
                       {"momentum", opt.momentum},
                       {"weight_decay", opt.weight_decay},
                       {"epochs", opt.epochs},
                       {"batch_size", opt.batch_size},
                       {"cosine", opt.cosine},
                       {"cosine_period", opt.cosine_period},
                       {"seed", opt.seed}};
  resolved["thresholds"] = {{"many_min", thresholds.many_min}, {"few_max", thresholds.few_max}};
  resolved["train_class_counts"] = train_counts;
  write_json_file(out_dir + "/resolved_config.json", resolved);

  al::TrainState st = al::init_model(mc, init_seed);
  auto history = al::train(st, train, spec, opt, eval);
  al::write_metrics_csv(out_dir + "/metrics.csv", history, st.num_classes());

  json ckpt_extra;
  ckpt_extra["loss"] = al::loss_spec_to_json(spec);
  ckpt_extra["optim"] = resolved["optim"];
  ckpt_extra["master_seed"] = master;
  al::save_checkpoint(st, out_dir + "/model", ckpt_extra);

  json summary;
  summary["kind"] = "train_summary";
  if (!history.empty()) {
    summary["final"] = metrics_to_json(history.back());
    double peak = 0.0;
    for (const auto& m : history) peak = std::max(peak, m.eval_acc);
    summary["peak_eval_acc"] = peak;
    summary["final_eval_acc"] = history.back().eval_acc;
    summary["grouped"] = grouped_to_json(al::evaluate_grouped(st, eval, spec, thresholds));
  }
  summary["epochs_run"] = history.size();
  summary["out_dir"] = out_dir;
  write_json_file(out_dir + "/summary.json", summary);
  return summary;
}

// ---- analyze ----------------------------------------------------------------

void write_calibration_csv(const std::string& path, const al::CalibrationReport& rep) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw al::IoError("cannot open " + path + " for writing");
  f << "bin,lo,hi,confidence_mean,accuracy,count\n";
  char buf[160];
  for (std::size_t b = 0; b < rep.bins.size(); ++b) {
    const auto& bin = rep.bins[b];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%ld\n", b, bin.lo, bin.hi,
                  bin.confidence_mean, bin.accuracy, bin.count);
    f << buf;
  }
}

void write_hist_csv(const std::string& path, const al::NormStats& stats) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw al::IoError("cannot open " + path + " for writing");
  f << "bin,lo,hi,count\n";
  char buf[120];
  for (std::size_t b = 0; b < stats.feature_hist_counts.size(); ++b) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%ld\n", b, stats.feature_hist_edges(b),
                  stats.feature_hist_edges(b + 1), stats.feature_hist_counts[b]);
    f << buf;
  }
}

json run_analyze(const std::string& ckpt_prefix, const std::string& data_dir,
                 const std::string& out_dir, int ece_bins, al::GroupThresholds thresholds) {
  ensure_dir(out_dir);
  json header;
  al::TrainState st = al::load_checkpoint(ckpt_prefix, &header);
  if (!header.contains("loss"))
    throw al::FormatError(ckpt_prefix + ": checkpoint header lacks a loss spec");
  al::LossSpec spec = al::loss_spec_from_json(header["loss"]);
  al::LabeledDataset data = al::load_bundle(data_dir);

  json resolved;
  resolved["kind"] = "analyze_config";
  resolved["ckpt"] = ckpt_prefix;
  resolved["data"] = data_dir;
  resolved["ece_bins"] = ece_bins;
  resolved["thresholds"] = {{"many_min", thresholds.many_min}, {"few_max", thresholds.few_max}};
  write_json_file(out_dir + "/resolved_config.json", resolved);

  al::Matrix feats = al::extract_features(st, data.features);
  al::Matrix margin_feats = feats;
  if (spec.feature_normalize) {
    for (Eigen::Index i = 0; i < margin_feats.rows(); ++i) {
      const double nrm = margin_feats.row(i).norm();
      if (nrm < al::kZeroNormEps) throw al::NormalizationError("zero feature vector");
      margin_feats.row(i) /= nrm;
    }
  }
  auto margins = al::sample_margins(margin_feats, data.labels, st.classifier, spec.scale);
  json margin_json;
  margin_json["kind"] = "margin_report";
  margin_json["min_margin"] = margins.min_margin;
  margin_json["mean_margin"] = margins.per_sample.mean();
  margin_json["per_class_mean"] = std::vector<double>(
      margins.per_class.data(), margins.per_class.data() + margins.per_class.size());
  write_json_file(out_dir + "/margin_report.json", margin_json);

  auto probs = al::predict_probabilities(st, data.features, spec);
  auto calib = al::expected_calibration_error(probs, data.labels, ece_bins);
  json calib_json;
  calib_json["kind"] = "calibration_report";
  calib_json["ece"] = calib.ece;
  calib_json["bins"] = calib.bins.size();
  write_json_file(out_dir + "/calibration.json", calib_json);
  write_calibration_csv(out_dir + "/calibration_bins.csv", calib);

  auto stats = al::norm_stats(st.classifier, feats);
  json norm_json;
  norm_json["kind"] = "norm_stats";
  norm_json["mean_prototype_norm"] = stats.mean_prototype_norm;
  norm_json["mean_feature_norm"] = stats.mean_feature_norm;
  norm_json["prototype_norms"] = std::vector<double>(
      stats.prototype_norms.data(), stats.prototype_norms.data() + stats.prototype_norms.size());
  write_json_file(out_dir + "/norm_stats.json", norm_json);
  write_hist_csv(out_dir + "/feature_norm_hist.csv", stats);

  json summary;
  summary["kind"] = "analyze_summary";
  summary["min_margin"] = margins.min_margin;
  summary["ece"] = calib.ece;
  summary["min_prototype_angle_deg"] = al::min_prototype_angle(st.classifier);
  summary["mean_feature_norm"] = stats.mean_feature_norm;
  auto ev = al::evaluate(st, data, spec);
  summary["accuracy"] = ev.accuracy;
  if (!st.train_class_counts.empty())
    summary["grouped"] = grouped_to_json(al::evaluate_grouped(st, data, spec, thresholds));
  write_json_file(out_dir + "/summary.json", summary);
  return summary;
}

int error_exit(const std::exception& e, bool as_json) {
  const char* type = "error";
  int code = kExitUsage;
  if (dynamic_cast<const al::IoError*>(&e) || dynamic_cast<const al::FormatError*>(&e)) {
    code = kExitIo;
  } else if (dynamic_cast<const al::ConvergenceError*>(&e)) {
    code = kExitVerifyFail;
  } else if (dynamic_cast<const al::AnchorError*>(&e)) {
    code = kExitUsage;
  }
  if (auto* ae = dynamic_cast<const al::AnchorError*>(&e)) {
    if (dynamic_cast<const al::DimensionError*>(ae)) type = "dimension_error";
    else if (dynamic_cast<const al::ShapeError*>(ae)) type = "shape_error";
    else if (dynamic_cast<const al::ConvergenceError*>(ae)) type = "convergence_error";
    else if (dynamic_cast<const al::FormatError*>(ae)) type = "format_error";
    else if (dynamic_cast<const al::IoError*>(ae)) type = "io_error";
    else if (dynamic_cast<const al::ConfigError*>(ae)) type = "config_error";
    else type = "invalid_argument";
  }
  json err = {{"error", {{"type", type}, {"message", e.what()}}}};
  if (as_json)
    std::cout << err.dump() << "\n";
  else
    std::cerr << "error: " << e.what() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-anchored training toolkit"};
  app.require_subcommand(1);

  bool as_json = false;
  std::uint64_t master_seed = 0;
  std::string out_path;
  std::string config_path;
  app.add_flag("--json", as_json, "machine-readable stdout");
  app.add_option("--seed", master_seed, "master seed; component seeds derive from it");
  app.add_option("--out", out_path, "output path (directory or file prefix)");
  app.add_option("--config", config_path, "JSON config file");

  // protogen
  auto* protogen = app.add_subcommand("protogen", "generate a prototype set");
  int pg_k = 10, pg_d = 64;
  std::string pg_mode = "closed_form";
  double pg_tol = 1e-4;
  al::ProtoGenConfig pg_cfg;
  protogen->add_option("--k", pg_k, "number of classes");
  protogen->add_option("--d", pg_d, "embedding dimension");
  protogen->add_option("--mode", pg_mode, "closed_form | optimized")
      ->check(CLI::IsMember({"closed_form", "optimized"}));
  protogen->add_option("--tolerance", pg_tol, "verification tolerance");
  protogen->add_option("--epochs", pg_cfg.epochs, "optimizer epochs");
  protogen->add_option("--lr", pg_cfg.learning_rate, "optimizer learning rate");
  protogen->add_option("--momentum", pg_cfg.momentum, "optimizer momentum");
  protogen->add_option("--weight-decay", pg_cfg.weight_decay, "optimizer weight decay");
  protogen->add_option("--cosine-period", pg_cfg.cosine_period, "cosine schedule period");
  protogen->add_option("--scale", pg_cfg.scale, "logit scale");
  protogen->add_flag("--use-relu", pg_cfg.use_relu, "relu on the feature rows");

  // synth
  auto* synth = app.add_subcommand("synth", "synthesize a labeled dataset bundle");
  SynthConfig sy;
  synth->add_option("--k", sy.blobs.k, "classes");
  synth->add_option("--m", sy.blobs.m, "input dimension");
  synth->add_option("--per-class", sy.blobs.per_class, "samples per class");
  synth->add_option("--center-scale", sy.blobs.center_scale, "blob center radius");
  synth->add_option("--noise-sigma", sy.blobs.noise_sigma, "blob noise sigma");
  synth->add_option("--eval-fraction", sy.eval_fraction, "eval split fraction (0 = none)");
  synth->add_option("--imbalance", sy.imbalance, "none | longtail | step")
      ->check(CLI::IsMember({"none", "longtail", "step"}));
  synth->add_option("--rho", sy.rho, "imbalance ratio");
  synth->add_option("--minority-fraction", sy.minority_fraction, "step minority fraction");
  synth->add_option("--noise", sy.noise, "none | symmetric | asymmetric")
      ->check(CLI::IsMember({"none", "symmetric", "asymmetric"}));
  synth->add_option("--eta", sy.eta, "label noise rate");
  synth->add_option("--class-map", sy.class_map, "asymmetric map, e.g. 7:1,2:7,5:6,6:5");

  // train
  auto* train_cmd = app.add_subcommand("train", "run a training pipeline from a config");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "margins, calibration, norms of a checkpoint");
  std::string an_ckpt, an_data;
  int an_bins = 15;
  al::GroupThresholds an_thresholds;
  analyze->add_option("--ckpt", an_ckpt, "checkpoint prefix")->required();
  analyze->add_option("--data", an_data, "dataset bundle directory")->required();
  analyze->add_option("--ece-bins", an_bins, "calibration bins");
  analyze->add_option("--many-min", an_thresholds.many_min, "Many group: train count above this");
  analyze->add_option("--few-max", an_thresholds.few_max, "Few group: train count below this");

  // verify
  auto* verify = app.add_subcommand("verify", "run the theory self-check suite");
  al::VerifySuiteConfig vcfg;
  std::vector<std::string> vprotos;
  double vproto_tol = 1e-4;
  bool vskip_opt = false;
  verify->add_option("--grad-instances", vcfg.grad_instances, "instances per gradient case");
  verify->add_option("--samples", vcfg.lipschitz_samples, "samples per Lipschitz estimate");
  verify->add_option("--proto", vprotos, "prototype file(s) to audit");
  verify->add_option("--proto-tolerance", vproto_tol, "tolerance for --proto audits");
  verify->add_flag("--skip-optimized", vskip_opt, "skip the optimization-based generator checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (protogen->parsed()) {
      if (out_path.empty()) throw al::ConfigError("protogen needs --out <prefix>");
      al::PrototypeSet p;
      al::ProtoFileMeta meta;
      meta.generator = pg_mode;
      meta.seed = master_seed;
      meta.tolerance = pg_tol;
      if (pg_mode == "closed_form") {
        p = al::generate_closed_form(pg_k, pg_d);
      } else {
        pg_cfg.seed = master_seed;
        pg_cfg.tolerance = pg_tol;
        p = al::generate_optimized(pg_k, pg_d, pg_cfg);
      }
      al::save_prototypes(p, meta, out_path);
      auto rep = al::verify_equiangular(p, pg_tol);
      json resolved;
      resolved["kind"] = "protogen_config";
      resolved["k"] = pg_k;
      resolved["d"] = pg_d;
      resolved["mode"] = pg_mode;
      resolved["seed"] = master_seed;
      resolved["tolerance"] = pg_tol;
      if (pg_mode == "optimized")
        resolved["optimizer"] = {{"epochs", pg_cfg.epochs},
                                 {"learning_rate", pg_cfg.learning_rate},
                                 {"momentum", pg_cfg.momentum},
                                 {"weight_decay", pg_cfg.weight_decay},
                                 {"cosine_period", pg_cfg.cosine_period},
                                 {"scale", pg_cfg.scale},
                                 {"use_relu", pg_cfg.use_relu}};
      write_json_file(al::detail::strip_proto_suffix(out_path) + ".resolved_config.json",
                      resolved);
      json out = {{"kind", "protogen_report"},
                  {"k", pg_k},
                  {"d", pg_d},
                  {"mode", pg_mode},
                  {"max_norm_dev", rep.max_norm_dev},
                  {"max_gram_dev", rep.max_gram_dev},
                  {"min_angle_deg", rep.min_angle_deg},
                  {"pass", rep.pass}};
      if (as_json)
        std::cout << out.dump() << "\n";
      else
        std::printf("prototypes k=%d d=%d: max gram dev %.3e, min angle %.2f deg [%s]\n", pg_k,
                    pg_d, rep.max_gram_dev, rep.min_angle_deg, rep.pass ? "ok" : "FAIL");
      return rep.pass ? kExitOk : kExitVerifyFail;
    }

    if (synth->parsed()) {
      if (out_path.empty()) throw al::ConfigError("synth needs --out <dir>");
      SynthConfig cfg = sy;
      if (!config_path.empty()) {
        cfg = synth_config_from_json(json_from_file(config_path));
        // explicit flags override file values
        for (const auto* opt : synth->get_options()) {
          if (opt->count() == 0) continue;
          const std::string name = opt->get_name();
          if (name == "--k") cfg.blobs.k = sy.blobs.k;
          else if (name == "--m") cfg.blobs.m = sy.blobs.m;
          else if (name == "--per-class") cfg.blobs.per_class = sy.blobs.per_class;
          else if (name == "--center-scale") cfg.blobs.center_scale = sy.blobs.center_scale;
          else if (name == "--noise-sigma") cfg.blobs.noise_sigma = sy.blobs.noise_sigma;
          else if (name == "--eval-fraction") cfg.eval_fraction = sy.eval_fraction;
          else if (name == "--imbalance") cfg.imbalance = sy.imbalance;
          else if (name == "--rho") cfg.rho = sy.rho;
          else if (name == "--minority-fraction") cfg.minority_fraction = sy.minority_fraction;
          else if (name == "--noise") cfg.noise = sy.noise;
          else if (name == "--eta") cfg.eta = sy.eta;
          else if (name == "--class-map") cfg.class_map = sy.class_map;
        }
      }
      if (app.count("--seed")) cfg.master_seed = master_seed;
      auto [train, eval] = run_synth(cfg);
      ensure_dir(out_path);
      al::save_bundle(train, out_path + "/train");
      if (eval) al::save_bundle(*eval, out_path + "/eval");
      write_json_file(out_path + "/resolved_config.json", cfg.resolved());
      json out = {{"kind", "synth_report"},
                  {"train_n", train.n()},
                  {"train_counts", al::class_counts(train)},
                  {"imbalance_ratio", al::imbalance_ratio(train)},
                  {"eval_n", eval ? eval->n() : 0}};
      if (as_json)
        std::cout << out.dump() << "\n";
      else
        std::printf("wrote %s: train n=%ld (ratio %.1f), eval n=%ld\n", out_path.c_str(),
                    train.n(), al::imbalance_ratio(train), eval ? eval->n() : 0L);
      return kExitOk;
    }

    if (train_cmd->parsed()) {
      if (config_path.empty()) throw al::ConfigError("train needs --config <run.json>");
      if (out_path.empty()) throw al::ConfigError("train needs --out <dir>");
      TrainRunConfig rc;
      rc.raw = json_from_file(config_path);
      rc.master_seed = app.count("--seed") ? master_seed : json_u64(rc.raw, "seed", 0);
      json summary = run_train(rc, out_path);
      if (as_json)
        std::cout << summary.dump() << "\n";
      else if (summary.contains("final"))
        std::printf("trained %ld epochs: eval_acc %.4f, min margin %.4f -> %s\n",
                    static_cast<long>(summary["epochs_run"].get<std::size_t>()),
                    summary["final"]["eval_acc"].get<double>(),
                    summary["final"]["min_sample_margin"].get<double>(), out_path.c_str());
      else
        std::printf("trained 0 epochs -> %s\n", out_path.c_str());
      return kExitOk;
    }

    if (analyze->parsed()) {
      if (out_path.empty()) throw al::ConfigError("analyze needs --out <dir>");
      json summary = run_analyze(an_ckpt, an_data, out_path, an_bins, an_thresholds);
      if (as_json)
        std::cout << summary.dump() << "\n";
      else
        std::printf("analyze: accuracy %.4f, min margin %.4f, ece %.4f -> %s\n",
                    summary["accuracy"].get<double>(), summary["min_margin"].get<double>(),
                    summary["ece"].get<double>(), out_path.c_str());
      return kExitOk;
    }

    if (verify->parsed()) {
      vcfg.seed = master_seed;
      vcfg.include_optimized = !vskip_opt;
      auto results = al::run_theory_suite(vcfg);
      for (const auto& path : vprotos)
        results.push_back(al::verify_prototype_file(path, vproto_tol));
      bool all_pass = true;
      json jr = json::array();
      for (const auto& r : results) {
        all_pass = all_pass && r.pass;
        if (as_json)
          jr.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
        else
          std::printf("[%s] %s: %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                      r.detail.c_str());
      }
      if (as_json) std::cout << json({{"kind", "verify_report"}, {"checks", jr}, {"pass", all_pass}}).dump() << "\n";
      return all_pass ? kExitOk : kExitVerifyFail;
    }
  } catch (const std::exception& e) {
    return error_exit(e, as_json);
  }
  return kExitUsage;
}
