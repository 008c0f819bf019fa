#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "anchorlab/trainer.hpp"
#include "helpers.hpp"

using namespace anchorlab;

namespace {

LabeledDataset easy_blobs(int k = 3, int m = 4, long per_class = 40, std::uint64_t seed = 1) {
  BlobSpec spec;
  spec.k = k;
  spec.m = m;
  spec.per_class = per_class;
  spec.center_scale = 6.0;
  spec.noise_sigma = 0.5;
  spec.seed = seed;
  return synth_blobs(spec);
}

ModelConfig anchored_config(int input_dim, int k, int feature_dim) {
  ModelConfig cfg;
  cfg.input_dim = input_dim;
  cfg.hidden_dims = {16};
  cfg.feature_dim = feature_dim;
  cfg.anchored = true;
  cfg.prototypes = generate_closed_form(k, feature_dim);
  return cfg;
}

bool states_equal(const TrainState& a, const TrainState& b) {
  if (a.weights.size() != b.weights.size()) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l)
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  return a.classifier == b.classifier && a.epoch == b.epoch;
}

}  // namespace

TEST_CASE("init_model builds the declared layer stack") {
  ModelConfig cfg;
  cfg.input_dim = 6;
  cfg.hidden_dims = {5, 4};
  cfg.feature_dim = 3;
  cfg.num_classes = 7;
  auto st = init_model(cfg, 11);
  REQUIRE(st.weights.size() == 3);
  REQUIRE(st.weights[0].rows() == 5);
  REQUIRE(st.weights[0].cols() == 6);
  REQUIRE(st.weights[1].rows() == 4);
  REQUIRE(st.weights[1].cols() == 5);
  REQUIRE(st.weights[2].rows() == 3);
  REQUIRE(st.weights[2].cols() == 4);
  for (const auto& b : st.biases) REQUIRE((b.array() == 0.0).all());
  REQUIRE(st.classifier.rows() == 7);
  REQUIRE(st.classifier.cols() == 3);
  REQUIRE_FALSE(st.classifier_anchored);
  REQUIRE(st.num_classes() == 7);

  auto same = init_model(cfg, 11);
  REQUIRE(states_equal(st, same));
  auto other = init_model(cfg, 12);
  REQUIRE_FALSE(states_equal(st, other));
}

TEST_CASE("anchored init copies the prototypes verbatim") {
  auto cfg = anchored_config(4, 3, 5);
  auto st = init_model(cfg, 2);
  REQUIRE(st.classifier == cfg.prototypes.vectors);
  REQUIRE(st.classifier_anchored);
}

TEST_CASE("init_model rejects inconsistent dimensions") {
  ModelConfig cfg;
  cfg.input_dim = 0;
  cfg.feature_dim = 3;
  cfg.num_classes = 2;
  REQUIRE_THROWS_AS(init_model(cfg, 1), DimMismatchError);

  cfg.input_dim = 4;
  cfg.feature_dim = 0;
  REQUIRE_THROWS_AS(init_model(cfg, 1), DimMismatchError);

  cfg.feature_dim = 3;
  cfg.hidden_dims = {0};
  REQUIRE_THROWS_AS(init_model(cfg, 1), DimMismatchError);

  // identity feature map needs matching dims
  cfg.hidden_dims = {};
  REQUIRE_THROWS_AS(init_model(cfg, 1), DimMismatchError);

  ModelConfig anch;
  anch.input_dim = 4;
  anch.hidden_dims = {8};
  anch.feature_dim = 5;
  anch.anchored = true;
  anch.prototypes = generate_closed_form(3, 4);  // d != feature_dim
  REQUIRE_THROWS_AS(init_model(anch, 1), DimMismatchError);

  ModelConfig learn;
  learn.input_dim = 4;
  learn.hidden_dims = {8};
  learn.feature_dim = 5;
  learn.num_classes = 1;
  REQUIRE_THROWS_AS(init_model(learn, 1), DimMismatchError);
}

TEST_CASE("empty hidden stack is the identity feature map") {
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.feature_dim = 4;
  cfg.num_classes = 3;
  auto st = init_model(cfg, 5);
  REQUIRE(st.weights.empty());
  Matrix x(2, 4);
  x << 1, 2, 3, 4, 5, 6, 7, 8;
  REQUIRE(extract_features(st, x) == x);
}

TEST_CASE("training fits easy blobs and improves the loss") {
  auto data = easy_blobs(3, 4, 40, 21);
  auto [train_set, eval_set] = split_stratified(data, 0.25, 3);
  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 7);
  LossSpec spec;
  spec.anchored = true;
  spec.feature_normalize = true;
  spec.scale = 5.0;
  OptimConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 30;
  opt.batch_size = 16;
  opt.seed = 9;
  auto hist = train(st, train_set, spec, opt, eval_set);
  REQUIRE(hist.size() == 30);
  REQUIRE(hist.back().train_loss < hist.front().train_loss);
  REQUIRE(hist.back().eval_acc >= 0.95);
  REQUIRE(hist.back().train_acc >= 0.95);
  // anchored classifier never moves
  REQUIRE(st.classifier == cfg.prototypes.vectors);
  REQUIRE(st.epoch == 30);
  REQUIRE(st.train_class_counts == class_counts(train_set));

  // metrics epochs are the global counter values
  for (long e = 0; e < 30; ++e) REQUIRE(hist[static_cast<std::size_t>(e)].epoch == e);

  // the recorded final margin equals a recomputation from the final state
  Matrix z = extract_features(st, train_set.features);
  for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) /= z.row(i).norm();
  auto margins = sample_margins(z, train_set.labels, st.classifier, spec.scale);
  REQUIRE(hist.back().min_sample_margin == margins.min_margin);

  // per-class eval accuracies are populated
  REQUIRE(hist.back().per_class_acc.size() == 3);
}

TEST_CASE("epochs=0 leaves the state untouched") {
  auto data = easy_blobs();
  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 7);
  auto before_w = st.weights[0];
  LossSpec spec;
  spec.anchored = true;
  OptimConfig opt;
  opt.epochs = 0;
  auto hist = train(st, data, spec, opt, data);
  REQUIRE(hist.empty());
  REQUIRE(st.weights[0] == before_w);
  REQUIRE(st.epoch == 0);
  REQUIRE_FALSE(st.rng_seeded);
}

TEST_CASE("chunked training reproduces a single run exactly") {
  auto data = easy_blobs(3, 4, 30, 8);
  LossSpec spec;
  spec.anchored = true;
  spec.feature_normalize = true;
  spec.scale = 4.0;

  OptimConfig opt;
  opt.learning_rate = 0.1;
  opt.epochs = 12;
  opt.batch_size = 16;
  opt.cosine_period = 12;
  opt.seed = 5;

  auto cfg = anchored_config(4, 3, 6);
  auto one = init_model(cfg, 3);
  auto hist_one = train(one, data, spec, opt, data);

  auto two = init_model(cfg, 3);
  OptimConfig chunk = opt;
  chunk.epochs = 5;
  auto hist_a = train(two, data, spec, chunk, data);
  chunk.epochs = 7;
  auto hist_b = train(two, data, spec, chunk, data);

  REQUIRE(states_equal(one, two));
  REQUIRE(hist_a.size() + hist_b.size() == hist_one.size());
  for (std::size_t i = 0; i < hist_one.size(); ++i) {
    const auto& m = i < hist_a.size() ? hist_a[i] : hist_b[i - hist_a.size()];
    REQUIRE(m.epoch == hist_one[i].epoch);
    REQUIRE(m.train_loss == hist_one[i].train_loss);
    REQUIRE(m.learning_rate == hist_one[i].learning_rate);
    REQUIRE(m.min_sample_margin == hist_one[i].min_sample_margin);
  }
}

TEST_CASE("cosine schedule starts at the base rate and decays") {
  auto data = easy_blobs(3, 4, 20, 2);
  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 1);
  LossSpec spec;
  spec.anchored = true;
  OptimConfig opt;
  opt.learning_rate = 0.2;
  opt.epochs = 10;
  opt.batch_size = 32;
  auto hist = train(st, data, spec, opt, data);
  REQUIRE(hist.front().learning_rate == 0.2);
  for (std::size_t i = 1; i < hist.size(); ++i)
    REQUIRE(hist[i].learning_rate < hist[i - 1].learning_rate);
  // epoch e runs at lr/2 * (1 + cos(pi e / 10))
  REQUIRE(hist[5].learning_rate == Catch::Approx(0.1).margin(1e-15));

  auto flat = init_model(cfg, 1);
  OptimConfig constant = opt;
  constant.cosine = false;
  auto hist2 = train(flat, data, spec, constant, data);
  for (const auto& m : hist2) REQUIRE(m.learning_rate == 0.2);
}

TEST_CASE("weight decay shrinks the learned weights") {
  auto data = easy_blobs(3, 4, 30, 4);
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.hidden_dims = {16};
  cfg.feature_dim = 6;
  cfg.num_classes = 3;
  LossSpec spec;
  OptimConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 20;
  opt.weight_decay = 0.0;
  opt.seed = 6;

  auto free = init_model(cfg, 9);
  train(free, data, spec, opt, data);

  auto decayed = init_model(cfg, 9);
  OptimConfig wd = opt;
  wd.weight_decay = 1e-2;
  train(decayed, data, spec, wd, data);

  REQUIRE(decayed.weights[0].squaredNorm() < free.weights[0].squaredNorm());
  REQUIRE(decayed.classifier.squaredNorm() < free.classifier.squaredNorm());
}

TEST_CASE("train validates its inputs") {
  auto data = easy_blobs(3, 4, 10, 5);
  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 7);
  LossSpec spec;
  spec.anchored = true;
  OptimConfig opt;
  opt.epochs = 1;

  LabeledDataset wrong = data;
  wrong.features = Matrix::Zero(data.n(), 5);
  REQUIRE_THROWS_AS(train(st, wrong, spec, opt, data), ShapeError);

  LabeledDataset badlab = data;
  badlab.labels[0] = 7;
  REQUIRE_THROWS_AS(train(st, badlab, spec, opt, data), LabelError);

  LossSpec mismatched;  // anchored classifier, unanchored spec
  REQUIRE_THROWS_AS(train(st, data, mismatched, opt, data), IncompatibleSpecError);

  ModelConfig learn;
  learn.input_dim = 4;
  learn.hidden_dims = {8};
  learn.feature_dim = 6;
  learn.num_classes = 3;
  auto lst = init_model(learn, 3);
  LossSpec nsl;
  nsl.variant = LossVariant::NSL;
  nsl.anchored = true;
  REQUIRE_THROWS_AS(train(lst, data, nsl, opt, data), AnchoringError);

  OptimConfig bad = opt;
  bad.batch_size = 0;
  REQUIRE_THROWS_AS(train(st, data, spec, bad, data), ConfigError);
  bad = opt;
  bad.momentum = 1.0;
  REQUIRE_THROWS_AS(train(st, data, spec, bad, data), ConfigError);
  bad = opt;
  bad.learning_rate = 0.0;
  REQUIRE_THROWS_AS(train(st, data, spec, bad, data), ConfigError);
}

TEST_CASE("predict, evaluate and per-class accuracies agree") {
  auto data = easy_blobs(4, 6, 30, 17);
  auto cfg = anchored_config(6, 4, 5);
  auto st = init_model(cfg, 13);
  LossSpec spec;
  spec.anchored = true;
  spec.feature_normalize = true;
  spec.scale = 5.0;
  OptimConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 25;
  opt.seed = 2;
  train(st, data, spec, opt, data);

  auto preds = predict(st, data.features, spec);
  auto er = evaluate(st, data, spec);
  long hits = 0;
  for (long i = 0; i < data.n(); ++i)
    if (preds[static_cast<std::size_t>(i)] == data.labels[static_cast<std::size_t>(i)]) ++hits;
  REQUIRE(er.accuracy == Catch::Approx(static_cast<double>(hits) / data.n()).margin(1e-15));

  auto probs = predict_probabilities(st, data.features, spec);
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    REQUIRE(probs.row(i).sum() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("grouped evaluation buckets classes by train frequency") {
  auto data = easy_blobs(3, 4, 150, 23);
  auto lt = apply_longtail(data, 15.0, 2);
  // counts 150 / 39 / 10
  REQUIRE(class_counts(lt) == std::vector<long>{150, 39, 10});

  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 3);
  LossSpec spec;
  spec.anchored = true;
  OptimConfig opt;
  opt.learning_rate = 0.05;
  opt.epochs = 10;
  opt.seed = 4;
  train(st, lt, spec, opt, data);

  auto g = evaluate_grouped(st, data, spec, {});
  REQUIRE(g.many_classes == std::vector<int>{0});
  REQUIRE(g.medium_classes == std::vector<int>{1});
  REQUIRE(g.few_classes == std::vector<int>{2});
  REQUIRE(g.excluded_classes.empty());
  REQUIRE(std::isfinite(g.overall));

  // thresholds are strict comparisons
  GroupThresholds t;
  t.many_min = 150;  // count must exceed the bound
  t.few_max = 10;
  auto g2 = evaluate_grouped(st, data, spec, t);
  REQUIRE(g2.many_classes.empty());
  REQUIRE(g2.medium_classes == std::vector<int>{0, 1, 2});

  // eval set missing a class reports it as excluded
  LabeledDataset partial = data;
  std::vector<long> keep;
  for (long i = 0; i < partial.n(); ++i)
    if (partial.labels[static_cast<std::size_t>(i)] != 2) keep.push_back(i);
  LabeledDataset pruned;
  pruned.k = partial.k;
  pruned.features.resize(static_cast<long>(keep.size()), partial.m());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    pruned.features.row(static_cast<long>(i)) = partial.features.row(keep[i]);
    pruned.labels.push_back(partial.labels[static_cast<std::size_t>(keep[i])]);
  }
  auto g3 = evaluate_grouped(st, pruned, spec, {});
  REQUIRE(g3.excluded_classes == std::vector<int>{2});
  REQUIRE(std::isnan(g3.few_acc));

  TrainState fresh = init_model(cfg, 3);
  REQUIRE_THROWS_AS(evaluate_grouped(fresh, data, spec, {}), DomainError);
}

TEST_CASE("checkpoints round-trip the weights bitwise") {
  auto dir = fresh_dir("ckpt");
  auto data = easy_blobs(3, 4, 20, 29);
  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 31);
  LossSpec spec;
  spec.anchored = true;
  OptimConfig opt;
  opt.epochs = 5;
  opt.seed = 1;
  train(st, data, spec, opt, data);

  nlohmann::json extra;
  extra["note"] = "test";
  save_checkpoint(st, (dir / "model").string(), extra);
  REQUIRE(std::filesystem::exists(dir / "model.ckpt.json"));
  REQUIRE(std::filesystem::exists(dir / "model.ckpt.bin"));

  nlohmann::json header;
  auto back = load_checkpoint((dir / "model").string(), &header);
  REQUIRE(back.weights.size() == st.weights.size());
  for (std::size_t l = 0; l < st.weights.size(); ++l) {
    REQUIRE(back.weights[l] == st.weights[l]);
    REQUIRE(back.biases[l] == st.biases[l]);
  }
  REQUIRE(back.classifier == st.classifier);
  REQUIRE(back.classifier_anchored == st.classifier_anchored);
  REQUIRE(back.epoch == st.epoch);
  REQUIRE(back.train_class_counts == st.train_class_counts);
  REQUIRE(header.at("note") == "test");
  // momentum is not part of a checkpoint
  REQUIRE((back.classifier_momentum.array() == 0.0).all());

  // suffix-tolerant prefix handling
  auto via_json = load_checkpoint((dir / "model.ckpt.json").string());
  REQUIRE(via_json.classifier == st.classifier);

  // evaluation through the reloaded state is identical
  auto a = evaluate(st, data, spec);
  auto b = evaluate(back, data, spec);
  REQUIRE(a.accuracy == b.accuracy);

  REQUIRE_THROWS_AS(load_checkpoint((dir / "missing").string()), IoError);
  spit(dir / "model.ckpt.bin", std::string(16, '\0'));
  REQUIRE_THROWS_AS(load_checkpoint((dir / "model").string()), FormatError);
}

TEST_CASE("metrics csv has the documented layout") {
  auto dir = fresh_dir("metrics");
  auto data = easy_blobs(3, 4, 20, 37);
  auto cfg = anchored_config(4, 3, 6);
  auto st = init_model(cfg, 41);
  LossSpec spec;
  spec.anchored = true;
  OptimConfig opt;
  opt.epochs = 4;
  opt.seed = 1;
  auto hist = train(st, data, spec, opt, data);
  const auto path = (dir / "metrics.csv").string();
  write_metrics_csv(path, hist, st.num_classes());

  std::ifstream f(path);
  std::string header;
  std::getline(f, header);
  REQUIRE(header ==
          "epoch,train_loss,train_acc,eval_acc,min_sample_margin,mean_feature_norm,"
          "mean_prototype_norm,min_prototype_angle_deg,learning_rate,pc_acc_0,pc_acc_1,pc_acc_2");
  long rows = 0;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    REQUIRE(std::stol(cell) == rows - 1);
    std::getline(ss, cell, ',');
    // %.17g survives a parse round-trip
    REQUIRE(std::stod(cell) == hist[static_cast<std::size_t>(rows - 1)].train_loss);
  }
  REQUIRE(rows == 4);
}
