#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "anchorlab/analysis.hpp"
#include "anchorlab/common.hpp"
#include "anchorlab/datasets.hpp"
#include "anchorlab/losses.hpp"
#include "anchorlab/prototypes.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

enum class Activation { ReLU, Tanh };

inline const char* activation_name(Activation a) {
  return a == Activation::ReLU ? "relu" : "tanh";
}
inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation: " + s);
}

// feature extractor is an MLP input_dim -> hidden... -> feature_dim with the
// activation after every layer except the last; empty hidden_dims means the
// identity map (input_dim must equal feature_dim)
struct ModelConfig {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int feature_dim = 0;
  Activation activation = Activation::ReLU;
  bool anchored = false;
  int num_classes = 0;        // learnable classifier only
  PrototypeSet prototypes;    // anchored classifier only
};

struct OptimConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  long epochs = 100;
  long batch_size = 128;
  bool cosine = true;
  // total-epoch horizon of the cosine schedule; 0 means "this call's epochs"
  long cosine_period = 0;
  std::uint64_t seed = 0;
};

struct TrainState {
  int input_dim = 0;
  std::vector<int> hidden_dims;
  int feature_dim = 0;
  Activation activation = Activation::ReLU;

  std::vector<Matrix> weights;  // per linear layer, out x in
  std::vector<Vector> biases;
  Matrix classifier;            // k x feature_dim
  bool classifier_anchored = false;

  std::vector<Matrix> weight_momentum;
  std::vector<Vector> bias_momentum;
  Matrix classifier_momentum;

  long epoch = 0;  // global epoch counter across train() calls
  Rng rng{0};
  bool rng_seeded = false;
  std::vector<long> train_class_counts;

  int num_classes() const { return static_cast<int>(classifier.rows()); }
};

struct EpochMetrics {
  long epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  Vector per_class_acc;  // NaN where the eval set has no samples of a class
  double min_sample_margin = 0.0;
  double mean_feature_norm = 0.0;
  double mean_prototype_norm = 0.0;
  double min_prototype_angle_deg = 0.0;
  double learning_rate = 0.0;
};

inline void validate_optim_config(const OptimConfig& opt) {
  if (opt.learning_rate <= 0) throw ConfigError("learning_rate must be positive");
  if (opt.momentum < 0 || opt.momentum >= 1) throw ConfigError("momentum must be in [0,1)");
  if (opt.weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
  if (opt.epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (opt.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (opt.cosine_period < 0) throw ConfigError("cosine_period must be nonnegative");
}

// gaussian fan-in init, gain sqrt(2) for relu and 1 for tanh; zero biases;
// the anchored classifier copies the prototype matrix verbatim
inline TrainState init_model(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.input_dim < 1) throw DimMismatchError("input_dim must be >= 1");
  if (cfg.feature_dim < 1) throw DimMismatchError("feature_dim must be >= 1");
  for (int h : cfg.hidden_dims)
    if (h < 1) throw DimMismatchError("hidden dims must be >= 1");
  if (cfg.hidden_dims.empty() && cfg.input_dim != cfg.feature_dim)
    throw DimMismatchError(
        "with no hidden layers the feature map is the identity; input_dim must equal "
        "feature_dim");

  TrainState st;
  st.input_dim = cfg.input_dim;
  st.hidden_dims = cfg.hidden_dims;
  st.feature_dim = cfg.feature_dim;
  st.activation = cfg.activation;

  Rng rng(seed);
  const double gain = cfg.activation == Activation::ReLU ? std::sqrt(2.0) : 1.0;
  if (!cfg.hidden_dims.empty()) {
    std::vector<int> dims;
    dims.push_back(cfg.input_dim);
    dims.insert(dims.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
    dims.push_back(cfg.feature_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      Matrix w(dims[l + 1], dims[l]);
      rng.fill_normal(w, gain / std::sqrt(static_cast<double>(dims[l])));
      st.weights.push_back(std::move(w));
      st.biases.push_back(Vector::Zero(dims[l + 1]));
      st.weight_momentum.push_back(Matrix::Zero(dims[l + 1], dims[l]));
      st.bias_momentum.push_back(Vector::Zero(dims[l + 1]));
    }
  }

  if (cfg.anchored) {
    if (cfg.prototypes.k < 2) throw DimMismatchError("anchored classifier needs prototypes");
    if (cfg.prototypes.d != cfg.feature_dim)
      throw DimMismatchError("prototype dim " + std::to_string(cfg.prototypes.d) +
                             " != feature_dim " + std::to_string(cfg.feature_dim));
    st.classifier = cfg.prototypes.vectors;
    st.classifier_anchored = true;
  } else {
    if (cfg.num_classes < 2) throw DimMismatchError("learnable classifier needs num_classes >= 2");
    st.classifier.resize(cfg.num_classes, cfg.feature_dim);
    rng.fill_normal(st.classifier, 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)));
    st.classifier_anchored = false;
  }
  st.classifier_momentum = Matrix::Zero(st.classifier.rows(), st.classifier.cols());
  return st;
}

inline Matrix extract_features(const TrainState& st, const Matrix& inputs) {
  if (inputs.cols() != st.input_dim)
    throw ShapeError("input dim " + std::to_string(inputs.cols()) + " != model input_dim " +
                     std::to_string(st.input_dim));
  Matrix a = inputs;
  for (std::size_t l = 0; l < st.weights.size(); ++l) {
    Matrix p = (a * st.weights[l].transpose()).rowwise() + st.biases[l].transpose();
    if (l + 1 < st.weights.size()) {
      if (st.activation == Activation::ReLU)
        a = p.cwiseMax(0.0);
      else
        a = p.array().tanh().matrix();
    } else {
      a = std::move(p);
    }
  }
  return a;
}

// scaled logits s * w_j . z~_i under the spec's normalization; no margins,
// margins shape training only
inline Matrix predict_logits(const TrainState& st, const Matrix& inputs, const LossSpec& spec) {
  Matrix z = extract_features(st, inputs);
  if (spec.feature_normalize) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const double nrm = z.row(i).norm();
      if (nrm < kZeroNormEps)
        throw NormalizationError("cannot normalize zero feature vector (row " +
                                 std::to_string(i) + ")");
      z.row(i) /= nrm;
    }
  }
  return spec.scale * (z * st.classifier.transpose());
}

inline std::vector<int> predict(const TrainState& st, const Matrix& inputs,
                                const LossSpec& spec) {
  Matrix logits = predict_logits(st, inputs, spec);
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

inline Matrix predict_probabilities(const TrainState& st, const Matrix& inputs,
                                    const LossSpec& spec) {
  Matrix logits = predict_logits(st, inputs, spec);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    logits.row(i) = e / e.sum();
  }
  return logits;
}

struct EvalResult {
  double accuracy = 0.0;
  Vector per_class_acc;
};

inline EvalResult evaluate(const TrainState& st, const LabeledDataset& data,
                           const LossSpec& spec) {
  const int k = st.num_classes();
  auto preds = predict(st, data.features, spec);
  std::vector<long> correct(k, 0), total(k, 0);
  long hits = 0;
  for (long i = 0; i < data.n(); ++i) {
    const int y = data.labels[i];
    if (y < 0 || y >= k) throw LabelError("eval label outside [0,k)");
    ++total[y];
    if (preds[static_cast<std::size_t>(i)] == y) {
      ++correct[y];
      ++hits;
    }
  }
  EvalResult r;
  r.accuracy = data.n() ? static_cast<double>(hits) / data.n() : 0.0;
  r.per_class_acc.resize(k);
  for (int c = 0; c < k; ++c)
    r.per_class_acc(c) = total[c] ? static_cast<double>(correct[c]) / total[c]
                                  : std::numeric_limits<double>::quiet_NaN();
  return r;
}

/**
 * Minibatch SGD with momentum, weight decay, optional cosine-annealed
 * learning rate. The schedule is driven by the global epoch counter in the
 * state, so training in chunks reproduces a single longer call exactly. The
 * anchored classifier is never touched by updates. Metrics are recorded
 * after the epoch's updates; train_loss/train_acc accumulate over the
 * epoch's batches as seen during the pass.
 */
inline std::vector<EpochMetrics> train(TrainState& st, const LabeledDataset& trainset,
                                       const LossSpec& spec, const OptimConfig& opt,
                                       const LabeledDataset& evalset) {
  validate_optim_config(opt);
  if (trainset.features.cols() != st.input_dim || evalset.features.cols() != st.input_dim)
    throw ShapeError("dataset feature dim != model input_dim");
  const int k = st.num_classes();
  for (int y : trainset.labels)
    if (y < 0 || y >= k) throw LabelError("train label outside [0,k)");
  if (spec.variant == LossVariant::NSL && !st.classifier_anchored)
    throw AnchoringError("nsl is only defined against anchored prototypes");
  if (spec.anchored != st.classifier_anchored)
    throw IncompatibleSpecError("loss spec anchored flag disagrees with the classifier mode");
  validate_loss_spec(spec, k);
  if (opt.epochs == 0) return {};
  if (trainset.n() == 0) throw ShapeError("empty training set");

  if (!st.rng_seeded) {
    st.rng = Rng(opt.seed);
    st.rng_seeded = true;
  }
  st.train_class_counts = class_counts(trainset);

  const long n = trainset.n();
  const long t_max = opt.cosine_period > 0 ? opt.cosine_period : opt.epochs;
  const std::size_t num_layers = st.weights.size();
  std::vector<long> order(static_cast<std::size_t>(n));

  std::vector<EpochMetrics> history;
  history.reserve(static_cast<std::size_t>(opt.epochs));

  for (long e = 0; e < opt.epochs; ++e) {
    const double lr =
        opt.cosine ? opt.learning_rate * 0.5 *
                         (1.0 + std::cos(M_PI * static_cast<double>(st.epoch) / t_max))
                   : opt.learning_rate;

    // the permutation is rebuilt from identity each epoch so that it depends
    // only on the rng stream position, keeping chunked calls bit-identical
    // to one longer call
    std::iota(order.begin(), order.end(), 0L);
    st.rng.shuffle(order);
    double loss_sum = 0.0;
    long correct = 0;

    for (long start = 0; start < n; start += opt.batch_size) {
      const long bs = std::min(opt.batch_size, n - start);
      Matrix x(bs, st.input_dim);
      std::vector<int> y(static_cast<std::size_t>(bs));
      for (long i = 0; i < bs; ++i) {
        x.row(i) = trainset.features.row(order[static_cast<std::size_t>(start + i)]);
        y[static_cast<std::size_t>(i)] =
            trainset.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(start + i)])];
      }

      // forward, caching pre-activations and activations
      std::vector<Matrix> acts;   // acts[l] = input to layer l; acts[L] = features
      std::vector<Matrix> pres;   // pre-activation of layers 0..L-2
      acts.reserve(num_layers + 1);
      acts.push_back(std::move(x));
      for (std::size_t l = 0; l < num_layers; ++l) {
        Matrix p = (acts[l] * st.weights[l].transpose()).rowwise() + st.biases[l].transpose();
        if (l + 1 < num_layers) {
          pres.push_back(p);
          if (st.activation == Activation::ReLU)
            acts.push_back(p.cwiseMax(0.0));
          else
            acts.push_back(p.array().tanh().matrix());
        } else {
          acts.push_back(std::move(p));
        }
      }

      LossOutput out = evaluate_loss(acts.back(), y, st.classifier, spec);
      loss_sum += out.loss * static_cast<double>(bs);
      for (long i = 0; i < bs; ++i) {
        Eigen::Index arg = 0;
        out.logits.row(i).maxCoeff(&arg);
        if (static_cast<int>(arg) == y[static_cast<std::size_t>(i)]) ++correct;
      }

      // backward through the feature stack
      std::vector<Matrix> grad_w(num_layers);
      std::vector<Vector> grad_b(num_layers);
      Matrix g = std::move(out.grad_features);
      for (std::size_t l = num_layers; l-- > 0;) {
        if (l + 1 < num_layers) {
          if (st.activation == Activation::ReLU) {
            g = (pres[l].array() > 0.0).select(g, 0.0);
          } else {
            g = (g.array() * (1.0 - acts[l + 1].array().square())).matrix();
          }
        }
        grad_w[l] = g.transpose() * acts[l];
        grad_b[l] = g.colwise().sum().transpose();
        if (l > 0) g = g * st.weights[l];
      }

      for (std::size_t l = 0; l < num_layers; ++l) {
        grad_w[l] += opt.weight_decay * st.weights[l];
        grad_b[l] += opt.weight_decay * st.biases[l];
        st.weight_momentum[l] = opt.momentum * st.weight_momentum[l] + grad_w[l];
        st.bias_momentum[l] = opt.momentum * st.bias_momentum[l] + grad_b[l];
        st.weights[l] -= lr * st.weight_momentum[l];
        st.biases[l] -= lr * st.bias_momentum[l];
      }
      if (!st.classifier_anchored) {
        Matrix gc = out.grad_prototypes + opt.weight_decay * st.classifier;
        st.classifier_momentum = opt.momentum * st.classifier_momentum + gc;
        st.classifier -= lr * st.classifier_momentum;
      }
    }

    EpochMetrics m;
    m.epoch = st.epoch;
    m.learning_rate = lr;
    m.train_loss = loss_sum / static_cast<double>(n);
    m.train_acc = static_cast<double>(correct) / static_cast<double>(n);

    Matrix z = extract_features(st, trainset.features);
    double norm_sum = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) norm_sum += z.row(i).norm();
    m.mean_feature_norm = norm_sum / static_cast<double>(n);
    if (spec.feature_normalize) {
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double nrm = z.row(i).norm();
        if (nrm < kZeroNormEps)
          throw NormalizationError("zero feature vector in margin computation");
        z.row(i) /= nrm;
      }
    }
    m.min_sample_margin =
        sample_margins(z, trainset.labels, st.classifier, spec.scale).min_margin;

    double pn = 0.0;
    for (Eigen::Index i = 0; i < st.classifier.rows(); ++i) pn += st.classifier.row(i).norm();
    m.mean_prototype_norm = pn / static_cast<double>(st.classifier.rows());
    m.min_prototype_angle_deg = min_prototype_angle(st.classifier);

    EvalResult er = evaluate(st, evalset, spec);
    m.eval_acc = er.accuracy;
    m.per_class_acc = er.per_class_acc;

    ++st.epoch;
    history.push_back(std::move(m));
  }
  return history;
}

struct GroupThresholds {
  long many_min = 100;  // train count > many_min  -> Many
  long few_max = 20;    // train count < few_max   -> Few
};

struct GroupedAccuracy {
  double overall = 0.0;
  double many_acc = std::numeric_limits<double>::quiet_NaN();
  double medium_acc = std::numeric_limits<double>::quiet_NaN();
  double few_acc = std::numeric_limits<double>::quiet_NaN();
  std::vector<int> many_classes, medium_classes, few_classes;
  std::vector<int> excluded_classes;  // no eval samples
};

// accuracy split by training-set class frequency; group accuracy is the mean
// of per-class accuracies over the group's classes that appear in the eval set
inline GroupedAccuracy evaluate_grouped(const TrainState& st, const LabeledDataset& data,
                                        const LossSpec& spec,
                                        const GroupThresholds& thresholds = {}) {
  if (st.train_class_counts.empty())
    throw DomainError("no training class counts recorded; train first");
  const int k = st.num_classes();
  if (static_cast<int>(st.train_class_counts.size()) != k)
    throw ShapeError("train class count size mismatch");
  EvalResult er = evaluate(st, data, spec);

  GroupedAccuracy g;
  g.overall = er.accuracy;
  double sums[3] = {0, 0, 0};
  long counts[3] = {0, 0, 0};
  for (int c = 0; c < k; ++c) {
    int grp;
    if (st.train_class_counts[c] > thresholds.many_min)
      grp = 0;
    else if (st.train_class_counts[c] < thresholds.few_max)
      grp = 2;
    else
      grp = 1;
    (grp == 0 ? g.many_classes : grp == 1 ? g.medium_classes : g.few_classes).push_back(c);
    if (std::isnan(er.per_class_acc(c))) {
      g.excluded_classes.push_back(c);
      continue;
    }
    sums[grp] += er.per_class_acc(c);
    ++counts[grp];
  }
  if (counts[0]) g.many_acc = sums[0] / counts[0];
  if (counts[1]) g.medium_acc = sums[1] / counts[1];
  if (counts[2]) g.few_acc = sums[2] / counts[2];
  return g;
}

// ---- checkpoint: <prefix>.ckpt.json + <prefix>.ckpt.bin --------------------
// Weights only (row-major, layer order, bias after each weight, classifier
// last); momentum buffers and the shuffle stream are not part of a
// checkpoint, so a reloaded state starts training with fresh momentum.

namespace detail {

inline std::string strip_ckpt_suffix(std::string path) {
  const std::string js = ".ckpt.json", bs = ".ckpt.bin";
  if (path.size() > js.size() && path.compare(path.size() - js.size(), js.size(), js) == 0)
    return path.substr(0, path.size() - js.size());
  if (path.size() > bs.size() && path.compare(path.size() - bs.size(), bs.size(), bs) == 0)
    return path.substr(0, path.size() - bs.size());
  return path;
}

}  // namespace detail

inline void save_checkpoint(const TrainState& st, const std::string& prefix_path,
                            const nlohmann::json& extra = nlohmann::json::object()) {
  const std::string prefix = detail::strip_ckpt_suffix(prefix_path);
  nlohmann::json j;
  j["input_dim"] = st.input_dim;
  j["hidden_dims"] = st.hidden_dims;
  j["feature_dim"] = st.feature_dim;
  j["activation"] = activation_name(st.activation);
  j["classifier_anchored"] = st.classifier_anchored;
  j["num_classes"] = st.num_classes();
  j["epoch"] = st.epoch;
  j["train_class_counts"] = st.train_class_counts;
  for (auto& [key, val] : extra.items()) j[key] = val;

  std::ofstream jf(prefix + ".ckpt.json", std::ios::trunc);
  if (!jf) throw IoError("cannot open " + prefix + ".ckpt.json for writing");
  jf << j.dump(2) << "\n";

  std::ofstream bf(prefix + ".ckpt.bin", std::ios::binary | std::ios::trunc);
  if (!bf) throw IoError("cannot open " + prefix + ".ckpt.bin for writing");
  auto put = [&bf](const double* p, std::size_t count) {
    bf.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(count * 8));
  };
  for (std::size_t l = 0; l < st.weights.size(); ++l) {
    put(st.weights[l].data(), static_cast<std::size_t>(st.weights[l].size()));
    put(st.biases[l].data(), static_cast<std::size_t>(st.biases[l].size()));
  }
  put(st.classifier.data(), static_cast<std::size_t>(st.classifier.size()));
  if (!bf) throw IoError("short write to " + prefix + ".ckpt.bin");
}

inline TrainState load_checkpoint(const std::string& prefix_path,
                                  nlohmann::json* header_out = nullptr) {
  const std::string prefix = detail::strip_ckpt_suffix(prefix_path);
  std::ifstream jf(prefix + ".ckpt.json");
  if (!jf) throw IoError("cannot open " + prefix + ".ckpt.json");
  nlohmann::json j;
  try {
    jf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(prefix + ".ckpt.json: " + e.what());
  }
  if (header_out) *header_out = j;

  TrainState st;
  st.input_dim = j.at("input_dim").get<int>();
  st.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
  st.feature_dim = j.at("feature_dim").get<int>();
  st.activation = activation_from_name(j.at("activation").get<std::string>());
  st.classifier_anchored = j.at("classifier_anchored").get<bool>();
  st.epoch = j.at("epoch").get<long>();
  if (j.contains("train_class_counts"))
    st.train_class_counts = j["train_class_counts"].get<std::vector<long>>();
  const int k = j.at("num_classes").get<int>();

  std::ifstream bf(prefix + ".ckpt.bin", std::ios::binary);
  if (!bf) throw IoError("cannot open " + prefix + ".ckpt.bin");
  auto get = [&bf, &prefix](double* p, std::size_t count) {
    bf.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(count * 8));
    if (static_cast<std::size_t>(bf.gcount()) != count * 8)
      throw FormatError(prefix + ".ckpt.bin: truncated");
  };
  std::vector<int> dims;
  if (!st.hidden_dims.empty()) {
    dims.push_back(st.input_dim);
    dims.insert(dims.end(), st.hidden_dims.begin(), st.hidden_dims.end());
    dims.push_back(st.feature_dim);
  }
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Matrix w(dims[l + 1], dims[l]);
    Vector b(dims[l + 1]);
    get(w.data(), static_cast<std::size_t>(w.size()));
    get(b.data(), static_cast<std::size_t>(b.size()));
    st.weights.push_back(std::move(w));
    st.biases.push_back(std::move(b));
    st.weight_momentum.push_back(Matrix::Zero(dims[l + 1], dims[l]));
    st.bias_momentum.push_back(Vector::Zero(dims[l + 1]));
  }
  st.classifier.resize(k, st.feature_dim);
  get(st.classifier.data(), static_cast<std::size_t>(st.classifier.size()));
  st.classifier_momentum = Matrix::Zero(k, st.feature_dim);
  return st;
}

// ---- metrics CSV ------------------------------------------------------------

inline void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history,
                              int k) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << "epoch,train_loss,train_acc,eval_acc,min_sample_margin,mean_feature_norm,"
       "mean_prototype_norm,min_prototype_angle_deg,learning_rate";
  for (int c = 0; c < k; ++c) f << ",pc_acc_" << c;
  f << "\n";
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    f << ',' << buf;
  };
  for (const auto& m : history) {
    f << m.epoch;
    put(m.train_loss);
    put(m.train_acc);
    put(m.eval_acc);
    put(m.min_sample_margin);
    put(m.mean_feature_norm);
    put(m.mean_prototype_norm);
    put(m.min_prototype_angle_deg);
    put(m.learning_rate);
    for (int c = 0; c < k; ++c) put(m.per_class_acc(c));
    f << "\n";
  }
  if (!f) throw IoError("short write to " + path);
}

}  // namespace anchorlab
