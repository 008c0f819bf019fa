#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "anchorlab/common.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

// k unit vectors in R^d with every pairwise inner product equal to -1/(k-1).
struct PrototypeSet {
  int k = 0;
  int d = 0;
  Matrix vectors;  // k x d, unit rows
};

struct ProtoGenConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  long epochs = 100000;
  long cosine_period = 20000;
  double scale = 5.0;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  bool use_relu = false;
  // Gram deviation is checked at this cadence; the loop exits once the
  // running deviation reaches tolerance/2, well inside the final gate.
  long check_interval = 500;
};

inline void check_prototype_dims(int k, int d) {
  if (k < 2) throw DimensionError("need at least 2 classes, got k=" + std::to_string(k));
  if (d < 1) throw DimensionError("need d >= 1, got d=" + std::to_string(d));
  if (k > d + 1)
    throw DimensionError("a simplex of k=" + std::to_string(k) +
                         " equiangular unit vectors needs d >= k-1, got d=" + std::to_string(d));
}

inline Matrix gram_matrix(const PrototypeSet& p) {
  return p.vectors * p.vectors.transpose();
}

// max_ij |G_ij + 1/(k-1)| over i < j for the raw (un-normalized) Gram
inline double max_gram_deviation(const Matrix& w) {
  const int k = static_cast<int>(w.rows());
  const double target = -1.0 / (k - 1);
  Matrix g = w * w.transpose();
  double dev = 0.0;
  for (int i = 0; i < k; ++i)
    for (int j = i + 1; j < k; ++j) dev = std::max(dev, std::abs(g(i, j) - target));
  return dev;
}

struct EquiangularReport {
  double max_norm_dev = 0.0;
  double max_gram_dev = 0.0;
  double min_angle_deg = 0.0;
  bool pass = false;
};

inline EquiangularReport verify_equiangular(const PrototypeSet& p, double tolerance) {
  if (tolerance <= 0) throw DomainError("tolerance must be positive");
  EquiangularReport r;
  const int k = p.k;
  const double target = -1.0 / (k - 1);
  Vector norms(k);
  for (int i = 0; i < k; ++i) {
    norms(i) = p.vectors.row(i).norm();
    r.max_norm_dev = std::max(r.max_norm_dev, std::abs(norms(i) - 1.0));
  }
  double min_angle = 180.0;
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) {
      const double dot = p.vectors.row(i).dot(p.vectors.row(j));
      r.max_gram_dev = std::max(r.max_gram_dev, std::abs(dot - target));
      const double denom = std::max(norms(i) * norms(j), 1e-300);
      const double c = std::clamp(dot / denom, -1.0, 1.0);
      min_angle = std::min(min_angle, std::acos(c) * 180.0 / M_PI);
    }
  }
  r.min_angle_deg = min_angle;
  r.pass = r.max_norm_dev <= tolerance && r.max_gram_dev <= tolerance;
  return r;
}

/**
 * Exact simplex construction. The k rows of
 *   M = sqrt(k/(k-1)) * (I_k - (1/k) 11^T)
 * are unit vectors with pairwise inner product exactly -1/(k-1); they live in
 * the hyperplane orthogonal to 1, so mapping them through an orthonormal
 * basis of that hyperplane drops them into R^{k-1} without distortion. The
 * basis comes from a Householder reflection sending e_1 to 1/sqrt(k):
 * its remaining k-1 columns span exactly the required hyperplane.
 * Remaining coordinates (up to d) are zero-padded.
 */
inline PrototypeSet generate_closed_form(int k, int d) {
  check_prototype_dims(k, d);
  Vector v = Vector::Constant(k, 1.0 / std::sqrt(static_cast<double>(k)));
  v(0) -= 1.0;
  v.normalize();
  Matrix h = Matrix::Identity(k, k) - 2.0 * (v * v.transpose());
  const double c = std::sqrt(static_cast<double>(k) / (k - 1));
  Matrix m = c * (Matrix::Identity(k, k) - Matrix::Constant(k, k, 1.0 / k));
  Matrix w = Matrix::Zero(k, d);
  w.leftCols(k - 1) = m * h.rightCols(k - 1);
  return PrototypeSet{k, d, std::move(w)};
}

inline void validate_protogen_config(const ProtoGenConfig& cfg) {
  if (cfg.learning_rate <= 0) throw ConfigError("learning_rate must be positive");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError("momentum must be in [0,1)");
  if (cfg.weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (cfg.cosine_period < 1) throw ConfigError("cosine_period must be >= 1");
  if (cfg.scale <= 0) throw ConfigError("scale must be positive");
  if (cfg.tolerance <= 0) throw ConfigError("tolerance must be positive");
  if (cfg.check_interval < 1) throw ConfigError("check_interval must be >= 1");
}

namespace detail {

// rows scaled to unit norm, norms clamped below at eps
inline Matrix row_normalize(const Matrix& m, Vector* norms_out = nullptr) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double n = std::max(m.row(i).norm(), kZeroNormEps);
    out.row(i) = m.row(i) / n;
    if (norms_out) (*norms_out)(i) = n;
  }
  return out;
}

}  // namespace detail

/**
 * Optimization-based generator: k free "feature" rows z_i and k classifier
 * rows w_j, both row-normalized each step, trained with cross-entropy on
 * logits scale * z_hat w_hat^T against labels y_i = i. SGD with momentum and
 * weight decay, cosine-annealed learning rate. The minimizer of this
 * objective is the simplex configuration, so the normalized classifier rows
 * converge to an equiangular frame.
 */
inline PrototypeSet generate_optimized(int k, int d, const ProtoGenConfig& cfg = {}) {
  check_prototype_dims(k, d);
  validate_protogen_config(cfg);

  Rng rng(cfg.seed);
  Matrix z(k, d), w(k, d);
  rng.fill_normal(z);
  rng.fill_normal(w, std::sqrt(2.0 / d));
  Matrix vz = Matrix::Zero(k, d), vw = Matrix::Zero(k, d);

  Vector znorms(k), wnorms(k);
  double achieved = std::numeric_limits<double>::infinity();

  for (long t = 0; t < cfg.epochs; ++t) {
    const double lr = cfg.learning_rate * 0.5 *
                      (1.0 + std::cos(M_PI * static_cast<double>(t) / cfg.cosine_period));

    Matrix zact = cfg.use_relu ? z.cwiseMax(0.0).eval() : z;
    Matrix zn = detail::row_normalize(zact, &znorms);
    Matrix wn = detail::row_normalize(w, &wnorms);
    Matrix logits = cfg.scale * (zn * wn.transpose());  // k x k

    // softmax CE against the identity labeling, mean over the k rows
    Matrix g(k, k);
    for (int i = 0; i < k; ++i) {
      const double mx = logits.row(i).maxCoeff();
      Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
      g.row(i) = e / e.sum();
      g(i, i) -= 1.0;
    }
    g /= static_cast<double>(k);

    Matrix gzn = cfg.scale * (g * wn);
    Matrix gwn = cfg.scale * (g.transpose() * zn);

    // back through row normalization: (I - u u^T) / ||v||
    Matrix gz(k, d), gw(k, d);
    for (int i = 0; i < k; ++i) {
      gz.row(i) = (gzn.row(i) - gzn.row(i).dot(zn.row(i)) * zn.row(i)) / znorms(i);
      gw.row(i) = (gwn.row(i) - gwn.row(i).dot(wn.row(i)) * wn.row(i)) / wnorms(i);
    }
    if (cfg.use_relu) {
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < d; ++j)
          if (z(i, j) <= 0) gz(i, j) = 0.0;
    }

    gz += cfg.weight_decay * z;
    gw += cfg.weight_decay * w;
    vz = cfg.momentum * vz + gz;
    vw = cfg.momentum * vw + gw;
    z -= lr * vz;
    w -= lr * vw;

    if ((t + 1) % cfg.check_interval == 0 || t + 1 == cfg.epochs) {
      achieved = max_gram_deviation(detail::row_normalize(w));
      if (achieved <= 0.5 * cfg.tolerance) break;
    }
  }

  Matrix wn = detail::row_normalize(w);
  achieved = max_gram_deviation(wn);
  if (achieved > cfg.tolerance) {
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "prototype optimization did not converge: gram deviation %.6g > tolerance %.6g",
                  achieved, cfg.tolerance);
    throw ConvergenceError(buf, achieved);
  }
  return PrototypeSet{k, d, std::move(wn)};
}

// ---- serialization: <prefix>.proto.json + <prefix>.proto.bin -------------

struct ProtoFileMeta {
  std::string generator = "closed_form";  // or "optimized"
  std::uint64_t seed = 0;
  double tolerance = 1e-10;
};

namespace detail {

inline std::string strip_proto_suffix(std::string path) {
  const std::string js = ".proto.json", bs = ".proto.bin";
  if (path.size() > js.size() && path.compare(path.size() - js.size(), js.size(), js) == 0)
    return path.substr(0, path.size() - js.size());
  if (path.size() > bs.size() && path.compare(path.size() - bs.size(), bs.size(), bs) == 0)
    return path.substr(0, path.size() - bs.size());
  return path;
}

}  // namespace detail

inline void save_prototypes(const PrototypeSet& p, const ProtoFileMeta& meta,
                            const std::string& prefix_path) {
  const std::string prefix = detail::strip_proto_suffix(prefix_path);
  nlohmann::json j;
  j["k"] = p.k;
  j["d"] = p.d;
  j["generator"] = meta.generator;
  j["seed"] = meta.seed;
  j["tolerance"] = meta.tolerance;
  j["max_gram_dev"] = max_gram_deviation(p.vectors);
  std::ofstream jf(prefix + ".proto.json", std::ios::trunc);
  if (!jf) throw IoError("cannot open " + prefix + ".proto.json for writing");
  jf << j.dump(2) << "\n";
  detail::write_doubles(prefix + ".proto.bin", p.vectors.data(),
                        static_cast<std::size_t>(p.k) * p.d);
}

inline PrototypeSet load_prototypes(const std::string& prefix_path) {
  const std::string prefix = detail::strip_proto_suffix(prefix_path);
  std::ifstream jf(prefix + ".proto.json");
  if (!jf) throw IoError("cannot open " + prefix + ".proto.json");
  nlohmann::json j;
  try {
    jf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(prefix + ".proto.json: " + e.what());
  }
  if (!j.contains("k") || !j.contains("d")) throw FormatError(prefix + ".proto.json: missing k/d");
  PrototypeSet p;
  p.k = j["k"].get<int>();
  p.d = j["d"].get<int>();
  if (p.k < 2 || p.d < 1) throw FormatError(prefix + ".proto.json: bad dimensions");
  p.vectors.resize(p.k, p.d);
  detail::read_doubles(prefix + ".proto.bin", p.vectors.data(),
                       static_cast<std::size_t>(p.k) * p.d);
  return p;
}

}  // namespace anchorlab
