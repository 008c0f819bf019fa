#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>
#include <vector>

#include "anchorlab/common.hpp"
#include "anchorlab/losses.hpp"
#include "anchorlab/prototypes.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

struct MarginReport {
  Vector per_sample;
  Vector per_class;  // mean margin per class; NaN for classes absent
  double min_margin = 0.0;
};

// gamma_i = s * (w_y . z_i - max_{j != y} w_j . z_i); features used as given
inline MarginReport sample_margins(const Matrix& features, const std::vector<int>& labels,
                                   const Matrix& prototypes, double scale) {
  const auto n = features.rows();
  const auto k = prototypes.rows();
  if (scale <= 0) throw DomainError("scale must be positive");
  if (prototypes.cols() != features.cols()) throw ShapeError("feature/prototype dim mismatch");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("label count mismatch");
  if (n == 0) throw ShapeError("empty batch");
  if (k < 2) throw ShapeError("need k >= 2 prototypes");
  for (int y : labels)
    if (y < 0 || y >= k) throw LabelError("label outside [0,k)");

  MarginReport r;
  r.per_sample.resize(n);
  Vector class_sum = Vector::Zero(k);
  std::vector<long> class_n(k, 0);
  Matrix dots = features * prototypes.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[i];
    double best_other = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k; ++j)
      if (j != y) best_other = std::max(best_other, dots(i, j));
    r.per_sample(i) = scale * (dots(i, y) - best_other);
    class_sum(y) += r.per_sample(i);
    ++class_n[y];
  }
  r.per_class.resize(k);
  for (Eigen::Index c = 0; c < k; ++c)
    r.per_class(c) = class_n[c] ? class_sum(c) / class_n[c]
                                : std::numeric_limits<double>::quiet_NaN();
  r.min_margin = r.per_sample.minCoeff();
  return r;
}

// smallest pairwise angle between rows, in degrees
inline double min_prototype_angle(const Matrix& w) {
  const auto k = w.rows();
  if (k < 2) throw ShapeError("need at least two prototypes");
  Vector norms(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    norms(i) = w.row(i).norm();
    if (norms(i) < kZeroNormEps)
      throw ZeroVectorError("prototype row " + std::to_string(i) + " is zero");
  }
  double min_angle = 180.0;
  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const double c = std::clamp(w.row(i).dot(w.row(j)) / (norms(i) * norms(j)), -1.0, 1.0);
      min_angle = std::min(min_angle, std::acos(c) * 180.0 / M_PI);
    }
  return min_angle;
}

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  double confidence_mean = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  long count = 0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

// expected calibration error over equal-width confidence bins; confidence is
// the max predicted probability, bins partition [0, 1]
inline CalibrationReport expected_calibration_error(const Matrix& probabilities,
                                                    const std::vector<int>& labels,
                                                    int bin_count = 15) {
  const auto n = probabilities.rows();
  const auto k = probabilities.cols();
  if (bin_count < 1) throw DomainError("need at least one bin");
  if (static_cast<Eigen::Index>(labels.size()) != n) throw ShapeError("label count mismatch");
  if (n == 0) throw ShapeError("empty batch");
  for (Eigen::Index i = 0; i < n; ++i) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < k; ++j) {
      const double p = probabilities(i, j);
      if (p < -1e-9 || p > 1.0 + 1e-9)
        throw ProbabilityError("probability outside [0,1] at row " + std::to_string(i));
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw ProbabilityError("probability row " + std::to_string(i) + " sums to " +
                             std::to_string(sum));
  }
  for (int y : labels)
    if (y < 0 || y >= k) throw LabelError("label outside [0,k)");

  CalibrationReport r;
  r.bins.resize(bin_count);
  std::vector<double> conf_sum(bin_count, 0.0);
  std::vector<long> correct(bin_count, 0);
  for (int b = 0; b < bin_count; ++b) {
    r.bins[b].lo = static_cast<double>(b) / bin_count;
    r.bins[b].hi = static_cast<double>(b + 1) / bin_count;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    const double conf = probabilities.row(i).maxCoeff(&arg);
    int b = std::min(bin_count - 1, static_cast<int>(conf * bin_count));
    b = std::max(b, 0);
    ++r.bins[b].count;
    conf_sum[b] += conf;
    if (static_cast<int>(arg) == labels[i]) ++correct[b];
  }
  double ece = 0.0;
  for (int b = 0; b < bin_count; ++b) {
    if (r.bins[b].count == 0) continue;
    r.bins[b].confidence_mean = conf_sum[b] / r.bins[b].count;
    r.bins[b].accuracy = static_cast<double>(correct[b]) / r.bins[b].count;
    ece += (static_cast<double>(r.bins[b].count) / n) *
           std::abs(r.bins[b].accuracy - r.bins[b].confidence_mean);
  }
  r.ece = ece;
  return r;
}

namespace detail {

inline void check_bound_args(int k, double b) {
  if (k < 2) throw DimensionError("need k >= 2");
  if (b <= 0) throw DomainError("feature radius B must be positive");
}

}  // namespace detail

/**
 * Lipschitz constant (in the feature argument, over the radius-B ball) of the
 * class-sum of anchored cross-entropy against a simplex frame:
 *   lambda(k, B) = k (1 - t) / (1 + (k-1) t),  t = exp(-k B / (k-1)).
 */
inline double lipschitz_pal(int k, double b) {
  detail::check_bound_args(k, b);
  const double t = std::exp(-static_cast<double>(k) * b / (k - 1));
  return k * (1.0 - t) / (1.0 + (k - 1) * t);
}

struct UnanchoredBounds {
  double normalized_w_only = 0.0;  // classifier rows unit, features free
  double normalized_both = 0.0;    // classifier rows and features both unit
};

// worst-case lower bounds on the same class-sum Lipschitz constant when the
// classifier is merely norm-constrained instead of anchored
inline UnanchoredBounds lipschitz_unanchored_lower_bounds(int k, double b) {
  detail::check_bound_args(k, b);
  UnanchoredBounds r;
  r.normalized_w_only = static_cast<double>(k);
  const double e2b = std::exp(2.0 * b);
  r.normalized_both = 2.0 * (e2b - 1.0) / (e2b / (k - 1) + 1.0);
  return r;
}

/**
 * Monte-carlo estimate of the class-sum Lipschitz constant: features drawn
 * half uniformly inside the radius-B ball, half on its surface, gradient
 * norms computed analytically, max-reduced. Sharding across ANCHORLAB_THREADS
 * workers uses per-shard seeds derived from the master seed; shard count
 * changes which points are drawn, so leave it at 1 when bit-stable output
 * matters.
 */
inline double empirical_lipschitz(const LossSpec& spec, const Matrix& prototypes, double b,
                                  long samples, std::uint64_t seed) {
  const auto k = prototypes.rows();
  const auto d = prototypes.cols();
  detail::check_bound_args(static_cast<int>(k), b);
  if (samples < 1) throw CountError("need at least one sample");
  validate_loss_spec(spec, static_cast<int>(k));

  auto run_shard = [&](std::uint64_t shard_seed, long count) {
    Rng rng(shard_seed);
    double worst = 0.0;
    const long interior = count / 2;
    const long chunk = 512;
    std::vector<int> labels(static_cast<std::size_t>(chunk));
    Matrix z(chunk, d);
    long done = 0;
    while (done < count) {
      const long batch = std::min(chunk, count - done);
      for (long i = 0; i < batch; ++i) {
        double nrm = 0.0;
        do {
          for (Eigen::Index j = 0; j < d; ++j) z(i, j) = rng.normal();
          nrm = z.row(i).norm();
        } while (nrm < kZeroNormEps);
        const bool inside = (done + i) < interior;
        const double radius =
            inside ? b * std::pow(rng.uniform(), 1.0 / static_cast<double>(d)) : b;
        z.row(i) *= radius / nrm;
      }
      Matrix grad_sum = Matrix::Zero(batch, d);
      for (int y = 0; y < k; ++y) {
        std::fill(labels.begin(), labels.begin() + batch, y);
        std::vector<int> ly(labels.begin(), labels.begin() + batch);
        LossOutput out = evaluate_loss(z.topRows(batch), ly, prototypes, spec);
        grad_sum += static_cast<double>(batch) * out.grad_features;
      }
      for (long i = 0; i < batch; ++i) worst = std::max(worst, grad_sum.row(i).norm());
      done += batch;
    }
    return worst;
  };

  const int shards = std::min<long>(thread_cap(), samples);
  if (shards <= 1) return run_shard(derive_seed(seed, 0), samples);

  std::vector<double> results(shards, 0.0);
  std::vector<std::thread> workers;
  const long base = samples / shards, extra = samples % shards;
  for (int s = 0; s < shards; ++s) {
    const long count = base + (s < extra ? 1 : 0);
    workers.emplace_back(
        [&, s, count] { results[s] = run_shard(derive_seed(seed, s), count); });
  }
  for (auto& w : workers) w.join();
  return *std::max_element(results.begin(), results.end());
}

// excess-risk bound under symmetric label noise for a lambda-Lipschitz
// class-sum loss: 2 eta lambda B / ((1 - eta) k - 1)
inline double risk_bound_general(double eta, double lambda, double b, int k) {
  detail::check_bound_args(k, b);
  if (lambda < 0) throw DomainError("lambda must be nonnegative");
  if (eta < 0 || eta >= static_cast<double>(k - 1) / k)
    throw RateError("noise rate must lie in [0, (k-1)/k)");
  return 2.0 * eta * lambda * b / ((1.0 - eta) * k - 1.0);
}

struct RiskBound {
  double eta = 0.0;
  int k = 0;
  double b = 0.0;
  double lambda = 0.0;
  double bound = 0.0;
};

// the same bound specialized to anchored cross-entropy, lambda plugged in
// and simplified
inline RiskBound risk_bound_ce(double eta, double b, int k) {
  detail::check_bound_args(k, b);
  if (eta < 0 || eta >= static_cast<double>(k - 1) / k)
    throw RateError("noise rate must lie in [0, (k-1)/k)");
  RiskBound r;
  r.eta = eta;
  r.k = k;
  r.b = b;
  r.lambda = lipschitz_pal(k, b);
  const double t = std::exp(-static_cast<double>(k) * b / (k - 1));
  const double c = (k - 1.0) / ((1.0 - eta) * k - 1.0);
  r.bound = 2.0 * c * eta * k * (1.0 - t) * b /
            ((k - 1.0) + t * (k - 1.0) * (k - 1.0));
  return r;
}

namespace detail {

// log((1 + e^x)) without overflow
inline double softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

/**
 * Bayes-optimal posterior threshold between two classes trained with margins
 * alpha_plus / alpha_minus at logit radius r:
 *   threshold = g(alpha_minus) / (g(alpha_plus) + g(alpha_minus)),
 *   g(alpha)  = log((1 + e^(r - alpha)) / (1 + e^(-r - alpha))).
 * Equal margins give exactly 1/2.
 */
inline double ldam_bayes_threshold(double alpha_plus, double alpha_minus, double r) {
  if (r <= 0) throw DomainError("logit radius r must be positive");
  auto g = [r](double alpha) {
    return detail::softplus(r - alpha) - detail::softplus(-r - alpha);
  };
  const double gp = g(alpha_plus);
  const double gm = g(alpha_minus);
  return gm / (gp + gm);
}

struct NormStats {
  Vector prototype_norms;
  double mean_prototype_norm = 0.0;
  double mean_feature_norm = 0.0;
  std::vector<long> feature_hist_counts;
  Vector feature_hist_edges;  // bins + 1 entries
};

inline NormStats norm_stats(const Matrix& prototypes, const Matrix& features, int bins = 20) {
  if (bins < 1) throw DomainError("need at least one histogram bin");
  if (prototypes.rows() == 0 || features.rows() == 0) throw ShapeError("empty input");
  NormStats s;
  s.prototype_norms.resize(prototypes.rows());
  for (Eigen::Index i = 0; i < prototypes.rows(); ++i)
    s.prototype_norms(i) = prototypes.row(i).norm();
  s.mean_prototype_norm = s.prototype_norms.mean();

  Vector fnorms(features.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) fnorms(i) = features.row(i).norm();
  s.mean_feature_norm = fnorms.mean();

  const double top = std::max(fnorms.maxCoeff(), 1e-300);
  s.feature_hist_edges.resize(bins + 1);
  for (int b = 0; b <= bins; ++b)
    s.feature_hist_edges(b) = top * static_cast<double>(b) / bins;
  s.feature_hist_counts.assign(bins, 0);
  for (Eigen::Index i = 0; i < fnorms.size(); ++i) {
    int b = static_cast<int>(fnorms(i) / top * bins);
    b = std::clamp(b, 0, bins - 1);
    ++s.feature_hist_counts[static_cast<std::size_t>(b)];
  }
  return s;
}

}  // namespace anchorlab
