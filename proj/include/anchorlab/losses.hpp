#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "anchorlab/common.hpp"

namespace anchorlab {

enum class LossVariant { Softmax, MarginSoftmax, LDAM, NSL, GCE, Focal };

inline const char* loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::Softmax: return "softmax";
    case LossVariant::MarginSoftmax: return "margin_softmax";
    case LossVariant::LDAM: return "ldam";
    case LossVariant::NSL: return "nsl";
    case LossVariant::GCE: return "gce";
    case LossVariant::Focal: return "focal";
  }
  return "?";
}

inline LossVariant loss_variant_from_name(const std::string& s) {
  if (s == "softmax") return LossVariant::Softmax;
  if (s == "margin_softmax") return LossVariant::MarginSoftmax;
  if (s == "ldam") return LossVariant::LDAM;
  if (s == "nsl") return LossVariant::NSL;
  if (s == "gce") return LossVariant::GCE;
  if (s == "focal") return LossVariant::Focal;
  throw ConfigError("unknown loss variant: " + s);
}

struct LossSpec {
  LossVariant variant = LossVariant::Softmax;
  double scale = 1.0;
  std::vector<double> margins;  // per-class, MarginSoftmax / LDAM only
  double q = 0.7;               // GCE only
  double focal_gamma = 0.0;     // Focal only
  bool feature_normalize = false;
  bool anchored = false;
};

struct LossOutput {
  double loss = 0.0;
  Matrix grad_features;    // n x d, d/dz of the batch-mean loss
  Matrix grad_prototypes;  // k x d, exactly zero when anchored
  Matrix logits;           // n x k, scaled (and margin-adjusted) logits
};

inline bool variant_uses_margins(LossVariant v) {
  return v == LossVariant::MarginSoftmax || v == LossVariant::LDAM;
}

inline void validate_loss_spec(const LossSpec& spec, int k) {
  if (spec.scale <= 0) throw DomainError("loss scale must be positive");
  if (variant_uses_margins(spec.variant)) {
    if (static_cast<int>(spec.margins.size()) != k)
      throw ShapeError("margin vector has " + std::to_string(spec.margins.size()) +
                       " entries, expected k=" + std::to_string(k));
    for (double a : spec.margins)
      if (a < 0) throw DomainError("margins must be nonnegative");
  } else if (!spec.margins.empty()) {
    throw ConfigError("margins given for a variant that does not use them");
  }
  if (spec.variant == LossVariant::GCE && (spec.q <= 0 || spec.q > 1))
    throw DomainError("gce exponent q must lie in (0, 1]");
  if (spec.variant == LossVariant::Focal && spec.focal_gamma < 0)
    throw DomainError("focal gamma must be nonnegative");
  if (spec.variant == LossVariant::NSL && !spec.anchored)
    throw AnchoringError("nsl is only defined against anchored prototypes");
}

/**
 * Batch loss with analytic gradients. Pipeline:
 *   z~ = z / ||z||            (if feature_normalize; error on zero rows)
 *   l_ij = s * w_j . z~_i     (+ margin[y_i] on the true-class logit for
 *                              the margin variants)
 *   per-sample loss per variant, batch reduction = arithmetic mean.
 * Gradients flow through the normalization via (I - u u^T)/||z||. Prototype
 * gradients are identically zero when the spec is anchored.
 */
inline LossOutput evaluate_loss(const Matrix& features, const std::vector<int>& labels,
                                const Matrix& prototypes, const LossSpec& spec) {
  const auto n = features.rows();
  const auto d = features.cols();
  const auto k = prototypes.rows();
  if (prototypes.cols() != d)
    throw ShapeError("feature dim " + std::to_string(d) + " != prototype dim " +
                     std::to_string(prototypes.cols()));
  if (static_cast<Eigen::Index>(labels.size()) != n)
    throw ShapeError("got " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " samples");
  validate_loss_spec(spec, static_cast<int>(k));
  for (int y : labels)
    if (y < 0 || y >= k) throw LabelError("label " + std::to_string(y) + " outside [0," +
                                          std::to_string(k) + ")");
  if (n == 0) throw ShapeError("empty batch");

  const double s = spec.scale;
  Matrix zn = features;
  Vector znorms = Vector::Ones(n);
  if (spec.feature_normalize) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double nrm = features.row(i).norm();
      if (nrm < kZeroNormEps)
        throw NormalizationError("cannot normalize zero feature vector (row " +
                                 std::to_string(i) + ")");
      znorms(i) = nrm;
      zn.row(i) /= nrm;
    }
  }

  Matrix logits = s * (zn * prototypes.transpose());
  if (variant_uses_margins(spec.variant))
    for (Eigen::Index i = 0; i < n; ++i) logits(i, labels[i]) += spec.margins[labels[i]];

  double total = 0.0;
  Matrix dlogits(n, k);  // d(per-sample loss)/d(logit row)
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[i];
    if (spec.variant == LossVariant::NSL) {
      total += -logits(i, y);
      dlogits.row(i).setZero();
      dlogits(i, y) = -1.0;
      continue;
    }
    const double mx = logits.row(i).maxCoeff();
    Eigen::RowVectorXd p = (logits.row(i).array() - mx).exp();
    const double sum = p.sum();
    p /= sum;
    const double logp_y = logits(i, y) - mx - std::log(sum);
    switch (spec.variant) {
      case LossVariant::Softmax:
      case LossVariant::MarginSoftmax:
      case LossVariant::LDAM: {
        total += -logp_y;
        dlogits.row(i) = p;
        dlogits(i, y) -= 1.0;
        break;
      }
      case LossVariant::GCE: {
        const double py = std::exp(logp_y);
        const double pq = std::pow(py, spec.q);
        total += (1.0 - pq) / spec.q;
        dlogits.row(i) = pq * p;
        dlogits(i, y) -= pq;
        break;
      }
      case LossVariant::Focal: {
        const double py = std::exp(logp_y);
        const double om = 1.0 - py;
        total += om <= 0.0 ? 0.0 : -std::pow(om, spec.focal_gamma) * logp_y;
        // a = p_y * dL/dp_y, finite for p_y -> 0 and p_y -> 1
        double a;
        if (om <= 0.0) {
          a = 0.0;
        } else {
          a = spec.focal_gamma * std::pow(om, spec.focal_gamma - 1.0) * py * logp_y -
              std::pow(om, spec.focal_gamma);
        }
        for (Eigen::Index j = 0; j < k; ++j)
          dlogits(i, j) = a * ((j == y ? 1.0 : 0.0) - p(j));
        break;
      }
      default: break;
    }
  }

  LossOutput out;
  out.loss = total / static_cast<double>(n);
  out.logits = std::move(logits);

  Matrix g = dlogits / static_cast<double>(n);
  Matrix grad_zn = s * (g * prototypes);  // n x d
  if (spec.anchored) {
    out.grad_prototypes = Matrix::Zero(k, d);
  } else {
    out.grad_prototypes = s * (g.transpose() * zn);
  }
  if (spec.feature_normalize) {
    out.grad_features.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      out.grad_features.row(i) =
          (grad_zn.row(i) - grad_zn.row(i).dot(zn.row(i)) * zn.row(i)) / znorms(i);
  } else {
    out.grad_features = std::move(grad_zn);
  }
  return out;
}

namespace detail {

inline LossOutput evaluate_named(const Matrix& f, const std::vector<int>& y, const Matrix& w,
                                 const LossSpec& spec, LossVariant expect, const char* name) {
  if (spec.variant != expect)
    throw ConfigError(std::string(name) + " called with spec variant " +
                      loss_variant_name(spec.variant));
  return evaluate_loss(f, y, w, spec);
}

}  // namespace detail

inline LossOutput softmax_loss(const Matrix& f, const std::vector<int>& y, const Matrix& w,
                               const LossSpec& spec) {
  return detail::evaluate_named(f, y, w, spec, LossVariant::Softmax, "softmax_loss");
}
inline LossOutput margin_loss(const Matrix& f, const std::vector<int>& y, const Matrix& w,
                              const LossSpec& spec) {
  if (spec.variant != LossVariant::MarginSoftmax && spec.variant != LossVariant::LDAM)
    throw ConfigError("margin_loss called with a non-margin spec");
  return evaluate_loss(f, y, w, spec);
}
inline LossOutput nsl_loss(const Matrix& f, const std::vector<int>& y, const Matrix& w,
                           const LossSpec& spec) {
  return detail::evaluate_named(f, y, w, spec, LossVariant::NSL, "nsl_loss");
}
inline LossOutput gce_loss(const Matrix& f, const std::vector<int>& y, const Matrix& w,
                           const LossSpec& spec) {
  return detail::evaluate_named(f, y, w, spec, LossVariant::GCE, "gce_loss");
}
inline LossOutput focal_loss(const Matrix& f, const std::vector<int>& y, const Matrix& w,
                             const LossSpec& spec) {
  return detail::evaluate_named(f, y, w, spec, LossVariant::Focal, "focal_loss");
}

// class-dependent margins alpha_j = C * n_j^{-1/4}
inline std::vector<double> ldam_margins(const std::vector<long>& class_counts, double c) {
  if (c <= 0) throw DomainError("margin constant must be positive");
  std::vector<double> out(class_counts.size());
  for (std::size_t j = 0; j < class_counts.size(); ++j) {
    if (class_counts[j] < 1)
      throw CountError("class " + std::to_string(j) + " has count " +
                       std::to_string(class_counts[j]) + "; counts must be >= 1");
    out[j] = c * std::pow(static_cast<double>(class_counts[j]), -0.25);
  }
  return out;
}

// sum_y L(z, y) over all k labels for one feature vector; constant in z for
// losses whose gradient field is label-symmetric (nsl against a simplex).
inline double loss_symmetry_sum(const LossSpec& spec, const Vector& feature,
                                const Matrix& prototypes) {
  const auto k = prototypes.rows();
  Matrix f = feature.transpose();
  double total = 0.0;
  for (int y = 0; y < k; ++y) total += evaluate_loss(f, {y}, prototypes, spec).loss;
  return total;
}

// recommended logit scale under symmetric label noise rate eta
inline double noise_aware_scale(double eta) {
  if (eta < 0) throw RateError("noise rate must be nonnegative");
  return 0.25 / (0.05 + eta);
}

// only fields the variant actually reads are serialized
inline nlohmann::json loss_spec_to_json(const LossSpec& spec) {
  nlohmann::json j;
  j["variant"] = loss_variant_name(spec.variant);
  j["scale"] = spec.scale;
  j["feature_normalize"] = spec.feature_normalize;
  j["anchored"] = spec.anchored;
  if (variant_uses_margins(spec.variant)) j["margins"] = spec.margins;
  if (spec.variant == LossVariant::GCE) j["q"] = spec.q;
  if (spec.variant == LossVariant::Focal) j["focal_gamma"] = spec.focal_gamma;
  return j;
}

inline LossSpec loss_spec_from_json(const nlohmann::json& j) {
  LossSpec spec;
  spec.variant = loss_variant_from_name(j.at("variant").get<std::string>());
  spec.scale = j.value("scale", 1.0);
  spec.feature_normalize = j.value("feature_normalize", false);
  spec.anchored = j.value("anchored", false);
  if (j.contains("margins")) spec.margins = j["margins"].get<std::vector<double>>();
  if (j.contains("q")) spec.q = j["q"].get<double>();
  if (j.contains("focal_gamma")) spec.focal_gamma = j["focal_gamma"].get<double>();
  return spec;
}

/**
 * Central-difference check of the analytic gradients. Every coordinate of
 * the feature matrix (and the prototype matrix when not anchored) is
 * perturbed by +-step; relative error uses a unit floor:
 * |a - n| / max(1, |a|, |n|). Returns the max over all coordinates.
 */
inline double grad_check(const LossSpec& spec, const Matrix& features,
                         const std::vector<int>& labels, const Matrix& prototypes,
                         double step = 1e-5) {
  if (step <= 0 || step > 1e-2) throw DomainError("step must lie in (0, 1e-2]");
  const LossOutput base = evaluate_loss(features, labels, prototypes, spec);
  double worst = 0.0;
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
  };

  Matrix f = features;
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    for (Eigen::Index j = 0; j < f.cols(); ++j) {
      const double orig = f(i, j);
      f(i, j) = orig + step;
      const double lp = evaluate_loss(f, labels, prototypes, spec).loss;
      f(i, j) = orig - step;
      const double lm = evaluate_loss(f, labels, prototypes, spec).loss;
      f(i, j) = orig;
      worst = std::max(worst, rel(base.grad_features(i, j), (lp - lm) / (2 * step)));
    }
  }
  if (!spec.anchored) {
    Matrix w = prototypes;
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        const double orig = w(i, j);
        w(i, j) = orig + step;
        const double lp = evaluate_loss(features, labels, w, spec).loss;
        w(i, j) = orig - step;
        const double lm = evaluate_loss(features, labels, w, spec).loss;
        w(i, j) = orig;
        worst = std::max(worst, rel(base.grad_prototypes(i, j), (lp - lm) / (2 * step)));
      }
    }
  }
  return worst;
}

}  // namespace anchorlab
