#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "anchorlab/analysis.hpp"
#include "anchorlab/common.hpp"
#include "anchorlab/losses.hpp"
#include "anchorlab/prototypes.hpp"
#include "anchorlab/rng.hpp"

namespace anchorlab {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifySuiteConfig {
  int grad_instances = 20;        // per loss-variant combination
  long lipschitz_samples = 20000;
  std::uint64_t seed = 0;
  bool include_optimized = true;  // optimization-based generator cross-check
};

namespace detail {

inline std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), f, a, b, c);
  return buf;
}

}  // namespace detail

// self-contained consistency suite over the library's closed forms; every
// check is deterministic given cfg.seed
inline std::vector<CheckResult> run_theory_suite(const VerifySuiteConfig& cfg = {}) {
  std::vector<CheckResult> out;
  auto add = [&out](const std::string& name, bool pass, const std::string& detail) {
    out.push_back({name, pass, detail});
  };

  // exact simplex construction across the dimension grid
  {
    double worst_gram = 0.0, worst_sum = 0.0;
    for (auto [k, d] : std::vector<std::pair<int, int>>{{2, 2}, {3, 2}, {4, 8}, {10, 9}, {10, 64}}) {
      auto p = generate_closed_form(k, d);
      worst_gram = std::max(worst_gram, max_gram_deviation(p.vectors));
      worst_sum = std::max(worst_sum, p.vectors.colwise().sum().norm());
    }
    add("closed_form_equiangular", worst_gram <= 1e-10,
        detail::fmt("max gram deviation %.3e (tol 1e-10)", worst_gram));
    add("closed_form_zero_sum", worst_sum <= 1e-8,
        detail::fmt("max |sum of rows| %.3e (tol 1e-8)", worst_sum));
  }

  if (cfg.include_optimized) {
    ProtoGenConfig pc;
    pc.seed = cfg.seed;
    bool ok = true;
    double worst = 0.0;
    std::string note;
    try {
      for (auto [k, d] : std::vector<std::pair<int, int>>{{4, 8}, {10, 9}}) {
        auto p = generate_optimized(k, d, pc);
        worst = std::max(worst, max_gram_deviation(p.vectors));
      }
      note = detail::fmt("max gram deviation %.3e (tol 1e-4)", worst);
    } catch (const ConvergenceError& e) {
      ok = false;
      note = e.what();
    }
    add("optimized_equiangular", ok && worst <= 1e-4, note);

    auto a = generate_optimized(10, 9, pc);
    auto b = generate_closed_form(10, 9);
    double gdiff = (gram_matrix(a) - gram_matrix(b)).cwiseAbs().maxCoeff();
    add("generator_agreement", gdiff <= 1e-3,
        detail::fmt("gram gap optimized vs closed form %.3e (tol 1e-3)", gdiff));
  }

  // analytic gradients against central differences
  {
    double worst = 0.0;
    Rng rng(derive_seed(cfg.seed, 1));
    const int k = 5, d = 7, n = 4;
    auto protos = generate_closed_form(k, d);
    for (int variant = 0; variant < 6; ++variant) {
      for (int norm = 0; norm < 2; ++norm) {
        for (int anch = 0; anch < 2; ++anch) {
          LossSpec spec;
          spec.variant = static_cast<LossVariant>(variant);
          spec.feature_normalize = norm;
          spec.anchored = anch;
          spec.scale = 2.0;
          if (variant_uses_margins(spec.variant))
            spec.margins.assign(k, 0.4);
          if (spec.variant == LossVariant::GCE) spec.q = 0.7;
          if (spec.variant == LossVariant::Focal) spec.focal_gamma = 2.0;
          if (spec.variant == LossVariant::NSL && !spec.anchored) continue;
          for (int inst = 0; inst < cfg.grad_instances; ++inst) {
            Matrix f(n, d);
            rng.fill_normal(f);
            std::vector<int> y(n);
            for (int i = 0; i < n; ++i) y[i] = static_cast<int>(rng.below(k));
            Matrix w = protos.vectors;
            if (!anch) {
              Matrix jitter(k, d);
              rng.fill_normal(jitter, 0.1);
              w += jitter;
            }
            worst = std::max(worst, grad_check(spec, f, y, w));
          }
        }
      }
    }
    add("gradient_check", worst <= 1e-5,
        detail::fmt("max relative error %.3e (tol 1e-5)", worst));
  }

  // class-sum of nsl is constant against a simplex; plain softmax is not
  {
    const int k = 6, d = 8;
    auto protos = generate_closed_form(k, d);
    LossSpec nsl;
    nsl.variant = LossVariant::NSL;
    nsl.anchored = true;
    nsl.feature_normalize = true;
    nsl.scale = 3.0;
    Rng rng(derive_seed(cfg.seed, 2));
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int i = 0; i < 1000; ++i) {
      Vector z(d);
      for (int j = 0; j < d; ++j) z(j) = rng.normal();
      const double s = loss_symmetry_sum(nsl, z, protos.vectors);
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    add("nsl_symmetry", hi - lo <= 1e-9,
        detail::fmt("class-sum spread %.3e over 1000 features (tol 1e-9)", hi - lo));
  }

  // noise-aware scale closed form
  {
    const bool ok = noise_aware_scale(0.0) == 5.0 && noise_aware_scale(0.2) == 1.0 &&
                    noise_aware_scale(0.45) == 0.5;
    add("noise_aware_scale", ok, "eta {0, 0.2, 0.45} -> s {5, 1, 0.5}");
  }

  // sampled gradient norms vs the anchored constant
  {
    auto protos = generate_closed_form(10, 9);
    LossSpec ce;
    ce.anchored = true;
    bool ok = true;
    std::string note;
    for (double b : {0.5, 1.0, 2.0}) {
      const double lam = lipschitz_pal(10, b);
      const double est =
          empirical_lipschitz(ce, protos.vectors, b, cfg.lipschitz_samples, derive_seed(cfg.seed, 3));
      if (!(est >= 0.5 * lam && est <= 1.001 * lam)) ok = false;
      note += detail::fmt("B=%.1f est/lam=%.3f ", b, est / lam);
    }
    LossSpec nsl;
    nsl.variant = LossVariant::NSL;
    nsl.anchored = true;
    nsl.feature_normalize = true;
    const double nsl_est = empirical_lipschitz(nsl, protos.vectors, 1.0, 2000, derive_seed(cfg.seed, 4));
    if (nsl_est > 1e-9) ok = false;
    note += detail::fmt("nsl est %.1e", nsl_est);
    add("lipschitz_estimate", ok, note);
  }

  // anchored constant sits strictly below the unanchored worst cases; at
  // k=2 the two coincide exactly, so the strict comparison starts at k=3
  {
    bool ok = true;
    double min_gap = std::numeric_limits<double>::infinity();
    for (int k : {3, 10, 64}) {
      for (double b : {0.1, 1.0, 10.0}) {
        const double lam = lipschitz_pal(k, b);
        const auto lb = lipschitz_unanchored_lower_bounds(k, b);
        if (!(lam < lb.normalized_w_only && lam < lb.normalized_both)) ok = false;
        min_gap = std::min({min_gap, lb.normalized_w_only - lam, lb.normalized_both - lam});
      }
    }
    add("anchoring_tightness", ok,
        detail::fmt("min gap to unanchored bounds %.3e (k >= 3; k=2 coincides exactly)", min_gap));
  }

  // the specialized risk bound equals the general bound at the anchored constant
  {
    double worst = 0.0;
    for (int k : {2, 3, 10, 64})
      for (double b : {0.1, 0.5, 1.0, 2.0, 10.0})
        for (double eta : {0.05, 0.2, 0.4}) {
          if (eta >= static_cast<double>(k - 1) / k) continue;
          const auto ce = risk_bound_ce(eta, b, k);
          const double gen = risk_bound_general(eta, lipschitz_pal(k, b), b, k);
          worst = std::max(worst, std::abs(ce.bound - gen));
        }
    add("risk_bound_consistency", worst <= 1e-12,
        detail::fmt("max |specialized - general| %.3e (tol 1e-12)", worst));
  }

  // margin-threshold closed form
  {
    bool ok = ldam_bayes_threshold(1.0, 1.0, 2.0) == 0.5 &&
              ldam_bayes_threshold(0.3, 0.3, 0.7) == 0.5;
    double min_dev = std::numeric_limits<double>::infinity();
    for (auto [ap, am] : std::vector<std::pair<double, double>>{{2, 0.5}, {1.5, 0.2}, {3, 1}}) {
      const double t = ldam_bayes_threshold(ap, am, 2.0);
      if (!(t > 0 && t < 1)) ok = false;
      min_dev = std::min(min_dev, std::abs(t - 0.5));
    }
    add("margin_threshold", ok && min_dev >= 0.01,
        detail::fmt("equal margins exactly 0.5; min |t - 0.5| %.4f for margin gaps >= 1", min_dev));
  }

  // per-sample margin never exceeds the simplex ceiling s*k/(k-1)
  {
    const int k = 10, d = 9;
    auto protos = generate_closed_form(k, d);
    const double s = 4.0;
    const double ceiling = s * k / (k - 1.0);
    Rng rng(derive_seed(cfg.seed, 5));
    double worst = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < 2000; ++i) {
      Vector z(d);
      for (int j = 0; j < d; ++j) z(j) = rng.normal();
      z.normalize();
      Matrix f = z.transpose();
      const int y = static_cast<int>(rng.below(k));
      worst = std::max(worst, sample_margins(f, {y}, protos.vectors, s).min_margin);
    }
    Matrix at_proto = protos.vectors.row(7);
    const double attained = sample_margins(at_proto, {7}, protos.vectors, s).min_margin;
    add("margin_ceiling", worst <= ceiling + 1e-9 && std::abs(attained - ceiling) <= 1e-9,
        detail::fmt("max sampled margin %.6f, ceiling %.6f attained at the prototype", worst,
                    ceiling));
  }

  return out;
}

// equiangularity audit of a serialized prototype set
inline CheckResult verify_prototype_file(const std::string& path, double tolerance) {
  auto p = load_prototypes(path);
  auto rep = verify_equiangular(p, tolerance);
  return {"prototype_file",
          rep.pass,
          detail::fmt("max norm dev %.3e, max gram dev %.3e, min angle %.2f deg",
                      rep.max_norm_dev, rep.max_gram_dev, rep.min_angle_deg)};
}

}  // namespace anchorlab
