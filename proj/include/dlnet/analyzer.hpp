#pragma once

// First-order classification of parameter points of L_k = f(M_k..M_1):
// global certificate, reduction to the two-layer problem, and escape from
// rank-deficient plateaus followed by a descent search.

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dlnet/descent.hpp"
#include "dlnet/error.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"
#include "dlnet/oracle.hpp"
#include "dlnet/perturbation.hpp"
#include "dlnet/rng.hpp"

namespace dlnet {

enum class Label {
  NotCritical,
  GlobalCertified,
  ReducibleFullRank,
  EscapablePlateau,
  // Critical with f'(W) != 0 but no interior minimum-width layer. Cannot be a
  // local minimum when no bottleneck exists; reported, not escaped.
  CriticalNoBottleneck,
};

inline std::string_view to_string(Label l) {
  switch (l) {
    case Label::NotCritical: return "NotCritical";
    case Label::GlobalCertified: return "GlobalCertified";
    case Label::ReducibleFullRank: return "ReducibleFullRank";
    case Label::EscapablePlateau: return "EscapablePlateau";
    case Label::CriticalNoBottleneck: return "CriticalNoBottleneck";
  }
  return "Unknown";
}

struct CriticalPointReport {
  double loss = 0.0;
  std::vector<double> layer_grad_norms;
  double f_prime_norm = 0.0;
  Index split_index = 0;  // 0: no interior bottleneck
  Index width = 0;        // narrowest width d
  Index rank_a = -1;
  Index rank_b = -1;
  double super_grad_a_norm = 0.0;
  double super_grad_b_norm = 0.0;
  Label label = Label::NotCritical;
  std::optional<EscapeCertificate> escape;
  std::optional<std::pair<Matrix, Matrix>> reduction;
  std::optional<double> oracle_gap;  // loss - reduced-rank optimum (quadratic only)
  std::vector<std::string> diagnostics;

  double max_layer_grad() const {
    double best = 0.0;
    for (double g : layer_grad_norms) best = std::max(best, g);
    return best;
  }
};

/// Two-layer partial derivatives at the split: (f'(AB) B^T, A^T f'(AB)).
inline std::pair<Matrix, Matrix> super_gradients(const FactorChain& chain, const ConvexLoss& f) {
  check_compatible(chain, f);
  const auto split = bottleneck_split(chain);
  if (!split) {
    throw Error(ErrorCode::NoInteriorBottleneck, "no interior minimum-width layer");
  }
  const Matrix g = f.gradient(split->upper * split->lower);
  return {g * split->lower.transpose(), split->upper.transpose() * g};
}

/// ||f'(W)|| <= grad_tol; by convexity of f this certifies a global minimum.
inline bool global_certificate(const FactorChain& chain, const ConvexLoss& f,
                               double grad_tol = kDefaultGradTol) {
  check_compatible(chain, f);
  return f.gradient(end_to_end(chain)).norm() <= grad_tol;
}

struct ClassifyOptions {
  Tolerances tols{};
  std::optional<double> delta;  // escape scale; default_delta(chain) when unset
};

inline CriticalPointReport classify(const FactorChain& chain, const ConvexLoss& f,
                                    const ClassifyOptions& opts = {}) {
  const Tolerances& tols = opts.tols;
  tols.validate();
  check_compatible(chain, f);
  CriticalPointReport rep;
  const Matrix w = end_to_end(chain);
  const Matrix g = f.gradient(w);
  rep.loss = f.value(w);
  rep.f_prime_norm = g.norm();
  for (const Matrix& lg : layer_gradients_from(chain, g)) rep.layer_grad_norms.push_back(lg.norm());
  rep.width = chain.dims().narrowest();

  const auto split = bottleneck_split(chain);
  if (split) {
    rep.split_index = split->j;
    rep.rank_a = split->rank_upper(tols.rank_tol);
    rep.rank_b = split->rank_lower(tols.rank_tol);
    const Matrix gs = f.gradient(split->upper * split->lower);
    rep.super_grad_a_norm = (gs * split->lower.transpose()).norm();
    rep.super_grad_b_norm = (split->upper.transpose() * gs).norm();
  }

  if (const auto* quad = dynamic_cast<const QuadraticLoss*>(&f)) {
    try {
      rep.oracle_gap = rep.loss - rrr_oracle(*quad, rep.width, tols.rank_tol).loss;
    } catch (const Error& e) {
      rep.diagnostics.push_back(std::string("oracle unavailable: ") + e.what());
    }
  }

  if (rep.f_prime_norm <= tols.grad_tol) {
    rep.label = Label::GlobalCertified;
    return rep;
  }
  if (rep.max_layer_grad() > tols.grad_tol) {
    rep.label = Label::NotCritical;
    return rep;
  }
  if (!split) {
    rep.label = Label::CriticalNoBottleneck;
    rep.diagnostics.push_back(
        "critical with f'(W) != 0 and no bottleneck: contradicts local minimality, no escape "
        "attempted");
    return rep;
  }
  if (rep.rank_a == split->width && rep.rank_b == split->width) {
    rep.label = Label::ReducibleFullRank;
    rep.reduction = std::make_pair(split->upper, split->lower);
    return rep;
  }
  rep.label = Label::EscapablePlateau;
  const double delta = opts.delta.value_or(default_delta(chain));
  try {
    rep.escape = rep.rank_a < split->width
                     ? escape_construction(chain, f, *split, delta, tols)
                     : escape_construction_upper(chain, f, *split, delta, tols);
  } catch (const Error& e) {
    rep.diagnostics.push_back(std::string("escape construction failed: ") + e.what());
  }
  return rep;
}

/// The super-layer pair (A, B) of a ReducibleFullRank point.
inline std::pair<Matrix, Matrix> two_layer_reduction(const FactorChain& chain,
                                                     const ConvexLoss& f,
                                                     const Tolerances& tols = {}) {
  CriticalPointReport rep = classify(chain, f, {tols, std::nullopt});
  if (rep.label != Label::ReducibleFullRank || !rep.reduction) {
    throw Error(ErrorCode::WrongClassification,
                "point is " + std::string(to_string(rep.label)) + ", not ReducibleFullRank");
  }
  return std::move(*rep.reduction);
}

namespace detail {
inline std::string format_scale(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", s);
  return buf;
}
}  // namespace detail

struct DescentConfig {
  Index budget = 500;
  std::uint64_t seed = 0;
  bool full_chain = false;  // descend on every layer from the start
  // When the frozen-side phase ends short of the target, restart from the
  // certificate's family rescaled by fallback_scale (the loss is unchanged at
  // every scale) and descend on every layer for the remaining budget.
  bool fallback_full_chain = true;
  double fallback_scale = 100.0;
  Index frozen_phase_steps = 125;
  double grad_tol = kDefaultGradTol;
  LineSearchConfig line_search{};
};

struct DescentOutcome {
  bool found = false;
  FactorChain chain;
  double original_loss = 0.0;
  double final_loss = 0.0;
  Index steps = 0;
  Index frozen_steps = 0;  // steps taken with the perturbed side frozen
  std::vector<double> loss_trace;
  std::string diagnostics;
};

/// Descends from the escape certificate's perturbed point, first over the
/// super-layer that was NOT perturbed (the other side frozen), then, if
/// enabled and still needed, over the whole chain. Success means
/// loss <= original - max(1e-12, 1e-6 |original|) when the search ends.
/// If the free layers start a phase with a vanishing gradient, a seeded
/// jitter of size delta is applied once.
inline DescentOutcome descent_search(const FactorChain& chain, const ConvexLoss& f,
                                     const CriticalPointReport& report,
                                     const DescentConfig& cfg = {}) {
  if (report.label != Label::EscapablePlateau || !report.escape) {
    throw Error(ErrorCode::WrongClassification,
                "descent_search needs an EscapablePlateau report with a certificate");
  }
  if (cfg.budget < 0 || cfg.frozen_phase_steps < 0 || !(cfg.fallback_scale > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "descent budget must be non-negative");
  }
  const EscapeCertificate& cert = *report.escape;
  DescentOutcome out;
  out.original_loss = loss(chain, f);
  out.chain = cert.perturbed_chain;
  out.final_loss = loss(out.chain, f);
  out.loss_trace.push_back(out.final_loss);
  const double target = out.original_loss - std::max(1e-12, 1e-6 * std::abs(out.original_loss));

  const Index k = chain.depth();
  std::vector<bool> frozen_side(static_cast<std::size_t>(k));
  for (Index i = 1; i <= k; ++i) {
    const bool upper = i > cert.split_index;
    frozen_side[static_cast<std::size_t>(i - 1)] = cert.side == Side::Lower ? upper : !upper;
  }
  const std::vector<bool> everything(static_cast<std::size_t>(k), true);

  SplitMix64 rng = SplitMix64::stream(cfg.seed, 0xDE5CE47ULL);

  // Runs GD on `active` until `limit` total steps; stops early on a critical
  // point, a failed line search, or (when stop_at_target) reaching the target.
  auto run_phase = [&](const std::vector<bool>& active, Index limit, bool stop_at_target) {
    bool jittered = false;
    double trial_step = cfg.line_search.initial_step;
    std::string stop = "budget exhausted";
    while (out.steps < limit) {
      if (stop_at_target && out.final_loss <= target) {
        stop = "target reached";
        break;
      }
      const std::vector<Matrix> grads = layer_gradients(out.chain, f);
      if (active_max_norm(grads, active) <= cfg.grad_tol) {
        if (jittered || out.final_loss <= target) {
          stop = "free layers reached a critical point";
          break;
        }
        jittered = true;
        FactorChain moved = out.chain;
        for (Index i = 1; i <= k; ++i) {
          if (!active[static_cast<std::size_t>(i - 1)]) continue;
          const Matrix& m = moved.layer(i);
          Matrix noise = rng.normal_matrix(m.rows(), m.cols());
          noise *= cert.delta / std::max(noise.norm(), 1e-300);
          moved.set_layer(i, m + noise);
        }
        out.chain = std::move(moved);
        out.final_loss = loss(out.chain, f);
        out.loss_trace.push_back(out.final_loss);
        ++out.steps;
        continue;
      }
      const StepOutcome s =
          armijo_step(out.chain, f, grads, active, out.final_loss, trial_step, cfg.line_search);
      if (!s.accepted) {
        stop = "line search failed";
        break;
      }
      out.final_loss = s.new_loss;
      out.loss_trace.push_back(out.final_loss);
      ++out.steps;
    }
    return stop;
  };

  std::string stop;
  if (cfg.full_chain) {
    stop = "full chain: " + run_phase(everything, cfg.budget, false);
  } else {
    stop = "frozen side: " +
           run_phase(frozen_side, std::min(cfg.budget, cfg.frozen_phase_steps), false);
    out.frozen_steps = out.steps;
    if (out.final_loss > target && cfg.fallback_full_chain && out.steps < cfg.budget) {
      InvariantFamily wide = cert.family;
      for (RankOnePerturbation& p : wide.perturbations) p.v *= cfg.fallback_scale;
      wide.scale *= cfg.fallback_scale;
      FactorChain restart = apply_family(chain, wide);
      const double restart_loss = loss(restart, f);
      if (std::abs(restart_loss - out.original_loss) <=
          kDefaultInvarianceTol * (1.0 + std::abs(out.original_loss))) {
        out.chain = std::move(restart);
        out.final_loss = restart_loss;
        out.loss_trace.push_back(out.final_loss);
        stop += "; rescaled family x" + detail::format_scale(cfg.fallback_scale);
      }
      stop += "; full chain: " + run_phase(everything, cfg.budget, true);
    }
  }
  out.found = out.final_loss <= target;
  out.diagnostics = stop + "; steps=" + std::to_string(out.steps) +
                    "; original=" + std::to_string(out.original_loss) +
                    "; final=" + std::to_string(out.final_loss);
  return out;
}

}  // namespace dlnet
