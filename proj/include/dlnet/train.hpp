#pragma once

// Full-chain gradient descent trainer with a recorded trajectory.

#include <cstdint>
#include <string_view>
#include <vector>

#include "dlnet/descent.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"

namespace dlnet {

enum class TrainStatus {
  Converged,         // max layer gradient <= tol, not a rank-deficient plateau
  StalledCritical,   // max layer gradient <= tol at a rank-deficient point with f'(W) != 0
  BudgetExhausted,
  LineSearchFailed,
};

inline std::string_view to_string(TrainStatus s) {
  switch (s) {
    case TrainStatus::Converged: return "Converged";
    case TrainStatus::StalledCritical: return "StalledCritical";
    case TrainStatus::BudgetExhausted: return "BudgetExhausted";
    case TrainStatus::LineSearchFailed: return "LineSearchFailed";
  }
  return "Unknown";
}

struct TrajectoryRecord {
  Index step = 0;
  double loss = 0.0;
  double max_grad = 0.0;
  Index rank_a = -1;  // -1 when there is no interior bottleneck
  Index rank_b = -1;
};

struct Trajectory {
  std::vector<TrajectoryRecord> records;
  TrainStatus status = TrainStatus::BudgetExhausted;
};

struct TrainConfig {
  Index max_steps = 10000;
  double stop_grad_tol = kDefaultGradTol;
  std::uint64_t seed = 0;  // recorded in outputs only; the trainer itself is deterministic
  double rank_tol = kDefaultRankTol;
  bool record_ranks = true;
  LineSearchConfig line_search{};
};

struct TrainResult {
  Trajectory trajectory;
  FactorChain final_chain;
};

inline TrajectoryRecord make_record(const FactorChain& chain, Index step, double value,
                                    double max_grad, const TrainConfig& cfg) {
  TrajectoryRecord rec{step, value, max_grad, -1, -1};
  if (cfg.record_ranks) {
    if (const auto split = bottleneck_split(chain)) {
      rec.rank_a = split->rank_upper(cfg.rank_tol);
      rec.rank_b = split->rank_lower(cfg.rank_tol);
    }
  }
  return rec;
}

/// Gradient descent on every layer with Armijo backtracking (parameter 1e-4,
/// factor 0.5). The loss is non-increasing along the trajectory.
inline TrainResult train_gd(const FactorChain& start, const ConvexLoss& f,
                            const TrainConfig& cfg = {}) {
  TrainResult out{{}, start};
  FactorChain& chain = out.final_chain;
  const std::vector<bool> active(static_cast<std::size_t>(chain.depth()), true);
  double value = loss(chain, f);
  double trial_step = cfg.line_search.initial_step;
  for (Index step = 0;; ++step) {
    const Matrix g = f.gradient(end_to_end(chain));
    const std::vector<Matrix> grads = layer_gradients_from(chain, g);
    const double gmax = max_norm(grads);
    out.trajectory.records.push_back(make_record(chain, step, value, gmax, cfg));
    if (gmax <= cfg.stop_grad_tol) {
      out.trajectory.status = TrainStatus::Converged;
      if (g.norm() > cfg.stop_grad_tol) {
        if (const auto split = bottleneck_split(chain)) {
          const Index d = split->width;
          if (split->rank_upper(cfg.rank_tol) < d || split->rank_lower(cfg.rank_tol) < d) {
            out.trajectory.status = TrainStatus::StalledCritical;
          }
        }
      }
      return out;
    }
    if (step >= cfg.max_steps) {
      out.trajectory.status = TrainStatus::BudgetExhausted;
      return out;
    }
    const StepOutcome s = armijo_step(chain, f, grads, active, value, trial_step, cfg.line_search);
    if (!s.accepted) {
      out.trajectory.status = TrainStatus::LineSearchFailed;
      return out;
    }
    value = s.new_loss;
  }
}

}  // namespace dlnet
