#pragma once

// Gradient descent with Armijo backtracking over a subset of the layers.

#include <cmath>
#include <string>
#include <vector>

#include "dlnet/error.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"

namespace dlnet {

struct LineSearchConfig {
  double armijo = 1e-4;        // sufficient-decrease parameter
  double backtrack = 0.5;      // step shrink factor
  double growth = 2.0;         // next trial step = growth * last accepted step
  double initial_step = 1.0;
  double min_step = 1e-30;     // below this the search reports failure
};

struct StepOutcome {
  bool accepted = false;
  double new_loss = 0.0;
  double step = 0.0;
};

/// One Armijo step along -grad on the layers with active[i-1] set. On success
/// the chain is updated in place and `trial_step` is grown for the next call;
/// on failure nothing changes.
inline StepOutcome armijo_step(FactorChain& chain, const ConvexLoss& f,
                               const std::vector<Matrix>& grads, const std::vector<bool>& active,
                               double current_loss, double& trial_step,
                               const LineSearchConfig& cfg = {}) {
  double slope = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (active[i]) slope += grads[i].squaredNorm();
  }
  StepOutcome out;
  if (slope == 0.0) return out;
  double t = trial_step;
  while (t >= cfg.min_step) {
    std::vector<Matrix> trial = chain.factors();
    for (std::size_t i = 0; i < grads.size(); ++i) {
      if (active[i]) trial[i] -= t * grads[i];
    }
    bool finite = true;
    for (const Matrix& m : trial) finite = finite && m.allFinite();
    if (finite) {
      FactorChain candidate(std::move(trial));
      const double value = loss(candidate, f);
      if (std::isfinite(value) && value <= current_loss - cfg.armijo * t * slope) {
        chain = std::move(candidate);
        out.accepted = true;
        out.new_loss = value;
        out.step = t;
        trial_step = t * cfg.growth;
        return out;
      }
    }
    t *= cfg.backtrack;
  }
  return out;
}

inline double active_max_norm(const std::vector<Matrix>& grads, const std::vector<bool>& active) {
  double best = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (active[i]) best = std::max(best, grads[i].norm());
  }
  return best;
}

}  // namespace dlnet
