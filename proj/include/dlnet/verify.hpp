#pragma once

// Self-verification suite: module property checks and the numbered
// acceptance criteria, each reported as one section with a pass flag.
//
// Every section draws from its own RNG stream of the suite seed, so a
// section's outcome does not depend on which other sections ran. Reports
// carry no timings and are byte-identical for identical options.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlnet/analyzer.hpp"
#include "dlnet/error.hpp"
#include "dlnet/instance.hpp"
#include "dlnet/io.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"
#include "dlnet/oracle.hpp"
#include "dlnet/perturbation.hpp"
#include "dlnet/rng.hpp"
#include "dlnet/train.hpp"

namespace dlnet {

struct VerifyOptions {
  std::uint64_t seed = 42;
  // Trials per randomized section; unset runs every section at its nominal
  // count. 0 runs nothing and flags the report.
  std::optional<Index> trials;
  // "grad-sign" negates the analytic gradient of layer 1 inside the gradient
  // check, to confirm the check can fail.
  std::string mutation;
  // Restrict to these section ids; empty runs all.
  std::vector<std::string> only;
};

struct CriterionResult {
  std::string id;
  std::string title;
  bool passed = true;
  Index trials = 0;
  Index failures = 0;
  Index skipped = 0;  // draws rejected as infeasible and replaced
  std::string metric;
  double worst = 0.0;
  double threshold = 0.0;
  std::vector<std::string> notes;
};

struct VerifyReport {
  std::uint64_t seed = 0;
  std::optional<Index> trials;
  std::string mutation;
  bool no_tests_run = false;
  std::vector<CriterionResult> sections;

  bool passed() const {
    return std::all_of(sections.begin(), sections.end(),
                       [](const CriterionResult& s) { return s.passed; });
  }

  const CriterionResult* find(std::string_view id) const {
    for (const CriterionResult& s : sections) {
      if (s.id == id) return &s;
    }
    return nullptr;
  }
};

namespace verify_detail {

inline constexpr std::size_t kMaxNotes = 8;

inline std::string sci(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", x);
  return buf;
}

inline bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

inline bool same_bits(const FactorChain& a, const FactorChain& b) {
  if (a.depth() != b.depth()) return false;
  for (Index i = 1; i <= a.depth(); ++i) {
    if (!same_bits(a.layer(i), b.layer(i))) return false;
  }
  return true;
}

inline bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

/// Accumulates one section. `fail` records a note (up to kMaxNotes).
class Section {
 public:
  Section(std::string id, std::string title, std::string metric, double threshold) {
    r_.id = std::move(id);
    r_.title = std::move(title);
    r_.metric = std::move(metric);
    r_.threshold = threshold;
  }

  void trial() { ++r_.trials; }
  void skip() { ++r_.skipped; }
  void observe(double value) {
    if (std::isnan(value) || value > r_.worst) r_.worst = value;
  }
  void fail(const std::string& note) {
    ++r_.failures;
    note_only(note);
  }
  void note_only(const std::string& note) {
    if (r_.notes.size() < kMaxNotes) r_.notes.push_back(note);
  }
  Index failures() const { return r_.failures; }
  Index trials() const { return r_.trials; }

  CriterionResult finish() {
    r_.passed = r_.failures == 0;
    return std::move(r_);
  }

 private:
  CriterionResult r_;
};

inline Index at_least(double fraction, Index n) {
  return static_cast<Index>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

/// Draws an instance; infeasible draws are replaced (up to 20 attempts).
inline std::optional<Instance> draw(Section& sec, SplitMix64& rng,
                                    const std::function<InstanceSpec(SplitMix64&)>& make) {
  for (int attempt = 0; attempt < 20; ++attempt) {
    InstanceSpec spec = make(rng);
    try {
      return gen_instance(spec);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InfeasibleConstruction) throw;
      sec.skip();
    }
  }
  return std::nullopt;
}

inline double rel_gap(double value, double reference) {
  return (value - reference) / std::max(std::abs(reference), 1e-300);
}

// --- module properties ----------------------------------------------------

inline CriterionResult kernels_section(std::uint64_t seed, Index n) {
  Section sec("kernels", "matrix kernels: Eckart-Young, kernel bound, min-norm solve, rank invariance",
              "max relative defect", 1e-9);
  SplitMix64 rng = SplitMix64::stream(seed, 0x4B45524EULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    const Index rows = rng.uniform_int(1, 8);
    const Index cols = rng.uniform_int(1, 8);
    const Matrix m = rng.normal_matrix(rows, cols);
    const Index full = std::min(rows, cols);
    const Index d = rng.uniform_int(0, full);

    // Truncation error against singular values from a different algorithm.
    const Vector s = Eigen::BDCSVD<Matrix>(m).singularValues();
    const double tail = s.tail(full - d).squaredNorm();
    const double err = (m - best_rank_approx(m, d)).squaredNorm();
    const double ey = std::abs(err - tail) / std::max(s.squaredNorm(), 1e-300);
    sec.observe(ey);
    if (ey > 1e-10) sec.fail("trial " + std::to_string(t) + ": Eckart-Young defect " + sci(ey));

    // Kernel bound on a product of thin factors.
    const Index r = rng.uniform_int(0, std::max<Index>(0, cols - 1));
    Matrix thin = Matrix::Zero(rows, cols);
    if (r > 0) thin = rng.normal_matrix(rows, r) * rng.normal_matrix(r, cols);
    const Vector w = kernel_vector(thin);
    const double smax = thin.size() ? singular_values(thin)(0) : 0.0;
    const double kres = (thin * w).norm();
    if (std::abs(w.norm() - 1.0) > 1e-12 || kres > kDefaultRankTol * smax * 2.0 + 1e-300) {
      sec.fail("trial " + std::to_string(t) + ": kernel residual " + sci(kres));
    }

    // Rank invariance under a random orthogonal transform.
    Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(rows, rows));
    const Matrix q = qr.householderQ();
    if (numerical_rank(q * thin) != numerical_rank(thin)) {
      sec.fail("trial " + std::to_string(t) + ": rank changed under an orthogonal transform");
    }

    // Minimum-norm right solve: D1 A1 = D with A1 of full column rank.
    const Index a_cols = rng.uniform_int(1, 4);
    const Index a_rows = a_cols + rng.uniform_int(0, 4);
    const Matrix a1 = rng.normal_matrix(a_rows, a_cols);
    const Matrix dm = rng.normal_matrix(rng.uniform_int(1, 5), a_cols);
    const RightSolve sol = min_norm_right_solve(a1, dm);
    const double res = sol.residual / std::max(dm.norm(), 1e-300);
    sec.observe(res);
    if (res > 1e-9) sec.fail("trial " + std::to_string(t) + ": right-solve residual " + sci(res));
    const Matrix left_null = complement_projector(a1);  // Z = D1 + K P, P A1 = 0
    for (int c = 0; c < 10; ++c) {
      const Matrix z = sol.solution + rng.normal_matrix(dm.rows(), a_rows) * left_null;
      if (z.norm() < sol.solution.norm() - 1e-9) {
        sec.fail("trial " + std::to_string(t) + ": found a smaller solution");
        break;
      }
    }
  }
  return sec.finish();
}

inline CriterionResult network_section(std::uint64_t seed, Index n) {
  Section sec("network", "network core: fold associativity and split identity",
              "max relative defect", 1e-12);
  SplitMix64 rng = SplitMix64::stream(seed, 0x4E4554ULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    InstanceSpec spec;
    spec.dims = (t % 2 == 0) ? random_bottleneck_dims(rng) : random_dims(rng);
    spec.seed = rng.next();
    const Instance inst = gen_instance(spec);
    const FactorChain& chain = inst.chain;
    const Index k = chain.depth();
    Matrix right = chain.layer(1);
    for (Index i = 2; i <= k; ++i) right = chain.layer(i) * right;
    Matrix left = chain.layer(k);
    for (Index i = k - 1; i >= 1; --i) left = left * chain.layer(i);
    const double scale = product_scale(chain, 1, k);
    const double fold = (left - right).norm() / std::max(scale, 1e-300);
    sec.observe(fold);
    if (fold > 1e-12) sec.fail("trial " + std::to_string(t) + ": folds differ by " + sci(fold));
    if (const auto split = bottleneck_split(chain)) {
      const double gap = (split->upper * split->lower - end_to_end(chain)).norm() /
                         std::max(scale, 1e-300);
      sec.observe(gap);
      if (gap > 1e-12) sec.fail("trial " + std::to_string(t) + ": A B differs by " + sci(gap));
    }
  }
  return sec.finish();
}

inline CriterionResult perturbation_section(std::uint64_t seed, Index n) {
  Section sec("perturbation",
              "perturbation engine: linear escape scaling on the i*=1 path, bitwise certificates",
              "max scaling ratio defect", 1e-3);
  SplitMix64 rng = SplitMix64::stream(seed, 0x50455254ULL);
  Index exercised = 0;
  for (Index t = 0; t < n; ++t) {
    const auto inst = draw(sec, rng, [](SplitMix64& g) {
      InstanceSpec spec;
      spec.dims = random_bottleneck_dims(g);
      spec.seed = g.next();
      spec.construction = Construction::RankDeficientPlateau;
      return spec;
    });
    if (!inst) continue;
    sec.trial();
    const auto split = bottleneck_split(inst->chain);
    const CriticalPointReport rep = classify(inst->chain, *inst->loss);
    if (!rep.escape) {
      sec.fail("trial " + std::to_string(t) + ": no certificate");
      continue;
    }
    const EscapeCertificate again = rep.escape->side == Side::Lower
        ? escape_construction(inst->chain, *inst->loss, *split, rep.escape->delta)
        : escape_construction_upper(inst->chain, *inst->loss, *split, rep.escape->delta);
    if (!same_bits(again.perturbed_chain, rep.escape->perturbed_chain) ||
        !same_bits(again.super_gradient_norm, rep.escape->super_gradient_norm)) {
      sec.fail("trial " + std::to_string(t) + ": certificate not reproducible");
    }
    const EscapeCertificate& c = *rep.escape;
    if (c.side != Side::Lower || c.i_star != 1 || c.family.perturbations.size() != 1) continue;
    ++exercised;
    const EscapeCertificate half =
        escape_construction(inst->chain, *inst->loss, *split, c.delta / 2.0);
    const double ratio = c.super_gradient_norm / half.super_gradient_norm;
    const double defect = std::abs(ratio - 2.0) / 2.0;
    sec.observe(defect);
    if (defect > 1e-3) {
      sec.fail("trial " + std::to_string(t) + ": scaling ratio " + std::to_string(ratio));
    }
  }
  sec.note_only("i*=1 single-layer certificates checked for scaling: " + std::to_string(exercised));
  return sec.finish();
}

inline CriterionResult analyzer_section(std::uint64_t seed, Index n) {
  Section sec("analyzer",
              "analyzer: label soundness, two-layer criticality at full rank, scale equivariance",
              "max super-gradient / grad_tol at ReducibleFullRank", 10.0);
  SplitMix64 rng = SplitMix64::stream(seed, 0x414E414CULL);
  const Tolerances tols{};
  const Construction kinds[] = {Construction::Generic, Construction::RankDeficientPlateau,
                                Construction::FullRankCritical, Construction::FactoredGlobal};
  for (Index t = 0; t < n; ++t) {
    const Construction kind = kinds[t % 4];
    const auto inst = draw(sec, rng, [&](SplitMix64& g) {
      InstanceSpec spec;
      spec.dims = random_bottleneck_dims(g);
      spec.seed = g.next();
      spec.construction = kind;
      spec.loss = (t / 4) % 2 == 0 ? LossKind::Quadratic : LossKind::LogCosh;
      return spec;
    });
    if (!inst) continue;
    sec.trial();
    const std::string tag = "trial " + std::to_string(t) + " (" + std::string(to_string(kind)) + ")";
    const CriticalPointReport rep = classify(inst->chain, *inst->loss);
    const bool critical = rep.max_layer_grad() <= tols.grad_tol;
    const bool fzero = rep.f_prime_norm <= tols.grad_tol;
    bool sound = true;
    switch (rep.label) {
      case Label::GlobalCertified: sound = fzero; break;
      case Label::NotCritical: sound = !critical && !fzero; break;
      case Label::EscapablePlateau:
        sound = critical && !fzero && std::min(rep.rank_a, rep.rank_b) < rep.width &&
                rep.escape.has_value() && !rep.reduction;
        break;
      case Label::ReducibleFullRank:
        sound = critical && !fzero && rep.rank_a == rep.width && rep.rank_b == rep.width &&
                rep.reduction.has_value() && !rep.escape;
        break;
      case Label::CriticalNoBottleneck: sound = critical && !fzero && rep.split_index == 0; break;
    }
    if (!sound) sec.fail(tag + ": label " + std::string(to_string(rep.label)) + " is unsound");
    const Label expected = kind == Construction::Generic             ? Label::NotCritical
                           : kind == Construction::RankDeficientPlateau ? Label::EscapablePlateau
                           : kind == Construction::FullRankCritical     ? Label::ReducibleFullRank
                           : inst->spec.loss == LossKind::Quadratic     ? Label::ReducibleFullRank
                                                                        : Label::GlobalCertified;
    if (rep.label != expected && !(kind == Construction::FactoredGlobal && fzero)) {
      sec.fail(tag + ": labeled " + std::string(to_string(rep.label)));
    }
    if (rep.label == Label::ReducibleFullRank) {
      const double worst = std::max(rep.super_grad_a_norm, rep.super_grad_b_norm) / tols.grad_tol;
      sec.observe(worst);
      if (worst > 10.0) sec.fail(tag + ": super-gradient " + sci(worst * tols.grad_tol));
    }
    const Index k = inst->chain.depth();
    const Index i = rng.uniform_int(1, k - 1);
    for (double s : {1e-3, 1e3}) {
      FactorChain scaled = inst->chain;
      scaled.set_layer(i, s * scaled.layer(i));
      scaled.set_layer(i + 1, scaled.layer(i + 1) / s);
      const CriticalPointReport other = classify(scaled, *inst->loss);
      if (other.label != rep.label || other.rank_a != rep.rank_a || other.rank_b != rep.rank_b) {
        sec.fail(tag + ": label changed under layer rescaling by " + sci(s));
      }
    }
  }
  return sec.finish();
}

// --- acceptance criteria --------------------------------------------------

inline CriterionResult c1_gradients(std::uint64_t seed, Index n, bool mutate) {
  Section sec("C1", "layer gradients match central finite differences",
              "max relative error", 1e-5);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC1ULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    InstanceSpec spec;
    spec.dims = random_dims(rng);
    spec.seed = rng.next();
    spec.loss = t % 2 == 0 ? LossKind::Quadratic : LossKind::LogCosh;
    const Instance inst = gen_instance(spec);
    std::vector<Matrix> grads = layer_gradients(inst.chain, *inst.loss);
    if (mutate) grads[0] = -grads[0];
    for (Index i = 1; i <= inst.chain.depth(); ++i) {
      const Matrix fd = finite_diff_gradient(inst.chain, *inst.loss, i);
      const double err = (grads[static_cast<std::size_t>(i - 1)] - fd).norm();
      const double ref = fd.norm();
      sec.observe(err / std::max(ref, 1e-8 / 1e-5));
      if (err > std::max(1e-5 * ref, 1e-8)) {
        sec.fail("trial " + std::to_string(t) + " (" + std::string(inst.loss->kind()) +
                 ") layer " + std::to_string(i) + ": error " + sci(err) + " vs norm " + sci(ref));
        break;
      }
    }
  }
  return sec.finish();
}

inline CriterionResult c2_invariance(std::uint64_t seed, Index n) {
  Section sec("C2", "product-invariant families leave W and the loss unchanged",
              "max relative change", 1e-9);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC2ULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    InstanceSpec spec;
    spec.dims = random_bottleneck_dims(rng);
    spec.seed = rng.next();
    spec.loss = t % 2 == 0 ? LossKind::Quadratic : LossKind::LogCosh;
    spec.construction = Construction::RankDeficient;
    const Instance inst = gen_instance(spec);
    const BottleneckSplit split = *bottleneck_split(inst.chain);
    const Matrix w = end_to_end(inst.chain);
    const double base = inst.loss->value(w);
    for (double delta : {1e-1, 1e-3, 1e-6}) {
      const InvariantFamily fam = random_family(inst.chain, split, delta, rng.next());
      const FactorChain moved = apply_family(inst.chain, fam);
      const Matrix w2 = end_to_end(moved);
      const double dw = (w2 - w).norm() / (1.0 + w.norm());
      const double dl = std::abs(inst.loss->value(w2) - base) / (1.0 + std::abs(base));
      sec.observe(std::max(dw, dl));
      if (dw > 1e-9 || dl > 1e-9) {
        sec.fail("trial " + std::to_string(t) + " delta " + sci(delta) + ": dW " + sci(dw) +
                 ", dL " + sci(dl));
        break;
      }
    }
  }
  return sec.finish();
}

inline CriterionResult c3_escape(std::uint64_t seed, Index n) {
  Section sec("C3", "escape certificates at rank-deficient critical points, then strict descent",
              "max |loss_delta| / (1 + |loss|)", kDefaultInvarianceTol);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC3ULL);
  Index escape_failures = 0;
  Index descents = 0;
  Index tested = 0;
  for (Index t = 0; t < n; ++t) {
    const auto inst = draw(sec, rng, [t](SplitMix64& g) {
      InstanceSpec spec;
      spec.dims = random_bottleneck_dims(g);
      spec.seed = g.next();
      spec.loss = t % 4 == 3 ? LossKind::LogCosh : LossKind::Quadratic;
      spec.construction = Construction::RankDeficientPlateau;
      return spec;
    });
    if (!inst) continue;
    sec.trial();
    ++tested;
    const std::string tag = "trial " + std::to_string(t);
    const CriticalPointReport rep = classify(inst->chain, *inst->loss);
    if (rep.label != Label::EscapablePlateau || !rep.escape) {
      ++escape_failures;
      sec.fail(tag + ": label " + std::string(to_string(rep.label)) +
               (rep.diagnostics.empty() ? "" : "; " + rep.diagnostics.front()));
      continue;
    }
    const EscapeCertificate& c = *rep.escape;
    const double ld = std::abs(c.loss_delta) / (1.0 + std::abs(rep.loss));
    sec.observe(ld);
    if (ld > kDefaultInvarianceTol || !(c.super_gradient_norm > 1e-8)) {
      ++escape_failures;
      sec.fail(tag + ": certificate out of tolerance (loss_delta " + sci(c.loss_delta) +
               ", super-gradient " + sci(c.super_gradient_norm) + ")");
      continue;
    }
    DescentConfig dc;
    dc.budget = 500;
    dc.seed = rng.next();
    const DescentOutcome d = descent_search(inst->chain, *inst->loss, rep, dc);
    if (d.found) {
      ++descents;
    } else {
      sec.note_only(tag + ": descent not found: " + d.diagnostics);
    }
  }
  CriterionResult r = sec.finish();
  const Index need = at_least(0.99, tested);
  r.notes.insert(r.notes.begin(), "escapes " + std::to_string(tested - escape_failures) + "/" +
                                      std::to_string(tested) + ", descents " +
                                      std::to_string(descents) + "/" + std::to_string(tested) +
                                      " (need " + std::to_string(need) + ")");
  r.passed = escape_failures == 0 && descents >= need;
  return r;
}

/// dims [2,1,1,2], M1 = 0, M2 = 0, M3 = e_1, X = Y = I.
inline FactorChain e1_chain() {
  Matrix m3(2, 1);
  m3 << 1.0, 0.0;
  return FactorChain({Matrix::Zero(1, 2), Matrix::Zero(1, 1), m3});
}

inline CriterionResult c4_fixture() {
  Section sec("C4", "E1 plateau fixture: exact values, certificate, descent below 2 - 1e-3",
              "certificate norm error", 1e-12);
  sec.trial();
  const FactorChain chain = e1_chain();
  const QuadraticLoss f(Matrix::Identity(2, 2), Matrix::Identity(2, 2));
  const double value = loss(chain, f);
  if (value != 2.0) sec.fail("loss is " + std::to_string(value) + ", expected exactly 2");
  for (const Matrix& g : layer_gradients(chain, f)) {
    if (!g.isZero(0.0)) sec.fail("a layer gradient is not exactly zero");
  }
  const double fp = f.gradient(end_to_end(chain)).norm();
  if (std::abs(fp - 2.0 * std::sqrt(2.0)) > 1e-12) sec.fail("||f'(W)|| = " + sci(fp));
  const CriticalPointReport rep = classify(chain, f);
  if (rep.label != Label::EscapablePlateau || !rep.escape) {
    sec.fail("label " + std::string(to_string(rep.label)));
    return sec.finish();
  }
  const EscapeCertificate& c = *rep.escape;
  const double err = std::abs(c.super_gradient_norm - 2.0 * c.delta);
  sec.observe(err);
  if (err > 1e-12) sec.fail("certificate norm " + sci(c.super_gradient_norm) + " vs 2 delta");
  if (c.i_star != 1) sec.fail("i* = " + std::to_string(c.i_star));
  Matrix b_tilde(1, 2);
  b_tilde << c.delta, 0.0;
  if (!same_bits(c.perturbed_chain.layer(1), b_tilde)) sec.fail("M1~ is not [[delta, 0]]");
  if (c.loss_delta != 0.0) sec.fail("loss_delta = " + sci(c.loss_delta));
  const DescentOutcome d = descent_search(chain, f, rep);
  if (!(d.final_loss < 2.0 - 1e-3)) sec.fail("post-descent loss " + std::to_string(d.final_loss));
  sec.note_only("delta " + sci(c.delta) + ", post-descent loss " + sci(d.final_loss));
  return sec.finish();
}

inline CriterionResult c5_lift(std::uint64_t seed, Index n) {
  Section sec("C5", "full-rank lift realizes A + D (or B + D) by one layer update",
              "max ||A' - A - D|| / ||D||", 1e-9);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC5ULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    InstanceSpec spec;
    spec.dims = random_bottleneck_dims(rng);
    spec.seed = rng.next();
    const Instance inst = gen_instance(spec);
    const BottleneckSplit split = *bottleneck_split(inst.chain);
    const Side side = t % 2 == 0 ? Side::Upper : Side::Lower;
    const Matrix& target = side == Side::Upper ? split.upper : split.lower;
    const Matrix d = rng.normal_matrix(target.rows(), target.cols(), 0.1);
    const std::string tag = "trial " + std::to_string(t) + " (" + std::string(to_string(side)) + ")";
    Lift lift;
    try {
      lift = lift_perturbation(inst.chain, split, d, side);
    } catch (const Error& e) {
      sec.fail(tag + ": " + e.what());
      continue;
    }
    FactorChain moved = inst.chain;
    moved.set_layer(lift.layer, moved.layer(lift.layer) + lift.update);
    const BottleneckSplit after = split_at(moved, split.j);
    const Matrix& changed = side == Side::Upper ? after.upper : after.lower;
    const Matrix& kept = side == Side::Upper ? after.lower : after.upper;
    const Matrix& kept_before = side == Side::Upper ? split.lower : split.upper;
    const double err = (changed - target - d).norm() / d.norm();
    sec.observe(err);
    const double amp = lift.update.norm() / d.norm();
    if (err > 1e-9) sec.fail(tag + ": lift error " + sci(err));
    if (!std::isfinite(lift.amplification) ||
        std::abs(lift.amplification - amp) > 1e-12 * std::max(1.0, amp)) {
      sec.fail(tag + ": amplification " + sci(lift.amplification) + " vs " + sci(amp));
    }
    if (!same_bits(kept, kept_before)) sec.fail(tag + ": the other super-layer moved");
  }
  return sec.finish();
}

inline CriterionResult c6_no_spurious(std::uint64_t seed, Index n) {
  Section sec("C6", "gradient descent on dims [3,4,2,4,3] reaches the reduced-rank optimum",
              "max relative gap of stalled runs", 1e-3);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC6ULL);
  const DimensionSignature dims({3, 4, 2, 4, 3});
  Index reached = 0;
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    InstanceSpec spec;
    spec.dims = dims;
    spec.seed = rng.next();
    const Instance inst = gen_instance(spec);
    const auto& quad = static_cast<const QuadraticLoss&>(*inst.loss);
    const double star = rrr_oracle(quad, dims.narrowest()).loss;
    TrainConfig cfg;
    cfg.max_steps = 20000;
    cfg.stop_grad_tol = 1e-9;
    cfg.seed = spec.seed;
    cfg.record_ranks = false;
    const TrainResult res = train_gd(inst.chain, quad, cfg);
    const std::string tag = "trial " + std::to_string(t);
    const auto& recs = res.trajectory.records;
    for (std::size_t s = 1; s < recs.size(); ++s) {
      if (recs[s].loss > recs[s - 1].loss) {
        sec.fail(tag + ": loss increased at step " + std::to_string(s));
        break;
      }
    }
    const double final_loss = recs.back().loss;
    if (final_loss < star - 1e-12 * (1.0 + star)) {
      sec.fail(tag + ": loss " + sci(final_loss) + " below the oracle " + sci(star));
    }
    const double gap = rel_gap(final_loss, star);
    if (gap <= 1e-5) {
      ++reached;
      continue;
    }
    sec.note_only(tag + ": gap " + sci(gap) + ", status " +
                  std::string(to_string(res.trajectory.status)));
    const bool stalled = recs.back().max_grad <= cfg.stop_grad_tol;
    if (stalled && gap > 1e-3) {
      sec.observe(gap);
      const CriticalPointReport rep = classify(res.final_chain, quad);
      if (rep.label != Label::EscapablePlateau && rep.label != Label::ReducibleFullRank) {
        sec.fail(tag + ": stalled above the oracle, labeled " +
                 std::string(to_string(rep.label)));
      }
    }
  }
  CriterionResult r = sec.finish();
  const Index need = at_least(0.95, n);
  r.notes.insert(r.notes.begin(), "within 1e-5 of the oracle: " + std::to_string(reached) + "/" +
                                      std::to_string(n) + " (need " + std::to_string(need) + ")");
  r.passed = r.failures == 0 && reached >= need;
  return r;
}

inline CriterionResult c7_oracle(std::uint64_t seed, Index n) {
  Section sec("C7", "reduced-rank oracle agrees with 50-restart two-layer descent",
              "max relative disagreement", 1e-6);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC7ULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    const Index d0 = rng.uniform_int(2, 6);
    const Index dk = rng.uniform_int(2, 6);
    const Index samples = d0 + rng.uniform_int(0, 4);
    const Index d = rng.uniform_int(1, std::min(d0, dk));
    const QuadraticLoss f(rng.normal_matrix(d0, samples), rng.normal_matrix(dk, samples));
    const double star = rrr_oracle(f, d).loss;
    double best = std::numeric_limits<double>::infinity();
    const std::uint64_t restart_seed = rng.next();
    for (std::uint64_t r = 0; r < 50; ++r) {
      SplitMix64 init = SplitMix64::stream(restart_seed, r);
      const FactorChain start(
          {init.normal_matrix(d, d0, 1.0 / std::sqrt(static_cast<double>(d0))),
           init.normal_matrix(dk, d, 1.0 / std::sqrt(static_cast<double>(d)))});
      TrainConfig cfg;
      cfg.max_steps = 20000;
      cfg.stop_grad_tol = 1e-10;
      cfg.record_ranks = false;
      const TrainResult res = train_gd(start, f, cfg);
      for (const TrajectoryRecord& rec : res.trajectory.records) {
        if (rec.loss < star - 1e-12 * (1.0 + star)) {
          sec.fail("triple " + std::to_string(t) + ": descent went below the oracle");
          break;
        }
      }
      best = std::min(best, res.trajectory.records.back().loss);
    }
    const double dis = std::abs(best - star) / std::max(star, 1e-12);
    sec.observe(dis);
    if (dis > 1e-6) {
      sec.fail("triple " + std::to_string(t) + " (d0 " + std::to_string(d0) + ", dk " +
               std::to_string(dk) + ", n " + std::to_string(samples) + ", d " +
               std::to_string(d) + "): oracle " + sci(star) + ", descent " + sci(best));
    }
  }
  return sec.finish();
}

inline CriterionResult c8_determinism(std::uint64_t seed, Index n) {
  Section sec("C8", "bitwise determinism of instances, certificates, training and CSV round-trip",
              "mismatches", 0.0);
  SplitMix64 rng = SplitMix64::stream(seed, 0xC8ULL);
  for (Index t = 0; t < n; ++t) {
    sec.trial();
    const std::string tag = "trial " + std::to_string(t);
    // CSV round-trip over a wide exponent range plus edge values.
    Matrix m = rng.normal_matrix(rng.uniform_int(1, 6), rng.uniform_int(1, 6));
    for (Index i = 0; i < m.size(); ++i) {
      m.data()[i] *= std::pow(10.0, static_cast<double>(rng.uniform_int(-300, 300)));
    }
    if (t == 0) {
      m(0, 0) = -0.0;
      if (m.size() > 1) m.data()[1] = std::numeric_limits<double>::denorm_min();
      if (m.size() > 2) m.data()[2] = std::numeric_limits<double>::max();
      if (m.size() > 3) m.data()[3] = -std::numeric_limits<double>::min();
    }
    if (!same_bits(io::parse_csv(io::to_csv(m)), m)) sec.fail(tag + ": CSV round-trip changed bits");

    InstanceSpec spec;
    spec.dims = random_bottleneck_dims(rng);
    spec.seed = rng.next();
    spec.loss = t % 2 == 0 ? LossKind::Quadratic : LossKind::LogCosh;
    spec.construction = Construction::RankDeficientPlateau;
    std::optional<Instance> a;
    std::optional<Instance> b;
    try {
      a = gen_instance(spec);
      b = gen_instance(spec);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InfeasibleConstruction) throw;
      sec.skip();
      continue;
    }
    if (!same_bits(a->chain, b->chain)) sec.fail(tag + ": instance not reproducible");
    const CriticalPointReport ra = classify(a->chain, *a->loss);
    const CriticalPointReport rb = classify(b->chain, *b->loss);
    if (io::report_json(ra).dump() != io::report_json(rb).dump() ||
        (ra.escape && !same_bits(ra.escape->perturbed_chain, rb.escape->perturbed_chain))) {
      sec.fail(tag + ": report not reproducible");
    }
    TrainConfig cfg;
    cfg.max_steps = 50;
    const TrainResult ta = train_gd(a->chain, *a->loss, cfg);
    const TrainResult tb = train_gd(b->chain, *b->loss, cfg);
    if (io::trajectory_csv(ta.trajectory) != io::trajectory_csv(tb.trajectory) ||
        !same_bits(ta.final_chain, tb.final_chain)) {
      sec.fail(tag + ": training not reproducible");
    }
  }
  return sec.finish();
}

}  // namespace verify_detail

struct SectionInfo {
  std::string id;
  Index nominal;
};

/// Section ids in run order with their nominal trial counts.
inline const std::vector<SectionInfo>& verify_sections() {
  static const std::vector<SectionInfo> sections = {
      {"kernels", 100}, {"network", 100}, {"perturbation", 100}, {"analyzer", 100},
      {"C1", 200},      {"C2", 500},      {"C3", 500},           {"C4", 1},
      {"C5", 200},      {"C6", 200},      {"C7", 20},            {"C8", 50},
  };
  return sections;
}

inline VerifyReport run_verify(const VerifyOptions& opts = {}) {
  using namespace verify_detail;
  if (!opts.mutation.empty() && opts.mutation != "grad-sign") {
    throw Error(ErrorCode::InvalidArgument, "unknown mutation '" + opts.mutation + "'");
  }
  if (opts.trials && *opts.trials < 0) {
    throw Error(ErrorCode::InvalidArgument, "trials must be non-negative");
  }
  for (const std::string& id : opts.only) {
    const auto& all = verify_sections();
    if (std::none_of(all.begin(), all.end(), [&](const SectionInfo& s) { return s.id == id; })) {
      throw Error(ErrorCode::InvalidArgument, "unknown verify section '" + id + "'");
    }
  }
  VerifyReport rep;
  rep.seed = opts.seed;
  rep.trials = opts.trials;
  rep.mutation = opts.mutation;
  if (opts.trials && *opts.trials == 0) {
    rep.no_tests_run = true;
    return rep;
  }
  const std::uint64_t s = opts.seed;
  for (const SectionInfo& info : verify_sections()) {
    if (!opts.only.empty() &&
        std::find(opts.only.begin(), opts.only.end(), info.id) == opts.only.end()) {
      continue;
    }
    const Index n = opts.trials.value_or(info.nominal);
    const std::string& id = info.id;
    if (id == "kernels") rep.sections.push_back(kernels_section(s, n));
    else if (id == "network") rep.sections.push_back(network_section(s, n));
    else if (id == "perturbation") rep.sections.push_back(perturbation_section(s, n));
    else if (id == "analyzer") rep.sections.push_back(analyzer_section(s, n));
    else if (id == "C1") rep.sections.push_back(c1_gradients(s, n, opts.mutation == "grad-sign"));
    else if (id == "C2") rep.sections.push_back(c2_invariance(s, n));
    else if (id == "C3") rep.sections.push_back(c3_escape(s, n));
    else if (id == "C4") rep.sections.push_back(c4_fixture());
    else if (id == "C5") rep.sections.push_back(c5_lift(s, n));
    else if (id == "C6") rep.sections.push_back(c6_no_spurious(s, n));
    else if (id == "C7") rep.sections.push_back(c7_oracle(s, n));
    else if (id == "C8") rep.sections.push_back(c8_determinism(s, n));
  }
  rep.no_tests_run = rep.sections.empty();
  return rep;
}

namespace io {

inline json verify_json(const VerifyReport& r) {
  json j;
  j["format"] = "dlnet-verify";
  j["version"] = kFormatVersion;
  j["seed"] = r.seed;
  j["trials"] = r.trials ? json(*r.trials) : json(nullptr);
  j["mutation"] = r.mutation.empty() ? json(nullptr) : json(r.mutation);
  j["no_tests_run"] = r.no_tests_run;
  j["passed"] = r.passed();
  json sections = json::array();
  for (const CriterionResult& s : r.sections) {
    json e;
    e["id"] = s.id;
    e["title"] = s.title;
    e["passed"] = s.passed;
    e["trials"] = s.trials;
    e["failures"] = s.failures;
    e["skipped"] = s.skipped;
    e["metric"] = s.metric;
    e["worst"] = s.worst;
    e["threshold"] = s.threshold;
    e["notes"] = s.notes;
    sections.push_back(std::move(e));
  }
  j["sections"] = std::move(sections);
  return j;
}

inline std::string verify_text(const VerifyReport& r) {
  std::string out;
  if (r.no_tests_run) out += "WARNING: no tests run\n";
  for (const CriterionResult& s : r.sections) {
    out += (s.passed ? "PASS " : "FAIL ") + s.id + "  " + s.title + "\n";
    out += "     trials " + std::to_string(s.trials) + ", failures " +
           std::to_string(s.failures) + ", skipped " + std::to_string(s.skipped) + "; " +
           s.metric + " " + verify_detail::sci(s.worst) + " (threshold " +
           verify_detail::sci(s.threshold) + ")\n";
    for (const std::string& note : s.notes) out += "     - " + note + "\n";
  }
  out += r.passed() ? "verify: all sections passed\n" : "verify: FAILED\n";
  return out;
}

}  // namespace io

}  // namespace dlnet
