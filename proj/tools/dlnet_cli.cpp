// dlnet: command-line front end for instance generation, analysis,
// perturbation, lifting, training, the reduced-rank oracle and self-checks.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 verification failure,
// 3 infeasible construction (the requested object does not exist for this
// input).

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dlnet/dlnet.hpp"

namespace {

using namespace dlnet;
using dlnet::io::json;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitInfeasible = 3;

struct Common {
  std::uint64_t seed = 0;
  bool seed_set = false;
  Tolerances tols{};
  std::optional<double> delta;
  std::string out;
  std::string format = "text";
};

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InfeasibleConstruction:
    case ErrorCode::FullColumnRank:
    case ErrorCode::RankDeficientLift:
    case ErrorCode::NoInteriorBottleneck:
    case ErrorCode::FullRankA:
    case ErrorCode::GradientVanishes:
    case ErrorCode::ConstructionFailed:
    case ErrorCode::WrongClassification:
      return kExitInfeasible;
    default:
      return kExitUsage;
  }
}

void emit(const Common& c, const json& j, const std::string& text) {
  if (c.format == "json") {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

std::vector<Index> parse_dims(const std::string& s) {
  std::vector<Index> out;
  std::stringstream ss(s);
  std::string field;
  while (std::getline(ss, field, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(field, &used);
      if (used != field.size()) throw std::invalid_argument(field);
      out.push_back(static_cast<Index>(v));
    } catch (const std::exception&) {
      throw Error(ErrorCode::Parse, "bad width '" + field + "' in --dims");
    }
  }
  return out;
}

fs::path require_out(const Common& c, const char* what) {
  if (c.out.empty()) throw Error(ErrorCode::InvalidArgument, std::string(what) + " needs --out");
  return c.out;
}

// --- gen ----------------------------------------------------------------

struct GenArgs {
  std::string dims;
  std::string loss = "quadratic";
  std::string construction = "generic";
  std::string data = "generic";
  Index samples = 0;
  double data_scale = 1.0;
  Index rank = -1;
};

int run_gen(const Common& c, const GenArgs& a) {
  InstanceSpec spec;
  spec.dims = DimensionSignature(parse_dims(a.dims));
  spec.loss = parse_loss_kind(a.loss);
  spec.construction = parse_construction(a.construction);
  spec.data = parse_data_model(a.data);
  spec.samples = a.samples;
  spec.data_scale = a.data_scale;
  spec.target_rank = a.rank;
  spec.seed = c.seed;
  const Instance inst = gen_instance(spec);
  const fs::path dir = require_out(c, "gen");
  io::save_instance(dir, inst);
  const double value = loss(inst.chain, *inst.loss);
  json j{{"out", dir.string()}, {"dims", inst.chain.dims().widths()},
         {"spec", io::spec_json(spec)}, {"loss", value}};
  emit(c, j, "wrote " + dir.string() + " (k = " + std::to_string(inst.chain.depth()) +
                 ", loss = " + io::format_double(value) + ")\n");
  return kExitOk;
}

// --- analyze --------------------------------------------------------------

struct AnalyzeArgs {
  std::string in;
  bool descend = false;
  Index budget = 500;
};

int run_analyze(const Common& c, const AnalyzeArgs& a) {
  const io::LoadedInstance inst = io::load_instance(a.in);
  const CriticalPointReport rep = classify(inst.chain, *inst.loss, {c.tols, c.delta});
  json j = io::report_json(rep);
  std::string text = io::report_text(rep);
  if (a.descend && rep.label == Label::EscapablePlateau && rep.escape) {
    DescentConfig dc;
    dc.budget = a.budget;
    dc.seed = c.seed;
    dc.grad_tol = c.tols.grad_tol;
    const DescentOutcome d = descent_search(inst.chain, *inst.loss, rep, dc);
    j["descent"] = {{"found", d.found},
                    {"original_loss", d.original_loss},
                    {"final_loss", d.final_loss},
                    {"steps", d.steps},
                    {"diagnostics", d.diagnostics}};
    text += std::string("descent          ") + (d.found ? "found" : "not found") + ": " +
            d.diagnostics + "\n";
    if (!c.out.empty()) {
      io::save_instance(fs::path(c.out) / "descended", d.chain, *inst.loss);
    }
  }
  if (!c.out.empty()) {
    const fs::path dir = c.out;
    fs::create_directories(dir);
    io::write_text(dir / "report.json", j.dump(2) + "\n");
    if (rep.escape) {
      io::save_instance(dir / "certificate", rep.escape->perturbed_chain, *inst.loss,
                        json{{"certificate", io::certificate_json(*rep.escape)}});
    }
  }
  emit(c, j, text);
  return kExitOk;
}

// --- perturb ----------------------------------------------------------------

int run_perturb(const Common& c, const std::string& in, const std::string& mode) {
  const io::LoadedInstance inst = io::load_instance(in);
  const auto split = bottleneck_split(inst.chain);
  if (!split) throw Error(ErrorCode::NoInteriorBottleneck, "no interior minimum-width layer");
  const double delta = c.delta.value_or(default_delta(inst.chain));
  const double before = loss(inst.chain, *inst.loss);
  if (mode == "family") {
    const InvariantFamily fam = random_family(inst.chain, *split, delta, c.seed, c.tols.rank_tol);
    const FactorChain moved = apply_family(inst.chain, fam);
    const double after = loss(moved, *inst.loss);
    const double dw = (end_to_end(moved) - end_to_end(inst.chain)).norm();
    json j{{"family", io::family_json(fam)},
           {"loss_before", before},
           {"loss_after", after},
           {"product_change", dw}};
    if (!c.out.empty()) {
      io::save_instance(c.out, moved, *inst.loss, json{{"family", io::family_json(fam)}});
    }
    emit(c, j,
         "family on layers 1.." + std::to_string(split->j) + " with delta " +
             io::format_double(delta) + "\nloss change      " + io::format_double(after - before) +
             "\nproduct change   " + io::format_double(dw) + "\n");
    return kExitOk;
  }
  const Index d = split->width;
  const bool lower = split->rank_upper(c.tols.rank_tol) < d;
  if (!lower && split->rank_lower(c.tols.rank_tol) >= d) {
    throw Error(ErrorCode::FullRankA, "both super-layers have full rank; use lift instead");
  }
  const EscapeCertificate cert = lower
      ? escape_construction(inst.chain, *inst.loss, *split, delta, c.tols)
      : escape_construction_upper(inst.chain, *inst.loss, *split, delta, c.tols);
  if (!c.out.empty()) {
    io::save_instance(c.out, cert.perturbed_chain, *inst.loss,
                      json{{"certificate", io::certificate_json(cert)}});
  }
  const json j = io::certificate_json(cert);
  emit(c, j,
       "escape on the " + std::string(to_string(cert.side)) + " super-layer, i* = " +
           std::to_string(cert.i_star) + ", witness row " + std::to_string(cert.witness_row) +
           "\nsuper-gradient   " + io::format_double(cert.super_gradient_norm) +
           "\nloss delta       " + io::format_double(cert.loss_delta) + "\n");
  return kExitOk;
}

// --- lift -----------------------------------------------------------------

int run_lift(const Common& c, const std::string& in, const std::string& d_path,
             const std::string& side_name) {
  if (side_name != "upper" && side_name != "lower") {
    throw Error(ErrorCode::InvalidArgument, "--side must be upper or lower");
  }
  const io::LoadedInstance inst = io::load_instance(in);
  const auto split = bottleneck_split(inst.chain);
  if (!split) throw Error(ErrorCode::NoInteriorBottleneck, "no interior minimum-width layer");
  const Matrix d = io::read_csv(d_path);
  const Side side = side_name == "upper" ? Side::Upper : Side::Lower;
  const Lift lift = lift_perturbation(inst.chain, *split, d, side, c.tols.rank_tol);
  if (!c.out.empty()) {
    const fs::path dir = c.out;
    fs::create_directories(dir);
    io::write_csv(dir / "D1.csv", lift.update);
  }
  json j{{"layer", lift.layer},
         {"amplification", lift.amplification},
         {"residual", lift.residual},
         {"D1", io::to_csv(lift.update)}};
  emit(c, j,
       "update for layer " + std::to_string(lift.layer) + "\namplification    " +
           io::format_double(lift.amplification) + "\nresidual         " +
           io::format_double(lift.residual) + "\n" + io::to_csv(lift.update));
  return kExitOk;
}

// --- train ----------------------------------------------------------------

int run_train(const Common& c, const std::string& in, Index max_steps) {
  const io::LoadedInstance inst = io::load_instance(in);
  TrainConfig cfg;
  cfg.max_steps = max_steps;
  cfg.stop_grad_tol = c.tols.grad_tol;
  cfg.rank_tol = c.tols.rank_tol;
  cfg.seed = c.seed;
  const TrainResult res = train_gd(inst.chain, *inst.loss, cfg);
  const std::string csv = io::trajectory_csv(res.trajectory);
  const TrajectoryRecord& last = res.trajectory.records.back();
  if (!c.out.empty()) {
    const fs::path dir = c.out;
    io::save_instance(dir / "final", res.final_chain, *inst.loss);
    io::write_text(dir / "trajectory.csv", csv);
  }
  json j{{"status", to_string(res.trajectory.status)},
         {"steps", last.step},
         {"final_loss", last.loss},
         {"final_max_grad", last.max_grad}};
  emit(c, j,
       "status           " + std::string(to_string(res.trajectory.status)) +
           "\nsteps            " + std::to_string(last.step) + "\nfinal loss       " +
           io::format_double(last.loss) + "\nmax layer grad   " +
           io::format_double(last.max_grad) + "\n");
  return kExitOk;
}

// --- oracle ---------------------------------------------------------------

int run_oracle(const Common& c, const std::string& in, Index rank) {
  const io::LoadedInstance inst = io::load_instance(in);
  const auto* quad = dynamic_cast<const QuadraticLoss*>(inst.loss.get());
  if (!quad) throw Error(ErrorCode::InvalidArgument, "the oracle needs a quadratic instance");
  const Index d = rank >= 0 ? rank : inst.chain.dims().narrowest();
  const OracleSolution sol = rrr_oracle(*quad, d, c.tols.rank_tol);
  if (!c.out.empty()) {
    const fs::path dir = c.out;
    fs::create_directories(dir);
    io::write_csv(dir / "W_star.csv", sol.w);
  }
  const double current = loss(inst.chain, *inst.loss);
  json j{{"rank", d}, {"loss_star", sol.loss}, {"current_loss", current},
         {"W_star", io::to_csv(sol.w)}};
  emit(c, j,
       "rank             " + std::to_string(d) + "\noptimal loss     " +
           io::format_double(sol.loss) + "\ncurrent loss     " + io::format_double(current) +
           "\n");
  return kExitOk;
}

// --- verify -----------------------------------------------------------------

int run_verify_cmd(const Common& c, std::optional<Index> trials, const std::string& mutation,
                   const std::vector<std::string>& sections) {
  VerifyOptions opts;
  opts.seed = c.seed_set ? c.seed : 42;
  opts.trials = trials;
  opts.mutation = mutation;
  opts.only = sections;
  const VerifyReport rep = run_verify(opts);
  const json j = io::verify_json(rep);
  if (!c.out.empty()) {
    const fs::path dir = c.out;
    fs::create_directories(dir);
    io::write_text(dir / "verify.json", j.dump(2) + "\n");
  }
  emit(c, j, io::verify_text(rep));
  if (rep.no_tests_run) std::cerr << "warning: no tests run\n";
  return rep.passed() ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep linear network critical-point analysis"};
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--seed", common.seed, "RNG seed (64-bit)")
      ->each([&](const std::string&) { common.seed_set = true; });
  app.add_option("--tol-rank", common.tols.rank_tol, "relative rank threshold");
  app.add_option("--tol-grad", common.tols.grad_tol, "gradient norm threshold");
  app.add_option("--tol-invariance", common.tols.invariance_tol, "relative invariance tolerance");
  app.add_option("--tol-subspace", common.tols.subspace_tol, "relative subspace membership");
  app.add_option("--delta", common.delta, "perturbation scale");
  app.add_option("--out", common.out, "output directory");
  app.add_option("--format", common.format, "output format")
      ->check(CLI::IsMember({"text", "json"}));

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate an instance");
  gen_cmd->add_option("--dims", gen.dims, "comma-separated widths d0,...,dk")->required();
  gen_cmd->add_option("--loss", gen.loss, "quadratic | logcosh");
  gen_cmd->add_option("--construction", gen.construction,
                      "generic | rank_deficient | rank_deficient_plateau | "
                      "full_rank_critical | factored_global");
  gen_cmd->add_option("--data", gen.data, "generic | planted | identity");
  gen_cmd->add_option("--samples", gen.samples, "samples n (0: d0 + 2)");
  gen_cmd->add_option("--data-scale", gen.data_scale, "scale of X, Y or the target");
  gen_cmd->add_option("--rank", gen.rank, "super-layer rank for rank-deficient constructions");

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "classify an instance");
  analyze_cmd->add_option("instance", analyze.in, "instance directory")->required();
  analyze_cmd->add_flag("--descend", analyze.descend, "run the descent search at plateaus");
  analyze_cmd->add_option("--budget", analyze.budget, "descent step budget");

  std::string perturb_in;
  std::string perturb_mode;
  auto* perturb_cmd = app.add_subcommand("perturb", "product-invariant family or escape");
  perturb_cmd->add_option("mode", perturb_mode, "family | escape")
      ->required()
      ->check(CLI::IsMember({"family", "escape"}));
  perturb_cmd->add_option("instance", perturb_in, "instance directory")->required();

  std::string lift_in;
  std::string lift_d;
  std::string lift_side = "upper";
  auto* lift_cmd = app.add_subcommand("lift", "single-layer update realizing A + D or B + D");
  lift_cmd->add_option("instance", lift_in, "instance directory")->required();
  lift_cmd->add_option("--D", lift_d, "CSV file with D")->required();
  lift_cmd->add_option("--side", lift_side, "upper | lower");

  std::string train_in;
  Index max_steps = 10000;
  auto* train_cmd = app.add_subcommand("train", "gradient descent with line search");
  train_cmd->add_option("instance", train_in, "instance directory")->required();
  train_cmd->add_option("--max-steps", max_steps, "step budget");

  std::string oracle_in;
  Index oracle_rank = -1;
  auto* oracle_cmd = app.add_subcommand("oracle", "reduced-rank regression optimum");
  oracle_cmd->add_option("instance", oracle_in, "instance directory")->required();
  oracle_cmd->add_option("--rank", oracle_rank, "rank bound (default: narrowest width)");

  std::optional<Index> trials;
  std::string mutation;
  std::vector<std::string> sections;
  auto* verify_cmd = app.add_subcommand("verify", "run the self-verification suite");
  verify_cmd->add_option("--trials", trials, "trials per section (default: nominal counts)");
  verify_cmd->add_option("--mutation", mutation, "inject a known defect (grad-sign)");
  verify_cmd->add_option("--section", sections, "restrict to section ids (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    common.tols.validate();
    if (common.delta && !(*common.delta > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "--delta must be positive");
    }
    if (*gen_cmd) return run_gen(common, gen);
    if (*analyze_cmd) return run_analyze(common, analyze);
    if (*perturb_cmd) return run_perturb(common, perturb_in, perturb_mode);
    if (*lift_cmd) return run_lift(common, lift_in, lift_d, lift_side);
    if (*train_cmd) return run_train(common, train_in, max_steps);
    if (*oracle_cmd) return run_oracle(common, oracle_in, oracle_rank);
    if (*verify_cmd) return run_verify_cmd(common, trials, mutation, sections);
  } catch (const Error& e) {
    std::cerr << "dlnet: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "dlnet: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
