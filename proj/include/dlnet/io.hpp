#pragma once

// On-disk formats shared with external tooling.
//
// Matrices: UTF-8 CSV, one row per line, comma separated, each value printed
// with 17 significant digits ("%.17g") so that read(write(M)) == M bitwise.
//
// Instances: a directory holding manifest.json plus one CSV per matrix:
//
//   {
//     "format": "dlnet-instance", "version": 1,
//     "k": 3, "dims": [2, 1, 1, 2],
//     "loss": {"kind": "quadratic", "X": "X.csv", "Y": "Y.csv"},   // or
//             {"kind": "logcosh", "target": "T.csv"}
//     "factors": ["M1.csv", "M2.csv", "M3.csv"],
//     "spec": {...}                  // optional generation parameters
//     "certificate": {...}, "lift": {...}   // optional, written by the CLI
//   }

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "dlnet/analyzer.hpp"
#include "dlnet/error.hpp"
#include "dlnet/instance.hpp"
#include "dlnet/linalg.hpp"
#include "dlnet/network.hpp"
#include "dlnet/perturbation.hpp"
#include "dlnet/train.hpp"

namespace dlnet::io {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr std::string_view kManifestName = "manifest.json";
inline constexpr std::string_view kInstanceFormat = "dlnet-instance";
inline constexpr int kFormatVersion = 1;

inline std::string format_double(double x) {
  char buf[32];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", x);
  return std::string(buf, static_cast<std::size_t>(n));
}

inline std::string to_csv(const Matrix& m) {
  std::string out;
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (c > 0) out += ',';
      out += format_double(m(r, c));
    }
    out += '\n';
  }
  return out;
}

inline double parse_double(std::string_view field, const std::string& where) {
  while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
  while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
    field.remove_suffix(1);
  }
  if (!field.empty() && field.front() == '+') field.remove_prefix(1);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || !std::isfinite(value)) {
    throw Error(ErrorCode::Parse, where + ": bad number '" + std::string(field) + "'");
  }
  return value;
}

inline Matrix parse_csv(std::string_view text, const std::string& where = "csv") {
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view() : text.substr(eol + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    std::vector<double> row;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      row.push_back(parse_double(line.substr(start, comma - start),
                                 where + ":" + std::to_string(line_no)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw Error(ErrorCode::Parse, where + ":" + std::to_string(line_no) + ": ragged row");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(ErrorCode::Parse, where + ": empty matrix");
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    }
  }
  return m;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

inline void write_csv(const fs::path& path, const Matrix& m) {
  require_finite(m, path.string().c_str());
  write_text(path, to_csv(m));
}

inline Matrix read_csv(const fs::path& path) { return parse_csv(read_text(path), path.string()); }

inline json vector_json(const Vector& v) {
  json arr = json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline Vector vector_from_json(const json& arr) {
  Vector v(static_cast<Index>(arr.size()));
  for (Index i = 0; i < v.size(); ++i) v(i) = arr.at(static_cast<std::size_t>(i)).get<double>();
  return v;
}

inline json spec_json(const InstanceSpec& spec) {
  return json{{"construction", to_string(spec.construction)},
              {"loss", to_string(spec.loss)},
              {"data", to_string(spec.data)},
              {"samples", spec.samples},
              {"data_scale", spec.data_scale},
              {"seed", spec.seed},
              {"target_rank", spec.target_rank}};
}

/// Writes chain + loss data into `dir` (created if needed). `extra` keys are
/// merged into the manifest.
inline void save_instance(const fs::path& dir, const FactorChain& chain, const ConvexLoss& f,
                          const json& extra = json::object()) {
  check_compatible(chain, f);
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = kInstanceFormat;
  manifest["version"] = kFormatVersion;
  manifest["k"] = chain.depth();
  manifest["dims"] = chain.dims().widths();
  if (const auto* q = dynamic_cast<const QuadraticLoss*>(&f)) {
    manifest["loss"] = {{"kind", "quadratic"}, {"X", "X.csv"}, {"Y", "Y.csv"}};
    write_csv(dir / "X.csv", q->x());
    write_csv(dir / "Y.csv", q->y());
  } else if (const auto* lc = dynamic_cast<const LogCoshLoss*>(&f)) {
    manifest["loss"] = {{"kind", "logcosh"}, {"target", "T.csv"}};
    write_csv(dir / "T.csv", lc->target());
  } else {
    throw Error(ErrorCode::InvalidArgument,
                "loss kind '" + std::string(f.kind()) + "' has no file representation");
  }
  json files = json::array();
  for (Index i = 1; i <= chain.depth(); ++i) {
    const std::string name = "M" + std::to_string(i) + ".csv";
    write_csv(dir / name, chain.layer(i));
    files.push_back(name);
  }
  manifest["factors"] = files;
  for (const auto& [key, value] : extra.items()) manifest[key] = value;
  write_text(dir / kManifestName, manifest.dump(2) + "\n");
}

inline void save_instance(const fs::path& dir, const Instance& inst) {
  save_instance(dir, inst.chain, *inst.loss, json{{"spec", spec_json(inst.spec)}});
}

struct LoadedInstance {
  FactorChain chain;
  std::shared_ptr<const ConvexLoss> loss;
  json manifest;
};

inline LoadedInstance load_instance(const fs::path& dir) {
  LoadedInstance out;
  try {
    out.manifest = json::parse(read_text(dir / kManifestName));
    if (out.manifest.at("format").get<std::string>() != kInstanceFormat) {
      throw Error(ErrorCode::Parse, "not a dlnet instance manifest");
    }
    std::vector<Matrix> factors;
    for (const auto& name : out.manifest.at("factors")) {
      factors.push_back(read_csv(dir / name.get<std::string>()));
    }
    out.chain = FactorChain(std::move(factors));
    const auto dims = out.manifest.at("dims").get<std::vector<Index>>();
    if (dims != out.chain.dims().widths()) {
      throw Error(ErrorCode::ShapeMismatch, "manifest dims disagree with the factor files");
    }
    const json& l = out.manifest.at("loss");
    const std::string kind = l.at("kind").get<std::string>();
    if (kind == "quadratic") {
      out.loss = std::make_shared<QuadraticLoss>(read_csv(dir / l.at("X").get<std::string>()),
                                                 read_csv(dir / l.at("Y").get<std::string>()));
    } else if (kind == "logcosh") {
      out.loss = std::make_shared<LogCoshLoss>(read_csv(dir / l.at("target").get<std::string>()));
    } else {
      throw Error(ErrorCode::Parse, "unknown loss kind '" + kind + "'");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Parse, std::string("manifest: ") + e.what());
  }
  check_compatible(out.chain, *out.loss);
  return out;
}

inline json family_json(const InvariantFamily& family) {
  json arr = json::array();
  for (const RankOnePerturbation& p : family.perturbations) {
    arr.push_back(json{{"layer", p.layer}, {"w", vector_json(p.w)}, {"v", vector_json(p.v)}});
  }
  return json{{"scale", family.scale}, {"perturbations", arr}};
}

inline InvariantFamily family_from_json(const json& j) {
  InvariantFamily f;
  f.scale = j.at("scale").get<double>();
  for (const json& p : j.at("perturbations")) {
    f.perturbations.push_back(
        {p.at("layer").get<Index>(), vector_from_json(p.at("w")), vector_from_json(p.at("v"))});
  }
  return f;
}

inline json certificate_json(const EscapeCertificate& c) {
  return json{{"side", to_string(c.side)},
              {"split_index", c.split_index},
              {"i_star", c.i_star},
              {"witness_row", c.witness_row},
              {"delta", c.delta},
              {"super_gradient_norm", c.super_gradient_norm},
              {"loss_delta", c.loss_delta},
              {"original_loss", c.original_loss},
              {"family", family_json(c.family)}};
}

inline json report_json(const CriticalPointReport& r) {
  json out;
  out["label"] = to_string(r.label);
  out["loss"] = r.loss;
  out["f_prime_norm"] = r.f_prime_norm;
  out["layer_grad_norms"] = r.layer_grad_norms;
  out["max_layer_grad"] = r.max_layer_grad();
  out["narrowest_width"] = r.width;
  if (r.split_index > 0) {
    out["split_index"] = r.split_index;
    out["rank_A"] = r.rank_a;
    out["rank_B"] = r.rank_b;
    out["super_grad_A_norm"] = r.super_grad_a_norm;
    out["super_grad_B_norm"] = r.super_grad_b_norm;
  } else {
    out["split_index"] = nullptr;
  }
  out["oracle_gap"] = r.oracle_gap ? json(*r.oracle_gap) : json(nullptr);
  out["escape"] = r.escape ? certificate_json(*r.escape) : json(nullptr);
  out["reduction"] = r.reduction ? json{{"A_shape", {r.reduction->first.rows(), r.reduction->first.cols()}},
                                        {"B_shape", {r.reduction->second.rows(), r.reduction->second.cols()}}}
                                 : json(nullptr);
  out["diagnostics"] = r.diagnostics;
  return out;
}

inline std::string report_text(const CriticalPointReport& r) {
  std::ostringstream os;
  os << "label            " << to_string(r.label) << "\n";
  os << "loss             " << format_double(r.loss) << "\n";
  os << "||f'(W)||        " << format_double(r.f_prime_norm) << "\n";
  os << "max layer grad   " << format_double(r.max_layer_grad()) << "\n";
  os << "layer grads     ";
  for (double g : r.layer_grad_norms) os << " " << format_double(g);
  os << "\n";
  if (r.split_index > 0) {
    os << "split j          " << r.split_index << " (d = " << r.width << ")\n";
    os << "rank A / rank B  " << r.rank_a << " / " << r.rank_b << "\n";
    os << "||dL2/dA||       " << format_double(r.super_grad_a_norm) << "\n";
    os << "||dL2/dB||       " << format_double(r.super_grad_b_norm) << "\n";
  } else {
    os << "split j          none (no interior minimum-width layer)\n";
  }
  if (r.oracle_gap) os << "oracle gap       " << format_double(*r.oracle_gap) << "\n";
  if (r.escape) {
    const EscapeCertificate& c = *r.escape;
    os << "escape           side=" << to_string(c.side) << " i*=" << c.i_star
       << " witness=" << c.witness_row << " delta=" << format_double(c.delta)
       << " super_grad=" << format_double(c.super_gradient_norm)
       << " loss_delta=" << format_double(c.loss_delta) << "\n";
  }
  for (const std::string& d : r.diagnostics) os << "note             " << d << "\n";
  return os.str();
}

inline std::string trajectory_csv(const Trajectory& t) {
  std::string out = "step,loss,max_grad,rank_A,rank_B\n";
  for (const TrajectoryRecord& r : t.records) {
    out += std::to_string(r.step) + ',' + format_double(r.loss) + ',' + format_double(r.max_grad) +
           ',' + std::to_string(r.rank_a) + ',' + std::to_string(r.rank_b) + '\n';
  }
  return out;
}

}  // namespace dlnet::io
