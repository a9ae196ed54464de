#include "bloop/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string_view>

#include "CLI11.hpp"
#include "json.hpp"

#include "bloop/harness.hpp"

namespace bloop {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Configuration problems exit with code 2, I/O problems with code 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// small scalar parsers (all errors name the offending key)

std::string trim(std::string_view s) {
  std::size_t first = 0;
  std::size_t last = s.size();
  while (first < last && std::isspace(static_cast<unsigned char>(s[first]))) {
    ++first;
  }
  while (last > first && std::isspace(static_cast<unsigned char>(s[last - 1]))) {
    --last;
  }
  return std::string(s.substr(first, last - first));
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return x;
}

long parse_long(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long x = std::strtol(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return x;
}

int parse_int(const std::string& key, const std::string& v) {
  return static_cast<int>(parse_long(key, v));
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  if (!v.empty() && v[0] == '-') {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return static_cast<std::uint64_t>(x);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") {
    return true;
  }
  if (v == "false") {
    return false;
  }
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_commas(const std::string& key,
                                      const std::string& v) {
  std::vector<std::string> items;
  std::size_t start = 0;
  while (start <= v.size()) {
    const std::size_t comma = v.find(',', start);
    const std::size_t end = comma == std::string::npos ? v.size() : comma;
    const std::string item = trim(std::string_view(v).substr(start, end - start));
    if (item.empty()) {
      throw ConfigError(key + ": empty list element in '" + v + "'");
    }
    items.push_back(item);
    if (comma == std::string::npos) {
      break;
    }
    start = comma + 1;
  }
  return items;
}

std::vector<double> parse_double_list(const std::string& key,
                                      const std::string& v) {
  std::vector<double> out;
  for (const std::string& item : split_commas(key, v)) {
    out.push_back(parse_double(key, item));
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const std::string& item : split_commas(key, v)) {
    out.push_back(parse_int(key, item));
  }
  return out;
}

std::vector<long> parse_long_list(const std::string& key, const std::string& v) {
  std::vector<long> out;
  for (const std::string& item : split_commas(key, v)) {
    out.push_back(parse_long(key, item));
  }
  return out;
}

std::vector<std::uint64_t> parse_u64_list(const std::string& key,
                                          const std::string& v) {
  std::vector<std::uint64_t> out;
  for (const std::string& item : split_commas(key, v)) {
    out.push_back(parse_u64(key, item));
  }
  return out;
}

// ---------------------------------------------------------------------------
// strict key-value document

struct KvEntry {
  int line = 0;  // 0 for entries injected by --override / --seed
  std::string key;
  std::string value;
  bool used = false;
};

class KvDoc {
 public:
  static KvDoc parse(std::istream& in, const std::string& origin) {
    KvDoc doc;
    doc.origin_ = origin;
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
      ++line_no;
      if (!raw.empty() && raw.back() == '\r') {
        raw.pop_back();
      }
      const std::size_t hash = raw.find('#');
      std::string line = hash == std::string::npos ? raw : raw.substr(0, hash);
      if (trim(line).empty()) {
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": expected 'key = value'");
      }
      KvEntry entry;
      entry.line = line_no;
      entry.key = trim(std::string_view(line).substr(0, eq));
      entry.value = trim(std::string_view(line).substr(eq + 1));
      if (entry.key.empty() ||
          entry.key.find_first_of(" \t") != std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": malformed key");
      }
      if (entry.value.empty()) {
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": empty value for key '" + entry.key + "'");
      }
      for (const KvEntry& prev : doc.entries_) {
        if (prev.key == entry.key) {
          throw ConfigError(origin + ":" + std::to_string(line_no) +
                            ": duplicate key '" + entry.key + "' (first at line " +
                            std::to_string(prev.line) + ")");
        }
      }
      doc.entries_.push_back(std::move(entry));
    }
    return doc;
  }

  // Replace-or-append, used by --override and --seed.
  void set(const std::string& key, const std::string& value) {
    for (KvEntry& entry : entries_) {
      if (entry.key == key) {
        entry.value = value;
        entry.line = 0;
        return;
      }
    }
    entries_.push_back({0, key, value, false});
  }

  std::optional<std::string> take(const std::string& key) {
    for (KvEntry& entry : entries_) {
      if (entry.key == key) {
        entry.used = true;
        return entry.value;
      }
    }
    return std::nullopt;
  }

  std::string require(const std::string& key) {
    if (auto v = take(key)) {
      return *v;
    }
    throw ConfigError(origin_ + ": missing required key '" + key + "'");
  }

  void require_all_used() const {
    for (const KvEntry& entry : entries_) {
      if (!entry.used) {
        const std::string where =
            entry.line > 0 ? origin_ + ":" + std::to_string(entry.line)
                           : std::string("--override");
        throw ConfigError(where + ": unknown key '" + entry.key + "'");
      }
    }
  }

 private:
  std::vector<KvEntry> entries_;
  std::string origin_;
};

// ---------------------------------------------------------------------------
// name <-> enum tables

const std::vector<std::pair<std::string, Method>>& method_names() {
  static const std::vector<std::pair<std::string, Method>> table = {
      {"bloop", Method::Bloop},
      {"mixed", Method::Mixed},
      {"dynamic_barrier", Method::DynamicBarrier},
      {"pcgrad", Method::PCGrad},
      {"agem", Method::AGem},
      {"mtl_moo", Method::MtlMoo},
      {"cosine_sim", Method::CosineSim},
      {"gradvac", Method::GradVac},
      {"meta_balance", Method::MetaBalance},
      {"main_only", Method::MainOnly},
  };
  return table;
}

Method method_from_name(const std::string& key, const std::string& name) {
  for (const auto& [n, m] : method_names()) {
    if (n == name) {
      return m;
    }
  }
  throw ConfigError(key + ": unknown method '" + name + "'");
}

std::string method_name(Method m) {
  for (const auto& [n, v] : method_names()) {
    if (v == m) {
      return n;
    }
  }
  return "?";
}

// ---------------------------------------------------------------------------
// experiment configuration

struct ProblemConfig {
  std::string kind;
  double sigma = 0.0;
  int n = 0;
  int p = 0;
  std::uint64_t seed = 0;
  int batch_size = 0;
  double mu = 0.0;
  double L = 0.0;
  std::vector<int> layer_dims;
  int n_samples = 200;
};

struct ExperimentConfig {
  ProblemConfig problem;
  RunConfig run;  // carries surgery, optimizer, init, iterations, seed, ...
  std::vector<double> lambda_grid;
  std::vector<std::uint64_t> seeds;
  int parallelism = 1;
  bool has_sweep = false;
};

ProblemConfig read_problem(KvDoc& doc) {
  ProblemConfig pc;
  pc.kind = doc.require("problem.kind");
  if (pc.kind == "conditioning_2d") {
    pc.sigma = parse_double("problem.sigma", doc.take("problem.sigma").value_or("0"));
    if (pc.sigma < 0.0) {
      throw ConfigError("problem.sigma must be >= 0");
    }
  } else if (pc.kind == "overparam_least_squares") {
    pc.n = parse_int("problem.n", doc.require("problem.n"));
    pc.p = parse_int("problem.p", doc.require("problem.p"));
    pc.seed = parse_u64("problem.seed", doc.take("problem.seed").value_or("0"));
    pc.batch_size =
        parse_int("problem.batch_size", doc.take("problem.batch_size").value_or("4"));
    if (pc.n < 1 || pc.p <= pc.n) {
      throw ConfigError("problem.n / problem.p must satisfy 1 <= n < p");
    }
    if (pc.batch_size < 1 || pc.batch_size > pc.n) {
      throw ConfigError("problem.batch_size must be in [1, problem.n]");
    }
  } else if (pc.kind == "pl_quadratic") {
    pc.p = parse_int("problem.p", doc.require("problem.p"));
    pc.mu = parse_double("problem.mu", doc.require("problem.mu"));
    pc.L = parse_double("problem.L", doc.require("problem.L"));
    pc.seed = parse_u64("problem.seed", doc.take("problem.seed").value_or("0"));
    pc.sigma = parse_double("problem.sigma", doc.take("problem.sigma").value_or("1"));
    if (pc.p < 1) {
      throw ConfigError("problem.p must be >= 1");
    }
    if (!(pc.mu > 0.0 && pc.mu <= pc.L)) {
      throw ConfigError("problem.mu / problem.L must satisfy 0 < mu <= L");
    }
    if (pc.sigma < 0.0) {
      throw ConfigError("problem.sigma must be >= 0");
    }
  } else if (pc.kind == "tiny_mlp_lipschitz") {
    pc.layer_dims =
        parse_int_list("problem.layer_dims", doc.require("problem.layer_dims"));
    pc.seed = parse_u64("problem.seed", doc.take("problem.seed").value_or("0"));
    pc.n_samples =
        parse_int("problem.n_samples", doc.take("problem.n_samples").value_or("200"));
    pc.batch_size =
        parse_int("problem.batch_size", doc.take("problem.batch_size").value_or("32"));
  } else {
    throw ConfigError("problem.kind: unknown problem '" + pc.kind + "'");
  }
  return pc;
}

std::shared_ptr<const Problem> make_problem(const ProblemConfig& pc) {
  if (pc.kind == "conditioning_2d") {
    return make_conditioning_2d(pc.sigma);
  }
  if (pc.kind == "overparam_least_squares") {
    return make_overparam_least_squares(pc.n, pc.p, pc.seed, pc.batch_size);
  }
  if (pc.kind == "pl_quadratic") {
    return make_pl_quadratic(pc.p, pc.mu, pc.L, pc.seed, pc.sigma);
  }
  if (pc.kind == "tiny_mlp_lipschitz") {
    return make_tiny_mlp_lipschitz(pc.layer_dims, pc.seed, pc.n_samples,
                                   pc.batch_size);
  }
  throw ConfigError("problem.kind: unknown problem '" + pc.kind + "'");
}

SurgerySpec read_surgery(KvDoc& doc) {
  SurgerySpec spec;
  spec.method = method_from_name("surgery.method", doc.require("surgery.method"));
  spec.lambda =
      parse_double("surgery.lambda", doc.take("surgery.lambda").value_or("1"));
  if (spec.lambda < 0.0) {
    throw ConfigError("surgery.lambda must be >= 0 (got " +
                      std::to_string(spec.lambda) + ")");
  }
  if (spec.method == Method::Bloop) {
    spec.rho = parse_double("surgery.rho", doc.take("surgery.rho").value_or("0.01"));
    if (!(spec.rho >= 0.0 && spec.rho <= 1.0)) {
      throw ConfigError("surgery.rho must be in [0, 1]");
    }
    const std::string fb =
        doc.take("surgery.degenerate_fallback").value_or("mixed");
    if (fb == "mixed") {
      spec.degenerate_fallback = DegenerateFallback::MixedDirection;
    } else if (fb == "aux_only") {
      spec.degenerate_fallback = DegenerateFallback::AuxOnly;
    } else {
      throw ConfigError("surgery.degenerate_fallback must be mixed or aux_only");
    }
  }
  if (spec.method == Method::GradVac) {
    spec.gradvac_beta = parse_double("surgery.gradvac_beta",
                                     doc.take("surgery.gradvac_beta").value_or("0.01"));
    if (!(spec.gradvac_beta >= 0.0 && spec.gradvac_beta <= 1.0)) {
      throw ConfigError("surgery.gradvac_beta must be in [0, 1]");
    }
  }
  return spec;
}

Optimizer read_optimizer(KvDoc& doc) {
  const std::string kind = doc.require("optimizer.kind");
  const double eta = parse_double("optimizer.eta", doc.require("optimizer.eta"));
  if (!(eta > 0.0)) {
    throw ConfigError("optimizer.eta must be > 0");
  }
  const std::string schedule_name =
      doc.take("optimizer.schedule").value_or("constant");
  LrSchedule schedule;
  if (schedule_name == "constant") {
    schedule = LrSchedule::Constant;
  } else if (schedule_name == "inverse_three_quarters") {
    schedule = LrSchedule::InverseThreeQuarters;
  } else {
    throw ConfigError(
        "optimizer.schedule must be constant or inverse_three_quarters");
  }
  if (kind == "sgd") {
    return Optimizer::sgd(eta, schedule);
  }
  if (kind == "sgd_momentum") {
    const double momentum = parse_double(
        "optimizer.momentum", doc.take("optimizer.momentum").value_or("0.9"));
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("optimizer.momentum must be in [0, 1)");
    }
    return Optimizer::sgd_momentum(eta, momentum, schedule);
  }
  if (kind == "adam") {
    const double beta1 =
        parse_double("optimizer.beta1", doc.take("optimizer.beta1").value_or("0.9"));
    const double beta2 = parse_double("optimizer.beta2",
                                      doc.take("optimizer.beta2").value_or("0.999"));
    const double eps =
        parse_double("optimizer.eps", doc.take("optimizer.eps").value_or("1e-8"));
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("optimizer.beta1/beta2 must be in [0, 1)");
    }
    if (!(eps > 0.0)) {
      throw ConfigError("optimizer.eps must be > 0");
    }
    return Optimizer::adam(eta, beta1, beta2, eps, schedule);
  }
  throw ConfigError("optimizer.kind must be sgd, sgd_momentum, or adam");
}

InitSpec read_init(KvDoc& doc) {
  const std::string kind = doc.take("init.kind").value_or("zeros");
  if (kind == "zeros") {
    return InitSpec::zeros();
  }
  if (kind == "ones") {
    return InitSpec::ones();
  }
  if (kind == "gaussian") {
    const double scale =
        parse_double("init.scale", doc.take("init.scale").value_or("1"));
    if (!std::isfinite(scale)) {
      throw ConfigError("init.scale must be finite");
    }
    return InitSpec::gaussian(scale);
  }
  if (kind == "explicit") {
    const std::vector<double> values =
        parse_double_list("init.values", doc.require("init.values"));
    ParamVector theta(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
      theta[static_cast<Eigen::Index>(i)] = values[i];
    }
    return InitSpec::explicit_theta_at(std::move(theta));
  }
  throw ConfigError("init.kind must be zeros, ones, gaussian, or explicit");
}

void read_run_section(KvDoc& doc, RunConfig& rc) {
  rc.iterations = parse_long("run.iterations", doc.require("run.iterations"));
  if (rc.iterations < 1) {
    throw ConfigError("run.iterations must be >= 1");
  }
  rc.seed = parse_u64("run.seed", doc.take("run.seed").value_or("0"));
  rc.log_every =
      parse_long("run.log_every", doc.take("run.log_every").value_or("10"));
  if (rc.log_every < 1) {
    throw ConfigError("run.log_every must be >= 1");
  }
  rc.record_reference_distances =
      parse_bool("run.record_reference_distances",
                 doc.take("run.record_reference_distances").value_or("true"));
}

void read_sweep_section(KvDoc& doc, ExperimentConfig& cfg) {
  cfg.lambda_grid =
      parse_double_list("sweep.lambda_grid", doc.require("sweep.lambda_grid"));
  for (std::size_t i = 0; i < cfg.lambda_grid.size(); ++i) {
    if (cfg.lambda_grid[i] < 0.0) {
      throw ConfigError("sweep.lambda_grid values must be >= 0");
    }
    if (i > 0 && !(cfg.lambda_grid[i - 1] < cfg.lambda_grid[i])) {
      throw ConfigError("sweep.lambda_grid must be distinct and ascending");
    }
  }
  cfg.seeds = parse_u64_list("sweep.seeds", doc.require("sweep.seeds"));
  cfg.parallelism = parse_int("sweep.parallelism",
                              doc.take("sweep.parallelism").value_or("1"));
  if (cfg.parallelism < 1) {
    throw ConfigError("sweep.parallelism must be >= 1");
  }
  cfg.has_sweep = true;
}

ExperimentConfig read_config(KvDoc& doc, bool with_sweep) {
  ExperimentConfig cfg;
  cfg.problem = read_problem(doc);
  cfg.run.surgery = read_surgery(doc);
  cfg.run.optimizer = read_optimizer(doc);
  read_run_section(doc, cfg.run);
  cfg.run.init = read_init(doc);
  if (with_sweep) {
    read_sweep_section(doc, cfg);
  }
  doc.require_all_used();
  return cfg;
}

// ---------------------------------------------------------------------------
// canonical config echo (effective values, fixed order)

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Empty cell for values that are absent by design (no reference solution).
std::string fmt_cell(double v) {
  return std::isnan(v) ? std::string() : fmt_double(v);
}

std::string join_doubles(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i > 0) {
      out += ',';
    }
    out += fmt_double(xs[i]);
  }
  return out;
}

std::string echo_config(const ExperimentConfig& cfg) {
  std::string out;
  const ProblemConfig& pc = cfg.problem;
  out += "problem.kind = " + pc.kind + "\n";
  if (pc.kind == "conditioning_2d") {
    out += "problem.sigma = " + fmt_double(pc.sigma) + "\n";
  } else if (pc.kind == "overparam_least_squares") {
    out += "problem.n = " + std::to_string(pc.n) + "\n";
    out += "problem.p = " + std::to_string(pc.p) + "\n";
    out += "problem.seed = " + std::to_string(pc.seed) + "\n";
    out += "problem.batch_size = " + std::to_string(pc.batch_size) + "\n";
  } else if (pc.kind == "pl_quadratic") {
    out += "problem.p = " + std::to_string(pc.p) + "\n";
    out += "problem.mu = " + fmt_double(pc.mu) + "\n";
    out += "problem.L = " + fmt_double(pc.L) + "\n";
    out += "problem.seed = " + std::to_string(pc.seed) + "\n";
    out += "problem.sigma = " + fmt_double(pc.sigma) + "\n";
  } else if (pc.kind == "tiny_mlp_lipschitz") {
    out += "problem.layer_dims = ";
    for (std::size_t i = 0; i < pc.layer_dims.size(); ++i) {
      if (i > 0) {
        out += ',';
      }
      out += std::to_string(pc.layer_dims[i]);
    }
    out += "\n";
    out += "problem.seed = " + std::to_string(pc.seed) + "\n";
    out += "problem.n_samples = " + std::to_string(pc.n_samples) + "\n";
    out += "problem.batch_size = " + std::to_string(pc.batch_size) + "\n";
  }
  out += "\n";
  const SurgerySpec& s = cfg.run.surgery;
  out += "surgery.method = " + method_name(s.method) + "\n";
  out += "surgery.lambda = " + fmt_double(s.lambda) + "\n";
  if (s.method == Method::Bloop) {
    out += "surgery.rho = " + fmt_double(s.rho) + "\n";
    out += std::string("surgery.degenerate_fallback = ") +
           (s.degenerate_fallback == DegenerateFallback::MixedDirection
                ? "mixed"
                : "aux_only") +
           "\n";
  }
  if (s.method == Method::GradVac) {
    out += "surgery.gradvac_beta = " + fmt_double(s.gradvac_beta) + "\n";
  }
  out += "\n";
  const Optimizer& opt = cfg.run.optimizer;
  switch (opt.kind) {
    case OptimizerKind::Sgd:
      out += "optimizer.kind = sgd\n";
      break;
    case OptimizerKind::SgdMomentum:
      out += "optimizer.kind = sgd_momentum\n";
      break;
    case OptimizerKind::Adam:
      out += "optimizer.kind = adam\n";
      break;
  }
  out += "optimizer.eta = " + fmt_double(opt.eta) + "\n";
  out += std::string("optimizer.schedule = ") +
         (opt.schedule == LrSchedule::Constant ? "constant"
                                               : "inverse_three_quarters") +
         "\n";
  if (opt.kind == OptimizerKind::SgdMomentum) {
    out += "optimizer.momentum = " + fmt_double(opt.momentum) + "\n";
  }
  if (opt.kind == OptimizerKind::Adam) {
    out += "optimizer.beta1 = " + fmt_double(opt.beta1) + "\n";
    out += "optimizer.beta2 = " + fmt_double(opt.beta2) + "\n";
    out += "optimizer.eps = " + fmt_double(opt.eps) + "\n";
  }
  out += "\n";
  out += "run.iterations = " + std::to_string(cfg.run.iterations) + "\n";
  out += "run.seed = " + std::to_string(cfg.run.seed) + "\n";
  out += "run.log_every = " + std::to_string(cfg.run.log_every) + "\n";
  out += std::string("run.record_reference_distances = ") +
         (cfg.run.record_reference_distances ? "true" : "false") + "\n";
  out += "\n";
  const InitSpec& init = cfg.run.init;
  switch (init.kind) {
    case InitKind::Zeros:
      out += "init.kind = zeros\n";
      break;
    case InitKind::Ones:
      out += "init.kind = ones\n";
      break;
    case InitKind::Gaussian:
      out += "init.kind = gaussian\n";
      out += "init.scale = " + fmt_double(init.gaussian_scale) + "\n";
      break;
    case InitKind::Explicit: {
      out += "init.kind = explicit\n";
      std::vector<double> values(init.explicit_theta.data(),
                                 init.explicit_theta.data() +
                                     init.explicit_theta.size());
      out += "init.values = " + join_doubles(values) + "\n";
      break;
    }
  }
  if (cfg.has_sweep) {
    out += "\n";
    out += "sweep.lambda_grid = " + join_doubles(cfg.lambda_grid) + "\n";
    out += "sweep.seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      if (i > 0) {
        out += ',';
      }
      out += std::to_string(cfg.seeds[i]);
    }
    out += "\n";
    out += "sweep.parallelism = " + std::to_string(cfg.parallelism) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// overrides

// Bare keys (no dot) are resolved against the sections in this order; the
// first section whose schema contains the key wins.
const std::vector<std::pair<std::string, std::vector<std::string>>>&
override_sections() {
  static const std::vector<std::pair<std::string, std::vector<std::string>>>
      table = {
          {"run", {"iterations", "seed", "log_every", "record_reference_distances"}},
          {"surgery",
           {"method", "lambda", "rho", "gradvac_beta", "degenerate_fallback"}},
          {"optimizer",
           {"kind", "eta", "schedule", "momentum", "beta1", "beta2", "eps"}},
          {"problem",
           {"kind", "sigma", "n", "p", "seed", "batch_size", "mu", "L",
            "layer_dims", "n_samples"}},
          {"init", {"kind", "scale", "values"}},
          {"sweep", {"lambda_grid", "seeds", "parallelism"}},
      };
  return table;
}

void apply_override(KvDoc& doc, const std::string& ov) {
  const std::size_t eq = ov.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("--override expects key=value, got '" + ov + "'");
  }
  const std::string key = trim(std::string_view(ov).substr(0, eq));
  const std::string value = trim(std::string_view(ov).substr(eq + 1));
  if (key.empty() || value.empty()) {
    throw ConfigError("--override expects key=value, got '" + ov + "'");
  }
  if (key.find('.') != std::string::npos) {
    doc.set(key, value);
    return;
  }
  for (const auto& [section, keys] : override_sections()) {
    if (std::find(keys.begin(), keys.end(), key) != keys.end()) {
      doc.set(section + "." + key, value);
      return;
    }
  }
  throw ConfigError("--override: unknown key '" + key + "'");
}

// ---------------------------------------------------------------------------
// serialization

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("cannot open '" + path.string() + "' for writing");
  }
  out << content;
  out.flush();
  if (!out) {
    throw IoError("failed writing '" + path.string() + "'");
  }
}

std::string dump_json(const ordered_json& j) { return j.dump(2) + "\n"; }

std::string runlog_csv(const RunLog& log) {
  std::string out =
      "step,loss_main,loss_aux,grad_main_norm,grad_aux_norm,cos_main_aux,"
      "ema_error,dist_to_reference\n";
  for (const LogRow& row : log.rows) {
    out += std::to_string(row.step) + ',' + fmt_double(row.loss_main) + ',' +
           fmt_double(row.loss_aux) + ',' + fmt_double(row.grad_main_norm) +
           ',' + fmt_double(row.grad_aux_norm) + ',' +
           fmt_double(row.cos_main_aux) + ',' + fmt_double(row.ema_error) +
           ',' + fmt_cell(row.dist_to_reference) + '\n';
  }
  return out;
}

ordered_json runlog_json(const RunLog& log) {
  ordered_json rows = ordered_json::array();
  for (const LogRow& row : log.rows) {
    ordered_json j;
    j["step"] = row.step;
    j["loss_main"] = row.loss_main;
    j["loss_aux"] = row.loss_aux;
    j["grad_main_norm"] = row.grad_main_norm;
    j["grad_aux_norm"] = row.grad_aux_norm;
    j["cos_main_aux"] = row.cos_main_aux;
    j["ema_error"] = row.ema_error;
    if (std::isnan(row.dist_to_reference)) {
      j["dist_to_reference"] = nullptr;
    } else {
      j["dist_to_reference"] = row.dist_to_reference;
    }
    rows.push_back(std::move(j));
  }
  return rows;
}

std::string pareto_csv(const std::string& method, const SweepResult& result) {
  std::string out =
      "method,lambda,seed,final_loss_main,final_loss_aux,dist_to_reference,"
      "empirical_D,empirical_C2,empirical_B\n";
  for (const SweepPoint& pt : result.points) {
    out += method + ',' + fmt_double(pt.lambda) + ',' +
           std::to_string(pt.seed) + ',' + fmt_double(pt.final_loss_main) +
           ',' + fmt_double(pt.final_loss_aux) + ',' +
           fmt_cell(pt.dist_to_reference) + ',' +
           fmt_double(pt.max_direction_norm) + ',' +
           fmt_double(pt.max_grad_noise_sq) + ',' +
           fmt_double(pt.max_aux_grad_norm) + '\n';
  }
  return out;
}

ordered_json pareto_json(const std::string& method, const SweepResult& result) {
  ordered_json rows = ordered_json::array();
  for (const SweepPoint& pt : result.points) {
    ordered_json j;
    j["method"] = method;
    j["lambda"] = pt.lambda;
    j["seed"] = pt.seed;
    j["final_loss_main"] = pt.final_loss_main;
    j["final_loss_aux"] = pt.final_loss_aux;
    if (std::isnan(pt.dist_to_reference)) {
      j["dist_to_reference"] = nullptr;
    } else {
      j["dist_to_reference"] = pt.dist_to_reference;
    }
    j["empirical_D"] = pt.max_direction_norm;
    j["empirical_C2"] = pt.max_grad_noise_sq;
    j["empirical_B"] = pt.max_aux_grad_norm;
    rows.push_back(std::move(j));
  }
  return rows;
}

std::string noise_csv(const std::vector<NoiseDemoRow>& rows) {
  std::string out = "sigma,dist_to_bloop,dist_to_mixed,stderr_norm,n_samples\n";
  for (const NoiseDemoRow& row : rows) {
    out += fmt_double(row.sigma) + ',' + fmt_double(row.dist_to_bloop) + ',' +
           fmt_double(row.dist_to_mixed) + ',' + fmt_double(row.stderr_norm) +
           ',' + std::to_string(row.n_samples) + '\n';
  }
  return out;
}

ordered_json noise_json(const std::vector<NoiseDemoRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const NoiseDemoRow& row : rows) {
    ordered_json j;
    j["sigma"] = row.sigma;
    j["dist_to_bloop"] = row.dist_to_bloop;
    j["dist_to_mixed"] = row.dist_to_mixed;
    j["stderr_norm"] = row.stderr_norm;
    j["n_samples"] = row.n_samples;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::string conditioning_csv(const std::vector<ConditioningDemoRow>& rows) {
  std::string out = "method,lambda,theta_a,theta_b,loss_main,loss_aux\n";
  for (const ConditioningDemoRow& row : rows) {
    out += row.method + ',' + fmt_double(row.lambda) + ',' +
           fmt_double(row.theta_a) + ',' + fmt_double(row.theta_b) + ',' +
           fmt_double(row.loss_main) + ',' + fmt_double(row.loss_aux) + '\n';
  }
  return out;
}

ordered_json conditioning_json(const std::vector<ConditioningDemoRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const ConditioningDemoRow& row : rows) {
    ordered_json j;
    j["method"] = row.method;
    j["lambda"] = row.lambda;
    j["theta_a"] = row.theta_a;
    j["theta_b"] = row.theta_b;
    j["loss_main"] = row.loss_main;
    j["loss_aux"] = row.loss_aux;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::string rate_csv(const std::vector<RateCheckRow>& rows) {
  std::string out = "T,seed,eta,rho,avg_sq_grad_norm,final_gap\n";
  for (const RateCheckRow& row : rows) {
    out += std::to_string(row.T) + ',' + std::to_string(row.seed) + ',' +
           fmt_double(row.eta) + ',' + fmt_double(row.rho) + ',' +
           fmt_double(row.avg_sq_grad_norm) + ',' + fmt_double(row.final_gap) +
           '\n';
  }
  return out;
}

ordered_json rate_json(const std::vector<RateCheckRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const RateCheckRow& row : rows) {
    ordered_json j;
    j["T"] = row.T;
    j["seed"] = row.seed;
    j["eta"] = row.eta;
    j["rho"] = row.rho;
    j["avg_sq_grad_norm"] = row.avg_sq_grad_norm;
    j["final_gap"] = row.final_gap;
    arr.push_back(std::move(j));
  }
  return arr;
}

std::string ema_csv(const std::vector<EmaAblationRow>& rows) {
  std::string out =
      "rho,final_loss_main,final_loss_aux,mean_ema_error,mean_cos_bloop_mixed\n";
  for (const EmaAblationRow& row : rows) {
    out += fmt_double(row.rho) + ',' + fmt_double(row.final_loss_main) + ',' +
           fmt_double(row.final_loss_aux) + ',' +
           fmt_double(row.mean_ema_error) + ',' +
           fmt_double(row.mean_cos_bloop_mixed) + '\n';
  }
  return out;
}

ordered_json ema_json(const std::vector<EmaAblationRow>& rows) {
  ordered_json arr = ordered_json::array();
  for (const EmaAblationRow& row : rows) {
    ordered_json j;
    j["rho"] = row.rho;
    j["final_loss_main"] = row.final_loss_main;
    j["final_loss_aux"] = row.final_loss_aux;
    j["mean_ema_error"] = row.mean_ema_error;
    j["mean_cos_bloop_mixed"] = row.mean_cos_bloop_mixed;
    arr.push_back(std::move(j));
  }
  return arr;
}

// ---------------------------------------------------------------------------
// commands

struct CommonFlags {
  std::string out_dir = "out";
  std::string format = "csv";
};

void write_table(const CommonFlags& common, const std::string& stem,
                 const std::string& csv, const ordered_json& json) {
  fs::create_directories(common.out_dir);
  const fs::path base = fs::path(common.out_dir) / stem;
  if (common.format == "csv") {
    write_file(base.string() + ".csv", csv);
  } else {
    write_file(base.string() + ".json", dump_json(json));
  }
}

KvDoc load_config(const std::string& config_path,
                  const std::vector<std::string>& overrides,
                  const CLI::Option* seed_opt, std::uint64_t seed_value) {
  std::ifstream in(config_path);
  if (!in) {
    throw IoError("cannot read config file '" + config_path + "'");
  }
  KvDoc doc = KvDoc::parse(in, config_path);
  for (const std::string& ov : overrides) {
    apply_override(doc, ov);
  }
  if (seed_opt != nullptr && seed_opt->count() > 0) {
    doc.set("run.seed", std::to_string(seed_value));
  }
  return doc;
}

int cmd_run(const std::string& config_path,
            const std::vector<std::string>& overrides,
            const CLI::Option* seed_opt, std::uint64_t seed_value,
            const CommonFlags& common, std::ostream& diag) {
  KvDoc doc = load_config(config_path, overrides, seed_opt, seed_value);
  const ExperimentConfig cfg = read_config(doc, /*with_sweep=*/false);
  const auto problem = make_problem(cfg.problem);
  const RunLog log = run_training(*problem, cfg.run);

  fs::create_directories(common.out_dir);
  write_file(fs::path(common.out_dir) / "config.echo", echo_config(cfg));
  write_table(common, "runlog", runlog_csv(log), runlog_json(log));
  if (log.failed) {
    diag << "run failed at step " << log.failed_step << ": "
         << log.failure_reason << "\n";
    return 3;
  }
  return 0;
}

int cmd_sweep(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const CLI::Option* seed_opt, std::uint64_t seed_value,
              const CommonFlags& common, std::ostream& diag) {
  KvDoc doc = load_config(config_path, overrides, seed_opt, seed_value);
  const ExperimentConfig cfg = read_config(doc, /*with_sweep=*/true);
  const auto problem = make_problem(cfg.problem);

  SweepConfig scfg;
  scfg.base = cfg.run;
  scfg.lambda_grid = cfg.lambda_grid;
  scfg.seeds = cfg.seeds;
  scfg.parallelism = cfg.parallelism;
  if (const char* env = std::getenv("BLOOP_NUM_WORKERS")) {
    const long cap = parse_long("BLOOP_NUM_WORKERS", env);
    if (cap < 1) {
      throw ConfigError("BLOOP_NUM_WORKERS must be >= 1");
    }
    scfg.parallelism = static_cast<int>(
        std::min<long>(scfg.parallelism, cap));
  }

  const SweepResult result = run_pareto_sweep(*problem, scfg);
  const std::string method = method_name(cfg.run.surgery.method);

  fs::create_directories(fs::path(common.out_dir) / "runs");
  write_file(fs::path(common.out_dir) / "config.echo", echo_config(cfg));
  write_table(common, "pareto", pareto_csv(method, result),
              pareto_json(method, result));
  const std::string ext = common.format == "csv" ? ".csv" : ".json";
  for (std::size_t i = 0; i < result.points.size(); ++i) {
    const SweepPoint& pt = result.points[i];
    const std::size_t lambda_index = i / cfg.seeds.size();
    const std::string name = "lambda" + std::to_string(lambda_index) + "_seed" +
                             std::to_string(pt.seed) + ext;
    const fs::path path = fs::path(common.out_dir) / "runs" / name;
    if (common.format == "csv") {
      write_file(path, runlog_csv(pt.log));
    } else {
      write_file(path, dump_json(runlog_json(pt.log)));
    }
  }

  long n_failed = 0;
  for (const SweepPoint& pt : result.points) {
    if (pt.failed) {
      ++n_failed;
    }
  }
  if (n_failed > 0) {
    diag << n_failed << " of " << result.points.size() << " runs failed\n";
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// entry point

int dispatch(const std::vector<std::string>& args, std::ostream& diag) {
  CLI::App app{"gradient-surgery training runs, sweeps, and diagnostics"};
  app.require_subcommand(1);

  // run
  auto* run_cmd = app.add_subcommand("run", "execute one training run");
  std::string run_config;
  std::vector<std::string> run_overrides;
  CommonFlags run_common;
  std::uint64_t run_seed = 0;
  run_cmd->add_option("config", run_config, "config file path")->required();
  run_cmd->add_option("--override", run_overrides,
                      "key=value config override (repeatable)");
  CLI::Option* run_seed_opt =
      run_cmd->add_option("--seed", run_seed, "override run.seed");
  run_cmd->add_option("--out", run_common.out_dir, "output directory")
      ->capture_default_str();
  run_cmd->add_option("--format", run_common.format, "table format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();

  // sweep
  auto* sweep_cmd =
      app.add_subcommand("sweep", "lambda-grid Pareto sweep over seeds");
  std::string sweep_config;
  std::vector<std::string> sweep_overrides;
  CommonFlags sweep_common;
  std::uint64_t sweep_seed = 0;
  sweep_cmd->add_option("config", sweep_config, "config file path")->required();
  sweep_cmd->add_option("--override", sweep_overrides,
                        "key=value config override (repeatable)");
  CLI::Option* sweep_seed_opt =
      sweep_cmd->add_option("--seed", sweep_seed, "override run.seed");
  sweep_cmd->add_option("--out", sweep_common.out_dir, "output directory")
      ->capture_default_str();
  sweep_cmd->add_option("--format", sweep_common.format, "table format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();

  // noise-demo
  auto* noise_cmd = app.add_subcommand(
      "noise-demo", "Monte-Carlo mean of the projection under axis noise");
  int noise_dim = 100;
  std::string noise_grid = "0,1,3,10,30,100,300,1000";
  long noise_samples = 100000;
  std::uint64_t noise_seed = 0;
  CommonFlags noise_common;
  noise_cmd->add_option("--dim", noise_dim, "ambient dimension")
      ->capture_default_str();
  noise_cmd->add_option("--sigma-grid", noise_grid, "comma-separated noise scales")
      ->capture_default_str();
  noise_cmd->add_option("--samples", noise_samples, "Monte-Carlo sample count")
      ->capture_default_str();
  noise_cmd->add_option("--seed", noise_seed, "base seed")->capture_default_str();
  noise_cmd->add_option("--out", noise_common.out_dir, "output directory")
      ->capture_default_str();
  noise_cmd->add_option("--format", noise_common.format, "table format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();

  // conditioning-demo
  auto* cond_cmd = app.add_subcommand(
      "conditioning-demo", "Bloop vs mixed on the two-parameter problem");
  std::string cond_grid = "1";
  double cond_eta = 0.5;
  long cond_steps = 100;
  std::uint64_t cond_seed = 0;
  CommonFlags cond_common;
  cond_cmd->add_option("--lambda-grid", cond_grid, "comma-separated lambdas")
      ->capture_default_str();
  cond_cmd->add_option("--eta", cond_eta, "SGD step size")->capture_default_str();
  cond_cmd->add_option("--steps", cond_steps, "iterations per run")
      ->capture_default_str();
  cond_cmd->add_option("--seed", cond_seed, "run seed")->capture_default_str();
  cond_cmd->add_option("--out", cond_common.out_dir, "output directory")
      ->capture_default_str();
  cond_cmd->add_option("--format", cond_common.format, "table format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();

  // rate-check
  auto* rate_cmd = app.add_subcommand(
      "rate-check", "coupled step-size/EMA scaling on the PL quadratic");
  RateCheckConfig rate_cfg;
  std::string rate_grid = "1000,10000";
  CommonFlags rate_common;
  rate_cmd->add_option("--dim", rate_cfg.p, "parameter dimension")
      ->capture_default_str();
  rate_cmd->add_option("--mu", rate_cfg.mu, "smallest curvature")
      ->capture_default_str();
  rate_cmd->add_option("--lipschitz", rate_cfg.L, "largest curvature")
      ->capture_default_str();
  rate_cmd->add_option("--sigma", rate_cfg.sigma, "gradient noise scale")
      ->capture_default_str();
  rate_cmd->add_option("--t-grid", rate_grid, "comma-separated horizons")
      ->capture_default_str();
  rate_cmd->add_option("--seeds", rate_cfg.n_seeds, "seeds per horizon")
      ->capture_default_str();
  rate_cmd->add_option("--eta0", rate_cfg.eta0, "step-size scale")
      ->capture_default_str();
  rate_cmd->add_option("--lambda", rate_cfg.lambda, "auxiliary weight")
      ->capture_default_str();
  rate_cmd->add_option("--seed", rate_cfg.base_seed, "base seed")
      ->capture_default_str();
  rate_cmd->add_option("--out", rate_common.out_dir, "output directory")
      ->capture_default_str();
  rate_cmd->add_option("--format", rate_common.format, "table format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();

  // ema-ablation
  auto* ema_cmd =
      app.add_subcommand("ema-ablation", "sweep the EMA coefficient rho");
  std::string ema_problem = "conditioning_2d";
  double ema_sigma = 0.0;
  int ema_dim = 50;
  double ema_mu = 0.1;
  double ema_lipschitz = 10.0;
  std::uint64_t ema_problem_seed = 0;
  double ema_lambda = 1.0;
  double ema_eta = 0.5;
  long ema_steps = 30;
  long ema_log_every = 1;
  std::string ema_init = "ones";
  std::string ema_grid = "0,0.01,0.1,0.5,0.9,1";
  std::uint64_t ema_seed = 0;
  CommonFlags ema_common;
  ema_cmd->add_option("--problem", ema_problem, "problem family")
      ->check(CLI::IsMember({"conditioning_2d", "pl_quadratic"}))
      ->capture_default_str();
  ema_cmd->add_option("--sigma", ema_sigma, "gradient noise scale")
      ->capture_default_str();
  ema_cmd->add_option("--dim", ema_dim, "pl_quadratic dimension")
      ->capture_default_str();
  ema_cmd->add_option("--mu", ema_mu, "pl_quadratic smallest curvature")
      ->capture_default_str();
  ema_cmd->add_option("--lipschitz", ema_lipschitz, "pl_quadratic largest curvature")
      ->capture_default_str();
  ema_cmd->add_option("--problem-seed", ema_problem_seed, "problem seed")
      ->capture_default_str();
  ema_cmd->add_option("--lambda", ema_lambda, "auxiliary weight")
      ->capture_default_str();
  ema_cmd->add_option("--eta", ema_eta, "SGD step size")->capture_default_str();
  ema_cmd->add_option("--steps", ema_steps, "iterations per run")
      ->capture_default_str();
  ema_cmd->add_option("--log-every", ema_log_every, "logging stride")
      ->capture_default_str();
  ema_cmd->add_option("--init", ema_init, "initialization")
      ->check(CLI::IsMember({"zeros", "ones", "gaussian"}))
      ->capture_default_str();
  ema_cmd->add_option("--rho-grid", ema_grid, "comma-separated rho values")
      ->capture_default_str();
  ema_cmd->add_option("--seed", ema_seed, "run seed")->capture_default_str();
  ema_cmd->add_option("--out", ema_common.out_dir, "output directory")
      ->capture_default_str();
  ema_cmd->add_option("--format", ema_common.format, "table format")
      ->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("bloop");
  for (const std::string& a : args) {
    argv.push_back(a.c_str());
  }
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, diag, diag);
    return code == 0 ? 0 : 2;
  }

  if (run_cmd->parsed()) {
    return cmd_run(run_config, run_overrides, run_seed_opt, run_seed,
                   run_common, diag);
  }
  if (sweep_cmd->parsed()) {
    return cmd_sweep(sweep_config, sweep_overrides, sweep_seed_opt, sweep_seed,
                     sweep_common, diag);
  }
  if (noise_cmd->parsed()) {
    const std::vector<double> grid = parse_double_list("--sigma-grid", noise_grid);
    for (double s : grid) {
      if (s < 0.0) {
        throw ConfigError("--sigma-grid values must be >= 0");
      }
    }
    const auto rows = run_noise_demo(noise_dim, grid, noise_samples, noise_seed);
    write_table(noise_common, "noise", noise_csv(rows), noise_json(rows));
    return 0;
  }
  if (cond_cmd->parsed()) {
    const std::vector<double> grid = parse_double_list("--lambda-grid", cond_grid);
    const auto rows = run_conditioning_demo(grid, cond_eta, cond_steps, cond_seed);
    write_table(cond_common, "conditioning", conditioning_csv(rows),
                conditioning_json(rows));
    return 0;
  }
  if (rate_cmd->parsed()) {
    rate_cfg.T_grid = parse_long_list("--t-grid", rate_grid);
    const auto rows = run_rate_check(rate_cfg);
    write_table(rate_common, "rate", rate_csv(rows), rate_json(rows));
    return 0;
  }
  if (ema_cmd->parsed()) {
    std::shared_ptr<const Problem> problem;
    RunConfig base;
    if (ema_problem == "conditioning_2d") {
      problem = make_conditioning_2d(ema_sigma);
    } else {
      problem =
          make_pl_quadratic(ema_dim, ema_mu, ema_lipschitz, ema_problem_seed,
                            ema_sigma);
    }
    base.surgery.method = Method::Bloop;
    base.surgery.lambda = ema_lambda;
    base.optimizer = Optimizer::sgd(ema_eta);
    base.iterations = ema_steps;
    base.seed = ema_seed;
    base.log_every = ema_log_every;
    if (ema_init == "zeros") {
      base.init = InitSpec::zeros();
    } else if (ema_init == "ones") {
      base.init = InitSpec::ones();
    } else {
      base.init = InitSpec::gaussian(1.0);
    }
    const std::vector<double> grid = parse_double_list("--rho-grid", ema_grid);
    for (double rho : grid) {
      if (!(rho >= 0.0 && rho <= 1.0)) {
        throw ConfigError("--rho-grid values must be in [0, 1]");
      }
    }
    const EmaAblationResult result = run_ema_ablation(*problem, base, grid);
    write_table(ema_common, "ema", ema_csv(result.rows), ema_json(result.rows));
    return 0;
  }
  return 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& diag) {
  try {
    return dispatch(args, diag);
  } catch (const ConfigError& e) {
    diag << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ContractViolation& e) {
    diag << "config error: " << e.what() << "\n";
    return 2;
  } catch (const OracleFailure& e) {
    diag << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NonFiniteDirection& e) {
    diag << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    diag << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    diag << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    diag << "error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace bloop
