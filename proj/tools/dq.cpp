// Command-line front end: experiment runs plus one subcommand per module.
//
// Exit codes: 0 success, 1 a trial or computation failed, 2 bad arguments,
// config or input, 3 I/O failure.

#include <CLI11.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dq/error.hpp"
#include "dq/harness.hpp"
#include "dq/hexfloat.hpp"
#include "dq/rng.hpp"

namespace {

using namespace dq;

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

ToyModel load_teacher(const std::string& path, std::uint64_t seed) {
  if (path.empty()) return ToyModel::random(Arch{}, seed);
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("checkpoint " + path + " is not valid JSON: " + e.what());
  }
  return ToyModel::from_json(j);
}

std::size_t parse_groupsize(const std::string& s) {
  if (s == "per-tensor") return kPerTensor;
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos == s.size() && v > 0) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw InvalidConfig("groupsize must be a positive integer or per-tensor");
}

std::string csv_line(std::initializer_list<std::string> cells) {
  std::string s;
  for (const auto& c : cells) s += (s.empty() ? "" : ",") + c;
  return s + "\n";
}

// ---------------------------------------------------------------------------

int cmd_run(const std::string& cfg_path, const std::string& format, const std::string& out_dir) {
  const auto cfg = ExperimentConfig::load(cfg_path);
  const Report r = run_experiment(cfg, workers_from_env());
  const std::string dir = out_dir.empty() ? cfg.output_dir : out_dir;
  for (const char* f : {"json", "csv"})
    if (format == "both" || format == f) {
      const auto path = emit(r, f, dir);
      std::cerr << "wrote " << path << "\n";
    }
  if (r.failures > 0) {
    std::cerr << r.failures << " trial row(s) failed\n";
    return 1;
  }
  return 0;
}

struct WalkArgs {
  std::size_t n = 1024, m = 8;
  std::uint64_t seed = 0;
  double delta = 0.02, eps = 0.02;
  int max_phases = 200;
  bool vertex = false;
  std::string out;
};

int cmd_walk(const WalkArgs& a) {
  Rng rng(a.seed);
  ConstraintSet cs;
  cs.M.resize(static_cast<Eigen::Index>(a.m), static_cast<Eigen::Index>(a.n));
  for (Eigen::Index i = 0; i < cs.M.rows(); ++i)
    for (Eigen::Index j = 0; j < cs.M.cols(); ++j) cs.M(i, j) = rng.normal();
  cs.y.resize(a.n);
  for (auto& v : cs.y) v = rng.uniform();
  WalkConfig cfg;
  cfg.step = a.delta;
  cfg.face_tol = a.eps;
  cfg.max_phases = a.max_phases;
  cfg.seed = derive_seed(a.seed, 1);
  int code = 0;
  nlohmann::json j;
  try {
    const auto res = a.vertex ? walk_to_vertex(cs, cfg) : lm_round(cs, cfg);
    j = res.to_json();
    j["status"] = "ok";
  } catch (const MaxPhasesExceeded& e) {
    j = e.partial().to_json();
    j["status"] = std::string("error: ") + e.what();
    code = 1;
  }
  j["n"] = a.n;
  j["m"] = a.m;
  j["seed"] = a.seed;
  j["y"] = hex_array(cs.y);
  write_text(a.out, j.dump(2) + "\n");
  return code;
}

struct SpeclabArgs {
  double alpha = 2.0;
  std::size_t n = 256;
  std::vector<std::size_t> m_grid;
  int trials = 20;
  std::uint64_t seed = 0;
  std::string basis = "axis-aligned";
  std::string rounding = "vertex";
  std::string ckpt;
  std::size_t d = 64;
  std::size_t samples = 256;
  std::string out;
};

SpectrumSpec spec_of(const SpeclabArgs& a) {
  SpectrumSpec s;
  s.n = a.n;
  s.alpha = a.alpha;
  if (a.basis == "random-orthogonal") {
    s.basis = Basis::RandomOrthogonal;
    s.basis_seed = derive_seed(a.seed, 9);
  } else if (a.basis != "axis-aligned") {
    throw InvalidConfig("basis must be axis-aligned or random-orthogonal");
  }
  s.validate();
  return s;
}

int cmd_falpha(const SpeclabArgs& a) {
  const auto grid = a.m_grid.empty() ? std::vector<std::size_t>{32, 64, 128, 256, 512} : a.m_grid;
  const auto st = falpha_scaling_study(spec_of(a), grid, a.trials, a.seed, workers_from_env());
  std::string csv = csv_line({"seed", "alpha", "n", "m", "trial", "schatten1_error"});
  for (const auto& r : st.rows)
    csv += csv_line({std::to_string(r.seed), shortest_decimal(a.alpha), std::to_string(a.n), std::to_string(r.m),
                     std::to_string(r.trial), shortest_decimal(r.error)});
  write_text(a.out, csv);
  std::cerr << "slope " << st.fit.slope << " +- " << st.fit.stderr_slope << "\n";
  return 0;
}

int cmd_gen(const SpeclabArgs& a) {
  const auto grid = a.m_grid.empty() ? std::vector<std::size_t>{8, 16, 32, 64} : a.m_grid;
  GenRounding rounding = GenRounding::Vertex;
  if (a.rounding == "lm_round")
    rounding = GenRounding::LmRound;
  else if (a.rounding != "vertex")
    throw InvalidConfig("rounding must be vertex or lm_round");
  const auto st = generalization_study(spec_of(a), grid, a.trials, WalkConfig{}, a.seed, workers_from_env(), rounding);
  std::string csv = csv_line({"seed", "alpha", "n", "m", "trial", "quad_form", "fractional", "phases"});
  for (const auto& r : st.rows)
    csv += csv_line({std::to_string(r.seed), shortest_decimal(a.alpha), std::to_string(a.n), std::to_string(r.m),
                     std::to_string(r.trial), shortest_decimal(r.quad_form), std::to_string(r.fractional),
                     std::to_string(r.phases)});
  write_text(a.out, csv);
  std::cerr << "slope " << st.fit.slope << " +- " << st.fit.stderr_slope << "\n";
  return 0;
}

int cmd_jl(const SpeclabArgs& a) {
  const ToyModel t = load_teacher(a.ckpt, a.seed);
  Rng rng(derive_seed(a.seed, 2));
  const std::size_t len = 8;
  const auto batch = sample_sequences(t, (a.samples + len - 1) / len, len, rng);
  const auto gs = grad_stats(t, batch);
  const std::size_t rows = std::min(a.samples, gs.per_sample.size());
  Eigen::MatrixXd g(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < t.size(); ++j)
      g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = gs.per_sample[i][j];
  const auto eig = jl_spectrum(g, a.d, derive_seed(a.seed, 3));
  std::string csv = csv_line({"seed", "d", "samples", "k", "eigenvalue"});
  for (std::size_t k = 0; k < eig.size(); ++k)
    csv += csv_line({std::to_string(a.seed), std::to_string(a.d), std::to_string(rows), std::to_string(k + 1),
                     shortest_decimal(eig[k])});
  write_text(a.out, csv);
  std::cerr << "decay exponent " << decay_exponent(eig) << "\n";
  return 0;
}

struct QuantizeArgs {
  int bits = 2;
  std::string groupsize = "16";
  std::string rounder = "rtn";
  std::string incoherence = "off";
  std::uint64_t incoh_seed = 0;
  std::uint64_t seed = 0;
  std::string teacher;
  std::size_t heldout = 256;
  std::string out;
};

int cmd_quantize(const QuantizeArgs& a) {
  if (a.incoherence != "on" && a.incoherence != "off") throw InvalidConfig("--incoherence must be on or off");
  const ToyModel t = load_teacher(a.teacher, a.seed);
  RoundingConfig rc;
  rc.rounder = rounder_from_name(a.rounder);
  rc.bits = a.bits;
  rc.groupsize = parse_groupsize(a.groupsize);
  rc.discquant.seed = a.seed;
  rc.discquant.heldout_sequences = a.heldout;
  const auto heldout = heldout_batch(t, rc.discquant);
  nlohmann::json j;
  j["rounder"] = a.rounder;
  j["bits"] = a.bits;
  j["groupsize"] = a.groupsize;
  j["incoherence"] = a.incoherence;
  j["seed"] = a.seed;
  RoundingOutcome out;
  if (a.incoherence == "on") {
    const IncoherentSpace space(t, a.incoh_seed);
    const Reparam rp = space.reparam();
    out = round_model(t, rc, heldout, a.seed, &rp, space.segment_ends());
    j["incoh_seed"] = a.incoh_seed;
    auto before = nlohmann::json::array(), after = nlohmann::json::array();
    for (const auto& l : space.layers()) {
      before.push_back(l.max_abs_before);
      after.push_back(l.max_abs_after);
    }
    j["max_abs_before"] = before;
    j["max_abs_after"] = after;
    if (rc.groupsize != kPerTensor) j["warning"] = "groupsize combined with incoherence";
  } else {
    out = round_model(t, rc, heldout, a.seed);
  }
  j["heldout_kl"] = out.heldout_kl;
  j["bits_per_param"] = out.bits_per_param;
  j["fractional"] = out.fractional;
  j["params"] = hex_array(out.params);
  write_text(a.out, j.dump(2) + "\n");
  return 0;
}

struct DiscQuantArgs {
  int bits = 3;
  std::string groupsize = "16";
  DiscQuantConfig cfg;
  std::string teacher;
  std::string out;
  std::string trace;
};

int cmd_discquant(const DiscQuantArgs& a) {
  a.cfg.validate();
  const ToyModel t = load_teacher(a.teacher, a.cfg.seed);
  const auto grid =
      QuantGrid::block_scaling(t.params(), a.bits, parse_groupsize(a.groupsize), tensor_segment_ends(t.arch()));
  const auto rep = optimize(t, grid, a.cfg);
  auto j = rep.to_json(false);
  j["config"] = a.cfg.to_json();
  j["bits"] = a.bits;
  j["groupsize"] = a.groupsize;
  write_text(a.out, j.dump(2) + "\n");
  if (!a.trace.empty()) write_text(a.trace, rep.trace_csv());
  return 0;
}

int cmd_teacher(const Arch& arch, std::uint64_t seed, const std::string& out) {
  write_text(out, ToyModel::random(arch, seed).to_json().dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dq: rounding experiments on toy language models"};
  app.require_subcommand(1);
  int code = 0;

  std::string cfg_path, format = "both", out_dir;
  auto* run = app.add_subcommand("run", "run an experiment config; DQ_WORKERS sets the worker count");
  run->add_option("config", cfg_path, "experiment config (JSON)")->required();
  run->add_option("--format", format, "json, csv or both")->check(CLI::IsMember({"json", "csv", "both"}));
  run->add_option("--out-dir", out_dir, "overrides output_dir from the config");

  WalkArgs wa;
  auto* walk = app.add_subcommand("walk", "Lovett-Meka rounding of a random Gaussian instance");
  walk->add_option("--n", wa.n);
  walk->add_option("--m", wa.m);
  walk->add_option("--seed", wa.seed);
  walk->add_option("--delta", wa.delta, "step size");
  walk->add_option("--eps", wa.eps, "face tolerance");
  walk->add_option("--max-phases", wa.max_phases);
  walk->add_flag("--vertex", wa.vertex, "walk until a vertex instead of stopping at 16m fractional");
  walk->add_option("--out", wa.out, "result JSON (stdout if omitted)");

  SpeclabArgs sa;
  auto* speclab = app.add_subcommand("speclab", "synthetic spectrum studies");
  speclab->require_subcommand(1);
  auto add_common = [&](CLI::App* c) {
    c->add_option("--alpha", sa.alpha);
    c->add_option("--n", sa.n);
    c->add_option("--m-grid", sa.m_grid)->delimiter(',');
    c->add_option("--trials", sa.trials);
    c->add_option("--seed", sa.seed);
    c->add_option("--basis", sa.basis, "axis-aligned or random-orthogonal");
    c->add_option("--out", sa.out, "CSV output (stdout if omitted)");
  };
  auto* falpha = speclab->add_subcommand("falpha", "covariance estimator error versus m");
  add_common(falpha);
  auto* gen = speclab->add_subcommand("gen", "quadratic-form error of walk roundings versus m");
  add_common(gen);
  gen->add_option("--rounding", sa.rounding, "vertex or lm_round");
  auto* jl = speclab->add_subcommand("jl", "JL-projected gradient spectrum of a toy model");
  jl->add_option("--ckpt", sa.ckpt, "teacher checkpoint (random teacher from --seed if omitted)");
  jl->add_option("--d", sa.d);
  jl->add_option("--samples", sa.samples);
  jl->add_option("--seed", sa.seed);
  jl->add_option("--out", sa.out);

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "round a teacher with one rounder");
  quantize->add_option("--bits", qa.bits);
  quantize->add_option("--groupsize", qa.groupsize, "positive integer or per-tensor");
  quantize->add_option("--rounder", qa.rounder, "rtn, discquant or lmwalk");
  quantize->add_option("--incoherence", qa.incoherence, "on or off");
  quantize->add_option("--incoh-seed", qa.incoh_seed);
  quantize->add_option("--seed", qa.seed);
  quantize->add_option("--teacher", qa.teacher, "checkpoint (random teacher from --seed if omitted)");
  quantize->add_option("--heldout", qa.heldout, "held-out sequences");
  quantize->add_option("--out", qa.out);

  DiscQuantArgs da;
  auto* dq = app.add_subcommand("discquant", "DiscQuant rounding with its objective trace");
  dq->add_option("--bits", da.bits);
  dq->add_option("--groupsize", da.groupsize);
  dq->add_option("--lambda", da.cfg.lambda);
  dq->add_option("--lr", da.cfg.lr);
  dq->add_option("--iters", da.cfg.iterations);
  dq->add_option("--warmup", da.cfg.warmup);
  dq->add_option("--clamp", da.cfg.clamp);
  dq->add_option("--seed", da.cfg.seed);
  dq->add_option("--teacher", da.teacher);
  dq->add_option("--out", da.out);
  dq->add_option("--trace", da.trace, "objective trace CSV");

  Arch ta;
  std::uint64_t tseed = 0;
  std::string tout;
  auto* teacher = app.add_subcommand("teacher", "write a random teacher checkpoint");
  teacher->add_option("--seed", tseed);
  teacher->add_option("--vocab", ta.vocab);
  teacher->add_option("--context", ta.context);
  teacher->add_option("--hidden", ta.hidden);
  teacher->add_option("--layers", ta.layers);
  teacher->add_option("--out", tout);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*run) code = cmd_run(cfg_path, format, out_dir);
    if (*walk) code = cmd_walk(wa);
    if (*falpha) code = cmd_falpha(sa);
    if (*gen) code = cmd_gen(sa);
    if (*jl) code = cmd_jl(sa);
    if (*quantize) code = cmd_quantize(qa);
    if (*dq) code = cmd_discquant(da);
    if (*teacher) code = cmd_teacher(ta, tseed, tout);
  } catch (const InvalidConfig& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const InvalidInput& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return code;
}
