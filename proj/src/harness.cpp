#include "dq/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "dq/error.hpp"
#include "dq/hexfloat.hpp"
#include "dq/parallel.hpp"
#include "dq/rng.hpp"

namespace dq {

namespace {

using ojson = nlohmann::ordered_json;

constexpr std::uint64_t kTeacherStream = 0;
constexpr std::uint64_t kFirstOrderDataStream = 3;
constexpr std::uint64_t kFalphaStream = 100;
constexpr std::uint64_t kGeneralizationStream = 200;

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& block) {
  if (!j.is_object()) throw InvalidConfig(block + " must be an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw InvalidConfig("unknown key '" + item.key() + "' in " + block);
  }
}

const char* kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::Comparison:
      return "comparison";
    case ExperimentKind::FirstOrder:
      return "first_order";
    case ExperimentKind::Scaling:
      return "scaling";
  }
  return "?";
}

ExperimentKind kind_from_name(const std::string& s) {
  if (s == "comparison") return ExperimentKind::Comparison;
  if (s == "first_order") return ExperimentKind::FirstOrder;
  if (s == "scaling") return ExperimentKind::Scaling;
  throw InvalidConfig("unknown experiment kind: " + s);
}

ojson groupsize_json(std::size_t gs) { return gs == kPerTensor ? ojson("per-tensor") : ojson(gs); }

std::size_t groupsize_from(const nlohmann::json& j) {
  if (j.is_string()) {
    if (j.get<std::string>() != "per-tensor") throw InvalidConfig("groupsize must be a positive integer or per-tensor");
    return kPerTensor;
  }
  if (!j.is_number_unsigned() || j.get<std::size_t>() == 0)
    throw InvalidConfig("groupsize must be a positive integer or per-tensor");
  return j.get<std::size_t>();
}

void check_bits(const std::vector<int>& bits, const std::string& block) {
  if (bits.empty()) throw InvalidConfig(block + ": bits list is empty");
  for (int b : bits)
    if (b < 2 || b > 16) throw InvalidConfig(block + ": bits must lie in [2, 16]");
}

ojson spec_json(const SpectrumSpec& s) {
  const auto j = s.to_json();
  return ojson::parse(j.dump());
}

SpectrumSpec spec_from(const nlohmann::json& j, const std::string& block) {
  check_keys(j, {"n", "lambda1", "alpha", "basis", "basis_seed", "family"}, block);
  return SpectrumSpec::from_json(j);
}

std::optional<double> pearson_of(const std::vector<FirstOrderPair>& p) {
  if (p.size() < 2) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (const auto& q : p) {
    ma += q.linear_term;
    mb += q.delta_f;
  }
  ma /= static_cast<double>(p.size());
  mb /= static_cast<double>(p.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (const auto& q : p) {
    sab += (q.linear_term - ma) * (q.delta_f - mb);
    saa += (q.linear_term - ma) * (q.linear_term - ma);
    sbb += (q.delta_f - mb) * (q.delta_f - mb);
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

// OLS slope of delta_f on the linear term.
std::optional<double> slope_of(const std::vector<FirstOrderPair>& p) {
  if (p.size() < 2) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (const auto& q : p) {
    ma += q.linear_term;
    mb += q.delta_f;
  }
  ma /= static_cast<double>(p.size());
  mb /= static_cast<double>(p.size());
  double sab = 0.0, saa = 0.0;
  for (const auto& q : p) {
    sab += (q.linear_term - ma) * (q.delta_f - mb);
    saa += (q.linear_term - ma) * (q.linear_term - ma);
  }
  if (!(saa > 0.0)) return std::nullopt;
  return sab / saa;
}

ojson opt_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

void sort_rows(std::vector<ojson>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ojson& a, const ojson& b) {
    return a.at("seed").get<std::uint64_t>() < b.at("seed").get<std::uint64_t>();
  });
}

DiscQuantConfig trial_discquant(const ExperimentConfig& cfg, std::uint64_t seed) {
  DiscQuantConfig d = cfg.discquant;
  d.seed = seed;
  d.seq_len = cfg.data.seq_len;
  d.heldout_sequences = cfg.data.heldout_sequences;
  return d;
}

template <class Body>
Report run_trials(const ExperimentConfig& cfg, int workers, Body&& body) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Report r;
  r.id = cfg.id;
  r.kind = kind_name(cfg.kind);
  r.config = cfg.to_json();
  std::vector<std::vector<ojson>> per_trial(static_cast<std::size_t>(cfg.trials));
  parallel_for(per_trial.size(), workers, [&](std::size_t t) { per_trial[t] = body(static_cast<int>(t)); });
  for (auto& rows : per_trial)
    for (auto& row : rows) r.rows.push_back(std::move(row));
  sort_rows(r.rows);
  for (const auto& row : r.rows)
    if (row.contains("status") && row.at("status") != "ok") ++r.failures;
  r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::string csv_cell(const ojson& v) {
  if (v.is_null()) return "";
  if (v.is_number_float()) return shortest_decimal(v.get<double>());
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

double quantile(const std::vector<double>& sorted, double p) {
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (id.empty() || id == "." || id == "..") throw InvalidConfig("experiment id must name a file");
  for (char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.'))
      throw InvalidConfig("experiment id may only contain letters, digits, '_', '-' and '.'");
  if (trials < 1) throw InvalidConfig("trials must be >= 1");
  arch.validate();
  if (teacher.input_scale < 0 || teacher.output_scale < 0 || teacher.bias_scale < 0 || teacher.outlier_scale < 0)
    throw InvalidConfig("teacher scales must be >= 0");
  if (!(teacher.outlier_fraction >= 0.0 && teacher.outlier_fraction <= 1.0))
    throw InvalidConfig("teacher outlier fraction must lie in [0,1]");
  check_bits(grid.bits, "grid");
  if (data.heldout_sequences < 1 || data.seq_len < 1) throw InvalidConfig("data sizes must be positive");
  if (!(data.uniform_mix >= 0.0 && data.uniform_mix <= 1.0)) throw InvalidConfig("uniform mix must lie in [0,1]");
  if (methods.empty()) throw InvalidConfig("methods list is empty");
  trial_discquant(*this, 0).validate();
  walk.validate();
  if (walk_samples < 1) throw InvalidConfig("walk samples must be >= 1");
  if (std::count(methods.begin(), methods.end(), RounderKind::LmWalk) && 16 * walk_samples > arch.param_count())
    throw InvalidConfig("walk samples must not exceed n / 16");
  if (incoherence.modes.empty()) throw InvalidConfig("incoherence modes list is empty");
  if (kind == ExperimentKind::FirstOrder) check_first_order();
  if (kind == ExperimentKind::Scaling) check_scaling();
}

void ExperimentConfig::check_first_order() const {
  check_bits(first_order.bits, "first_order");
  if (first_order.sequences < 1) throw InvalidConfig("first_order sequences must be >= 1");
  if (first_order.methods.empty()) throw InvalidConfig("first_order methods list is empty");
  for (const auto& m : first_order.methods)
    if (m != "rtn" && m != "discquant" && m != "zero")
      throw InvalidConfig("first_order methods must be rtn, discquant or zero");
}

void ExperimentConfig::check_scaling() const {
  if (!scaling.run_falpha && !scaling.run_generalization)
    throw InvalidConfig("scaling experiment has no study");
  if (scaling.run_falpha) {
    if (scaling.alphas.empty()) throw InvalidConfig("falpha alphas list is empty");
    for (double a : scaling.alphas) {
      SpectrumSpec s = scaling.falpha_spec;
      s.alpha = a;
      s.validate();
    }
    check_falpha_args(scaling.falpha_m_grid, scaling.falpha_trials);
  }
  if (scaling.run_generalization) check_generalization_args(scaling.gen_spec, scaling.gen_m_grid, scaling.gen_trials);
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  ojson j;
  j["id"] = id;
  j["kind"] = kind_name(kind);
  j["seed"] = seed;
  j["trials"] = trials;
  j["output_dir"] = output_dir;
  j["arch"] = {{"vocab", arch.vocab}, {"context", arch.context}, {"hidden", arch.hidden}, {"layers", arch.layers}};
  j["teacher"] = {{"input_scale", teacher.input_scale},
                  {"output_scale", teacher.output_scale},
                  {"bias_scale", teacher.bias_scale},
                  {"outlier_fraction", teacher.outlier_fraction},
                  {"outlier_scale", teacher.outlier_scale}};
  j["grid"] = {{"bits", grid.bits}, {"groupsize", groupsize_json(grid.groupsize)}};
  j["data"] = {{"heldout_sequences", data.heldout_sequences},
               {"seq_len", data.seq_len},
               {"uniform_mix", data.uniform_mix}};
  auto ms = ojson::array();
  for (auto m : methods) ms.push_back(rounder_name(m));
  j["methods"] = ms;
  auto dqj = ojson::parse(discquant.to_json().dump());
  dqj.erase("seed");
  dqj.erase("seq_len");
  dqj.erase("heldout_sequences");
  j["discquant"] = dqj;
  j["walk"] = {{"step", walk.step},
               {"face_tol", walk.face_tol},
               {"steps_per_phase", walk.steps_per_phase},
               {"max_phases", walk.max_phases},
               {"samples", walk_samples}};
  auto modes = ojson::array();
  for (bool b : incoherence.modes) modes.push_back(b ? "on" : "off");
  j["incoherence"] = {{"modes", modes}, {"seed", incoherence.seed}};
  j["first_order"] = {
      {"bits", first_order.bits}, {"sequences", first_order.sequences}, {"methods", first_order.methods}};
  ojson sc;
  if (scaling.run_falpha)
    sc["falpha"] = {{"spec", spec_json(scaling.falpha_spec)},
                    {"alphas", scaling.alphas},
                    {"m_grid", scaling.falpha_m_grid},
                    {"trials", scaling.falpha_trials}};
  else
    sc["falpha"] = nullptr;
  if (scaling.run_generalization)
    sc["generalization"] = {{"spec", spec_json(scaling.gen_spec)},
                            {"m_grid", scaling.gen_m_grid},
                            {"trials", scaling.gen_trials},
                            {"rounding", scaling.gen_rounding == GenRounding::Vertex ? "vertex" : "lm_round"}};
  else
    sc["generalization"] = nullptr;
  j["scaling"] = sc;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  check_keys(j,
             {"id", "kind", "seed", "trials", "output_dir", "arch", "teacher", "grid", "data", "methods", "discquant",
              "walk", "incoherence", "first_order", "scaling"},
             "config");
  ExperimentConfig c;
  try {
    c.id = j.value("id", c.id);
    if (j.contains("kind")) c.kind = kind_from_name(j.at("kind").get<std::string>());
    c.seed = j.value("seed", c.seed);
    c.trials = j.value("trials", c.trials);
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("arch")) {
      const auto& a = j.at("arch");
      check_keys(a, {"vocab", "context", "hidden", "layers"}, "arch");
      c.arch.vocab = a.value("vocab", c.arch.vocab);
      c.arch.context = a.value("context", c.arch.context);
      c.arch.hidden = a.value("hidden", c.arch.hidden);
      c.arch.layers = a.value("layers", c.arch.layers);
    }
    if (j.contains("teacher")) {
      const auto& t = j.at("teacher");
      check_keys(t, {"input_scale", "output_scale", "bias_scale", "outlier_fraction", "outlier_scale"}, "teacher");
      c.teacher.input_scale = t.value("input_scale", c.teacher.input_scale);
      c.teacher.output_scale = t.value("output_scale", c.teacher.output_scale);
      c.teacher.bias_scale = t.value("bias_scale", c.teacher.bias_scale);
      c.teacher.outlier_fraction = t.value("outlier_fraction", c.teacher.outlier_fraction);
      c.teacher.outlier_scale = t.value("outlier_scale", c.teacher.outlier_scale);
    }
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      check_keys(g, {"bits", "groupsize"}, "grid");
      c.grid.bits = g.value("bits", c.grid.bits);
      if (g.contains("groupsize")) c.grid.groupsize = groupsize_from(g.at("groupsize"));
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, {"heldout_sequences", "seq_len", "uniform_mix"}, "data");
      c.data.heldout_sequences = d.value("heldout_sequences", c.data.heldout_sequences);
      c.data.seq_len = d.value("seq_len", c.data.seq_len);
      c.data.uniform_mix = d.value("uniform_mix", c.data.uniform_mix);
    }
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(rounder_from_name(m.get<std::string>()));
    }
    if (j.contains("discquant")) {
      const auto& d = j.at("discquant");
      check_keys(d,
                 {"lambda", "lr", "batch_size", "iterations", "warmup", "clamp", "weight_decay", "tau", "lambda_on",
                  "init"},
                 "discquant");
      auto merged = nlohmann::json(c.discquant.to_json());
      for (const auto& item : d.items()) merged[item.key()] = item.value();
      c.discquant = DiscQuantConfig::from_json(merged);
    }
    if (j.contains("walk")) {
      const auto& w = j.at("walk");
      check_keys(w, {"step", "face_tol", "steps_per_phase", "max_phases", "samples"}, "walk");
      c.walk.step = w.value("step", c.walk.step);
      c.walk.face_tol = w.value("face_tol", c.walk.face_tol);
      c.walk.steps_per_phase = w.value("steps_per_phase", c.walk.steps_per_phase);
      c.walk.max_phases = w.value("max_phases", c.walk.max_phases);
      c.walk_samples = w.value("samples", c.walk_samples);
    }
    if (j.contains("incoherence")) {
      const auto& inc = j.at("incoherence");
      check_keys(inc, {"modes", "seed"}, "incoherence");
      if (inc.contains("modes")) {
        c.incoherence.modes.clear();
        for (const auto& m : inc.at("modes")) {
          const auto s = m.get<std::string>();
          if (s != "on" && s != "off") throw InvalidConfig("incoherence modes must be on or off");
          c.incoherence.modes.push_back(s == "on");
        }
      }
      c.incoherence.seed = inc.value("seed", c.incoherence.seed);
    }
    if (j.contains("first_order")) {
      const auto& f = j.at("first_order");
      check_keys(f, {"bits", "sequences", "methods"}, "first_order");
      c.first_order.bits = f.value("bits", c.first_order.bits);
      c.first_order.sequences = f.value("sequences", c.first_order.sequences);
      c.first_order.methods = f.value("methods", c.first_order.methods);
    }
    if (j.contains("scaling")) {
      const auto& s = j.at("scaling");
      check_keys(s, {"falpha", "generalization"}, "scaling");
      if (s.contains("falpha")) {
        const auto& f = s.at("falpha");
        c.scaling.run_falpha = !f.is_null();
        if (!f.is_null()) {
          check_keys(f, {"spec", "alphas", "m_grid", "trials"}, "scaling.falpha");
          if (f.contains("spec")) c.scaling.falpha_spec = spec_from(f.at("spec"), "scaling.falpha.spec");
          c.scaling.alphas = f.value("alphas", c.scaling.alphas);
          c.scaling.falpha_m_grid = f.value("m_grid", c.scaling.falpha_m_grid);
          c.scaling.falpha_trials = f.value("trials", c.scaling.falpha_trials);
        }
      }
      if (s.contains("generalization")) {
        const auto& g = s.at("generalization");
        c.scaling.run_generalization = !g.is_null();
        if (!g.is_null()) {
          check_keys(g, {"spec", "m_grid", "trials", "rounding"}, "scaling.generalization");
          if (g.contains("spec")) c.scaling.gen_spec = spec_from(g.at("spec"), "scaling.generalization.spec");
          c.scaling.gen_m_grid = g.value("m_grid", c.scaling.gen_m_grid);
          c.scaling.gen_trials = g.value("trials", c.scaling.gen_trials);
          const auto r = g.value("rounding", std::string("vertex"));
          if (r == "vertex")
            c.scaling.gen_rounding = GenRounding::Vertex;
          else if (r == "lm_round")
            c.scaling.gen_rounding = GenRounding::LmRound;
          else
            throw InvalidConfig("generalization rounding must be vertex or lm_round");
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig(std::string("malformed config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidConfig("config " + path + " is not valid: " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------

nlohmann::ordered_json Report::to_json() const {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  j["artifact_version"] = kArtifactVersion;
  j["id"] = id;
  j["kind"] = kind;
  j["config"] = config;
  j["rows"] = rows;
  j["summary"] = summary;
  j["failures"] = failures;
  j["wall_clock_seconds"] = wall_clock_seconds;
  return j;
}

Report Report::from_json(const nlohmann::ordered_json& o) {
  if (!o.is_object() || !o.contains("schema_version") || o.at("schema_version") != kSchemaVersion)
    throw InvalidInput("unsupported report schema version");
  Report r;
  r.id = o.at("id").get<std::string>();
  r.kind = o.at("kind").get<std::string>();
  r.config = o.at("config");
  for (const auto& row : o.at("rows")) r.rows.push_back(row);
  r.summary = o.at("summary");
  r.failures = o.at("failures").get<int>();
  r.wall_clock_seconds = o.at("wall_clock_seconds").get<double>();
  return r;
}

std::uint64_t trial_seed(const ExperimentConfig& cfg, int trial) {
  return derive_seed(cfg.seed, static_cast<std::uint64_t>(trial));
}

ToyModel trial_teacher(const ExperimentConfig& cfg, std::uint64_t seed) {
  return ToyModel::random(cfg.arch, derive_seed(seed, kTeacherStream), cfg.teacher);
}

Report run_comparison(const ExperimentConfig& cfg, int workers) {
  Report r = run_trials(cfg, workers, [&](int t) {
    const std::uint64_t s = trial_seed(cfg, t);
    const ToyModel teacher = trial_teacher(cfg, s);
    const DiscQuantConfig dc = trial_discquant(cfg, s);
    const SampleBatch heldout = heldout_batch(teacher, dc);
    std::vector<ojson> rows;
    for (bool inc : cfg.incoherence.modes) {
      std::optional<IncoherentSpace> space;
      std::optional<Reparam> rp;
      if (inc) {
        space.emplace(teacher, derive_seed(cfg.incoherence.seed, static_cast<std::uint64_t>(t)));
        rp = space->reparam();
      }
      for (int bits : cfg.grid.bits)
        for (RounderKind method : cfg.methods) {
          ojson row;
          row["seed"] = s;
          row["trial"] = t;
          row["method"] = rounder_name(method);
          row["bits"] = bits;
          row["groupsize"] = groupsize_json(cfg.grid.groupsize);
          row["incoherence"] = inc ? "on" : "off";
          RoundingConfig rc;
          rc.rounder = method;
          rc.bits = bits;
          rc.groupsize = cfg.grid.groupsize;
          rc.discquant = dc;
          rc.walk = cfg.walk;
          rc.walk_samples = cfg.walk_samples;
          rc.uniform_mix = cfg.data.uniform_mix;
          try {
            const auto out = inc ? round_model(teacher, rc, heldout, s, &*rp, space->segment_ends())
                                 : round_model(teacher, rc, heldout, s);
            row["heldout_kl"] = out.heldout_kl;
            row["fractional"] = out.fractional;
            row["bits_per_param"] = out.bits_per_param;
            row["status"] = "ok";
          } catch (const std::exception& e) {
            row["heldout_kl"] = nullptr;
            row["fractional"] = nullptr;
            row["bits_per_param"] = nullptr;
            row["status"] = std::string("error: ") + e.what();
          }
          rows.push_back(std::move(row));
        }
    }
    return rows;
  });
  r.summary["heldout_kl"] = summarize(r.rows, {"method", "bits", "incoherence"}, "heldout_kl");
  return r;
}

Report run_first_order(const ExperimentConfig& cfg, int workers) {
  std::vector<std::vector<ojson>> fits(static_cast<std::size_t>(cfg.trials));
  Report r = run_trials(cfg, workers, [&](int t) {
    const std::uint64_t s = trial_seed(cfg, t);
    const ToyModel teacher = trial_teacher(cfg, s);
    Rng rng(derive_seed(s, kFirstOrderDataStream));
    const SampleBatch batch = sample_sequences(teacher, cfg.first_order.sequences, cfg.data.seq_len, rng);
    const auto ends = tensor_segment_ends(cfg.arch);
    std::vector<ojson> rows;
    for (int bits : cfg.first_order.bits) {
      const QuantGrid grid = QuantGrid::block_scaling(teacher.params(), bits, cfg.grid.groupsize, ends);
      for (const auto& method : cfg.first_order.methods) {
        std::vector<double> rounding;
        if (method == "rtn")
          rounding = rtn(teacher.params(), grid);
        else if (method == "discquant")
          rounding = optimize(teacher, grid, trial_discquant(cfg, s)).w_hat;
        else
          rounding = teacher.params();
        const auto pairs = first_order_study(teacher, grid, rounding, batch);
        for (std::size_t i = 0; i < pairs.size(); ++i) {
          ojson row;
          row["seed"] = s;
          row["trial"] = t;
          row["bits"] = bits;
          row["method"] = method;
          row["sample"] = i;
          row["delta_f"] = pairs[i].delta_f;
          row["linear_term"] = pairs[i].linear_term;
          rows.push_back(std::move(row));
        }
        fits[static_cast<std::size_t>(t)].push_back({{"seed", s},
                                                     {"trial", t},
                                                     {"bits", bits},
                                                     {"method", method},
                                                     {"pearson", opt_json(pearson_of(pairs))},
                                                     {"slope", opt_json(slope_of(pairs))}});
      }
    }
    return rows;
  });
  std::vector<ojson> per_trial;
  for (auto& f : fits)
    for (auto& row : f) per_trial.push_back(std::move(row));
  sort_rows(per_trial);
  r.summary["per_trial"] = per_trial;
  r.summary["pearson"] = summarize(per_trial, {"method", "bits"}, "pearson");
  r.summary["slope"] = summarize(per_trial, {"method", "bits"}, "slope");
  return r;
}

Report run_scaling(const ExperimentConfig& cfg, int workers) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Report r;
  r.id = cfg.id;
  r.kind = kind_name(cfg.kind);
  r.config = cfg.to_json();
  auto slopes = ojson::array();
  if (cfg.scaling.run_falpha) {
    for (std::size_t a = 0; a < cfg.scaling.alphas.size(); ++a) {
      SpectrumSpec spec = cfg.scaling.falpha_spec;
      spec.alpha = cfg.scaling.alphas[a];
      const auto st = falpha_scaling_study(spec, cfg.scaling.falpha_m_grid, cfg.scaling.falpha_trials,
                                           derive_seed(cfg.seed, kFalphaStream + a), workers);
      for (const auto& row : st.rows)
        r.rows.push_back({{"seed", row.seed},
                          {"study", "falpha"},
                          {"alpha", spec.alpha},
                          {"m", row.m},
                          {"trial", row.trial},
                          {"value", row.error},
                          {"fractional", nullptr}});
      slopes.push_back({{"study", "falpha"},
                        {"alpha", spec.alpha},
                        {"slope", st.fit.slope},
                        {"stderr", st.fit.stderr_slope},
                        {"m_grid", st.m_grid},
                        {"mean", st.mean_error}});
    }
  }
  if (cfg.scaling.run_generalization) {
    const auto& spec = cfg.scaling.gen_spec;
    const auto st = generalization_study(spec, cfg.scaling.gen_m_grid, cfg.scaling.gen_trials, cfg.walk,
                                         derive_seed(cfg.seed, kGeneralizationStream), workers,
                                         cfg.scaling.gen_rounding);
    for (const auto& row : st.rows)
      r.rows.push_back({{"seed", row.seed},
                        {"study", "generalization"},
                        {"alpha", spec.alpha},
                        {"m", row.m},
                        {"trial", row.trial},
                        {"value", row.quad_form},
                        {"fractional", row.fractional}});
    std::vector<double> ms(st.m_grid.begin(), st.m_grid.end());
    slopes.push_back({{"study", "generalization"},
                      {"alpha", spec.alpha},
                      {"slope", st.fit.slope},
                      {"stderr", st.fit.stderr_slope},
                      {"m_grid", st.m_grid},
                      {"mean", st.mean_quad},
                      {"median", st.median_quad},
                      {"spearman_median", spearman(ms, st.median_quad)}});
  }
  sort_rows(r.rows);
  r.summary["fits"] = slopes;
  r.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

Report run_experiment(const ExperimentConfig& cfg, int workers) {
  switch (cfg.kind) {
    case ExperimentKind::Comparison:
      return run_comparison(cfg, workers);
    case ExperimentKind::FirstOrder:
      return run_first_order(cfg, workers);
    case ExperimentKind::Scaling:
      return run_scaling(cfg, workers);
  }
  throw InvalidConfig("unknown experiment kind");
}

// ---------------------------------------------------------------------------

Stats describe(std::vector<double> v) {
  Stats s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.median = quantile(v, 0.5);
  s.q1 = quantile(v, 0.25);
  s.q3 = quantile(v, 0.75);
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stderr_mean = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  }
  return s;
}

nlohmann::ordered_json summarize(const std::vector<nlohmann::ordered_json>& rows,
                                 const std::vector<std::string>& keys, const std::string& metric) {
  std::map<std::string, std::pair<ojson, std::vector<double>>> groups;
  for (const auto& row : rows) {
    if (row.contains("status") && row.at("status") != "ok") continue;
    ojson key = ojson::object();
    for (const auto& k : keys) key[k] = row.at(k);
    auto& g = groups[key.dump()];
    g.first = key;
    if (row.contains(metric) && row.at(metric).is_number()) g.second.push_back(row.at(metric).get<double>());
  }
  auto out = ojson::array();
  for (auto& [_, g] : groups) {
    ojson e = g.first;
    e["metric"] = metric;
    const Stats s = describe(g.second);
    e["count"] = s.count;
    if (s.count == 0) {
      for (const char* f : {"median", "q1", "q3", "mean", "stderr"}) e[f] = nullptr;
    } else {
      e["median"] = s.median;
      e["q1"] = s.q1;
      e["q3"] = s.q3;
      e["mean"] = s.mean;
      e["stderr"] = s.stderr_mean;
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string emit_json(const Report& r) { return r.to_json().dump(2) + "\n"; }

std::string emit_csv(const Report& r) {
  std::vector<std::string> cols;
  std::set<std::string> seen;
  for (const auto& row : r.rows)
    for (const auto& item : row.items())
      if (seen.insert(item.key()).second) cols.push_back(item.key());
  std::ostringstream os;
  os << "schema_version";
  for (const auto& c : cols) os << ',' << c;
  os << '\n';
  for (const auto& row : r.rows) {
    os << kSchemaVersion;
    for (const auto& c : cols) os << ',' << (row.contains(c) ? csv_cell(row.at(c)) : std::string());
    os << '\n';
  }
  return os.str();
}

std::string emit(const Report& r, const std::string& format, const std::string& dir) {
  std::string text;
  if (format == "json")
    text = emit_json(r);
  else if (format == "csv")
    text = emit_csv(r);
  else
    throw InvalidConfig("report format must be json or csv");
  const std::string path = (std::filesystem::path(dir) / (r.id + "." + format)).string();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path);
  return path;
}

int workers_from_env() {
  const char* v = std::getenv("DQ_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) throw InvalidConfig("DQ_WORKERS must be an integer in [1, 1024]");
  return static_cast<int>(n);
}

}  // namespace dq
