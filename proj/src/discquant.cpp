#include "dq/discquant.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dq/error.hpp"
#include "dq/hexfloat.hpp"
#include "dq/optim.hpp"
#include "dq/rng.hpp"

namespace dq {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kHeldoutStream = 2;
constexpr std::uint64_t kBatchStreamBase = 1u << 20;

}  // namespace

void DiscQuantConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidConfig("lambda must be finite and >= 0");
  if (!(lr > 0.0)) throw InvalidConfig("learning rate must be positive");
  if (batch_size < 1) throw InvalidConfig("batch size must be >= 1");
  if (iterations < 1) throw InvalidConfig("iterations must be >= 1");
  if (warmup < 0 || warmup > iterations) throw InvalidConfig("warmup must lie in [0, iterations]");
  if (!(clamp > 0.0)) throw InvalidConfig("clamp must be positive");
  if (!(tau > 0.0 && tau < 0.5)) throw InvalidConfig("tau must lie in (0, 1/2)");
  if (weight_decay < 0.0) throw InvalidConfig("weight decay must be >= 0");
  if (seq_len < 1 || heldout_sequences < 1) throw InvalidConfig("sequence sizes must be positive");
}

nlohmann::json DiscQuantConfig::to_json() const {
  return {{"lambda", lambda},
          {"lr", lr},
          {"batch_size", batch_size},
          {"iterations", iterations},
          {"warmup", warmup},
          {"clamp", clamp},
          {"weight_decay", weight_decay},
          {"tau", tau},
          {"lambda_on", lambda_on == LambdaOn::Linear ? "linear" : "kl"},
          {"init", init == InitMode::UniformRandom ? "uniform-random" : "original-weights"},
          {"seq_len", seq_len},
          {"heldout_sequences", heldout_sequences},
          {"seed", seed}};
}

DiscQuantConfig DiscQuantConfig::from_json(const nlohmann::json& j) {
  DiscQuantConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.warmup = j.value("warmup", c.warmup);
  c.clamp = j.value("clamp", c.clamp);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.tau = j.value("tau", c.tau);
  const auto on = j.value("lambda_on", std::string(c.lambda_on == LambdaOn::Linear ? "linear" : "kl"));
  if (on == "linear")
    c.lambda_on = LambdaOn::Linear;
  else if (on == "kl")
    c.lambda_on = LambdaOn::Kl;
  else
    throw InvalidConfig("lambda_on must be linear or kl");
  const auto init = j.value("init", std::string("uniform-random"));
  if (init == "uniform-random")
    c.init = InitMode::UniformRandom;
  else if (init == "original-weights")
    c.init = InitMode::OriginalWeights;
  else
    throw InvalidConfig("init must be uniform-random or original-weights");
  c.seq_len = j.value("seq_len", c.seq_len);
  c.heldout_sequences = j.value("heldout_sequences", c.heldout_sequences);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json RoundingReport::to_json(bool with_trace) const {
  nlohmann::json j;
  j["x"] = hex_array(x);
  j["fractional_fraction"] = fractional_fraction;
  j["fractional_fraction_warmup"] = fractional_fraction_warmup;
  j["w_hat"] = hex_array(w_hat);
  j["heldout_kl"] = heldout_kl;
  if (with_trace) {
    auto t = nlohmann::json::array();
    for (const auto& s : trace) t.push_back({s.linear, s.kl});
    j["trace"] = t;
  }
  return j;
}

std::string RoundingReport::trace_csv() const {
  std::ostringstream os;
  os << "step,linear_term,kl_term,total\n";
  for (std::size_t k = 0; k < trace.size(); ++k)
    os << k << ',' << shortest_decimal(trace[k].linear) << ',' << shortest_decimal(trace[k].kl) << ','
       << shortest_decimal(trace[k].total()) << '\n';
  return os.str();
}

std::vector<double> cstar(std::span<const double> y) {
  std::vector<double> c(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    if (!(y[j] >= 0.0 && y[j] <= 1.0)) throw InvalidInput("y must lie in [0,1]");
    c[j] = 1.0 - 2.0 * y[j];
  }
  return c;
}

std::vector<double> init_x(InitMode mode, const Bracket& bracket, std::span<const double> w, std::uint64_t seed) {
  if (mode == InitMode::OriginalWeights) return interp_position(w, bracket);
  Rng rng(seed);
  std::vector<double> x(bracket.size());
  for (auto& v : x) v = rng.uniform();
  return x;
}

std::vector<double> finalize(std::span<const double> x, const Bracket& bracket, double tau) {
  if (x.size() != bracket.size()) throw InvalidInput("x and bracket differ in length");
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (!(x[j] >= 0.0 && x[j] <= 1.0)) throw InvalidInput("x must lie in [0,1]");
    if (x[j] <= tau)
      out[j] = bracket.down[j];
    else if (x[j] >= 1.0 - tau)
      out[j] = bracket.up[j];
    else
      out[j] = nearest_of_pair(bracket.down[j] * (1.0 - x[j]) + bracket.up[j] * x[j], bracket.down[j], bracket.up[j]);
  }
  return out;
}

double fractional_fraction(std::span<const double> x, double tau) {
  if (x.empty()) return 0.0;
  std::size_t c = 0;
  for (double v : x)
    if (std::min(v, 1.0 - v) > tau) ++c;
  return static_cast<double>(c) / static_cast<double>(x.size());
}

SampleBatch heldout_batch(const ToyModel& teacher, const DiscQuantConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, kHeldoutStream));
  return sample_sequences(teacher, cfg.heldout_sequences, cfg.seq_len, rng);
}

double heldout_kl(const ToyModel& teacher, std::span<const double> w_hat, const SampleBatch& heldout) {
  const auto student = teacher.with_params(std::vector<double>(w_hat.begin(), w_hat.end()));
  return kl_term(teacher_targets(teacher, heldout), student, false).value;
}

RoundingReport optimize(const ToyModel& teacher, const QuantGrid& grid, const BatchStream& data,
                        const SampleBatch& heldout, const DiscQuantConfig& cfg, const StepObserver& observer,
                        const Reparam* reparam) {
  cfg.validate();
  const auto& w = reparam ? reparam->latent : teacher.params();
  const auto to_model = [&](std::vector<double> v) { return reparam ? reparam->to_model(v) : v; };
  for (double v : w)
    if (!std::isfinite(v)) throw InvalidInput("teacher parameters must be finite");
  const Bracket bracket = bracket_of(w, grid);
  const auto y = interp_position(w, bracket);
  const auto c = cstar(y);
  const std::size_t n = w.size();

  RoundingReport rep;
  rep.x = init_x(cfg.init, bracket, w, derive_seed(cfg.seed, kInitStream));
  rep.trace.reserve(static_cast<std::size_t>(cfg.iterations));
  AdamW opt(n, {0.9, 0.999, 1e-8, cfg.weight_decay});

  const double lin_weight = cfg.lambda_on == LambdaOn::Linear ? cfg.lambda : 1.0;
  const double kl_weight = cfg.lambda_on == LambdaOn::Kl ? cfg.lambda : 1.0;
  std::vector<double> grad(n);
  for (int step = 0; step < cfg.iterations; ++step) {
    const SampleBatch batch = data(step);
    if (batch.sequences.empty()) throw InvalidInput("data stream produced an empty batch");
    const auto targets = teacher_targets(teacher, batch);
    const auto student = teacher.with_params(to_model(interp_weights(rep.x, bracket)));
    KlResult kl = kl_term(targets, student);
    if (reparam) kl.grad = reparam->pullback(kl.grad);

    double lin = 0.0;
    for (std::size_t j = 0; j < n; ++j) lin += c[j] * rep.x[j];
    const ObjectiveSample obj{lin_weight * lin, kl_weight * kl.value};
    rep.trace.push_back(obj);
    if (!std::isfinite(obj.total())) throw NumericError("non-finite objective at step " + std::to_string(step));

    // Chain rule through w^x: dw/dx_j = delta_j. Only the KL part is clipped.
    for (std::size_t j = 0; j < n; ++j) {
      const double g_kl = std::clamp(kl_weight * kl.grad[j] * bracket.delta[j], -cfg.clamp, cfg.clamp);
      grad[j] = lin_weight * c[j] + g_kl;
    }
    opt.step(rep.x, grad, warmup_cosine_lr(cfg.lr, step, cfg.warmup, cfg.iterations));
    for (double& v : rep.x) v = std::clamp(v, 0.0, 1.0);
    if (observer) observer(step, rep.x);

    if (step + 1 == cfg.warmup) rep.fractional_fraction_warmup = fractional_fraction(rep.x, cfg.tau);
  }
  if (cfg.warmup == 0) rep.fractional_fraction_warmup = 1.0;

  rep.fractional_fraction = fractional_fraction(rep.x, cfg.tau);
  rep.w_hat = finalize(rep.x, bracket, cfg.tau);
  rep.heldout_kl = heldout_kl(teacher, to_model(rep.w_hat), heldout);
  return rep;
}

BatchStream default_batch_stream(const ToyModel& teacher, const DiscQuantConfig& cfg, double uniform_mix) {
  if (!(uniform_mix >= 0.0 && uniform_mix <= 1.0)) throw InvalidConfig("uniform mix must lie in [0,1]");
  const auto count = static_cast<std::size_t>(cfg.batch_size);
  const auto n_uniform = static_cast<std::size_t>(std::lround(uniform_mix * static_cast<double>(count)));
  return [&teacher, seed = cfg.seed, count, n_uniform, len = cfg.seq_len](int step) {
    Rng rng(derive_seed(seed, kBatchStreamBase + static_cast<std::uint64_t>(step)));
    SampleBatch b = sample_sequences(teacher, count - n_uniform, len, rng);
    const auto vocab = static_cast<std::uint64_t>(teacher.arch().vocab);
    for (std::size_t k = 0; k < n_uniform; ++k) {
      Sequence seq(len);
      for (auto& t : seq) t = static_cast<int>(rng.below(vocab));
      b.sequences.push_back(std::move(seq));
    }
    return b;
  };
}

RoundingReport optimize(const ToyModel& teacher, const QuantGrid& grid, const DiscQuantConfig& cfg) {
  cfg.validate();
  return optimize(teacher, grid, default_batch_stream(teacher, cfg), heldout_batch(teacher, cfg), cfg);
}

}  // namespace dq
