#pragma once

// Rounding by projected stochastic gradient descent on
//
//     lambda * <c*, x> + KL(teacher || student(w^x)),   x in [0,1]^n,
//
// where c* = 1 - 2y steers x toward the vertex nearest the original weights.
// After the last step, coordinates still fractional are rounded to the
// nearer bracket endpoint.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dq/grid.hpp"
#include "dq/toymodel.hpp"

namespace dq {

enum class LambdaOn { Linear, Kl };
enum class InitMode { UniformRandom, OriginalWeights };

struct DiscQuantConfig {
  double lambda = 200.0;
  double lr = 0.1;
  int batch_size = 4;
  int iterations = 1024;
  int warmup = 128;
  double clamp = 0.5;
  double weight_decay = 0.0;
  double tau = 1e-3;
  LambdaOn lambda_on = LambdaOn::Kl;
  InitMode init = InitMode::UniformRandom;
  std::size_t seq_len = 8;
  std::size_t heldout_sequences = 256;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static DiscQuantConfig from_json(const nlohmann::json& j);
};

struct ObjectiveSample {
  double linear = 0.0;  // lambda-weighted (or plain) <c*, x>
  double kl = 0.0;      // KL term as it enters the objective
  double total() const { return linear + kl; }
};

struct RoundingReport {
  std::vector<double> x;
  double fractional_fraction = 0.0;           // min(x, 1 - x) > tau
  double fractional_fraction_warmup = 0.0;    // same, at the end of warmup
  std::vector<ObjectiveSample> trace;
  std::vector<double> w_hat;
  double heldout_kl = 0.0;

  nlohmann::json to_json(bool with_trace = false) const;
  std::string trace_csv() const;
};

/// Supplies a fresh batch of training sequences for step `step`.
using BatchStream = std::function<SampleBatch(int step)>;

std::vector<double> cstar(std::span<const double> y);

std::vector<double> init_x(InitMode mode, const Bracket& bracket, std::span<const double> w, std::uint64_t seed);

/// x_j <= tau -> w_down, x_j >= 1 - tau -> w_up, otherwise the bracket
/// endpoint nearest to w^x_j (grid tie rule).
std::vector<double> finalize(std::span<const double> x, const Bracket& bracket, double tau);

double fractional_fraction(std::span<const double> x, double tau);

/// A linear change of variables: the rounding runs on `latent`, and the
/// model sees to_model(latent). `pullback` maps a model-space gradient to
/// the latent space (the adjoint of to_model).
struct Reparam {
  std::vector<double> latent;
  std::function<std::vector<double>(std::span<const double>)> to_model;
  std::function<std::vector<double>(std::span<const double>)> pullback;
};

/// Called after every projected step with the step index and the iterate.
using StepObserver = std::function<void(int step, std::span<const double> x)>;

/// Runs the optimizer with an explicit data stream and held-out batch. With
/// a reparam, `grid` covers the latent vector and w_hat is a latent point.
RoundingReport optimize(const ToyModel& teacher, const QuantGrid& grid, const BatchStream& data,
                        const SampleBatch& heldout, const DiscQuantConfig& cfg, const StepObserver& observer = {},
                        const Reparam* reparam = nullptr);

/// Default stream: fresh teacher-sampled batches every step, and a fixed
/// held-out batch, all derived from cfg.seed.
RoundingReport optimize(const ToyModel& teacher, const QuantGrid& grid, const DiscQuantConfig& cfg);

/// Fresh teacher-sampled batches, one per step, derived from cfg.seed. With
/// uniform_mix > 0, that fraction of each batch (rounded) is replaced by
/// sequences of uniform random tokens.
BatchStream default_batch_stream(const ToyModel& teacher, const DiscQuantConfig& cfg, double uniform_mix = 0.0);

/// Held-out batch used by optimize() for a given seed.
SampleBatch heldout_batch(const ToyModel& teacher, const DiscQuantConfig& cfg);

/// Mean KL from the teacher to the model with parameters w_hat.
double heldout_kl(const ToyModel& teacher, std::span<const double> w_hat, const SampleBatch& heldout);

}  // namespace dq
