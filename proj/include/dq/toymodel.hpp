#pragma once

// Desk-scale next-token model used as teacher and student. The network reads
// the last `context` tokens as concatenated one-hot vectors (with a reserved
// padding token), applies one or two tanh layers and a softmax over the
// vocabulary. Gradients are computed by a hand-written reverse pass; the
// directional derivative of the logits (needed for Fisher quadratic forms)
// by a forward tangent pass.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dq/grid.hpp"
#include "dq/rng.hpp"

namespace dq {

struct Arch {
  int vocab = 16;
  int context = 4;
  int hidden = 32;
  int layers = 1;  // number of tanh layers, 1 or 2

  int pad_token() const { return vocab; }
  int input_dim() const { return context * (vocab + 1); }
  std::size_t param_count() const;
  void validate() const;

  friend bool operator==(const Arch&, const Arch&) = default;
};

/// A named contiguous slice of the flat parameter vector. Matrices are
/// row-major with `rows` x `cols`; biases have cols == 1.
struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool is_matrix() const { return cols > 1; }
};

std::vector<ParamSlice> param_layout(const Arch& arch);

/// Exclusive end offset of every tensor, for per-tensor grid segments.
std::vector<std::size_t> tensor_segment_ends(const Arch& arch);

using Sequence = std::vector<int>;

struct Sample {
  Sequence prefix;
  int target = 0;
};

/// Sequences of tokens. Every position i of a sequence is a prediction
/// problem: predict z_i from z_{<i}. `positions`, when nonempty, restricts
/// the positions used for sequence k to positions[k].
struct SampleBatch {
  std::vector<Sequence> sequences;
  std::vector<std::vector<std::size_t>> positions;

  void validate(const Arch& arch) const;
  std::vector<Sample> samples() const;
};

/// Initialization of a synthetic teacher. A fraction of weight-matrix entries
/// is multiplied by `outlier_scale` to mimic the heavy-tailed weights of
/// trained networks.
struct TeacherInit {
  double input_scale = 1.0;
  double output_scale = 2.5;
  double bias_scale = 0.5;
  double outlier_fraction = 0.01;
  double outlier_scale = 8.0;
};

class ToyModel {
 public:
  ToyModel(Arch arch, std::vector<double> params);

  static ToyModel zeros(const Arch& arch);
  static ToyModel random(const Arch& arch, std::uint64_t seed, const TeacherInit& init = {});

  const Arch& arch() const { return arch_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t size() const { return params_.size(); }
  const std::vector<ParamSlice>& layout() const { return layout_; }

  ToyModel with_params(std::vector<double> params) const;

  /// Next-token distribution given the prefix (only the last `context`
  /// tokens are read; shorter prefixes are left-padded).
  std::vector<double> forward(std::span<const int> prefix) const;

  /// Cross-entropy -log p(target | prefix).
  double loss(const Sample& s) const;

  /// Gradient of loss(s) with respect to the parameters.
  std::vector<double> loss_grad(const Sample& s) const;

  /// Adds J^T g to `grad`, where J is the Jacobian of the logits at `prefix`
  /// and g = dlogits. Returns the forward distribution.
  std::vector<double> backprop_logits(std::span<const int> prefix, std::span<const double> dlogits,
                                      std::span<double> grad) const;

  /// Directional derivative of the logits at `prefix` along `direction`.
  std::vector<double> logits_jvp(std::span<const int> prefix, std::span<const double> direction) const;

  nlohmann::json to_json() const;
  static ToyModel from_json(const nlohmann::json& j);

  friend bool operator==(const ToyModel& a, const ToyModel& b) {
    return a.arch_ == b.arch_ && a.params_ == b.params_;
  }

 private:
  struct Trace;
  Trace run(std::span<const int> prefix) const;
  std::vector<int> active_inputs(std::span<const int> prefix) const;

  Arch arch_;
  std::vector<double> params_;
  std::vector<ParamSlice> layout_;
};

struct GradRecord {
  std::vector<std::vector<double>> per_sample;
  std::vector<double> mean;
  double mean_norm_sq = 0.0;   // ||E g||^2
  double mean_sq_norm = 0.0;   // E ||g||^2
};

struct KlResult {
  double value = 0.0;
  std::vector<double> grad;
};

/// Teacher next-token distributions for every (sequence, position) of a
/// batch, in sample order.
struct TeacherTargets {
  std::vector<Sample> samples;
  std::vector<std::vector<double>> probs;
};

std::vector<double> forward_next_token(const ToyModel& model, std::span<const int> prefix);

std::vector<double> per_sample_grad(const ToyModel& model, const Sample& sample);

TeacherTargets teacher_targets(const ToyModel& teacher, const SampleBatch& batch);

/// Mean over positions of KL(p_teacher || p_student) and its gradient with
/// respect to the student parameters.
KlResult kl_term(const ToyModel& teacher, const ToyModel& student, const SampleBatch& batch);
KlResult kl_term(const TeacherTargets& targets, const ToyModel& student, bool want_grad = true);

/// E_z E_i E_{t ~ p_w} <grad log p_w(t | z_<i), d>^2 with the expectation
/// over t taken by exact enumeration of the vocabulary.
double hessian_quadratic_form(const ToyModel& teacher, const SampleBatch& batch,
                              std::span<const double> direction);

GradRecord grad_stats(const ToyModel& model, const SampleBatch& batch);

struct FirstOrderPair {
  double delta_f = 0.0;       // f(w_hat; s) - f(w; s)
  double linear_term = 0.0;   // <grad f(w; s), w_hat - w>
};

std::vector<FirstOrderPair> first_order_study(const ToyModel& model, const QuantGrid& grid,
                                              std::span<const double> rounding, const SampleBatch& batch);

/// Autoregressive sampling from the model, starting from an all-pad prefix.
SampleBatch sample_sequences(const ToyModel& model, std::size_t count, std::size_t length, Rng& rng);

struct TrainConfig {
  int max_steps = 2000;
  double grad_tol = 1e-4;
  double lr = 0.01;
};

struct TrainResult {
  ToyModel model;
  int steps = 0;
  double final_grad_norm = 0.0;
  double final_loss = 0.0;
};

/// Full-batch Adam on the mean cross-entropy until the gradient norm drops
/// below grad_tol or max_steps is reached.
TrainResult train_to_plateau(const ToyModel& init, const SampleBatch& data, const TrainConfig& cfg);

double mean_loss(const ToyModel& model, const SampleBatch& batch);

/// Gradient of mean_loss, accumulated in one reverse pass per position.
std::vector<double> mean_loss_grad(const ToyModel& model, const SampleBatch& batch);

}  // namespace dq
