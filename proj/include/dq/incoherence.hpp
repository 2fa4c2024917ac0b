#pragma once

// Randomized Hadamard incoherence processing. A weight matrix W is replaced
// by U_L W U_R^T with U = H diag(signs) / sqrt(dim), rounded in that basis
// and mapped back. Dimensions are zero-padded to powers of two.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dq/discquant.hpp"
#include "dq/lmwalk.hpp"
#include "dq/toymodel.hpp"

namespace dq {

struct RHT {
  std::size_t dim = 1;
  std::vector<double> signs;
  std::uint64_t seed = 0;

  static RHT random(std::size_t dim, std::uint64_t seed);
  static RHT identity(std::size_t dim);
};

std::size_t next_pow2(std::size_t n);

/// In-place unnormalized Walsh-Hadamard transform (Sylvester ordering).
void fwht(std::span<double> v);

/// (1/sqrt(dim)) H (signs ⊙ v).
std::vector<double> rht_apply(const RHT& t, std::span<const double> v);

/// signs ⊙ ((1/sqrt(dim)) H v), the inverse of rht_apply.
std::vector<double> rht_inverse(const RHT& t, std::span<const double> v);

struct TransformedLayer {
  std::size_t rows = 0, cols = 0;                // original shape
  std::size_t padded_rows = 0, padded_cols = 0;  // transformed shape
  std::vector<double> data;                      // row-major padded_rows x padded_cols
  double max_abs_before = 0.0;
  double max_abs_after = 0.0;
};

/// W (row-major rows x cols) -> U_L W_pad U_R^T. left.dim and right.dim must
/// be the next powers of two of rows and cols.
TransformedLayer transform_layer(std::span<const double> w, std::size_t rows, std::size_t cols, const RHT& left,
                                 const RHT& right);

/// Inverse of transform_layer applied to `data`, cropped to rows x cols.
std::vector<double> untransform(const TransformedLayer& shape, std::span<const double> data, const RHT& left,
                                const RHT& right);

/// Incoherence processing of every weight matrix of a model, with biases
/// passed through. The latent vector holds the transformed, padded matrices
/// and the biases in layout order.
class IncoherentSpace {
 public:
  IncoherentSpace(const ToyModel& model, std::uint64_t seed);

  const std::vector<double>& latent() const { return latent_; }
  const std::vector<std::size_t>& segment_ends() const { return segment_ends_; }
  const std::vector<TransformedLayer>& layers() const { return layers_; }

  std::vector<double> to_model(std::span<const double> latent) const;
  /// Adjoint of to_model: maps a model-space gradient into latent space.
  std::vector<double> pullback(std::span<const double> grad) const;
  Reparam reparam() const;

 private:
  struct Piece {
    ParamSlice slice;
    std::size_t latent_offset = 0;
    int layer = -1;  // index into layers_, -1 for biases
  };
  std::vector<Piece> pieces_;
  std::vector<TransformedLayer> layers_;
  std::vector<RHT> left_, right_;
  std::vector<double> latent_;
  std::vector<std::size_t> segment_ends_;
  std::size_t model_size_ = 0;
};

enum class RounderKind { Rtn, DiscQuant, LmWalk };

const char* rounder_name(RounderKind k);
RounderKind rounder_from_name(const std::string& name);

struct RoundingConfig {
  RounderKind rounder = RounderKind::Rtn;
  int bits = 2;
  std::size_t groupsize = 16;  // kPerTensor for one scale per tensor
  DiscQuantConfig discquant;
  WalkConfig walk;
  std::size_t walk_samples = 64;  // constraint count m for the LM walk
  double uniform_mix = 0.0;       // see default_batch_stream
};

struct RoundingOutcome {
  std::vector<double> params;  // rounded model parameters
  double heldout_kl = 0.0;
  double bits_per_param = 0.0;
  std::size_t fractional = 0;  // before the final RTN, for iterative rounders
};

/// Rounds `latent` on a block-scaling grid with per-tensor segments and
/// returns the model parameters it maps to. Without a reparam the latent is
/// the model's own parameter vector.
RoundingOutcome round_model(const ToyModel& teacher, const RoundingConfig& cfg, const SampleBatch& heldout,
                            std::uint64_t seed, const Reparam* reparam = nullptr,
                            std::span<const std::size_t> segment_ends = {});

struct IncoherenceComparison {
  double kl_without = 0.0;
  double kl_with = 0.0;
  double bits_per_param_without = 0.0;
  double bits_per_param_with = 0.0;
  std::vector<double> max_abs_before;  // per matrix
  std::vector<double> max_abs_after;
  bool groupsize_with_incoherence = false;  // the two can interfere

  nlohmann::json to_json() const;
};

/// Rounds the teacher twice with the same rounder, once directly and once
/// in the incoherent basis, and reports held-out KL for both.
IncoherenceComparison pipeline_with_incoherence(const ToyModel& teacher, const RoundingConfig& cfg,
                                                std::uint64_t incoh_seed, std::uint64_t seed);

}  // namespace dq
