#pragma once

// Quantization grids: per-coordinate finite sets of representable values,
// the bracketing pair (w_down, w_up) around each original weight, linear
// interpolation between the pair, round-to-nearest and bits accounting.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace dq {

enum class GridKind { BlockScaling, Explicit };

/// Groupsize value meaning "one scale per segment".
inline constexpr std::size_t kPerTensor = 0;

class QuantGrid {
 public:
  /// Symmetric linear block scaling over a single segment of length w.size().
  /// Group g uses levels {-(2^(bits-1)-1), ..., 2^(bits-1)-1} * scale_g with
  /// scale_g = max_{j in g} |w_j| / (2^(bits-1)-1), or 1 for an all-zero group.
  static QuantGrid block_scaling(std::span<const double> w, int bits, std::size_t groupsize);

  /// As above, but groups restart at every segment boundary. `segment_ends`
  /// holds the exclusive end offset of each segment; the last must equal
  /// w.size(). Used to give every tensor of a model its own groups.
  static QuantGrid block_scaling(std::span<const double> w, int bits, std::size_t groupsize,
                                 std::span<const std::size_t> segment_ends);

  /// Explicit per-coordinate point lists. Each list must be finite, nonempty
  /// and strictly ascending.
  static QuantGrid explicit_points(std::vector<std::vector<double>> points_per_coord);

  /// Explicit grid where every coordinate shares the points
  /// {lo, lo + spacing, ..., lo + k*spacing} (k maximal with value <= hi).
  static QuantGrid uniform(std::size_t n, double spacing, double lo, double hi);

  GridKind kind() const { return kind_; }
  std::size_t size() const { return n_; }
  int bits() const { return bits_; }
  std::size_t groupsize() const { return groupsize_; }
  const std::vector<double>& scales() const { return scales_; }
  const std::vector<std::size_t>& segment_ends() const { return segment_ends_; }

  /// Largest integer level of a block-scaling grid, 2^(bits-1) - 1.
  int max_level() const { return (1 << (bits_ - 1)) - 1; }

  /// Group index of coordinate j (block scaling only).
  std::size_t group_of(std::size_t j) const { return group_of_[j]; }

  /// Sorted representable values of coordinate j.
  std::vector<double> points(std::size_t j) const;

  /// Adjacent grid points around v for coordinate j; both equal the nearest
  /// extreme when v is outside the grid range, and both equal v when v is a
  /// grid point.
  std::pair<double, double> bracket_coord(std::size_t j, double v) const;

  nlohmann::json to_json() const;
  static QuantGrid from_json(const nlohmann::json& j);

  friend bool operator==(const QuantGrid&, const QuantGrid&) = default;

 private:
  QuantGrid() = default;

  GridKind kind_ = GridKind::BlockScaling;
  std::size_t n_ = 0;
  int bits_ = 0;
  std::size_t groupsize_ = kPerTensor;
  std::vector<std::size_t> segment_ends_;
  std::vector<double> scales_;
  std::vector<std::size_t> group_of_;
  std::vector<std::vector<double>> point_sets_;
  std::vector<std::uint32_t> set_of_;
};

struct Bracket {
  std::vector<double> down;
  std::vector<double> up;
  std::vector<double> delta;  // up - down, entrywise >= 0

  std::size_t size() const { return down.size(); }
};

using FrozenMask = std::vector<std::uint8_t>;

/// Interpolation variable x in [0,1]^n bound to a bracket. x = 0 selects
/// w_down, x = 1 selects w_up.
struct InterpState {
  std::vector<double> x;
  FrozenMask frozen;
  const Bracket* bracket = nullptr;
};

QuantGrid build_block_scaling(std::span<const double> w, int bits, std::size_t groupsize);

Bracket bracket_of(std::span<const double> w, const QuantGrid& grid);

/// Position y of the original weights inside their bracket; 0 where the
/// bracket is degenerate.
std::vector<double> interp_position(std::span<const double> w, const Bracket& bracket);

/// w^x = w_down * (1 - x) + w_up * x, componentwise.
std::vector<double> interp_weights(const InterpState& state);
std::vector<double> interp_weights(std::span<const double> x, const Bracket& bracket);

/// Picks whichever of {down, up} is closer to v. Distances that agree to a
/// few ulps count as ties and resolve to the smaller-magnitude point (the
/// lower one when magnitudes are equal too).
double nearest_of_pair(double v, double down, double up);

std::vector<double> rtn(std::span<const double> w, const QuantGrid& grid);

/// bits + 16/groupsize for block scaling (bits exactly for per-tensor).
double bits_per_param(const QuantGrid& grid);

}  // namespace dq
