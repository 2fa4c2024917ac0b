#include "dq/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dq/error.hpp"
#include "dq/hexfloat.hpp"

namespace dq {

namespace {

void check_points(const std::vector<double>& pts) {
  if (pts.empty()) throw InvalidInput("grid point list is empty");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!std::isfinite(pts[i])) throw InvalidInput("grid point is not finite");
    if (i > 0 && !(pts[i - 1] < pts[i])) throw InvalidInput("grid points not strictly ascending");
  }
}

std::pair<double, double> bracket_sorted(const std::vector<double>& pts, double v) {
  if (v <= pts.front()) return {pts.front(), pts.front()};
  if (v >= pts.back()) return {pts.back(), pts.back()};
  auto it = std::lower_bound(pts.begin(), pts.end(), v);
  if (*it == v) return {v, v};
  return {*(it - 1), *it};
}

}  // namespace

QuantGrid QuantGrid::block_scaling(std::span<const double> w, int bits, std::size_t groupsize) {
  const std::size_t ends[] = {w.size()};
  return block_scaling(w, bits, groupsize, ends);
}

QuantGrid QuantGrid::block_scaling(std::span<const double> w, int bits, std::size_t groupsize,
                                   std::span<const std::size_t> segment_ends) {
  if (bits < 2) throw InvalidConfig("block scaling requires bits >= 2");
  if (bits > 30) throw InvalidConfig("block scaling supports at most 30 bits");
  if (segment_ends.empty() || segment_ends.back() != w.size())
    throw InvalidConfig("segment ends must finish at the vector length");

  QuantGrid g;
  g.kind_ = GridKind::BlockScaling;
  g.n_ = w.size();
  g.bits_ = bits;
  g.groupsize_ = groupsize;
  g.segment_ends_.assign(segment_ends.begin(), segment_ends.end());
  g.group_of_.resize(w.size());

  const double levels = static_cast<double>(g.max_level());
  std::size_t begin = 0;
  for (std::size_t end : segment_ends) {
    if (end < begin) throw InvalidConfig("segment ends must be nondecreasing");
    const std::size_t len = end - begin;
    const std::size_t gs = groupsize == kPerTensor ? std::max<std::size_t>(len, 1) : groupsize;
    for (std::size_t start = begin; start < end; start += gs) {
      const std::size_t stop = std::min(end, start + gs);
      double amax = 0.0;
      for (std::size_t j = start; j < stop; ++j) {
        if (!std::isfinite(w[j])) throw InvalidInput("weights must be finite");
        amax = std::max(amax, std::abs(w[j]));
        g.group_of_[j] = g.scales_.size();
      }
      g.scales_.push_back(amax > 0.0 ? amax / levels : 1.0);
    }
    begin = end;
  }
  return g;
}

QuantGrid QuantGrid::explicit_points(std::vector<std::vector<double>> points_per_coord) {
  QuantGrid g;
  g.kind_ = GridKind::Explicit;
  g.n_ = points_per_coord.size();
  g.set_of_.resize(g.n_);
  for (std::size_t j = 0; j < g.n_; ++j) {
    check_points(points_per_coord[j]);
    g.set_of_[j] = static_cast<std::uint32_t>(j);
  }
  g.point_sets_ = std::move(points_per_coord);
  return g;
}

QuantGrid QuantGrid::uniform(std::size_t n, double spacing, double lo, double hi) {
  if (!(spacing > 0.0) || !(hi >= lo)) throw InvalidConfig("uniform grid needs spacing > 0, hi >= lo");
  std::vector<double> pts;
  const auto count = static_cast<std::size_t>(std::floor((hi - lo) / spacing + 1e-9)) + 1;
  pts.reserve(count);
  for (std::size_t k = 0; k < count; ++k) pts.push_back(lo + static_cast<double>(k) * spacing);
  check_points(pts);

  QuantGrid g;
  g.kind_ = GridKind::Explicit;
  g.n_ = n;
  g.point_sets_.push_back(std::move(pts));
  g.set_of_.assign(n, 0);
  return g;
}

std::vector<double> QuantGrid::points(std::size_t j) const {
  if (kind_ == GridKind::Explicit) return point_sets_[set_of_[j]];
  const double s = scales_[group_of_[j]];
  const int L = max_level();
  std::vector<double> pts;
  pts.reserve(2 * L + 1);
  for (int k = -L; k <= L; ++k) pts.push_back(k * s);
  return pts;
}

std::pair<double, double> QuantGrid::bracket_coord(std::size_t j, double v) const {
  if (kind_ == GridKind::Explicit) return bracket_sorted(point_sets_[set_of_[j]], v);

  const double s = scales_[group_of_[j]];
  const int L = max_level();
  if (v <= -L * s) return {-L * s, -L * s};
  if (v >= L * s) return {L * s, L * s};
  auto k = static_cast<long>(std::floor(v / s));
  // The quotient can be off by one in the last bit; fix against products.
  while (k > -L && k * s > v) --k;
  while (k + 1 < L && (k + 1) * s <= v) ++k;
  const double lo = k * s;
  const double hi = (k + 1) * s;
  if (lo == v) return {v, v};
  if (hi == v) return {v, v};
  return {lo, hi};
}

nlohmann::json QuantGrid::to_json() const {
  nlohmann::json j;
  j["n"] = n_;
  if (kind_ == GridKind::BlockScaling) {
    j["kind"] = "block_scaling";
    j["bits"] = bits_;
    if (groupsize_ == kPerTensor)
      j["groupsize"] = "per-tensor";
    else
      j["groupsize"] = groupsize_;
    j["scales"] = hex_array(scales_);
    j["segment_ends"] = segment_ends_;
  } else {
    j["kind"] = "explicit";
    auto sets = nlohmann::json::array();
    for (const auto& s : point_sets_) sets.push_back(hex_array(s));
    j["point_sets"] = sets;
    j["set_of"] = set_of_;
  }
  return j;
}

QuantGrid QuantGrid::from_json(const nlohmann::json& j) {
  QuantGrid g;
  g.n_ = j.at("n").get<std::size_t>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "block_scaling") {
    g.kind_ = GridKind::BlockScaling;
    g.bits_ = j.at("bits").get<int>();
    if (g.bits_ < 2) throw InvalidConfig("block scaling requires bits >= 2");
    const auto& gs = j.at("groupsize");
    g.groupsize_ = gs.is_string() ? kPerTensor : gs.get<std::size_t>();
    g.scales_ = from_hex_array(j.at("scales"));
    for (double s : g.scales_)
      if (!(s > 0.0)) throw InvalidInput("grid scales must be strictly positive");
    g.segment_ends_ = j.value("segment_ends", std::vector<std::size_t>{g.n_});
    if (g.segment_ends_.empty() || g.segment_ends_.back() != g.n_)
      throw InvalidInput("segment ends do not cover the grid");
    g.group_of_.resize(g.n_);
    std::size_t begin = 0, group = 0;
    for (std::size_t end : g.segment_ends_) {
      const std::size_t len = end - begin;
      const std::size_t step = g.groupsize_ == kPerTensor ? std::max<std::size_t>(len, 1) : g.groupsize_;
      for (std::size_t start = begin; start < end; start += step, ++group)
        for (std::size_t k = start; k < std::min(end, start + step); ++k) g.group_of_[k] = group;
      begin = end;
    }
    if (group != g.scales_.size()) throw InvalidInput("scale count does not match grouping");
  } else if (kind == "explicit") {
    g.kind_ = GridKind::Explicit;
    for (const auto& s : j.at("point_sets")) {
      g.point_sets_.push_back(from_hex_array(s));
      check_points(g.point_sets_.back());
    }
    g.set_of_ = j.at("set_of").get<std::vector<std::uint32_t>>();
    if (g.set_of_.size() != g.n_) throw InvalidInput("set_of length mismatch");
    for (auto s : g.set_of_)
      if (s >= g.point_sets_.size()) throw InvalidInput("set_of index out of range");
  } else {
    throw InvalidInput("unknown grid kind: " + kind);
  }
  return g;
}

QuantGrid build_block_scaling(std::span<const double> w, int bits, std::size_t groupsize) {
  return QuantGrid::block_scaling(w, bits, groupsize);
}

Bracket bracket_of(std::span<const double> w, const QuantGrid& grid) {
  if (w.size() != grid.size()) throw InvalidInput("weight vector and grid differ in length");
  Bracket b;
  b.down.resize(w.size());
  b.up.resize(w.size());
  b.delta.resize(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    auto [lo, hi] = grid.bracket_coord(j, w[j]);
    b.down[j] = lo;
    b.up[j] = hi;
    b.delta[j] = hi - lo;
  }
  return b;
}

std::vector<double> interp_position(std::span<const double> w, const Bracket& bracket) {
  std::vector<double> y(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    if (bracket.delta[j] > 0.0)
      y[j] = std::clamp((w[j] - bracket.down[j]) / bracket.delta[j], 0.0, 1.0);
    else
      y[j] = 0.0;
  }
  return y;
}

std::vector<double> interp_weights(std::span<const double> x, const Bracket& bracket) {
  if (x.size() != bracket.size()) throw InvalidInput("interpolation vector and bracket differ in length");
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    out[j] = bracket.down[j] * (1.0 - x[j]) + bracket.up[j] * x[j];
  return out;
}

std::vector<double> interp_weights(const InterpState& state) {
  if (state.bracket == nullptr) throw InvalidInput("interpolation state has no bracket");
  return interp_weights(state.x, *state.bracket);
}

double nearest_of_pair(double v, double down, double up) {
  if (down == up) return down;
  const double d_down = std::abs(v - down);
  const double d_up = std::abs(up - v);
  const double scale = std::max({std::abs(v), std::abs(down), std::abs(up)});
  const double tie_tol = 8.0 * std::numeric_limits<double>::epsilon() * scale;
  if (std::abs(d_down - d_up) <= tie_tol) {
    if (std::abs(down) < std::abs(up)) return down;
    if (std::abs(up) < std::abs(down)) return up;
    return down;
  }
  return d_down < d_up ? down : up;
}

std::vector<double> rtn(std::span<const double> w, const QuantGrid& grid) {
  if (w.size() != grid.size()) throw InvalidInput("weight vector and grid differ in length");
  std::vector<double> out(w.size());
  for (std::size_t j = 0; j < w.size(); ++j) {
    auto [lo, hi] = grid.bracket_coord(j, w[j]);
    out[j] = nearest_of_pair(w[j], lo, hi);
  }
  return out;
}

double bits_per_param(const QuantGrid& grid) {
  if (grid.kind() != GridKind::BlockScaling)
    throw Unsupported("bits accounting is only defined for block-scaling grids");
  if (grid.groupsize() == kPerTensor) return static_cast<double>(grid.bits());
  return grid.bits() + 16.0 / static_cast<double>(grid.groupsize());
}

}  // namespace dq
