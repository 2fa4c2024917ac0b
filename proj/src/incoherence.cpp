#include "dq/incoherence.hpp"

#include <algorithm>
#include <cmath>

#include "dq/error.hpp"
#include "dq/lmwalk.hpp"
#include "dq/rng.hpp"

namespace dq {

namespace {

constexpr std::uint64_t kWalkSeedStream = 7;
constexpr std::uint64_t kWalkDataStream = 8;

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

void check_rht(const RHT& t) {
  if (t.dim == 0 || next_pow2(t.dim) != t.dim) throw InvalidInput("RHT dimension must be a power of two");
  if (t.signs.size() != t.dim) throw InvalidInput("RHT sign vector has the wrong length");
}

}  // namespace

RHT RHT::random(std::size_t dim, std::uint64_t seed) {
  RHT t{dim, std::vector<double>(dim), seed};
  check_rht(RHT{dim, std::vector<double>(dim, 1.0), seed});
  Rng rng(seed);
  for (auto& s : t.signs) s = rng.next_u64() >> 63 ? 1.0 : -1.0;
  return t;
}

RHT RHT::identity(std::size_t dim) {
  RHT t{dim, std::vector<double>(dim, 1.0), 0};
  check_rht(t);
  return t;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fwht(std::span<double> v) {
  const std::size_t n = v.size();
  for (std::size_t h = 1; h < n; h <<= 1)
    for (std::size_t i = 0; i < n; i += 2 * h)
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = v[j], b = v[j + h];
        v[j] = a + b;
        v[j + h] = a - b;
      }
}

std::vector<double> rht_apply(const RHT& t, std::span<const double> v) {
  check_rht(t);
  if (v.size() != t.dim) throw InvalidInput("vector length does not match the transform dimension");
  std::vector<double> out(t.dim);
  for (std::size_t i = 0; i < t.dim; ++i) out[i] = t.signs[i] * v[i];
  fwht(out);
  const double s = 1.0 / std::sqrt(static_cast<double>(t.dim));
  for (auto& x : out) x *= s;
  return out;
}

std::vector<double> rht_inverse(const RHT& t, std::span<const double> v) {
  check_rht(t);
  if (v.size() != t.dim) throw InvalidInput("vector length does not match the transform dimension");
  std::vector<double> out(v.begin(), v.end());
  fwht(out);
  const double s = 1.0 / std::sqrt(static_cast<double>(t.dim));
  for (std::size_t i = 0; i < t.dim; ++i) out[i] *= s * t.signs[i];
  return out;
}

TransformedLayer transform_layer(std::span<const double> w, std::size_t rows, std::size_t cols, const RHT& left,
                                 const RHT& right) {
  if (w.size() != rows * cols) throw InvalidInput("matrix data does not match its shape");
  if (left.dim != next_pow2(rows) || right.dim != next_pow2(cols))
    throw InvalidInput("transform dimensions must be the next powers of two of the shape");
  TransformedLayer t;
  t.rows = rows;
  t.cols = cols;
  t.padded_rows = left.dim;
  t.padded_cols = right.dim;
  t.max_abs_before = max_abs(w);
  t.data.assign(t.padded_rows * t.padded_cols, 0.0);

  std::vector<double> row(t.padded_cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    std::fill(row.begin(), row.end(), 0.0);
    std::copy_n(w.begin() + static_cast<std::ptrdiff_t>(i * cols), cols, row.begin());
    const auto r = rht_apply(right, row);
    std::copy(r.begin(), r.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * t.padded_cols));
  }
  std::vector<double> col(t.padded_rows);
  for (std::size_t j = 0; j < t.padded_cols; ++j) {
    for (std::size_t i = 0; i < t.padded_rows; ++i) col[i] = t.data[i * t.padded_cols + j];
    const auto c = rht_apply(left, col);
    for (std::size_t i = 0; i < t.padded_rows; ++i) t.data[i * t.padded_cols + j] = c[i];
  }
  t.max_abs_after = max_abs(t.data);
  return t;
}

std::vector<double> untransform(const TransformedLayer& shape, std::span<const double> data, const RHT& left,
                                const RHT& right) {
  if (data.size() != shape.padded_rows * shape.padded_cols) throw InvalidInput("transformed data has the wrong size");
  if (left.dim != shape.padded_rows || right.dim != shape.padded_cols)
    throw InvalidInput("transform dimensions do not match the layer");
  std::vector<double> x(data.begin(), data.end());
  std::vector<double> col(shape.padded_rows);
  for (std::size_t j = 0; j < shape.padded_cols; ++j) {
    for (std::size_t i = 0; i < shape.padded_rows; ++i) col[i] = x[i * shape.padded_cols + j];
    const auto c = rht_inverse(left, col);
    for (std::size_t i = 0; i < shape.padded_rows; ++i) x[i * shape.padded_cols + j] = c[i];
  }
  std::vector<double> out(shape.rows * shape.cols);
  for (std::size_t i = 0; i < shape.rows; ++i) {
    const auto r = rht_inverse(right, std::span<const double>(x).subspan(i * shape.padded_cols, shape.padded_cols));
    std::copy_n(r.begin(), shape.cols, out.begin() + static_cast<std::ptrdiff_t>(i * shape.cols));
  }
  return out;
}

IncoherentSpace::IncoherentSpace(const ToyModel& model, std::uint64_t seed) : model_size_(model.size()) {
  const auto& w = model.params();
  std::uint64_t counter = 0;
  for (const auto& s : model.layout()) {
    Piece p{s, latent_.size(), -1};
    const auto src = std::span<const double>(w).subspan(s.offset, s.size());
    if (s.is_matrix()) {
      left_.push_back(RHT::random(next_pow2(s.rows), derive_seed(seed, counter++)));
      right_.push_back(RHT::random(next_pow2(s.cols), derive_seed(seed, counter++)));
      layers_.push_back(transform_layer(src, s.rows, s.cols, left_.back(), right_.back()));
      p.layer = static_cast<int>(layers_.size()) - 1;
      latent_.insert(latent_.end(), layers_.back().data.begin(), layers_.back().data.end());
    } else {
      latent_.insert(latent_.end(), src.begin(), src.end());
    }
    segment_ends_.push_back(latent_.size());
    pieces_.push_back(p);
  }
}

std::vector<double> IncoherentSpace::to_model(std::span<const double> latent) const {
  if (latent.size() != latent_.size()) throw InvalidInput("latent vector has the wrong length");
  std::vector<double> out(model_size_);
  for (const auto& p : pieces_) {
    if (p.layer < 0) {
      std::copy_n(latent.begin() + static_cast<std::ptrdiff_t>(p.latent_offset), p.slice.size(),
                  out.begin() + static_cast<std::ptrdiff_t>(p.slice.offset));
      continue;
    }
    const auto& L = layers_[static_cast<std::size_t>(p.layer)];
    const auto w = untransform(L, latent.subspan(p.latent_offset, L.data.size()), left_[static_cast<std::size_t>(p.layer)],
                               right_[static_cast<std::size_t>(p.layer)]);
    std::copy(w.begin(), w.end(), out.begin() + static_cast<std::ptrdiff_t>(p.slice.offset));
  }
  return out;
}

std::vector<double> IncoherentSpace::pullback(std::span<const double> grad) const {
  if (grad.size() != model_size_) throw InvalidInput("gradient has the wrong length");
  std::vector<double> out(latent_.size());
  for (const auto& p : pieces_) {
    const auto src = grad.subspan(p.slice.offset, p.slice.size());
    if (p.layer < 0) {
      std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(p.latent_offset));
      continue;
    }
    const auto k = static_cast<std::size_t>(p.layer);
    const auto t = transform_layer(src, p.slice.rows, p.slice.cols, left_[k], right_[k]);
    std::copy(t.data.begin(), t.data.end(), out.begin() + static_cast<std::ptrdiff_t>(p.latent_offset));
  }
  return out;
}

Reparam IncoherentSpace::reparam() const {
  return {latent_, [this](std::span<const double> v) { return to_model(v); },
          [this](std::span<const double> g) { return pullback(g); }};
}

const char* rounder_name(RounderKind k) {
  switch (k) {
    case RounderKind::Rtn:
      return "rtn";
    case RounderKind::DiscQuant:
      return "discquant";
    case RounderKind::LmWalk:
      return "lmwalk";
  }
  return "?";
}

RounderKind rounder_from_name(const std::string& name) {
  if (name == "rtn") return RounderKind::Rtn;
  if (name == "discquant") return RounderKind::DiscQuant;
  if (name == "lmwalk") return RounderKind::LmWalk;
  throw InvalidConfig("unknown rounder: " + name);
}

RoundingOutcome round_model(const ToyModel& teacher, const RoundingConfig& cfg, const SampleBatch& heldout,
                            std::uint64_t seed, const Reparam* reparam, std::span<const std::size_t> segment_ends) {
  const auto& w = reparam ? reparam->latent : teacher.params();
  const auto map = [&](std::vector<double> v) { return reparam ? reparam->to_model(v) : v; };
  std::vector<std::size_t> ends(segment_ends.begin(), segment_ends.end());
  if (ends.empty()) ends = tensor_segment_ends(teacher.arch());
  const QuantGrid grid = QuantGrid::block_scaling(w, cfg.bits, cfg.groupsize, ends);

  RoundingOutcome out;
  out.bits_per_param = bits_per_param(grid) * static_cast<double>(w.size()) / static_cast<double>(teacher.size());
  std::vector<double> latent_hat;
  switch (cfg.rounder) {
    case RounderKind::Rtn:
      latent_hat = rtn(w, grid);
      break;
    case RounderKind::DiscQuant: {
      DiscQuantConfig dc = cfg.discquant;
      dc.seed = seed;
      const auto rep = optimize(teacher, grid, default_batch_stream(teacher, dc, cfg.uniform_mix), heldout, dc, {}, reparam);
      out.fractional = static_cast<std::size_t>(std::lround(rep.fractional_fraction * static_cast<double>(w.size())));
      latent_hat = rep.w_hat;
      break;
    }
    case RounderKind::LmWalk: {
      const Bracket b = bracket_of(w, grid);
      const std::size_t m = cfg.walk_samples;
      const std::size_t len = cfg.discquant.seq_len;
      Rng rng(derive_seed(seed, kWalkDataStream));
      const auto batch = sample_sequences(teacher, (m + len - 1) / len, len, rng);
      auto samples = batch.samples();
      samples.resize(m);
      std::vector<std::vector<double>> grads;
      for (const auto& s : samples) {
        auto g = per_sample_grad(teacher, s);
        grads.push_back(reparam ? reparam->pullback(g) : std::move(g));
      }
      const auto cs = make_constraint_set(grads, b, interp_position(w, b));
      WalkConfig wc = cfg.walk;
      wc.seed = derive_seed(seed, kWalkSeedStream);
      const auto r = lm_round(cs, wc);
      out.fractional = r.fractional();
      latent_hat = finalize(r.x, b, 0.0);
      break;
    }
  }
  out.params = map(latent_hat);
  out.heldout_kl = heldout_kl(teacher, out.params, heldout);
  return out;
}

nlohmann::json IncoherenceComparison::to_json() const {
  return {{"kl_without", kl_without},
          {"kl_with", kl_with},
          {"bits_per_param_without", bits_per_param_without},
          {"bits_per_param_with", bits_per_param_with},
          {"max_abs_before", max_abs_before},
          {"max_abs_after", max_abs_after},
          {"groupsize_with_incoherence", groupsize_with_incoherence}};
}

IncoherenceComparison pipeline_with_incoherence(const ToyModel& teacher, const RoundingConfig& cfg,
                                                std::uint64_t incoh_seed, std::uint64_t seed) {
  DiscQuantConfig hc = cfg.discquant;
  hc.seed = seed;
  const SampleBatch heldout = heldout_batch(teacher, hc);

  IncoherenceComparison c;
  const auto plain = round_model(teacher, cfg, heldout, seed);
  c.kl_without = plain.heldout_kl;
  c.bits_per_param_without = plain.bits_per_param;

  const IncoherentSpace space(teacher, incoh_seed);
  const Reparam rp = space.reparam();
  const auto inc = round_model(teacher, cfg, heldout, seed, &rp, space.segment_ends());
  c.kl_with = inc.heldout_kl;
  c.bits_per_param_with = inc.bits_per_param;
  for (const auto& L : space.layers()) {
    c.max_abs_before.push_back(L.max_abs_before);
    c.max_abs_after.push_back(L.max_abs_after);
  }
  c.groupsize_with_incoherence = cfg.groupsize != kPerTensor;
  return c;
}

}  // namespace dq
