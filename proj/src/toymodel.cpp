#include "dq/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dq/error.hpp"
#include "dq/hexfloat.hpp"
#include "dq/optim.hpp"

namespace dq {

std::size_t Arch::param_count() const {
  std::size_t n = 0;
  for (const auto& s : param_layout(*this)) n += s.size();
  return n;
}

void Arch::validate() const {
  if (vocab < 2) throw InvalidConfig("vocab must be >= 2");
  if (context < 1) throw InvalidConfig("context must be >= 1");
  if (hidden < 1) throw InvalidConfig("hidden width must be >= 1");
  if (layers < 1 || layers > 2) throw InvalidConfig("layer count must be 1 or 2");
}

std::vector<ParamSlice> param_layout(const Arch& arch) {
  const auto h = static_cast<std::size_t>(arch.hidden);
  const auto v = static_cast<std::size_t>(arch.vocab);
  std::vector<ParamSlice> out;
  std::size_t off = 0;
  auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
    out.push_back({std::move(name), off, rows, cols});
    off += rows * cols;
  };
  add("W1", h, static_cast<std::size_t>(arch.input_dim()));
  add("b1", h, 1);
  if (arch.layers == 2) {
    add("W2", h, h);
    add("b2", h, 1);
  }
  add("Wout", v, h);
  add("bout", v, 1);
  return out;
}

std::vector<std::size_t> tensor_segment_ends(const Arch& arch) {
  std::vector<std::size_t> ends;
  for (const auto& s : param_layout(arch)) ends.push_back(s.offset + s.size());
  return ends;
}

void SampleBatch::validate(const Arch& arch) const {
  if (sequences.empty()) throw InvalidInput("batch has no sequences");
  if (!positions.empty() && positions.size() != sequences.size())
    throw InvalidInput("position sets must match sequence count");
  for (std::size_t k = 0; k < sequences.size(); ++k) {
    const auto& seq = sequences[k];
    if (seq.empty()) throw InvalidInput("empty sequence in batch");
    for (int t : seq)
      if (t < 0 || t >= arch.vocab) throw InvalidInput("token out of range");
    if (!positions.empty())
      for (auto p : positions[k])
        if (p >= seq.size()) throw InvalidInput("position out of range");
  }
}

std::vector<Sample> SampleBatch::samples() const {
  std::vector<Sample> out;
  for (std::size_t k = 0; k < sequences.size(); ++k) {
    const auto& seq = sequences[k];
    auto emit = [&](std::size_t i) {
      out.push_back({Sequence(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(i)), seq[i]});
    };
    if (positions.empty())
      for (std::size_t i = 0; i < seq.size(); ++i) emit(i);
    else
      for (auto i : positions[k]) emit(i);
  }
  return out;
}

// ---------------------------------------------------------------------------

struct ToyModel::Trace {
  std::vector<int> inputs;                  // active one-hot column per position
  std::vector<std::vector<double>> hidden;  // post-tanh activations per layer
  std::vector<double> logits;
  std::vector<double> log_probs;
  std::vector<double> probs;
};

ToyModel::ToyModel(Arch arch, std::vector<double> params)
    : arch_(arch), params_(std::move(params)), layout_(param_layout(arch)) {
  arch_.validate();
  if (params_.size() != arch_.param_count()) throw InvalidInput("parameter count does not match architecture");
}

ToyModel ToyModel::zeros(const Arch& arch) { return ToyModel(arch, std::vector<double>(arch.param_count(), 0.0)); }

ToyModel ToyModel::random(const Arch& arch, std::uint64_t seed, const TeacherInit& init) {
  arch.validate();
  Rng rng(seed);
  std::vector<double> w(arch.param_count());
  for (const auto& s : param_layout(arch)) {
    double scale = init.bias_scale;
    if (s.name == "W1")
      scale = init.input_scale;
    else if (s.name == "W2")
      scale = init.input_scale / std::sqrt(static_cast<double>(arch.hidden));
    else if (s.name == "Wout")
      scale = init.output_scale / std::sqrt(static_cast<double>(arch.hidden));
    for (std::size_t k = 0; k < s.size(); ++k) {
      double v = scale * rng.normal();
      if (s.is_matrix() && rng.uniform() < init.outlier_fraction) v *= init.outlier_scale;
      w[s.offset + k] = v;
    }
  }
  return ToyModel(arch, std::move(w));
}

ToyModel ToyModel::with_params(std::vector<double> params) const { return ToyModel(arch_, std::move(params)); }

std::vector<int> ToyModel::active_inputs(std::span<const int> prefix) const {
  const int c = arch_.context;
  const int stride = arch_.vocab + 1;
  std::vector<int> cols(static_cast<std::size_t>(c));
  const auto len = static_cast<int>(prefix.size());
  for (int p = 0; p < c; ++p) {
    // Position p of the window holds token prefix[len - c + p], or pad.
    const int src = len - c + p;
    int tok = arch_.pad_token();
    if (src >= 0) {
      tok = prefix[static_cast<std::size_t>(src)];
      if (tok < 0 || tok >= arch_.vocab) throw InvalidInput("token out of range");
    }
    cols[static_cast<std::size_t>(p)] = p * stride + tok;
  }
  return cols;
}

ToyModel::Trace ToyModel::run(std::span<const int> prefix) const {
  Trace tr;
  tr.inputs = active_inputs(prefix);
  const auto h = static_cast<std::size_t>(arch_.hidden);
  const auto V = static_cast<std::size_t>(arch_.vocab);

  const auto& W1 = layout_[0];
  const auto& b1 = layout_[1];
  std::vector<double> a(h);
  for (std::size_t r = 0; r < h; ++r) {
    double acc = params_[b1.offset + r];
    for (int col : tr.inputs) acc += params_[W1.offset + r * W1.cols + static_cast<std::size_t>(col)];
    a[r] = std::tanh(acc);
  }
  tr.hidden.push_back(a);

  std::size_t next = 2;
  if (arch_.layers == 2) {
    const auto& W2 = layout_[2];
    const auto& b2 = layout_[3];
    std::vector<double> a2(h);
    for (std::size_t r = 0; r < h; ++r) {
      double acc = params_[b2.offset + r];
      for (std::size_t c = 0; c < h; ++c) acc += params_[W2.offset + r * h + c] * a[c];
      a2[r] = std::tanh(acc);
    }
    tr.hidden.push_back(a2);
    next = 4;
  }

  const auto& Wo = layout_[next];
  const auto& bo = layout_[next + 1];
  const auto& last = tr.hidden.back();
  tr.logits.resize(V);
  for (std::size_t t = 0; t < V; ++t) {
    double acc = params_[bo.offset + t];
    for (std::size_t c = 0; c < h; ++c) acc += params_[Wo.offset + t * h + c] * last[c];
    tr.logits[t] = acc;
  }

  const double mx = *std::max_element(tr.logits.begin(), tr.logits.end());
  double z = 0.0;
  for (double l : tr.logits) z += std::exp(l - mx);
  const double lse = mx + std::log(z);
  tr.log_probs.resize(V);
  tr.probs.resize(V);
  for (std::size_t t = 0; t < V; ++t) {
    tr.log_probs[t] = tr.logits[t] - lse;
    tr.probs[t] = std::exp(tr.log_probs[t]);
  }
  if (!std::isfinite(lse)) throw NumericError("non-finite logits");
  return tr;
}

std::vector<double> ToyModel::forward(std::span<const int> prefix) const { return run(prefix).probs; }

double ToyModel::loss(const Sample& s) const {
  if (s.target < 0 || s.target >= arch_.vocab) throw InvalidInput("target out of range");
  const double l = -run(s.prefix).log_probs[static_cast<std::size_t>(s.target)];
  if (!std::isfinite(l)) throw NumericError("non-finite loss");
  return l;
}

std::vector<double> ToyModel::backprop_logits(std::span<const int> prefix, std::span<const double> dlogits,
                                              std::span<double> grad) const {
  Trace tr = run(prefix);
  const auto h = static_cast<std::size_t>(arch_.hidden);
  const auto V = static_cast<std::size_t>(arch_.vocab);
  const std::size_t out_idx = arch_.layers == 2 ? 4 : 2;
  const auto& Wo = layout_[out_idx];
  const auto& bo = layout_[out_idx + 1];
  const auto& last = tr.hidden.back();

  std::vector<double> dh(h, 0.0);
  for (std::size_t t = 0; t < V; ++t) {
    const double g = dlogits[t];
    if (g == 0.0) continue;
    grad[bo.offset + t] += g;
    for (std::size_t c = 0; c < h; ++c) {
      grad[Wo.offset + t * h + c] += g * last[c];
      dh[c] += g * params_[Wo.offset + t * h + c];
    }
  }

  if (arch_.layers == 2) {
    const auto& W2 = layout_[2];
    const auto& b2 = layout_[3];
    const auto& a1 = tr.hidden[0];
    const auto& a2 = tr.hidden[1];
    std::vector<double> dh1(h, 0.0);
    for (std::size_t r = 0; r < h; ++r) {
      const double da = dh[r] * (1.0 - a2[r] * a2[r]);
      grad[b2.offset + r] += da;
      for (std::size_t c = 0; c < h; ++c) {
        grad[W2.offset + r * h + c] += da * a1[c];
        dh1[c] += da * params_[W2.offset + r * h + c];
      }
    }
    dh = std::move(dh1);
  }

  const auto& W1 = layout_[0];
  const auto& b1 = layout_[1];
  const auto& a1 = tr.hidden[0];
  for (std::size_t r = 0; r < h; ++r) {
    const double da = dh[r] * (1.0 - a1[r] * a1[r]);
    grad[b1.offset + r] += da;
    for (int col : tr.inputs) grad[W1.offset + r * W1.cols + static_cast<std::size_t>(col)] += da;
  }
  return tr.probs;
}

std::vector<double> ToyModel::loss_grad(const Sample& s) const {
  if (s.target < 0 || s.target >= arch_.vocab) throw InvalidInput("target out of range");
  std::vector<double> grad(params_.size(), 0.0);
  std::vector<double> p = forward(s.prefix);
  if (!std::isfinite(-std::log(p[static_cast<std::size_t>(s.target)]))) throw NumericError("non-finite loss");
  p[static_cast<std::size_t>(s.target)] -= 1.0;
  backprop_logits(s.prefix, p, grad);
  return grad;
}

std::vector<double> ToyModel::logits_jvp(std::span<const int> prefix, std::span<const double> d) const {
  if (d.size() != params_.size()) throw InvalidInput("direction length mismatch");
  Trace tr = run(prefix);
  const auto h = static_cast<std::size_t>(arch_.hidden);
  const auto V = static_cast<std::size_t>(arch_.vocab);

  const auto& W1 = layout_[0];
  const auto& b1 = layout_[1];
  const auto& a1 = tr.hidden[0];
  std::vector<double> dh(h);
  for (std::size_t r = 0; r < h; ++r) {
    double acc = d[b1.offset + r];
    for (int col : tr.inputs) acc += d[W1.offset + r * W1.cols + static_cast<std::size_t>(col)];
    dh[r] = (1.0 - a1[r] * a1[r]) * acc;
  }

  std::size_t out_idx = 2;
  if (arch_.layers == 2) {
    const auto& W2 = layout_[2];
    const auto& b2 = layout_[3];
    const auto& a2 = tr.hidden[1];
    std::vector<double> dh2(h);
    for (std::size_t r = 0; r < h; ++r) {
      double acc = d[b2.offset + r];
      for (std::size_t c = 0; c < h; ++c)
        acc += d[W2.offset + r * h + c] * a1[c] + params_[W2.offset + r * h + c] * dh[c];
      dh2[r] = (1.0 - a2[r] * a2[r]) * acc;
    }
    dh = std::move(dh2);
    out_idx = 4;
  }

  const auto& Wo = layout_[out_idx];
  const auto& bo = layout_[out_idx + 1];
  const auto& last = tr.hidden.back();
  std::vector<double> dl(V);
  for (std::size_t t = 0; t < V; ++t) {
    double acc = d[bo.offset + t];
    for (std::size_t c = 0; c < h; ++c) acc += d[Wo.offset + t * h + c] * last[c] + params_[Wo.offset + t * h + c] * dh[c];
    dl[t] = acc;
  }
  return dl;
}

nlohmann::json ToyModel::to_json() const {
  nlohmann::json j;
  j["arch"] = {{"vocab", arch_.vocab}, {"context", arch_.context}, {"hidden", arch_.hidden}, {"layers", arch_.layers}};
  j["params"] = hex_array(params_);
  return j;
}

ToyModel ToyModel::from_json(const nlohmann::json& j) {
  const auto& a = j.at("arch");
  Arch arch{a.at("vocab").get<int>(), a.at("context").get<int>(), a.at("hidden").get<int>(), a.at("layers").get<int>()};
  return ToyModel(arch, from_hex_array(j.at("params")));
}

// ---------------------------------------------------------------------------

std::vector<double> forward_next_token(const ToyModel& model, std::span<const int> prefix) {
  return model.forward(prefix);
}

std::vector<double> per_sample_grad(const ToyModel& model, const Sample& sample) { return model.loss_grad(sample); }

TeacherTargets teacher_targets(const ToyModel& teacher, const SampleBatch& batch) {
  batch.validate(teacher.arch());
  TeacherTargets out;
  out.samples = batch.samples();
  out.probs.reserve(out.samples.size());
  for (const auto& s : out.samples) out.probs.push_back(teacher.forward(s.prefix));
  return out;
}

KlResult kl_term(const TeacherTargets& targets, const ToyModel& student, bool want_grad) {
  if (targets.samples.empty()) throw InvalidInput("no positions to evaluate");
  KlResult res;
  if (want_grad) res.grad.assign(student.size(), 0.0);
  const auto V = static_cast<std::size_t>(student.arch().vocab);
  const double inv = 1.0 / static_cast<double>(targets.samples.size());
  std::vector<double> dl(V);
  for (std::size_t k = 0; k < targets.samples.size(); ++k) {
    const auto& pt = targets.probs[k];
    if (pt.size() != V) throw InvalidInput("teacher and student architectures differ");
    const auto& prefix = targets.samples[k].prefix;
    std::vector<double> ps = student.forward(prefix);
    double kl = 0.0;
    for (std::size_t t = 0; t < V; ++t)
      if (pt[t] > 0.0) kl += pt[t] * (std::log(pt[t]) - std::log(ps[t]));
    res.value += inv * kl;
    if (want_grad) {
      for (std::size_t t = 0; t < V; ++t) dl[t] = inv * (ps[t] - pt[t]);
      student.backprop_logits(prefix, dl, res.grad);
    }
  }
  if (!std::isfinite(res.value)) throw NumericError("non-finite KL");
  // Rounding can leave tiny negatives when the distributions coincide.
  res.value = std::max(res.value, 0.0);
  return res;
}

KlResult kl_term(const ToyModel& teacher, const ToyModel& student, const SampleBatch& batch) {
  if (!(teacher.arch() == student.arch())) throw InvalidInput("teacher and student architectures differ");
  return kl_term(teacher_targets(teacher, batch), student);
}

double hessian_quadratic_form(const ToyModel& teacher, const SampleBatch& batch, std::span<const double> direction) {
  batch.validate(teacher.arch());
  const auto samples = batch.samples();
  double total = 0.0;
  for (const auto& s : samples) {
    const auto p = teacher.forward(s.prefix);
    const auto dl = teacher.logits_jvp(s.prefix, direction);
    // <grad log p(t), d> = dl_t - sum_s p_s dl_s
    double mean = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) mean += p[t] * dl[t];
    double acc = 0.0;
    for (std::size_t t = 0; t < p.size(); ++t) acc += p[t] * (dl[t] - mean) * (dl[t] - mean);
    total += acc;
  }
  return total / static_cast<double>(samples.size());
}

GradRecord grad_stats(const ToyModel& model, const SampleBatch& batch) {
  batch.validate(model.arch());
  GradRecord rec;
  for (const auto& s : batch.samples()) rec.per_sample.push_back(model.loss_grad(s));
  const std::size_t n = model.size();
  const double inv = 1.0 / static_cast<double>(rec.per_sample.size());
  rec.mean.assign(n, 0.0);
  for (const auto& g : rec.per_sample) {
    double sq = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      rec.mean[j] += g[j];
      sq += g[j] * g[j];
    }
    rec.mean_sq_norm += sq;
  }
  for (double& m : rec.mean) m *= inv;
  rec.mean_sq_norm *= inv;
  rec.mean_norm_sq = std::inner_product(rec.mean.begin(), rec.mean.end(), rec.mean.begin(), 0.0);
  return rec;
}

std::vector<FirstOrderPair> first_order_study(const ToyModel& model, const QuantGrid& grid,
                                              std::span<const double> rounding, const SampleBatch& batch) {
  batch.validate(model.arch());
  const auto& w = model.params();
  if (rounding.size() != w.size()) throw InvalidInput("rounding length mismatch");
  const Bracket br = bracket_of(w, grid);
  for (std::size_t j = 0; j < w.size(); ++j)
    if (rounding[j] != br.down[j] && rounding[j] != br.up[j] && rounding[j] != w[j])
      throw InvalidInput("rounding leaves the bracket of the original weights");

  const ToyModel rounded = model.with_params(std::vector<double>(rounding.begin(), rounding.end()));
  std::vector<FirstOrderPair> out;
  for (const auto& s : batch.samples()) {
    const auto g = model.loss_grad(s);
    double lin = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) lin += g[j] * (rounding[j] - w[j]);
    out.push_back({rounded.loss(s) - model.loss(s), lin});
  }
  return out;
}

SampleBatch sample_sequences(const ToyModel& model, std::size_t count, std::size_t length, Rng& rng) {
  if (length == 0) throw InvalidInput("sequence length must be positive");
  SampleBatch batch;
  batch.sequences.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    Sequence seq;
    seq.reserve(length);
    for (std::size_t i = 0; i < length; ++i) {
      const auto p = model.forward(seq);
      const double u = rng.uniform();
      double acc = 0.0;
      int tok = static_cast<int>(p.size()) - 1;
      for (std::size_t t = 0; t < p.size(); ++t) {
        acc += p[t];
        if (u < acc) {
          tok = static_cast<int>(t);
          break;
        }
      }
      seq.push_back(tok);
    }
    batch.sequences.push_back(std::move(seq));
  }
  return batch;
}

double mean_loss(const ToyModel& model, const SampleBatch& batch) {
  const auto samples = batch.samples();
  double acc = 0.0;
  for (const auto& s : samples) acc += model.loss(s);
  return acc / static_cast<double>(samples.size());
}

std::vector<double> mean_loss_grad(const ToyModel& model, const SampleBatch& batch) {
  batch.validate(model.arch());
  const auto samples = batch.samples();
  const auto V = static_cast<std::size_t>(model.arch().vocab);
  const double inv = 1.0 / static_cast<double>(samples.size());
  std::vector<double> grad(model.size(), 0.0);
  std::vector<double> dl(V);
  for (const auto& s : samples) {
    const auto p = model.forward(s.prefix);
    for (std::size_t t = 0; t < V; ++t) dl[t] = inv * p[t];
    dl[static_cast<std::size_t>(s.target)] -= inv;
    model.backprop_logits(s.prefix, dl, grad);
  }
  return grad;
}

TrainResult train_to_plateau(const ToyModel& init, const SampleBatch& data, const TrainConfig& cfg) {
  data.validate(init.arch());
  std::vector<double> w = init.params();
  AdamW opt(w.size());
  TrainResult res{init, 0, 0.0, 0.0};
  for (int step = 0; step <= cfg.max_steps; ++step) {
    const ToyModel cur = init.with_params(w);
    const auto grad = mean_loss_grad(cur, data);
    const double gnorm = std::sqrt(std::inner_product(grad.begin(), grad.end(), grad.begin(), 0.0));
    res.steps = step;
    res.final_grad_norm = gnorm;
    if (gnorm < cfg.grad_tol || step == cfg.max_steps) break;
    opt.step(w, grad, cfg.lr);
  }
  res.model = init.with_params(std::move(w));
  res.final_loss = mean_loss(res.model, data);
  return res;
}

}  // namespace dq
