#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace dq {

/// Adaptive-moment optimizer with decoupled weight decay (AdamW).
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::size_t n, Options opt) : opt_(opt), m_(n, 0.0), v_(n, 0.0) {}
  explicit AdamW(std::size_t n) : AdamW(n, Options{}) {}

  void step(std::span<double> params, std::span<const double> grad, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t j = 0; j < params.size(); ++j) {
      m_[j] = opt_.beta1 * m_[j] + (1.0 - opt_.beta1) * grad[j];
      v_[j] = opt_.beta2 * v_[j] + (1.0 - opt_.beta2) * grad[j] * grad[j];
      const double mhat = m_[j] / bc1;
      const double vhat = v_[j] / bc2;
      params[j] -= lr * (mhat / (std::sqrt(vhat) + opt_.eps) + opt_.weight_decay * params[j]);
    }
  }

  long steps() const { return t_; }

 private:
  Options opt_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to 0 at
/// the last step (`total - 1`). Steps are 0-based.
inline double warmup_cosine_lr(double peak, long step, long warmup, long total) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long span = total - 1 - warmup;
  if (span <= 0) return peak;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace dq
