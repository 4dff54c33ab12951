#pragma once

#include "fvqa/model.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace fvqa {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Tensors that receive decoupled weight decay: matrices of the trained set.
// Gates, norm gains and bias rows are never decayed.
inline bool decays(const std::string& name) {
  if (name == "adapter.gates" || name == "proj.bias") return false;
  if (name.ends_with("norm") || name.ends_with(".b1") || name.ends_with(".b2")) return false;
  return true;
}

// AdamW with decoupled weight decay over the tensors present in the gradient.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  long long steps() const { return step_; }

  void step(ModelParams<T>& params, const ModelParams<T>& grad, double lr) {
    ++step_;
    auto p = params.tensors();
    auto g = grad.tensors();
    std::vector<std::string> names;
    params.visit([&](const std::string& n, const Mat<T>&, bool) { names.push_back(n); });
    if (m_.empty()) {
      m_.resize(p.size());
      v_.resize(p.size());
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (g[i]->size() == 0) continue;
      if (m_[i].size() == 0) {
        m_[i] = Mat<T>::Zero(g[i]->rows(), g[i]->cols());
        v_[i] = Mat<T>::Zero(g[i]->rows(), g[i]->cols());
      }
      m_[i] = b1 * m_[i] + (T(1) - b1) * *g[i];
      v_[i] = b2 * v_[i] + (T(1) - b2) * g[i]->cwiseAbs2();
      if (decays(names[i]))
        *p[i] *= static_cast<T>(1.0 - lr * cfg_.weight_decay);
      const T step_size = static_cast<T>(lr / bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      const T eps = static_cast<T>(cfg_.eps);
      p[i]->array() -= step_size * m_[i].array() / ((v_[i].array().sqrt() * denom_scale) + eps);
    }
  }

 private:
  AdamWConfig cfg_;
  long long step_ = 0;
  std::vector<Mat<T>> m_, v_;
};

// Linear warmup to the peak rate, then cosine decay to zero.
inline double warmup_cosine(long long step, long long total, double peak, double warmup_frac) {
  if (total <= 0) return peak;
  const auto warm = static_cast<long long>(std::ceil(warmup_frac * static_cast<double>(total)));
  if (step < warm) return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(std::max<long long>(1, total - warm));
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

}  // namespace fvqa
