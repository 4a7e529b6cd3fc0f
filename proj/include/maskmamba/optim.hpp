#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maskmamba/tensor.hpp"

namespace maskmamba {

// AdamW with decoupled weight decay: p <- p - lr*wd*p is applied before the
// bias-corrected moment update.
template <class T>
class AdamW {
 public:
  struct Config {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;
  };

  AdamW() = default;
  explicit AdamW(Config cfg) : cfg_(cfg) {}

  Config& config() { return cfg_; }
  const Config& config() const { return cfg_; }
  std::int64_t step_count() const { return step_; }

  void step(std::vector<Tensor<T>>& params) {
    if (m_.empty()) init_state(params);
    if (m_.size() != params.size())
      throw std::invalid_argument("AdamW::step: parameter count changed");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (!p.has_grad()) continue;
      auto pd = p.data();
      auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != pd.size())
        throw std::invalid_argument("AdamW::step: shape mismatch between params and state");
      for (std::size_t j = 0; j < pd.size(); ++j) {
        double pj = static_cast<double>(pd[j]) * (1.0 - cfg_.lr * cfg_.weight_decay);
        const double gj = static_cast<double>(g[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        pj -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        pd[j] = static_cast<T>(pj);
      }
    }
  }

  // Moments kept in double regardless of parameter precision.
  std::vector<std::vector<double>>& moment1() { return m_; }
  std::vector<std::vector<double>>& moment2() { return v_; }
  void set_step_count(std::int64_t s) { step_ = s; }

  void init_state(const std::vector<Tensor<T>>& params) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.emplace_back(p.data().size(), 0.0);
      v_.emplace_back(p.data().size(), 0.0);
    }
  }

 private:
  Config cfg_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// shadow <- decay*shadow + (1-decay)*params
template <class T>
inline void ema_update(std::vector<Buffer<T>>& shadow, const std::vector<Tensor<T>>& params,
                       double decay) {
  if (shadow.size() != params.size())
    throw std::invalid_argument("ema_update: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto pd = params[i].data();
    auto& s = shadow[i];
    if (s.size() != pd.size()) throw std::invalid_argument("ema_update: shape mismatch");
    for (std::size_t j = 0; j < pd.size(); ++j)
      s[j] = static_cast<T>(decay * static_cast<double>(s[j]) +
                            (1.0 - decay) * static_cast<double>(pd[j]));
  }
}

template <class T>
inline std::vector<Buffer<T>> ema_init(const std::vector<Tensor<T>>& params) {
  std::vector<Buffer<T>> shadow;
  shadow.reserve(params.size());
  for (const auto& p : params) shadow.emplace_back(p.data().begin(), p.data().end());
  return shadow;
}

template <class T>
inline double grad_norm(const std::vector<Tensor<T>>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : const_cast<Tensor<T>&>(p).grad()) acc += static_cast<double>(g) * g;
  }
  return std::sqrt(acc);
}

template <class T>
inline void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace maskmamba
