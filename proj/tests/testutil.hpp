#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "maskmamba/tensor.hpp"

namespace maskmamba::test {

// Central finite-difference gradient oracle. Runs the forward under a frozen
// random projection so the scalar loss exercises every output coordinate,
// then compares each analytic input gradient against (f(x+h)-f(x-h))/2h.
// Independent of the recorded backward rules by construction.
struct GradCheck {
  double h = 1e-5;
  // Cap on probed coordinates per tensor; <0 probes all of them.
  int max_coords = -1;
  // Denominator floor for the relative error: coordinates where both
  // gradients sit below this absolute size are dominated by f64 rounding in
  // the two loss evaluations and compare against the floor instead.
  double denom_floor = 1e-5;
  std::uint64_t seed = 20240901;

  template <class F>
  double max_rel_error(F&& forward, std::vector<Tensor<double>> inputs) {
    for (auto& t : inputs) t.set_requires_grad(true);

    Tensor<double> out = forward();
    Rng rng(seed);
    std::vector<double> weights(static_cast<std::size_t>(out.numel()));
    for (auto& w : weights) w = rng.uniform(-1.0, 1.0);

    auto weighted_loss = [&](const Tensor<double>& y) {
      double acc = 0.0;
      auto d = y.data();
      for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * weights[i];
      return acc;
    };

    // analytic gradients
    {
      Tensor<double> w = Tensor<double>::from(out.shape(),
                                              std::vector<double>(weights.begin(), weights.end()));
      Tensor<double> loss = sum(mul(out, w));
      for (auto& t : inputs) t.zero_grad();
      backward(loss);
    }

    double worst = 0.0;
    NoGradGuard ng;
    Rng pick(seed ^ 0x5bd1e995u);
    for (auto& t : inputs) {
      auto data = t.data();
      const Index n = t.numel();
      std::vector<Index> coords;
      if (max_coords < 0 || n <= max_coords) {
        for (Index i = 0; i < n; ++i) coords.push_back(i);
      } else {
        auto sampled = pick.sample_without_replacement(n, max_coords);
        coords.assign(sampled.begin(), sampled.end());
      }
      auto g = t.grad();
      for (Index i : coords) {
        const double orig = data[static_cast<std::size_t>(i)];
        data[static_cast<std::size_t>(i)] = orig + h;
        const double lp = weighted_loss(forward());
        data[static_cast<std::size_t>(i)] = orig - h;
        const double lm = weighted_loss(forward());
        data[static_cast<std::size_t>(i)] = orig;
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = g[static_cast<std::size_t>(i)];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), denom_floor});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
      }
    }
    return worst;
  }
};

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
inline double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(da[i]) - static_cast<double>(db[i])));
  return m;
}

}  // namespace maskmamba::test
