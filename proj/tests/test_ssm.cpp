#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "maskmamba/ssm.hpp"
#include "testutil.hpp"

using namespace maskmamba;
using maskmamba::test::GradCheck;

namespace {

SsmParams<double> random_params(Index d_inner, Index d_state, std::uint64_t seed) {
  Rng rng(seed);
  auto p = SsmParams<double>::make(d_inner, d_state, rng);
  // roughen the defaults so instances differ more than by wx alone
  p.wx_b = Tensor<double>::randn({2 * d_state + d_inner}, rng, 0.3);
  return p;
}

// Projection identical to ssm_forward's front half, evaluated without grads.
struct ScanInputs {
  Tensor<double> delta, bmat, cmat, a;
};

ScanInputs project(const Tensor<double>& u, const SsmParams<double>& p) {
  NoGradGuard ng;
  auto bcd = linear(u, p.wx_w, p.wx_b);
  auto parts = split(bcd, {p.d_state, p.d_state, p.d_inner}, -1);
  return {softplus(add(parts[2], p.dt_bias)), parts[0], parts[1], neg_exp(p.a_log)};
}

// Independent right-to-left recurrence: starts at t = L-1 and walks left,
// never calling flip or the production kernels.
Tensor<double> right_to_left_oracle(const Tensor<double>& u, const SsmParams<double>& p) {
  auto in = project(u, p);
  const Index B = u.dim(0), L = u.dim(1), I = u.dim(2), S = p.d_state;
  auto y = Tensor<double>::zeros(u.shape());
  for (Index b = 0; b < B; ++b) {
    std::vector<double> h(static_cast<std::size_t>(I * S), 0.0);
    for (Index t = L - 1; t >= 0; --t) {
      for (Index c = 0; c < I; ++c) {
        const double dt = in.delta.data()[(b * L + t) * I + c];
        const double ut = u.data()[(b * L + t) * I + c];
        double acc = 0.0;
        for (Index s = 0; s < S; ++s) {
          const double abar = std::exp(dt * in.a.data()[c * S + s]);
          const double bbar = dt * in.bmat.data()[(b * L + t) * S + s];
          h[static_cast<std::size_t>(c * S + s)] =
              abar * h[static_cast<std::size_t>(c * S + s)] + bbar * ut;
          acc += in.cmat.data()[(b * L + t) * S + s] * h[static_cast<std::size_t>(c * S + s)];
        }
        y.data()[(b * L + t) * I + c] = acc + p.d_skip.data()[c] * ut;
      }
    }
  }
  return y;
}

}  // namespace

TEST_CASE("discretize: limit, closed form, monotonicity, domain error") {
  // A = -1, delta = ln 2 -> A_bar = 0.5
  auto delta = Tensor<double>::full({1, 1}, std::log(2.0));
  auto A = Tensor<double>::full({1, 1}, -1.0);
  auto B = Tensor<double>::full({1, 1}, 2.0);
  auto [abar, bbar] = discretize(delta, A, B);
  CHECK(abar.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(bbar.data()[0] == doctest::Approx(std::log(2.0) * 2.0).epsilon(1e-12));

  // delta -> 0+: A_bar -> 1, B_bar -> 0
  auto tiny = Tensor<double>::full({1, 1}, 1e-12);
  auto [a0, b0] = discretize(tiny, A, B);
  CHECK(a0.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::abs(b0.data()[0]) < 1e-11);

  // larger delta -> smaller A_bar for fixed A < 0
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const double d1 = rng.uniform(1e-3, 2.0);
    const double d2 = d1 + rng.uniform(1e-3, 2.0);
    const double a = -rng.uniform(0.1, 4.0);
    auto [x1, y1] = discretize(Tensor<double>::full({1, 1}, d1),
                               Tensor<double>::full({1, 1}, a), B);
    auto [x2, y2] = discretize(Tensor<double>::full({1, 1}, d2),
                               Tensor<double>::full({1, 1}, a), B);
    CHECK(x2.data()[0] < x1.data()[0]);
    CHECK(x1.data()[0] > 0.0);
    CHECK(x1.data()[0] < 1.0);
  }

  CHECK_THROWS_AS(discretize(Tensor<double>::full({1, 1}, 0.0), A, B), std::invalid_argument);
  CHECK_THROWS_AS(discretize(Tensor<double>::full({1, 1}, -0.5), A, B), std::invalid_argument);
}

TEST_CASE("scan_sequential: single step matches the hand formula") {
  auto p = random_params(3, 4, 11);
  Rng rng(12);
  auto u = Tensor<double>::randn({1, 1, 3}, rng);
  auto y = scan_sequential(u, p);
  auto in = project(u, p);
  for (Index c = 0; c < 3; ++c) {
    const double dt = in.delta.data()[c];
    double acc = 0;
    for (Index s = 0; s < 4; ++s) {
      const double h = dt * in.bmat.data()[s] * u.data()[c];  // h_0 = B_bar u_0
      acc += in.cmat.data()[s] * h;
    }
    acc += p.d_skip.data()[c] * u.data()[c];
    CHECK(y.data()[c] == doctest::Approx(acc).epsilon(1e-12));
  }
}

TEST_CASE("scan_sequential: zero input gives zero output") {
  auto p = random_params(4, 16, 21);
  auto u = Tensor<double>::zeros({2, 9, 4});
  auto y = scan_sequential(u, p);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("scan_sequential: d_state=1 constant coefficients follow the geometric convolution") {
  // Position-independent B, C, delta via a zero wx weight.
  Rng rng(31);
  SsmParams<double> p = SsmParams<double>::make(1, 1, rng);
  p.wx_w = Tensor<double>::zeros({1, 3});
  p.wx_b = Tensor<double>::from({3}, {0.7, -1.3, 0.2});  // B, C, pre-delta
  p.dt_bias = Tensor<double>::from({1}, {0.1});

  const double delta = std::log1p(std::exp(0.2 + 0.1));
  const double a = std::exp(delta * -std::exp(p.a_log.data()[0]));
  const double b = delta * 0.7;
  const double c = -1.3;
  const double d = p.d_skip.data()[0];

  for (Index L = 1; L <= 8; ++L) {
    auto u = Tensor<double>::randn({1, L, 1}, rng);
    auto y = scan_sequential(u, p);
    for (Index t = 0; t < L; ++t) {
      double conv = 0;
      for (Index k = 0; k <= t; ++k)
        conv += std::pow(a, static_cast<double>(t - k)) * u.data()[k];
      const double expected = c * b * conv + d * u.data()[t];
      CHECK(y.data()[t] == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("scan_parallel: matches scan_sequential over random instances") {
  int instances = 0;
  double worst = 0.0;
  for (Index L : {1, 2, 3, 4, 5, 6, 7, 8, 64, 1000, 4096}) {
    const int reps = L <= 8 ? 12 : (L <= 64 ? 6 : 2);
    for (int r = 0; r < reps; ++r) {
      auto p = random_params(L > 64 ? 2 : 3, L > 64 ? 4 : 8,
                             static_cast<std::uint64_t>(1000 + 17 * L + r));
      Rng rng(static_cast<std::uint64_t>(99 + L + r));
      auto u = Tensor<double>::randn({1, L, p.d_inner}, rng);
      auto ys = scan_sequential(u, p);
      auto yp = scan_parallel(u, p);
      worst = std::max(worst, test::max_abs_diff(ys, yp));
      ++instances;
    }
  }
  CHECK(instances >= 100);
  CHECK(worst < 1e-10);
}

TEST_CASE("scan_parallel: L=1 equals sequential exactly") {
  auto p = random_params(4, 8, 77);
  Rng rng(78);
  auto u = Tensor<double>::randn({2, 1, 4}, rng);
  CHECK(test::max_abs_diff(scan_sequential(u, p), scan_parallel(u, p)) == 0.0);
}

TEST_CASE("affine map composition is associative on random triples") {
  Rng rng(83);
  auto compose = [](std::pair<double, double> g, std::pair<double, double> f) {
    // (g after f)(h) = a_g*(a_f*h + b_f) + b_g
    return std::pair<double, double>{g.first * f.first, g.first * f.second + g.second};
  };
  for (int trial = 0; trial < 200; ++trial) {
    std::pair<double, double> f{rng.uniform(0.0, 1.0), rng.normal()};
    std::pair<double, double> g{rng.uniform(0.0, 1.0), rng.normal()};
    std::pair<double, double> h{rng.uniform(0.0, 1.0), rng.normal()};
    auto left = compose(compose(h, g), f);
    auto right = compose(h, compose(g, f));
    CHECK(std::abs(left.first - right.first) < 1e-12);
    CHECK(std::abs(left.second - right.second) < 1e-12);
  }
}

TEST_CASE("scan_backward: matches the independent right-to-left oracle") {
  double worst = 0.0;
  for (Index L : {1, 2, 5, 17, 64, 256}) {
    auto p = random_params(3, 6, static_cast<std::uint64_t>(7 * L + 1));
    Rng rng(static_cast<std::uint64_t>(7 * L + 2));
    auto u = Tensor<double>::randn({2, L, 3}, rng);
    auto y = scan_backward(u, p);
    auto oracle = right_to_left_oracle(u, p);
    worst = std::max(worst, test::max_abs_diff(y, oracle));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("scan_backward: equals flip(scan(flip(u)))") {
  auto p = random_params(2, 4, 311);
  Rng rng(312);
  auto u = Tensor<double>::randn({1, 13, 2}, rng);
  auto direct = scan_backward(u, p);
  auto composed = flip(scan_sequential(flip(u, 1), p), 1);
  CHECK(test::max_abs_diff(direct, composed) == 0.0);
}

TEST_CASE("scan_backward: palindromic input with constant B,C,delta mirrors the forward scan") {
  Rng rng(313);
  SsmParams<double> p = SsmParams<double>::make(1, 2, rng);
  p.wx_w = Tensor<double>::zeros({1, 5});
  p.wx_b = Tensor<double>::from({5}, {0.6, -0.2, 1.1, 0.4, 0.0});
  const Index L = 9;
  auto u = Tensor<double>::zeros({1, L, 1});
  for (Index t = 0; t < L; ++t) {
    const double v = rng.normal();
    u.data()[t] = v;
    u.data()[L - 1 - t] = v;
  }
  auto fwd = scan_sequential(u, p);
  auto bwd = scan_backward(u, p);
  CHECK(test::max_abs_diff(bwd, flip(fwd, 1)) < 1e-12);
}

TEST_CASE("scan_backward: L=1 identical to scan_sequential") {
  auto p = random_params(3, 4, 41);
  Rng rng(42);
  auto u = Tensor<double>::randn({1, 1, 3}, rng);
  CHECK(test::max_abs_diff(scan_backward(u, p), scan_sequential(u, p)) == 0.0);
}

TEST_CASE("causality: forward scan output has exactly zero future sensitivity") {
  auto p = random_params(2, 4, 51);
  Rng rng(52);
  const Index L = 7;
  auto u = Tensor<double>::randn({1, L, 2}, rng).set_requires_grad(true);
  auto y = scan_sequential(u, p);
  const Index t = 3;
  auto probe = Tensor<double>::zeros(y.shape());
  probe.data()[t * 2 + 1] = 1.0;
  backward(sum(mul(y, probe)));
  for (Index tp = t + 1; tp < L; ++tp)
    for (Index c = 0; c < 2; ++c) CHECK(u.grad()[tp * 2 + c] == 0.0);
  // and some past sensitivity exists
  double past = 0;
  for (Index tp = 0; tp <= t; ++tp)
    for (Index c = 0; c < 2; ++c) past += std::abs(u.grad()[tp * 2 + c]);
  CHECK(past > 0.0);
}

TEST_CASE("anti-causality: backward scan output has exactly zero past sensitivity") {
  auto p = random_params(2, 4, 61);
  Rng rng(62);
  const Index L = 7;
  auto u = Tensor<double>::randn({1, L, 2}, rng).set_requires_grad(true);
  auto y = scan_backward(u, p);
  const Index t = 3;
  auto probe = Tensor<double>::zeros(y.shape());
  probe.data()[t * 2] = 1.0;
  backward(sum(mul(y, probe)));
  for (Index tp = 0; tp < t; ++tp)
    for (Index c = 0; c < 2; ++c) CHECK(u.grad()[tp * 2 + c] == 0.0);
  double future = 0;
  for (Index tp = t; tp < L; ++tp)
    for (Index c = 0; c < 2; ++c) future += std::abs(u.grad()[tp * 2 + c]);
  CHECK(future > 0.0);
}

TEST_CASE("stability: bounded inputs stay bounded for L = 2^20") {
  auto p = random_params(2, 2, 71);
  Rng rng(72);
  const Index L = 1 << 20;
  NoGradGuard ng;
  auto u = Tensor<double>::uniform({1, L, 2}, rng, -1.0, 1.0);
  auto in = project(u, p);
  // bound: max |h| <= max|B_bar u| / (1 - max A_bar)
  double max_abar = 0, max_bu = 0;
  for (Index t = 0; t < L; ++t)
    for (Index c = 0; c < 2; ++c) {
      const double dt = in.delta.data()[t * 2 + c];
      for (Index s = 0; s < 2; ++s) {
        max_abar = std::max(max_abar, std::exp(dt * in.a.data()[c * 2 + s]));
        max_bu = std::max(max_bu, std::abs(dt * in.bmat.data()[t * 2 + s] * u.data()[t * 2 + c]));
      }
    }
  CHECK(max_abar < 1.0);
  const double bound = max_bu / (1.0 - max_abar);

  auto y = scan_sequential(u, p);
  double max_y = 0;
  for (double v : y.data()) {
    CHECK(std::isfinite(v));
    max_y = std::max(max_y, std::abs(v));
  }
  // y = <C,h> + d u, so |y| <= S*max|C|*bound + max|d|
  double max_c = 0;
  for (double v : in.cmat.data()) max_c = std::max(max_c, std::abs(v));
  CHECK(max_y <= 2 * max_c * bound + std::abs(p.d_skip.data()[0]) + 1e-9);
}

TEST_CASE("gradients: both scan variants match finite differences") {
  for (ScanKind kind : {ScanKind::Sequential, ScanKind::Parallel}) {
    auto p = random_params(2, 3, 91);
    p.set_requires_grad(true);
    Rng rng(92);
    auto u = Tensor<double>::randn({1, 5, 2}, rng);
    GradCheck gc;
    auto err = gc.max_rel_error([&]() { return ssm_forward(u, p, kind); },
                                {u, p.a_log, p.d_skip, p.wx_w, p.wx_b, p.dt_bias});
    CHECK(err < 1e-4);
  }
}

TEST_CASE("gradients: backward scan matches finite differences") {
  auto p = random_params(2, 3, 95);
  p.set_requires_grad(true);
  Rng rng(96);
  auto u = Tensor<double>::randn({1, 4, 2}, rng);
  GradCheck gc;
  auto err = gc.max_rel_error([&]() { return scan_backward(u, p); },
                              {u, p.a_log, p.d_skip, p.wx_w, p.wx_b, p.dt_bias});
  CHECK(err < 1e-4);
}
