#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "maskmamba/bench.hpp"
#include "maskmamba/layers.hpp"
#include "testutil.hpp"

using namespace maskmamba;
using maskmamba::test::GradCheck;

namespace {

LayerDims dims_for(Index c) {
  LayerDims d;
  d.width = c;
  d.d_state = 4;
  return d;
}

// Sum of |output[t] - baseline[t]| after perturbing the input at position tp.
template <class L>
double sensitivity(L& layer, Index t, Index tp, Index len, Index c, std::uint64_t seed) {
  Rng rng(seed);
  auto x = Tensor<double>::randn({1, len, c}, rng);
  auto y0 = layer.forward(x);
  x.data()[tp * c] += 0.25;
  auto y1 = layer.forward(x);
  double delta = 0;
  for (Index i = 0; i < c; ++i) delta += std::abs(y1.data()[t * c + i] - y0.data()[t * c + i]);
  return delta;
}

}  // namespace

TEST_CASE("all layer kinds preserve (B,L,C) shape") {
  for (auto [b, l, c] : std::vector<std::tuple<Index, Index, Index>>{{1, 1, 4}, {2, 7, 8},
                                                                     {1, 256, 64}}) {
    Rng rng(1);
    LayerDims d = dims_for(c);
    for (LayerKind kind : {LayerKind::Transformer, LayerKind::BiMamba, LayerKind::BiMambaV2}) {
      auto layer = make_layer<double>(kind, d, rng);
      auto x = Tensor<double>::randn({b, l, c}, rng);
      CHECK(layer->forward(x).shape() == x.shape());
    }
  }
}

TEST_CASE("bimamba_v2: bidirectional receptive field (future input reaches past output)") {
  Rng rng(2);
  BiMambaV2Layer<double> layer(dims_for(8), rng);
  CHECK(sensitivity(layer, 2, 4, 9, 8, 3) > 0.0);  // t+2 perturbs t
  CHECK(sensitivity(layer, 4, 1, 9, 8, 4) > 0.0);  // past also reaches forward
}

TEST_CASE("bimamba_v2: zero weights except the residual path give the identity map") {
  Rng rng(5);
  BiMambaV2Layer<double> layer(dims_for(8), rng);
  std::vector<std::pair<std::string, Tensor<double>>> params;
  layer.collect_params("l", params);
  for (auto& [name, t] : params) {
    if (name == "l.proj_out.w" || name == "l.proj_out.b")
      std::fill(t.data().begin(), t.data().end(), 0.0);
  }
  Rng rng2(6);
  auto x = Tensor<double>::randn({1, 5, 8}, rng2);
  auto y = layer.forward(x);
  CHECK(test::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("bimamba_v2: odd width rejected at construction") {
  Rng rng(7);
  LayerDims d = dims_for(7);
  CHECK_THROWS_AS(BiMambaV2Layer<double>(d, rng), std::invalid_argument);
}

TEST_CASE("bimamba v1: zero gate makes the layer collapse to the residual") {
  Rng rng(8);
  BiMambaLayer<double> layer(dims_for(4), rng);
  // zero the gate half of in_proj and the out_proj bias: silu(0) = 0 gates
  // everything off, so only the residual path remains
  const Index c = 4, e = 2 * c;
  auto& w = layer.in_proj().w;  // [c, 2e]
  for (Index i = 0; i < c; ++i)
    for (Index j = e; j < 2 * e; ++j) w.data()[i * 2 * e + j] = 0.0;
  std::fill(layer.in_proj().b.data().begin() + e, layer.in_proj().b.data().end(), 0.0);
  std::fill(layer.out_proj().b.data().begin(), layer.out_proj().b.data().end(), 0.0);
  Rng rng2(9);
  auto x = Tensor<double>::randn({1, 6, 4}, rng2);
  auto y = layer.forward(x);
  CHECK(test::max_abs_diff(x, y) < 1e-15);
}

TEST_CASE("transformer: single position attends only to itself") {
  Rng rng(10);
  TransformerLayer<double> layer(dims_for(8), rng);
  auto x = Tensor<double>::randn({1, 1, 8}, rng);
  auto w = layer.attention_weights(x);
  CHECK(w.numel() == 1);
  CHECK(w.data()[0] == doctest::Approx(1.0));
  CHECK(layer.forward(x).shape() == x.shape());
}

TEST_CASE("transformer: attention rows sum to one") {
  Rng rng(11);
  LayerDims d = dims_for(128);  // two heads
  TransformerLayer<double> layer(d, rng);
  CHECK(layer.heads() == 2);
  auto x = Tensor<double>::randn({1, 9, 128}, rng);
  auto w = layer.attention_weights(x);
  for (Index h = 0; h < 2; ++h)
    for (Index i = 0; i < 9; ++i) {
      double s = 0;
      for (Index j = 0; j < 9; ++j) s += w.data()[(h * 9 + i) * 9 + j];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("transformer: permutation equivariance without positional information") {
  Rng rng(12);
  TransformerLayer<double> layer(dims_for(8), rng);
  const Index l = 6, c = 8;
  auto x = Tensor<double>::randn({1, l, c}, rng);
  std::vector<Index> perm = {3, 0, 5, 1, 4, 2};
  auto permute = [&](const Tensor<double>& t) {
    auto out = Tensor<double>::zeros(t.shape());
    for (Index i = 0; i < l; ++i)
      for (Index j = 0; j < c; ++j) out.data()[i * c + j] = t.data()[perm[i] * c + j];
    return out;
  };
  auto lhs = layer.forward(permute(x));
  auto rhs = permute(layer.forward(x));
  CHECK(test::max_abs_diff(lhs, rhs) < 1e-5);
}

TEST_CASE("transformer: width must be divisible by the head count") {
  // width >= 64 implies heads = C/64; C = 96 leaves a remainder
  Rng rng(13);
  LayerDims d = dims_for(96);
  CHECK_THROWS_AS(TransformerLayer<double>(d, rng), std::invalid_argument);
}

TEST_CASE("bidirectionality contrast: causal mamba sees no future, v2 and transformer do") {
  Rng rng(14);
  const Index len = 8, c = 8;
  CausalMambaLayer<double> causal(dims_for(c), rng);
  BiMambaV2Layer<double> v2(dims_for(c), rng);
  TransformerLayer<double> tr(dims_for(c), rng);
  CHECK(sensitivity(causal, 2, 5, len, c, 20) == doctest::Approx(0.0));
  CHECK(sensitivity(causal, 5, 2, len, c, 21) > 0.0);
  CHECK(sensitivity(v2, 2, 5, len, c, 22) > 0.0);
  CHECK(sensitivity(tr, 2, 5, len, c, 23) > 0.0);
}

TEST_CASE("gradient check: all three layer kinds at (1,5,8)") {
  for (LayerKind kind : {LayerKind::Transformer, LayerKind::BiMamba, LayerKind::BiMambaV2}) {
    CAPTURE(layer_kind_name(kind));
    Rng rng(30 + static_cast<int>(kind));
    auto layer = make_layer<double>(kind, dims_for(8), rng);
    std::vector<std::pair<std::string, Tensor<double>>> named;
    layer->collect_params("l", named);
    auto x = Tensor<double>::randn({1, 5, 8}, rng);
    std::vector<Tensor<double>> inputs = {x};
    for (auto& [name, t] : named) inputs.push_back(t);
    GradCheck gc;
    gc.h = 1e-4;  // deep composites sit past the h=1e-5 rounding balance point
    gc.max_coords = 6;
    CHECK(gc.max_rel_error([&]() { return layer->forward(x); }, inputs) < 1e-4);
  }
}

TEST_CASE("gradient check: group layers") {
  for (bool v2 : {false, true}) {
    Rng rng(40 + (v2 ? 1 : 0));
    std::unique_ptr<Layer<double>> layer;
    if (v2)
      layer = std::make_unique<GroupV2Layer<double>>(dims_for(8), rng);
    else
      layer = std::make_unique<GroupV1Layer<double>>(dims_for(8), rng);
    std::vector<std::pair<std::string, Tensor<double>>> named;
    layer->collect_params("l", named);
    auto x = Tensor<double>::randn({1, 4, 8}, rng);
    std::vector<Tensor<double>> inputs = {x};
    for (auto& [name, t] : named) inputs.push_back(t);
    GradCheck gc;
    gc.h = 1e-4;
    gc.max_coords = 4;
    CHECK(gc.max_rel_error([&]() { return layer->forward(x); }, inputs) < 1e-4);
  }
}

// ---------------------------------------------------------------------------
// FLOP model
// ---------------------------------------------------------------------------

TEST_CASE("flops: doubling L exactly doubles both Mamba layers") {
  for (LayerKind kind : {LayerKind::BiMamba, LayerKind::BiMambaV2}) {
    for (Index l : {16, 128, 4096}) {
      const auto f1 = FlopModel::flops(kind, 1, l, 768);
      const auto f2 = FlopModel::flops(kind, 1, 2 * l, 768);
      CHECK(f2 == 2 * f1);
    }
  }
}

TEST_CASE("flops: transformer ratio approaches 4 as L grows") {
  double ratio = 0;
  for (Index l : {1 << 10, 1 << 14, 1 << 20, 1 << 24}) {
    ratio = static_cast<double>(FlopModel::flops(LayerKind::Transformer, 1, 2 * l, 768)) /
            static_cast<double>(FlopModel::flops(LayerKind::Transformer, 1, l, 768));
    CHECK(ratio > 2.0);
    CHECK(ratio < 4.0);
  }
  CHECK(ratio == doctest::Approx(4.0).epsilon(1e-3));
}

TEST_CASE("flops: v1 exceeds v2 at every length for equal width") {
  for (Index c : {64, 256, 768, 1280}) {
    LayerDims d = dims_for(c);
    d.d_state = 16;
    for (Index l : {1, 2, 64, 256, 4096, 65536}) {
      CHECK(FlopModel::flops(LayerKind::BiMamba, 1, l, c, d) >
            FlopModel::flops(LayerKind::BiMambaV2, 1, l, c, d));
    }
  }
}

TEST_CASE("flops: a crossover length exists where the transformer overtakes v2 at C=768") {
  LayerDims d = dims_for(768);
  d.d_state = 16;
  Index crossover = -1;
  for (Index l = 64; l <= 65536; l *= 2) {
    if (FlopModel::flops(LayerKind::Transformer, 1, l, 768, d) >
        FlopModel::flops(LayerKind::BiMambaV2, 1, l, 768, d)) {
      crossover = l;
      break;
    }
  }
  CHECK(crossover > 0);
}

TEST_CASE("flops: log-log exponents are 1.0 for Mamba layers, 2.0 for the transformer at large L") {
  for (LayerKind kind : {LayerKind::BiMamba, LayerKind::BiMambaV2}) {
    std::vector<std::pair<double, double>> pts;
    for (Index l = 64; l <= 8192; l *= 2)
      pts.emplace_back(static_cast<double>(l),
                       static_cast<double>(FlopModel::flops(kind, 1, l, 768)));
    auto fit = fit_log_slope(pts);
    CHECK(fit.exponent == doctest::Approx(1.0).epsilon(0.05));
  }
  std::vector<std::pair<double, double>> pts;
  for (Index l = 1 << 18; l <= 1 << 24; l *= 2)
    pts.emplace_back(static_cast<double>(l),
                     static_cast<double>(FlopModel::flops(LayerKind::Transformer, 1, l, 768)));
  auto fit = fit_log_slope(pts);
  CHECK(fit.exponent == doctest::Approx(2.0).epsilon(0.02));
}
