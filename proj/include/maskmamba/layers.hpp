#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "maskmamba/ops.hpp"
#include "maskmamba/ssm.hpp"
#include "maskmamba/tensor.hpp"

namespace maskmamba {

// ---------------------------------------------------------------------------
// parameter bundles
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
  Tensor<T> w, b;

  static Linear make(Index in, Index out, Rng& rng) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
    return {Tensor<T>::uniform({in, out}, rng, -bound, bound), Tensor<T>::zeros({out})};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, w, b); }

  void collect(const std::string& p, std::vector<std::pair<std::string, Tensor<T>>>& out) {
    out.emplace_back(p + ".w", w);
    out.emplace_back(p + ".b", b);
  }
};

template <class T>
struct Norm {
  Tensor<T> gamma, beta;

  static Norm make(Index c) { return {Tensor<T>::full({c}, T(1)), Tensor<T>::zeros({c})}; }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& p, std::vector<std::pair<std::string, Tensor<T>>>& out) {
    out.emplace_back(p + ".gamma", gamma);
    out.emplace_back(p + ".beta", beta);
  }
};

template <class T>
struct Conv1d {
  Tensor<T> kernel;  // [K, C]
  ConvMode mode = ConvMode::Standard;

  static Conv1d make(Index k, Index c, ConvMode mode, Rng& rng) {
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(k)));
    return {Tensor<T>::uniform({k, c}, rng, -bound, bound), mode};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv1d_depthwise(x, kernel, mode); }

  void collect(const std::string& p, std::vector<std::pair<std::string, Tensor<T>>>& out) {
    out.emplace_back(p + ".kernel", kernel);
  }
};

// ---------------------------------------------------------------------------
// layer interface
// ---------------------------------------------------------------------------

struct LayerDims {
  Index width = 0;          // channel width C
  Index d_state = 16;       // SSM state size
  Index conv_k_std = 3;     // standard conv kernel (Bi-Mamba-v2)
  Index conv_k_causal = 4;  // causal conv kernel (original Bi-Mamba)
  ScanKind scan = ScanKind::Sequential;
};

template <class T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual std::string kind() const = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<std::pair<std::string, Tensor<T>>>& out) = 0;
};

// ---------------------------------------------------------------------------
// Bi-Mamba-v2: standard convolutions, two C/2 branches, concatenation
// ---------------------------------------------------------------------------

// x  = silu(Conv(Linear(C,C/2)(X_in)))
// x^ = ForwardSSM(x) + Flip(BackwardSSM(Flip(x)))
// z  = silu(Conv(Linear(C,C/2)(X_in)))
// out = X_in + Linear(C,C)(Concat(x^, z))
template <class T>
class BiMambaV2Layer : public Layer<T> {
 public:
  BiMambaV2Layer(const LayerDims& dims, Rng& rng) : dims_(dims) {
    const Index c = dims.width;
    if (c % 2 != 0)
      throw std::invalid_argument("BiMambaV2Layer: width must be even, got " + std::to_string(c));
    const Index half = c / 2;
    norm_ = Norm<T>::make(c);
    proj_x_ = Linear<T>::make(c, half, rng);
    proj_z_ = Linear<T>::make(c, half, rng);
    conv_x_ = Conv1d<T>::make(dims.conv_k_std, half, ConvMode::Standard, rng);
    conv_z_ = Conv1d<T>::make(dims.conv_k_std, half, ConvMode::Standard, rng);
    ssm_fwd_ = SsmParams<T>::make(half, dims.d_state, rng);
    ssm_bwd_ = SsmParams<T>::make(half, dims.d_state, rng);
    proj_out_ = Linear<T>::make(c, c, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    Tensor<T> h = norm_(x);
    Tensor<T> xb = silu(conv_x_(proj_x_(h)));
    Tensor<T> x_hat = add(ssm_forward(xb, ssm_fwd_, dims_.scan),
                          flip(ssm_forward(flip(xb, 1), ssm_bwd_, dims_.scan), 1));
    Tensor<T> z = silu(conv_z_(proj_z_(h)));
    return add(x, proj_out_(concat(x_hat, z, -1)));
  }

  std::string kind() const override { return "bimamba_v2"; }

  void collect_params(const std::string& p,
                      std::vector<std::pair<std::string, Tensor<T>>>& out) override {
    norm_.collect(p + ".norm", out);
    proj_x_.collect(p + ".proj_x", out);
    proj_z_.collect(p + ".proj_z", out);
    conv_x_.collect(p + ".conv_x", out);
    conv_z_.collect(p + ".conv_z", out);
    ssm_fwd_.collect_params(p + ".ssm_fwd", out);
    ssm_bwd_.collect_params(p + ".ssm_bwd", out);
    proj_out_.collect(p + ".proj_out", out);
  }

  Linear<T>& proj_out() { return proj_out_; }

 private:
  LayerDims dims_;
  Norm<T> norm_;
  Linear<T> proj_x_, proj_z_;
  Conv1d<T> conv_x_, conv_z_;
  SsmParams<T> ssm_fwd_, ssm_bwd_;
  Linear<T> proj_out_;
};

// ---------------------------------------------------------------------------
// original Bi-Mamba (Vision Mamba style): causal conv, full-width forward and
// backward SSM, multiplicative SiLU gate
// ---------------------------------------------------------------------------

template <class T>
class BiMambaLayer : public Layer<T> {
 public:
  static constexpr Index kExpand = 2;

  BiMambaLayer(const LayerDims& dims, Rng& rng) : dims_(dims) {
    const Index c = dims.width;
    const Index e = kExpand * c;
    norm_ = Norm<T>::make(c);
    in_proj_ = Linear<T>::make(c, 2 * e, rng);  // halves: scan path x, gate z
    conv_ = Conv1d<T>::make(dims.conv_k_causal, e, ConvMode::Causal, rng);
    ssm_fwd_ = SsmParams<T>::make(e, dims.d_state, rng);
    ssm_bwd_ = SsmParams<T>::make(e, dims.d_state, rng);
    out_proj_ = Linear<T>::make(e, c, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const Index e = kExpand * dims_.width;
    Tensor<T> h = norm_(x);
    auto xz = split(in_proj_(h), {e, e}, -1);
    Tensor<T> xc = silu(conv_(xz[0]));
    Tensor<T> y = add(ssm_forward(xc, ssm_fwd_, dims_.scan),
                      flip(ssm_forward(flip(xc, 1), ssm_bwd_, dims_.scan), 1));
    Tensor<T> gated = mul(y, silu(xz[1]));
    return add(x, out_proj_(gated));
  }

  std::string kind() const override { return "bimamba"; }

  void collect_params(const std::string& p,
                      std::vector<std::pair<std::string, Tensor<T>>>& out) override {
    norm_.collect(p + ".norm", out);
    in_proj_.collect(p + ".in_proj", out);
    conv_.collect(p + ".conv", out);
    ssm_fwd_.collect_params(p + ".ssm_fwd", out);
    ssm_bwd_.collect_params(p + ".ssm_bwd", out);
    out_proj_.collect(p + ".out_proj", out);
  }

  Linear<T>& in_proj() { return in_proj_; }
  Linear<T>& out_proj() { return out_proj_; }

 private:
  LayerDims dims_;
  Norm<T> norm_;
  Linear<T> in_proj_;
  Conv1d<T> conv_;
  SsmParams<T> ssm_fwd_, ssm_bwd_;
  Linear<T> out_proj_;
};

// ---------------------------------------------------------------------------
// pre-norm Transformer block, full bidirectional attention (no causal mask)
// ---------------------------------------------------------------------------

template <class T>
class TransformerLayer : public Layer<T> {
 public:
  static constexpr Index kHeadDim = 64;
  static constexpr Index kMlpRatio = 4;

  explicit TransformerLayer(const LayerDims& dims, Rng& rng) : dims_(dims) {
    const Index c = dims.width;
    if (c >= kHeadDim && c % kHeadDim != 0)
      throw std::invalid_argument("TransformerLayer: width " + std::to_string(c) +
                                  " is not a multiple of the head width " +
                                  std::to_string(kHeadDim));
    heads_ = c >= kHeadDim ? c / kHeadDim : 1;
    norm1_ = Norm<T>::make(c);
    norm2_ = Norm<T>::make(c);
    qkv_ = Linear<T>::make(c, 3 * c, rng);
    out_proj_ = Linear<T>::make(c, c, rng);
    fc1_ = Linear<T>::make(c, kMlpRatio * c, rng);
    fc2_ = Linear<T>::make(kMlpRatio * c, c, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const Index c = dims_.width;
    auto qkv = split(qkv_(norm1_(x)), {c, c, c}, -1);
    Tensor<T> attn = multi_head_attention(qkv[0], qkv[1], qkv[2], heads_);
    Tensor<T> h = add(x, out_proj_(attn));
    return add(h, fc2_(gelu(fc1_(norm2_(h)))));
  }

  // Row-stochastic attention weights for the given input, [B,heads,L,L].
  Tensor<T> attention_weights(const Tensor<T>& x) {
    NoGradGuard ng;
    const Index c = dims_.width;
    auto qkv = split(qkv_(norm1_(x)), {c, c, c}, -1);
    return attention_probs(qkv[0], qkv[1], heads_);
  }

  std::string kind() const override { return "transformer"; }
  Index heads() const { return heads_; }

  void collect_params(const std::string& p,
                      std::vector<std::pair<std::string, Tensor<T>>>& out) override {
    norm1_.collect(p + ".norm1", out);
    qkv_.collect(p + ".qkv", out);
    out_proj_.collect(p + ".out_proj", out);
    norm2_.collect(p + ".norm2", out);
    fc1_.collect(p + ".fc1", out);
    fc2_.collect(p + ".fc2", out);
  }

 private:
  LayerDims dims_;
  Index heads_ = 1;
  Norm<T> norm1_, norm2_;
  Linear<T> qkv_, out_proj_;
  Linear<T> fc1_, fc2_;
};

// ---------------------------------------------------------------------------
// grouped parallel layers
// ---------------------------------------------------------------------------

// Two channel groups: Bi-Mamba-v2 on one half, Transformer on the other,
// concat, then Norm + Project with a residual around the whole block.
template <class T>
class GroupV1Layer : public Layer<T> {
 public:
  GroupV1Layer(const LayerDims& dims, Rng& rng) {
    const Index c = dims.width;
    if (c % 2 != 0)
      throw std::invalid_argument("GroupV1Layer: width must be divisible by 2");
    LayerDims half = dims;
    half.width = c / 2;
    mamba_ = std::make_unique<BiMambaV2Layer<T>>(half, rng);
    attn_ = std::make_unique<TransformerLayer<T>>(half, rng);
    norm_ = Norm<T>::make(c);
    proj_ = Linear<T>::make(c, c, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    auto halves = split_equal(x, 2, -1);
    Tensor<T> y = concat(mamba_->forward(halves[0]), attn_->forward(halves[1]), -1);
    return add(x, proj_(norm_(y)));
  }

  std::string kind() const override { return "group_v1"; }

  void collect_params(const std::string& p,
                      std::vector<std::pair<std::string, Tensor<T>>>& out) override {
    mamba_->collect_params(p + ".mamba", out);
    attn_->collect_params(p + ".attn", out);
    norm_.collect(p + ".norm", out);
    proj_.collect(p + ".proj", out);
  }

 private:
  std::unique_ptr<BiMambaV2Layer<T>> mamba_;
  std::unique_ptr<TransformerLayer<T>> attn_;
  Norm<T> norm_;
  Linear<T> proj_;
};

// Four channel groups: forward-SSM branch, backward-SSM branch, and two
// independent Transformer paths.
template <class T>
class GroupV2Layer : public Layer<T> {
 public:
  GroupV2Layer(const LayerDims& dims, Rng& rng) : dims_(dims) {
    const Index c = dims.width;
    if (c % 4 != 0)
      throw std::invalid_argument("GroupV2Layer: width must be divisible by 4");
    const Index q = c / 4;
    LayerDims quarter = dims;
    quarter.width = q;
    norm_fwd_ = Norm<T>::make(q);
    norm_bwd_ = Norm<T>::make(q);
    conv_fwd_ = Conv1d<T>::make(dims.conv_k_std, q, ConvMode::Standard, rng);
    conv_bwd_ = Conv1d<T>::make(dims.conv_k_std, q, ConvMode::Standard, rng);
    ssm_fwd_ = SsmParams<T>::make(q, dims.d_state, rng);
    ssm_bwd_ = SsmParams<T>::make(q, dims.d_state, rng);
    attn1_ = std::make_unique<TransformerLayer<T>>(quarter, rng);
    attn2_ = std::make_unique<TransformerLayer<T>>(quarter, rng);
    norm_ = Norm<T>::make(c);
    proj_ = Linear<T>::make(c, c, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    auto g = split_equal(x, 4, -1);
    Tensor<T> y1 = ssm_forward(silu(conv_fwd_(norm_fwd_(g[0]))), ssm_fwd_, dims_.scan);
    Tensor<T> y2 =
        flip(ssm_forward(flip(silu(conv_bwd_(norm_bwd_(g[1]))), 1), ssm_bwd_, dims_.scan), 1);
    Tensor<T> y3 = attn1_->forward(g[2]);
    Tensor<T> y4 = attn2_->forward(g[3]);
    Tensor<T> y = concat(std::vector<Tensor<T>>{y1, y2, y3, y4}, -1);
    return add(x, proj_(norm_(y)));
  }

  std::string kind() const override { return "group_v2"; }

  void collect_params(const std::string& p,
                      std::vector<std::pair<std::string, Tensor<T>>>& out) override {
    norm_fwd_.collect(p + ".norm_fwd", out);
    conv_fwd_.collect(p + ".conv_fwd", out);
    ssm_fwd_.collect_params(p + ".ssm_fwd", out);
    norm_bwd_.collect(p + ".norm_bwd", out);
    conv_bwd_.collect(p + ".conv_bwd", out);
    ssm_bwd_.collect_params(p + ".ssm_bwd", out);
    attn1_->collect_params(p + ".attn1", out);
    attn2_->collect_params(p + ".attn2", out);
    norm_.collect(p + ".norm", out);
    proj_.collect(p + ".proj", out);
  }

 private:
  LayerDims dims_;
  Norm<T> norm_fwd_, norm_bwd_;
  Conv1d<T> conv_fwd_, conv_bwd_;
  SsmParams<T> ssm_fwd_, ssm_bwd_;
  std::unique_ptr<TransformerLayer<T>> attn1_, attn2_;
  Norm<T> norm_;
  Linear<T> proj_;
};

// Causal-only Mamba (Fig. 3a), used as a unidirectional contrast in tests.
template <class T>
class CausalMambaLayer : public Layer<T> {
 public:
  CausalMambaLayer(const LayerDims& dims, Rng& rng) : dims_(dims) {
    const Index c = dims.width;
    const Index e = 2 * c;
    norm_ = Norm<T>::make(c);
    in_proj_ = Linear<T>::make(c, 2 * e, rng);
    conv_ = Conv1d<T>::make(dims.conv_k_causal, e, ConvMode::Causal, rng);
    ssm_ = SsmParams<T>::make(e, dims.d_state, rng);
    out_proj_ = Linear<T>::make(e, c, rng);
  }

  Tensor<T> forward(const Tensor<T>& x) override {
    const Index e = 2 * dims_.width;
    auto xz = split(in_proj_(norm_(x)), {e, e}, -1);
    Tensor<T> y = ssm_forward(silu(conv_(xz[0])), ssm_, dims_.scan);
    return add(x, out_proj_(mul(y, silu(xz[1]))));
  }

  std::string kind() const override { return "causal_mamba"; }

  void collect_params(const std::string& p,
                      std::vector<std::pair<std::string, Tensor<T>>>& out) override {
    norm_.collect(p + ".norm", out);
    in_proj_.collect(p + ".in_proj", out);
    conv_.collect(p + ".conv", out);
    ssm_.collect_params(p + ".ssm", out);
    out_proj_.collect(p + ".out_proj", out);
  }

 private:
  LayerDims dims_;
  Norm<T> norm_;
  Linear<T> in_proj_;
  Conv1d<T> conv_;
  SsmParams<T> ssm_;
  Linear<T> out_proj_;
};

// ---------------------------------------------------------------------------
// analytic FLOP model
// ---------------------------------------------------------------------------

enum class LayerKind { Transformer, BiMamba, BiMambaV2 };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Transformer: return "transformer";
    case LayerKind::BiMamba: return "bimamba";
    case LayerKind::BiMambaV2: return "bimamba_v2";
  }
  return "?";
}

// Closed-form forward FLOP counts. Conventions: one fused multiply-add is 2
// FLOPs; exp and division count 1 each; depthwise conv is counted as if every
// tap were applied (edge padding ignored), which keeps every non-attention
// term exactly linear in L. Attention contributes 2*B*heads*L^2*(C/heads)
// for each of QK^T and AV plus 5 ops per softmax cell.
class FlopModel {
 public:
  static std::int64_t linear(Index b, Index l, Index in, Index out) {
    return 2 * b * l * in * out + b * l * out;
  }
  static std::int64_t conv(Index b, Index l, Index c, Index k) { return 2 * b * l * c * k; }
  static std::int64_t norm(Index b, Index l, Index c) { return 8 * b * l * c; }
  static std::int64_t silu(Index b, Index l, Index c) { return 5 * b * l * c; }
  static std::int64_t gelu(Index b, Index l, Index c) { return 7 * b * l * c; }
  // One scan direction at inner width i with s states, including the shared
  // B/C/pre-delta projection, softplus, discretization, recurrence, readout
  // and skip term.
  static std::int64_t scan(Index b, Index l, Index i, Index s) {
    return linear(b, l, i, 2 * s + i) + 5 * b * l * i /*softplus*/ +
           b * l * i * (7 * s + 4) /*discretize+recurrence+readout+skip*/;
  }
  static std::int64_t attention(Index b, Index l, Index c, Index heads) {
    return 4 * b * l * l * c + 5 * b * heads * l * l;
  }

  static std::int64_t flops(LayerKind kind, Index b, Index l, Index c,
                            const LayerDims& dims = {}) {
    switch (kind) {
      case LayerKind::Transformer: {
        const Index heads = c >= TransformerLayer<float>::kHeadDim
                                ? c / TransformerLayer<float>::kHeadDim
                                : 1;
        return norm(b, l, c) + linear(b, l, c, 3 * c) + attention(b, l, c, heads) +
               linear(b, l, c, c) + norm(b, l, c) + linear(b, l, c, 4 * c) + gelu(b, l, 4 * c) +
               linear(b, l, 4 * c, c) + 2 * b * l * c /*residuals*/;
      }
      case LayerKind::BiMamba: {
        const Index e = 2 * c;
        return norm(b, l, c) + linear(b, l, c, 2 * e) + conv(b, l, e, dims.conv_k_causal) +
               silu(b, l, e) + 2 * scan(b, l, e, dims.d_state) + b * l * e /*sum fwd+bwd*/ +
               silu(b, l, e) + b * l * e /*gate mul*/ + linear(b, l, e, c) +
               b * l * c /*residual*/;
      }
      case LayerKind::BiMambaV2: {
        const Index h = c / 2;
        return norm(b, l, c) + 2 * linear(b, l, c, h) + 2 * conv(b, l, h, dims.conv_k_std) +
               2 * silu(b, l, h) + 2 * scan(b, l, h, dims.d_state) + b * l * h /*sum fwd+bwd*/ +
               linear(b, l, c, c) + b * l * c /*residual*/;
      }
    }
    return 0;
  }
};

// Construct a standalone layer of the given kind (benchmark harness entry).
template <class T>
inline std::unique_ptr<Layer<T>> make_layer(LayerKind kind, const LayerDims& dims, Rng& rng) {
  switch (kind) {
    case LayerKind::Transformer: return std::make_unique<TransformerLayer<T>>(dims, rng);
    case LayerKind::BiMamba: return std::make_unique<BiMambaLayer<T>>(dims, rng);
    case LayerKind::BiMambaV2: return std::make_unique<BiMambaV2Layer<T>>(dims, rng);
  }
  throw std::invalid_argument("make_layer: unknown kind");
}

}  // namespace maskmamba
