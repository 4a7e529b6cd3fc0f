#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "maskmamba/config.hpp"
#include "maskmamba/layers.hpp"

namespace maskmamba {

// Where condition embeddings sit inside the flattened sequence. Image token i
// occupies slot i below the insertion point and slot i + cond_len above it,
// which makes the slot map a bijection by construction.
struct SequenceLayout {
  Index n_image = 0;
  Index cond_len = 0;
  Index cond_index = 0;  // first condition slot, in image-token coordinates
  Index seq_len = 0;

  static SequenceLayout build(const ModelConfig& cfg) {
    SequenceLayout lo;
    lo.n_image = cfg.n_image_tokens();
    lo.cond_len = cfg.cond_len();
    lo.seq_len = lo.n_image + lo.cond_len;
    switch (cfg.cond_pos) {
      case CondPos::Head: lo.cond_index = 0; break;
      case CondPos::Middle: lo.cond_index = lo.n_image / 2; break;
      case CondPos::Tail: lo.cond_index = lo.n_image; break;
    }
    return lo;
  }

  Index image_slot(Index i) const { return i < cond_index ? i : i + cond_len; }

  std::vector<Index> image_positions() const {
    std::vector<Index> pos(static_cast<std::size_t>(n_image));
    for (Index i = 0; i < n_image; ++i) pos[static_cast<std::size_t>(i)] = image_slot(i);
    return pos;
  }

  std::vector<Index> cond_positions() const {
    std::vector<Index> pos(static_cast<std::size_t>(cond_len));
    for (Index i = 0; i < cond_len; ++i) pos[static_cast<std::size_t>(i)] = cond_index + i;
    return pos;
  }

  // Inverse of image_slot over the image slots; -1 for condition slots.
  Index slot_to_image(Index slot) const {
    if (slot < cond_index) return slot;
    if (slot < cond_index + cond_len) return -1;
    return slot - cond_len;
  }
};

// Deterministic text-condition stub: caption bytes hash to an RNG stream that
// fills the [n, width] embedding block. Stands in for the out-of-scope T5
// encoder behind the same interface shape.
template <class T>
inline Tensor<T> hash_text_embedding(const std::string& caption, Index n, Index width) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char ch : caption) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  Rng rng(h);
  return Tensor<T>::randn({n, width}, rng, T(0.02));
}

template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), layout_(SequenceLayout::build(cfg)) {
    cfg.validate();
    Rng rng(seed);
    const Index c = cfg.hidden;
    token_emb_ = Tensor<T>::randn({cfg.vocab_size(), c}, rng, T(0.02));
    if (cfg.cond_type == CondType::Class)
      class_emb_ = Tensor<T>::randn({cfg.n_classes, c}, rng, T(0.02));
    null_emb_ = Tensor<T>::randn({1, c}, rng, T(0.02));
    pos_emb_ = Tensor<T>::randn({layout_.seq_len, c}, rng, T(0.02));

    LayerDims dims;
    dims.width = c;
    dims.d_state = cfg.d_state;
    dims.conv_k_std = cfg.conv_k_std;
    dims.conv_k_causal = cfg.conv_k_causal;
    dims.scan = cfg.parallel_scan ? ScanKind::Parallel : ScanKind::Sequential;
    auto mamba_kind =
        cfg.mamba == MambaVariant::V2 ? LayerKind::BiMambaV2 : LayerKind::BiMamba;
    for (Index i = 0; i < cfg.n_layers; ++i) {
      switch (cfg.scheme) {
        case SchemeKind::PureMamba:
          layers_.push_back(make_layer<T>(mamba_kind, dims, rng));
          break;
        case SchemeKind::PureTransformer:
          layers_.push_back(make_layer<T>(LayerKind::Transformer, dims, rng));
          break;
        case SchemeKind::SerialV1:
          // alternating M,S,M,S... with the Transformer after the Mamba
          layers_.push_back(i % 2 == 0 ? make_layer<T>(mamba_kind, dims, rng)
                                       : make_layer<T>(LayerKind::Transformer, dims, rng));
          break;
        case SchemeKind::SerialV2:
          // first N/2 Mamba, last N/2 Transformer
          layers_.push_back(i < cfg.n_layers / 2
                                ? make_layer<T>(mamba_kind, dims, rng)
                                : make_layer<T>(LayerKind::Transformer, dims, rng));
          break;
        case SchemeKind::GroupV1:
          layers_.push_back(std::make_unique<GroupV1Layer<T>>(dims, rng));
          break;
        case SchemeKind::GroupV2:
          layers_.push_back(std::make_unique<GroupV2Layer<T>>(dims, rng));
          break;
      }
    }
    final_norm_ = Norm<T>::make(c);
    head_ = Linear<T>::make(c, cfg.vocab_size(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const SequenceLayout& layout() const { return layout_; }

  // Class-id condition block [B, 1, C].
  Tensor<T> class_cond(const std::vector<Index>& class_ids) {
    if (cfg_.cond_type != CondType::Class)
      throw std::invalid_argument("class_cond: model is text-conditional");
    for (Index id : class_ids)
      if (id < 0 || id >= cfg_.n_classes)
        throw std::out_of_range("class id " + std::to_string(id) + " outside [0," +
                                std::to_string(cfg_.n_classes) + ")");
    return embedding(class_emb_, class_ids, {static_cast<Index>(class_ids.size()), 1});
  }

  // Learned null condition tiled to [B, cond_len, C]; the unconditional path
  // for classifier-free guidance.
  Tensor<T> null_cond(Index batch) {
    std::vector<Index> zeros(static_cast<std::size_t>(batch * layout_.cond_len), 0);
    return embedding(null_emb_, zeros, {batch, layout_.cond_len});
  }

  // Text condition block from precomputed embeddings [B, text_len, C].
  Tensor<T> text_cond(const Tensor<T>& emb) const {
    if (cfg_.cond_type != CondType::Text)
      throw std::invalid_argument("text_cond: model is class-conditional");
    if (emb.ndim() != 3 || emb.dim(1) != cfg_.text_len || emb.dim(2) != cfg_.hidden)
      throw std::invalid_argument("text_cond: expected [B," + std::to_string(cfg_.text_len) +
                                  "," + std::to_string(cfg_.hidden) + "], got " +
                                  shape_str(emb.shape()));
    return emb;
  }

  // token_ids: B * h*w entries with mask_token_id at masked slots.
  // cond: [B, cond_len, C]. Returns the embedded sequence [B, seq_len, C]
  // with positional embeddings over every slot including the conditions.
  Tensor<T> embed_sequence(const std::vector<Index>& token_ids, Index batch,
                           const Tensor<T>& cond) {
    const Index n = layout_.n_image;
    if (static_cast<Index>(token_ids.size()) != batch * n)
      throw std::invalid_argument("embed_sequence: expected " + std::to_string(batch * n) +
                                  " token ids, got " + std::to_string(token_ids.size()));
    if (cond.ndim() != 3 || cond.dim(0) != batch || cond.dim(1) != layout_.cond_len ||
        cond.dim(2) != cfg_.hidden)
      throw std::invalid_argument("embed_sequence: bad condition block " +
                                  shape_str(cond.shape()));
    Tensor<T> img = embedding(token_emb_, token_ids, {batch, n});
    Tensor<T> seq;
    if (layout_.cond_index == 0) {
      seq = concat(cond, img, 1);
    } else if (layout_.cond_index == n) {
      seq = concat(img, cond, 1);
    } else {
      auto halves = split(img, {layout_.cond_index, n - layout_.cond_index}, 1);
      seq = concat(std::vector<Tensor<T>>{halves[0], cond, halves[1]}, 1);
    }
    return add(seq, pos_emb_);
  }

  // Runs the stack and the output head at image-token slots only: [B, h*w, V].
  Tensor<T> forward_logits(const Tensor<T>& seq) {
    if (seq.dim(1) != layout_.seq_len)
      throw std::invalid_argument("forward_logits: sequence length " +
                                  std::to_string(seq.dim(1)) + " does not match layout " +
                                  std::to_string(layout_.seq_len));
    ++forward_calls_;
    Tensor<T> h = seq;
    for (auto& layer : layers_) h = layer->forward(h);
    h = final_norm_(h);
    return head_(gather_positions(h, layout_.image_positions()));
  }

  Tensor<T> forward_logits(const std::vector<Index>& token_ids, Index batch,
                           const Tensor<T>& cond) {
    return forward_logits(embed_sequence(token_ids, batch, cond));
  }

  std::vector<std::pair<std::string, Tensor<T>>> params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("token_emb", token_emb_);
    if (cfg_.cond_type == CondType::Class) out.emplace_back("class_emb", class_emb_);
    out.emplace_back("null_emb", null_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i]->collect_params("layers." + std::to_string(i), out);
    final_norm_.collect("final_norm", out);
    head_.collect("head", out);
    return out;
  }

  std::vector<Tensor<T>> param_tensors() {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : params()) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool v = true) {
    for (auto& [name, t] : params()) t.set_requires_grad(v);
  }

  Index param_count() {
    Index total = 0;
    for (auto& [name, t] : params()) total += t.numel();
    return total;
  }

  std::vector<std::string> layer_kinds() const {
    std::vector<std::string> kinds;
    kinds.reserve(layers_.size());
    for (const auto& l : layers_) kinds.push_back(l->kind());
    return kinds;
  }

  Layer<T>& layer(Index i) { return *layers_[static_cast<std::size_t>(i)]; }
  Tensor<T>& token_emb() { return token_emb_; }
  Tensor<T>& class_emb() { return class_emb_; }
  Tensor<T>& null_emb() { return null_emb_; }
  Tensor<T>& pos_emb() { return pos_emb_; }

  std::int64_t forward_calls() const { return forward_calls_; }
  void reset_forward_calls() { forward_calls_ = 0; }

 private:
  ModelConfig cfg_;
  SequenceLayout layout_;
  Tensor<T> token_emb_, class_emb_, null_emb_, pos_emb_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  Norm<T> final_norm_;
  Linear<T> head_;
  std::int64_t forward_calls_ = 0;
};

}  // namespace maskmamba
