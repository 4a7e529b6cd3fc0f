#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "maskmamba/model.hpp"
#include "testutil.hpp"

using namespace maskmamba;
using maskmamba::test::GradCheck;

namespace {

ModelConfig tiny_config(SchemeKind scheme, Index layers = 2, Index hidden = 8) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.hidden = hidden;
  cfg.scheme = scheme;
  cfg.cond_pos = CondPos::Middle;
  cfg.cond_type = CondType::Class;
  cfg.n_classes = 4;
  cfg.codebook_size = 8;
  cfg.grid_h = 2;
  cfg.grid_w = 2;
  cfg.d_state = 4;
  return cfg;
}

std::vector<Index> arbitrary_tokens(const ModelConfig& cfg, Index batch, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Index> ids(static_cast<std::size_t>(batch * cfg.n_image_tokens()));
  for (auto& id : ids) id = static_cast<Index>(rng.below(static_cast<std::uint64_t>(cfg.codebook_size)));
  return ids;
}

}  // namespace

TEST_CASE("assemble: serial_v2 stacks all Mamba layers before all Transformer layers") {
  auto cfg = tiny_config(SchemeKind::SerialV2, 24, 64);
  Model<float> m(cfg, 1);
  auto kinds = m.layer_kinds();
  for (Index i = 0; i < 12; ++i) CHECK(kinds[static_cast<std::size_t>(i)] == "bimamba_v2");
  for (Index i = 12; i < 24; ++i) CHECK(kinds[static_cast<std::size_t>(i)] == "transformer");
}

TEST_CASE("assemble: serial_v1 alternates M,S,M,S,...") {
  auto cfg = tiny_config(SchemeKind::SerialV1, 12, 64);
  Model<float> m(cfg, 1);
  auto kinds = m.layer_kinds();
  for (Index i = 0; i < 12; ++i)
    CHECK(kinds[static_cast<std::size_t>(i)] == (i % 2 == 0 ? "bimamba_v2" : "transformer"));
}

TEST_CASE("assemble: mamba variant knob selects the original Bi-Mamba") {
  auto cfg = tiny_config(SchemeKind::PureMamba, 2, 8);
  cfg.mamba = MambaVariant::V1;
  Model<float> m(cfg, 1);
  for (const auto& k : m.layer_kinds()) CHECK(k == "bimamba");
  cfg.mamba = MambaVariant::V2;
  Model<float> m2(cfg, 1);
  for (const auto& k : m2.layer_kinds()) CHECK(k == "bimamba_v2");
}

TEST_CASE("assemble: group_v1 splits channels into two equal groups") {
  Rng rng(3);
  LayerDims dims;
  dims.width = 8;
  dims.d_state = 4;
  GroupV1Layer<float> layer(dims, rng);
  std::vector<std::pair<std::string, Tensor<float>>> params;
  layer.collect_params("g", params);
  for (auto& [name, t] : params) {
    if (name == "g.mamba.proj_x.w") CHECK(t.shape() == Shape{4, 2});  // width 4 branch
    if (name == "g.proj.w") CHECK(t.shape() == Shape{8, 8});
  }
}

TEST_CASE("assemble: invalid configurations are rejected") {
  CHECK_THROWS_AS(Model<float>(tiny_config(SchemeKind::SerialV1, 3, 8), 1),
                  std::invalid_argument);  // odd layers for serial
  CHECK_THROWS_AS(Model<float>(tiny_config(SchemeKind::SerialV2, 5, 8), 1),
                  std::invalid_argument);
  auto cfg = tiny_config(SchemeKind::GroupV2, 2, 6);
  CHECK_THROWS_AS(Model<float>(cfg, 1), std::invalid_argument);  // 6 % 4 != 0
}

TEST_CASE("layout: middle insertion lands at floor(h*w/2) giving length 257 for 16x16") {
  ModelConfig cfg = tiny_config(SchemeKind::SerialV2);
  cfg.grid_h = 16;
  cfg.grid_w = 16;
  auto lo = SequenceLayout::build(cfg);
  CHECK(lo.seq_len == 257);
  CHECK(lo.cond_index == 128);
  CHECK(lo.cond_positions() == std::vector<Index>{128});
  // image token 128 is displaced one slot to the right
  CHECK(lo.image_slot(127) == 127);
  CHECK(lo.image_slot(128) == 129);
}

TEST_CASE("layout: head places condition at [0, cond_len)") {
  ModelConfig cfg = tiny_config(SchemeKind::SerialV2);
  cfg.cond_pos = CondPos::Head;
  cfg.cond_type = CondType::Text;
  cfg.text_len = 3;
  auto lo = SequenceLayout::build(cfg);
  CHECK(lo.cond_positions() == std::vector<Index>{0, 1, 2});
  CHECK(lo.image_slot(0) == 3);
  cfg.cond_pos = CondPos::Tail;
  auto lt = SequenceLayout::build(cfg);
  CHECK(lt.cond_positions() == std::vector<Index>{4, 5, 6});
  CHECK(lt.image_slot(3) == 3);
}

TEST_CASE("layout: slot map is a bijection over every condition placement") {
  for (CondPos pos : {CondPos::Head, CondPos::Middle, CondPos::Tail}) {
    ModelConfig cfg = tiny_config(SchemeKind::SerialV2);
    cfg.cond_pos = pos;
    cfg.grid_h = 3;
    cfg.grid_w = 5;
    auto lo = SequenceLayout::build(cfg);
    std::vector<bool> hit(static_cast<std::size_t>(lo.seq_len), false);
    for (Index i = 0; i < lo.n_image; ++i) {
      const Index s = lo.image_slot(i);
      CHECK(!hit[static_cast<std::size_t>(s)]);
      hit[static_cast<std::size_t>(s)] = true;
      CHECK(lo.slot_to_image(s) == i);  // de-insertion recovers the order
    }
    for (Index s : lo.cond_positions()) {
      CHECK(!hit[static_cast<std::size_t>(s)]);
      hit[static_cast<std::size_t>(s)] = true;
      CHECK(lo.slot_to_image(s) == -1);
    }
    for (bool h : hit) CHECK(h);
  }
}

TEST_CASE("embed_sequence: fully masked input uses the same [M] embedding at every image slot") {
  auto cfg = tiny_config(SchemeKind::SerialV2);
  Model<double> m(cfg, 7);
  const Index n = cfg.n_image_tokens(), c = cfg.hidden;
  std::vector<Index> ids(static_cast<std::size_t>(n), cfg.mask_token_id());
  auto cond = m.class_cond({1});
  auto seq = sub(m.embed_sequence(ids, 1, cond), m.pos_emb());  // strip positions
  auto positions = m.layout().image_positions();
  const double* base = seq.data().data() + positions[0] * c;
  for (Index i = 1; i < n; ++i)
    for (Index j = 0; j < c; ++j)
      CHECK(seq.data()[positions[static_cast<std::size_t>(i)] * c + j] ==
            doctest::Approx(base[j]));
}

TEST_CASE("embed_sequence: out-of-range token id is rejected") {
  auto cfg = tiny_config(SchemeKind::SerialV2);
  Model<double> m(cfg, 7);
  std::vector<Index> ids(static_cast<std::size_t>(cfg.n_image_tokens()), cfg.vocab_size());
  CHECK_THROWS_AS(m.embed_sequence(ids, 1, m.class_cond({0})), std::out_of_range);
}

TEST_CASE("forward_logits: emits exactly h*w rows of vocab logits for a 16x16 grid") {
  ModelConfig cfg = tiny_config(SchemeKind::SerialV2, 2, 8);
  cfg.grid_h = 16;
  cfg.grid_w = 16;
  cfg.codebook_size = 16;
  Model<float> m(cfg, 3);
  auto ids = arbitrary_tokens(cfg, 2, 5);
  auto logits = m.forward_logits(ids, 2, m.class_cond({0, 1}));
  CHECK(logits.shape() == Shape{2, 256, 17});  // K plus the mask token
  CHECK(m.forward_calls() == 1);
}

TEST_CASE("forward_logits: condition reaches every image position") {
  ModelConfig cfg = tiny_config(SchemeKind::SerialV2, 2, 8);
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  Model<double> m(cfg, 11);
  auto ids = arbitrary_tokens(cfg, 1, 13);
  auto l0 = m.forward_logits(ids, 1, m.class_cond({0}));
  auto l1 = m.forward_logits(ids, 1, m.class_cond({1}));
  for (Index i = 0; i < 16; ++i) {
    double delta = 0;
    for (Index v = 0; v < cfg.vocab_size(); ++v)
      delta += std::abs(l0.data()[i * cfg.vocab_size() + v] -
                        l1.data()[i * cfg.vocab_size() + v]);
    CHECK(delta > 0.0);
  }
}

TEST_CASE("forward_logits: a later unmasked token influences earlier positions") {
  ModelConfig cfg = tiny_config(SchemeKind::SerialV2, 2, 8);
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  Model<double> m(cfg, 17);
  auto ids = arbitrary_tokens(cfg, 1, 19);
  auto cond = m.class_cond({2});
  auto l0 = m.forward_logits(ids, 1, cond);
  const Index j = 12;  // change a late token, inspect position 3 < j
  ids[j] = (ids[j] + 1) % cfg.codebook_size;
  auto l1 = m.forward_logits(ids, 1, cond);
  double delta = 0;
  for (Index v = 0; v < cfg.vocab_size(); ++v)
    delta += std::abs(l0.data()[3 * cfg.vocab_size() + v] - l1.data()[3 * cfg.vocab_size() + v]);
  CHECK(delta > 0.0);
}

TEST_CASE("param_count: doubling depth slightly less than doubles the total") {
  auto cfg12 = tiny_config(SchemeKind::SerialV2, 12, 64);
  auto cfg24 = tiny_config(SchemeKind::SerialV2, 24, 64);
  Model<float> a(cfg12, 1), b(cfg24, 1);
  CHECK(b.param_count() < 2 * a.param_count());
  CHECK(b.param_count() > a.param_count());
}

TEST_CASE("param_count: group_v2 is smaller than group_v1 at equal width") {
  auto g1 = tiny_config(SchemeKind::GroupV1, 4, 64);
  auto g2 = tiny_config(SchemeKind::GroupV2, 4, 64);
  CHECK(Model<float>(g2, 1).param_count() < Model<float>(g1, 1).param_count());
}

TEST_CASE("param_count: transformer-B configuration lands in the ~100M range (informational)") {
  ModelConfig cfg;
  cfg.n_layers = 12;
  cfg.hidden = 768;
  cfg.scheme = SchemeKind::PureTransformer;
  cfg.grid_h = 16;
  cfg.grid_w = 16;
  cfg.codebook_size = 1024;
  cfg.n_classes = 1000;
  Model<float> m(cfg, 1);
  const double millions = static_cast<double>(m.param_count()) / 1e6;
  MESSAGE("PureTransformer (12, 768): " << millions << "M parameters (paper reports 101M)");
  CHECK(millions > 60.0);
  CHECK(millions < 160.0);
}

TEST_CASE("determinism: identical seeds build identical models") {
  auto cfg = tiny_config(SchemeKind::SerialV2);
  Model<float> a(cfg, 42), b(cfg, 42);
  auto pa = a.params(), pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(std::memcmp(pa[i].second.data().data(), pb[i].second.data().data(),
                      pa[i].second.data().size() * sizeof(float)) == 0);
  }
}

TEST_CASE("gradient check: every scheme end-to-end on a tiny config") {
  for (SchemeKind scheme : {SchemeKind::PureMamba, SchemeKind::PureTransformer,
                            SchemeKind::GroupV1, SchemeKind::GroupV2, SchemeKind::SerialV1,
                            SchemeKind::SerialV2}) {
    CAPTURE(to_string(scheme));
    auto cfg = tiny_config(scheme);
    Model<double> m(cfg, 23);
    m.set_requires_grad(true);
    auto ids = arbitrary_tokens(cfg, 1, 29);
    ids[1] = cfg.mask_token_id();
    GradCheck gc;
    gc.h = 1e-4;
    gc.max_coords = 3;
    auto inputs = m.param_tensors();
    auto err = gc.max_rel_error(
        [&]() { return m.forward_logits(ids, 1, m.class_cond({1})); }, inputs);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("text conditioning: deterministic stub embeddings with the T5 interface shape") {
  ModelConfig cfg = tiny_config(SchemeKind::SerialV2);
  cfg.cond_type = CondType::Text;
  cfg.text_len = 5;
  Model<double> m(cfg, 31);
  auto e1 = hash_text_embedding<double>("a red square", cfg.text_len, cfg.hidden);
  auto e2 = hash_text_embedding<double>("a red square", cfg.text_len, cfg.hidden);
  auto e3 = hash_text_embedding<double>("a blue circle", cfg.text_len, cfg.hidden);
  CHECK(std::memcmp(e1.data().data(), e2.data().data(), sizeof(double) * e1.numel()) == 0);
  CHECK(test::max_abs_diff(e1, e3) > 0.0);

  auto cond = m.text_cond(e1.reshape({1, 5, 8}));
  auto ids = arbitrary_tokens(cfg, 1, 37);
  auto logits = m.forward_logits(ids, 1, cond);
  CHECK(logits.shape() == Shape{1, 4, 9});

  CHECK_THROWS_AS(m.class_cond({0}), std::invalid_argument);
}

TEST_CASE("null condition: learned embedding tiled across the condition block") {
  auto cfg = tiny_config(SchemeKind::SerialV2);
  cfg.cond_type = CondType::Text;
  cfg.text_len = 4;
  Model<double> m(cfg, 41);
  auto nc = m.null_cond(2);
  CHECK(nc.shape() == Shape{2, 4, 8});
  for (Index b = 0; b < 2; ++b)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 8; ++j)
        CHECK(nc.data()[(b * 4 + i) * 8 + j] == doctest::Approx(m.null_emb().data()[j]));
}
