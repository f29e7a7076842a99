#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <vector>

#include "gats/presets.hpp"
#include "test_util.hpp"

using namespace gats;

namespace {

std::shared_ptr<ComponentModel> make_lang(Rng& rng, std::size_t layers = 4,
                                          std::size_t dim = 16,
                                          std::size_t vocab = 11) {
  ComponentConfig c;
  c.modality_id = CrossAttentionPreset::kLangId;
  c.vocab = vocab;
  c.embed_dim = dim;
  c.layers = layers;
  c.heads = 2;
  c.ffw_hidden = 2 * dim;
  Rng fork = rng.fork();
  return std::make_shared<ComponentModel>(c, fork);
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.uniform_int(vocab));
  return t;
}

void open_gates(CrossAttentionPreset& p, Rng& rng) {
  for (auto& layer : p.gats) {
    auto& lp = layer.per_modality.at(CrossAttentionPreset::kLangId);
    for (auto& v : lp.gate_w.mutable_data()) v = rng.uniform(-0.3, 0.3);
    lp.gate_b.mutable_data()[0] = 0.3;
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("preset gather covers all vision features plus the last token") {
  Rng rng(81);
  auto lang = make_lang(rng);
  Tensor feats = Tensor::randn({2, 8}, rng);
  auto p = build_cross_attention_preset(lang, feats, rng);
  TaggedSequence seq;
  seq.push_back({CrossAttentionPreset::kVisionId, 0, slice_rows(feats, 0, 1)});
  seq.push_back({CrossAttentionPreset::kVisionId, 1, slice_rows(feats, 1, 2)});
  seq.push_back({CrossAttentionPreset::kLangId, 2,
                 Tensor::randn({1, 16}, rng)});
  GatherSet g = gather(seq, p.config);
  REQUIRE(g.indices == std::vector<std::size_t>{0, 1, 2});
}

TEST_CASE("preset defaults: K = language layers / 2, identity projections") {
  Rng rng(82);
  auto lang = make_lang(rng, 6);
  auto p = build_cross_attention_preset(lang, Tensor::randn({3, 8}, rng), rng);
  REQUIRE(p.gats.size() == 3);
  REQUIRE(p.insert_layers == std::vector<std::size_t>{2, 4, 5});
  const auto& lp = p.gats[0].per_modality.at(CrossAttentionPreset::kLangId);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      REQUIRE(lp.in_w.at(i, j) == (i == j ? 1.0 : 0.0));
  for (double v : lp.out_b.data()) REQUIRE(v == 0.0);
}

TEST_CASE("zero gates reduce the preset to the plain language model") {
  Rng rng(83);
  auto lang = make_lang(rng);
  auto p = build_cross_attention_preset(lang, Tensor::randn({3, 8}, rng), rng);
  open_gates(p, rng);  // gates open, but the debug flag overrides them
  auto tokens = random_tokens(5, 11, rng);
  Tensor preset_logits = cross_attention_forward(p, tokens, true);
  Tensor plain = lang->forward_with_taps(tokens).logits;
  REQUIRE(bitwise_equal(preset_logits, plain));
}

TEST_CASE("preset forward equals the straight-line reference") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(900 + seed);
    auto lang = make_lang(rng);
    Tensor feats = Tensor::randn({3, 8}, rng);
    auto p = build_cross_attention_preset(lang, feats, rng);
    open_gates(p, rng);
    auto tokens = random_tokens(6, 11, rng);
    Tensor got = cross_attention_forward(p, tokens);
    auto want = reference_cross_attention(p, tokens);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (std::size_t v = 0; v < 11; ++v)
        max_diff = std::max(max_diff, std::abs(got.at(i, v) - want[i][v]));
    REQUIRE(max_diff < 1e-8);
  }
}

TEST_CASE("preset/reference agreement with the image-position token") {
  Rng rng(84);
  auto lang = make_lang(rng);
  Tensor feats = Tensor::randn({2, 8}, rng);
  auto p = build_cross_attention_preset(lang, feats, rng, 2, true);
  REQUIRE(p.feature_count() == 3);
  open_gates(p, rng);
  auto tokens = random_tokens(4, 11, rng);
  Tensor got = cross_attention_forward(p, tokens);
  auto want = reference_cross_attention(p, tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t v = 0; v < 11; ++v)
      REQUIRE(std::abs(got.at(i, v) - want[i][v]) < 1e-8);
}

TEST_CASE("V=0 edge: both sides reduce to self-only attention") {
  Rng rng(85);
  auto lang = make_lang(rng);
  auto p = build_cross_attention_preset(lang, Tensor::zeros({0, 8}), rng);
  open_gates(p, rng);
  auto tokens = random_tokens(4, 11, rng);
  Tensor got = cross_attention_forward(p, tokens);
  auto want = reference_cross_attention(p, tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t v = 0; v < 11; ++v)
      REQUIRE(std::abs(got.at(i, v) - want[i][v]) < 1e-8);
  // Still different from the plain model: the self-adapter is active.
  Tensor plain = lang->forward_with_taps(tokens).logits;
  REQUIRE(!bitwise_equal(got, plain));
}

TEST_CASE("vision features are never written") {
  Rng rng(86);
  auto lang = make_lang(rng);
  Tensor feats = Tensor::randn({3, 8}, rng);
  auto before = feats.data();
  auto p = build_cross_attention_preset(lang, feats, rng);
  open_gates(p, rng);
  cross_attention_forward(p, random_tokens(5, 11, rng));
  REQUIRE(p.vision_features.data() == before);
}

TEST_CASE("preset rejects a width mismatch for identity projections") {
  Rng rng(87);
  auto lang = make_lang(rng);
  Tensor feats = Tensor::randn({2, 8}, rng);
  auto p = build_cross_attention_preset(lang, feats, rng);
  // Identity p_2/r_2 forces the shared width to equal the language width.
  REQUIRE(p.config.d == lang->config().embed_dim);
  GatsConfig bad = p.config;
  bad.d = 0;
  REQUIRE_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("two-view agent preset adds only the new modality's tables") {
  Rng rng(88);
  auto make = [&rng](int id, std::size_t layers, std::size_t dim,
                     std::size_t vocab) {
    ComponentConfig c;
    c.modality_id = id;
    c.vocab = vocab;
    c.embed_dim = dim;
    c.layers = layers;
    c.heads = 2;
    c.ffw_hidden = 2 * dim;
    Rng fork = rng.fork();
    return std::make_shared<ComponentModel>(c, fork);
  };
  auto lang = make(1, 4, 24, 16);
  auto vision = make(2, 2, 16, 12);
  auto action = make(4, 2, 16, 6);
  AgentPresetOptions base_opt;
  base_opt.gats_layers = 2;
  AgentPresetOptions tv_opt = base_opt;
  tv_opt.two_view = true;
  auto base = build_agent_preset(lang, vision, action, base_opt, rng);
  auto twov = build_agent_preset(lang, vision, action, tv_opt, rng);
  std::size_t nb = ModelBundle::count(base.bundle.gats_params());
  std::size_t nt = ModelBundle::count(twov.bundle.gats_params());
  // Non-steered extra view: in-projection + type embedding + slot table,
  // per GATS layer. No out-projection, no gate.
  std::size_t e = vision->config().embed_dim, d = base_opt.gats_width;
  std::size_t per_layer = e * d + d + d + tv_opt.view2_window * d;
  REQUIRE(nt - nb == base_opt.gats_layers * per_layer);
  // The second view shares the vision model weights.
  REQUIRE(twov.bundle.components.at(AgentPreset::kView2Id) ==
          twov.bundle.components.at(AgentPreset::kVisionId));
}

TEST_CASE("vision-steering ablation strictly shrinks the trainable set") {
  Rng rng(89);
  auto make = [&rng](int id, std::size_t layers, std::size_t dim,
                     std::size_t vocab) {
    ComponentConfig c;
    c.modality_id = id;
    c.vocab = vocab;
    c.embed_dim = dim;
    c.layers = layers;
    c.heads = 2;
    c.ffw_hidden = 2 * dim;
    Rng fork = rng.fork();
    return std::make_shared<ComponentModel>(c, fork);
  };
  auto lang = make(1, 4, 24, 16);
  auto vision = make(2, 2, 16, 12);
  auto action = make(4, 2, 16, 6);
  lang->set_frozen(true);
  vision->set_frozen(true);
  AgentPresetOptions on;
  AgentPresetOptions off = on;
  off.steer_vision = false;
  auto with = build_agent_preset(lang, vision, action, on, rng);
  auto without = build_agent_preset(lang, vision, action, off, rng);
  std::size_t n_with = ModelBundle::count(with.bundle.trainable_params());
  std::size_t n_without = ModelBundle::count(without.bundle.trainable_params());
  REQUIRE(n_without < n_with);
  // The gap is exactly the vision out-projection and gate, per layer.
  std::size_t e = vision->config().embed_dim, d = on.gats_width;
  std::size_t per_layer = d * e + e + d + 1;  // out_w, out_b, gate_w, gate_b
  REQUIRE(n_with - n_without == on.gats_layers * per_layer);
}
