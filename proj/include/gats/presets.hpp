#pragma once

// Ready-made configurations: a vision-to-text cross-attention adapter built
// from one GATS layer stack (with an independent straight-line reference for
// equivalence testing), and the instruction-following agent bundles.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gats/composer.hpp"

namespace gats {

// ---------------------------------------------------------------------------
// Cross-attention preset: two modalities, vision features (all V of them,
// non-steered, precomputed once) and a steered language model with a
// single-element window. The shared width equals the language width and the
// language in/out projections are initialized to the identity, so each GATS
// layer acts as a gated cross-attention adapter over the vision features.

struct CrossAttentionPreset {
  std::shared_ptr<ComponentModel> lang;
  Tensor vision_features;  // [V, vision_width]
  GatsConfig config;       // modality 1 = vision, modality 2 = language
  std::vector<GatsLayerParams> gats;
  std::vector<std::size_t> insert_layers;  // language layer after which
                                           // adapter k applies
  // Optional learned "image position" feature appended to the vision set
  // (off by default).
  bool use_image_position = false;
  Tensor image_position;  // [1, vision_width]

  static constexpr int kVisionId = 1;
  static constexpr int kLangId = 2;

  std::size_t feature_count() const {
    return vision_features.rows() + (use_image_position ? 1 : 0);
  }

  // The vision feature set handed to every adapter call.
  Tensor features() const {
    if (!use_image_position) return vision_features;
    if (vision_features.rows() == 0) return image_position;
    return concat_rows({vision_features, image_position});
  }
};

inline CrossAttentionPreset build_cross_attention_preset(
    std::shared_ptr<ComponentModel> lang, Tensor vision_features,
    Rng& rng, std::size_t gats_layers = 0, bool use_image_position = false) {
  CrossAttentionPreset p;
  p.lang = std::move(lang);
  p.vision_features = std::move(vision_features);
  p.use_image_position = use_image_position;
  std::size_t d = p.lang->config().embed_dim;
  std::size_t vis_width =
      p.vision_features.rows() > 0 ? p.vision_features.cols() : d;
  if (use_image_position)
    p.image_position = Tensor::randn({1, vis_width}, rng, 0.02, true);
  std::size_t v = p.vision_features.rows() + (use_image_position ? 1 : 0);
  std::size_t k = gats_layers > 0
                      ? gats_layers
                      : std::max<std::size_t>(1, p.lang->config().layers / 2);
  GatsConfig cfg;
  cfg.modalities = {{CrossAttentionPreset::kVisionId, vis_width,
                     std::max<std::size_t>(v, 1), false},
                    {CrossAttentionPreset::kLangId, d, 1, true}};
  cfg.d = d;  // identity language projections require the shared width
  cfg.layers = k;
  cfg.heads = p.lang->config().heads;
  cfg.ffw_hidden = p.lang->config().ffw_hidden;
  cfg.validate();
  p.config = cfg;
  InterleavePlan plan = build_plan(k, {p.lang->config().layers});
  for (const auto& row : plan.insert_at) p.insert_layers.push_back(row[0]);
  for (std::size_t i = 0; i < k; ++i) {
    GatsLayerParams layer = GatsLayerParams::init(cfg, rng);
    // p_2 = r_2 = identity: the language stream enters and leaves the shared
    // space unchanged.
    auto& lp = layer.per_modality.at(CrossAttentionPreset::kLangId);
    auto identity = [d] {
      Tensor t = Tensor::zeros({d, d}, true);
      for (std::size_t j = 0; j < d; ++j) t.mutable_data()[j * d + j] = 1.0;
      return t;
    };
    lp.in_w = identity();
    lp.in_b = Tensor::zeros({d}, true);
    lp.out_w = identity();
    lp.out_b = Tensor::zeros({d}, true);
    p.gats.push_back(std::move(layer));
  }
  return p;
}

// Teacher-forced forward: every position receives its own adapter update
// (the window of size 1 means position t's update sees only vision features
// and position t itself, so batch processing equals per-token generation).
inline Tensor cross_attention_forward(const CrossAttentionPreset& p,
                                      const std::vector<int>& tokens,
                                      bool force_zero_gates = false) {
  Tensor feats = p.feature_count() > 0 ? p.features() : Tensor();
  std::size_t v = p.feature_count();
  Tensor h = p.lang->embed(tokens);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < p.gats.size(); ++k) {
    h = p.lang->forward_range(h, cur, p.insert_layers[k]);
    cur = p.insert_layers[k];
    std::vector<Tensor> rows;
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      TaggedSequence seq;
      for (std::size_t j = 0; j < v; ++j)
        seq.push_back({CrossAttentionPreset::kVisionId, j,
                       slice_rows(feats, j, j + 1)});
      seq.push_back({CrossAttentionPreset::kLangId, v,
                     slice_rows(h, t, t + 1)});
      TaggedSequence updated =
          gats_layer_forward(seq, const_cast<GatsLayerParams&>(p.gats[k]),
                             p.config, force_zero_gates);
      rows.push_back(updated.back().payload);
    }
    h = concat_rows(rows);
  }
  h = p.lang->forward_range(h, cur, p.lang->config().layers);
  return p.lang->logits(h);
}

// ---------------------------------------------------------------------------
// Independent reference: a hand-written gated cross-attention adapter
// interleaved in the language model, computed with raw double loops and no
// gats-core calls. Weight correspondence (frozen here so the equivalence
// test stays meaningful):
//   - GATS vision in-projection p_1 (in_w, in_b)  -> adapter key/value
//     input projection of the raw vision features
//   - vision type embedding + slot table rows     -> additive per-feature
//     position embeddings (slot r = r-th feature, oldest first)
//   - language type embedding + slot row 0        -> additive query-side
//     embedding on the current token's activation
//   - GATS attention block (ln1, q/k/v/o, ln2, ffw) -> the adapter's
//     cross-attention + feed-forward, queried by the token row only
//   - gate (w, b over a parameterless layernorm)  -> scalar gate on the
//     adapter output, added residually (r_2 = identity)

namespace refxattn {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const Tensor& t) {
  std::size_t r = t.shape().size() == 1 ? 1 : t.rows();
  std::size_t c = t.numel() / std::max<std::size_t>(r, 1);
  Mat m(r, Vec(c));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) m[i][j] = t.data()[i * c + j];
  return m;
}

inline Vec layernorm(const Vec& x, const Vec& g, const Vec& b) {
  std::size_t d = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(d);
  double istd = 1.0 / std::sqrt(var + 1e-5);
  Vec out(d);
  for (std::size_t i = 0; i < d; ++i)
    out[i] = (x[i] - mu) * istd * g[i] + b[i];
  return out;
}

inline Vec affine(const Vec& x, const Mat& w, const Vec& b) {
  std::size_t in = w.size(), out_dim = w[0].size();
  Vec out(out_dim);
  for (std::size_t j = 0; j < out_dim; ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i][j];
    out[j] = s;
  }
  return out;
}

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

struct Block {
  Vec ln1g, ln1b, ln2g, ln2b;
  Mat wq, wk, wv, wo, w1, w2;
  Vec bq, bk, bv, bo, b1, b2;
  std::size_t heads = 1;
};

struct AdapterLayer {
  Mat vis_w;            // p_1
  Vec vis_b;
  Vec vis_type;
  Mat vis_slots;        // row r = slot embedding of the r-th feature
  Vec lang_type;
  Vec lang_slot0;
  Block block;
  Vec gate_w;           // [d]
  double gate_b = 0.0;
};

inline Block extract_block(const AttentionBlockParams& p) {
  Block b;
  b.ln1g = to_mat(p.ln1_g)[0];
  b.ln1b = to_mat(p.ln1_b)[0];
  b.ln2g = to_mat(p.ln2_g)[0];
  b.ln2b = to_mat(p.ln2_b)[0];
  b.wq = to_mat(p.wq);
  b.bq = to_mat(p.bq)[0];
  b.wk = to_mat(p.wk);
  b.bk = to_mat(p.bk)[0];
  b.wv = to_mat(p.wv);
  b.bv = to_mat(p.bv)[0];
  b.wo = to_mat(p.wo);
  b.bo = to_mat(p.bo)[0];
  b.w1 = to_mat(p.w1);
  b.b1 = to_mat(p.b1)[0];
  b.w2 = to_mat(p.w2);
  b.b2 = to_mat(p.b2)[0];
  b.heads = p.heads;
  return b;
}

inline AdapterLayer extract_adapter(const GatsLayerParams& layer) {
  AdapterLayer a;
  const auto& vis = layer.per_modality.at(CrossAttentionPreset::kVisionId);
  const auto& lang = layer.per_modality.at(CrossAttentionPreset::kLangId);
  a.vis_w = to_mat(vis.in_w);
  a.vis_b = to_mat(vis.in_b)[0];
  a.vis_type = to_mat(vis.type_embed)[0];
  a.vis_slots = to_mat(vis.slot_table);
  a.lang_type = to_mat(lang.type_embed)[0];
  a.lang_slot0 = to_mat(lang.slot_table)[0];
  a.block = extract_block(layer.block);
  a.gate_w = to_mat(lang.gate_w)[0];
  // gate_w is stored [d, 1]; flatten handles it as one row per element.
  if (a.gate_w.size() == 1 && lang.gate_w.numel() > 1) {
    a.gate_w.clear();
    for (double v : lang.gate_w.data()) a.gate_w.push_back(v);
  }
  a.gate_b = lang.gate_b.data()[0];
  return a;
}

// Attention + FFW of the adapter for one token row against the projected
// vision rows; returns z (the block output for the token query).
inline Vec adapter_block(const AdapterLayer& a, const Mat& rows,
                         std::size_t query_index) {
  std::size_t n = rows.size(), d = rows[0].size();
  std::size_t hcount = a.block.heads, dh = d / hcount;
  Mat ln(n);
  for (std::size_t i = 0; i < n; ++i)
    ln[i] = layernorm(rows[i], a.block.ln1g, a.block.ln1b);
  Vec q = affine(ln[query_index], a.block.wq, a.block.bq);
  Mat k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    k[i] = affine(ln[i], a.block.wk, a.block.bk);
    v[i] = affine(ln[i], a.block.wv, a.block.bv);
  }
  Vec attn_out(d, 0.0);
  for (std::size_t hh = 0; hh < hcount; ++hh) {
    Vec scores(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < dh; ++c)
        s += q[hh * dh + c] * k[j][hh * dh + c];
      scores[j] = s / std::sqrt(static_cast<double>(dh));
      mx = std::max(mx, scores[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      z += scores[j];
    }
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < dh; ++c)
        attn_out[hh * dh + c] += scores[j] / z * v[j][hh * dh + c];
  }
  Vec proj = affine(attn_out, a.block.wo, a.block.bo);
  Vec u(d);
  for (std::size_t c = 0; c < d; ++c) u[c] = rows[query_index][c] + proj[c];
  Vec mid = affine(layernorm(u, a.block.ln2g, a.block.ln2b), a.block.w1,
                   a.block.b1);
  for (double& x : mid) x = gelu(x);
  Vec ffw = affine(mid, a.block.w2, a.block.b2);
  Vec z(d);
  for (std::size_t c = 0; c < d; ++c) z[c] = u[c] + ffw[c];
  return z;
}

}  // namespace refxattn

// Reference logits for the preset's language model + adapter stack.
inline std::vector<std::vector<double>> reference_cross_attention(
    const CrossAttentionPreset& preset, const std::vector<int>& tokens,
    bool force_zero_gates = false) {
  using namespace refxattn;
  auto& lang = *preset.lang;
  const auto& cfg = lang.config();
  std::size_t n = tokens.size(), d = cfg.embed_dim;
  std::size_t hcount = cfg.heads, dh = d / hcount;

  // Language model weights, extracted by name.
  std::map<std::string, Mat> w;
  const_cast<ComponentModel&>(lang).visit(
      "m", [&](const std::string& name, Tensor& t) { w[name] = to_mat(t); });

  Mat feats;
  if (preset.feature_count() > 0) feats = to_mat(preset.features());
  std::vector<AdapterLayer> adapters;
  for (const auto& layer : preset.gats)
    adapters.push_back(extract_adapter(layer));

  Mat h(n, Vec(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      h[i][c] = w["m.tok_embed"][static_cast<std::size_t>(tokens[i])][c] +
                w["m.pos_embed"][i][c];

  std::size_t next_adapter = 0;
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    std::string p = "m.layer" + std::to_string(l);
    Mat lnx(n), q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      lnx[i] = layernorm(h[i], w[p + ".ln1.g"][0], w[p + ".ln1.b"][0]);
      q[i] = affine(lnx[i], w[p + ".wq"], w[p + ".bq"][0]);
      k[i] = affine(lnx[i], w[p + ".wk"], w[p + ".bk"][0]);
      v[i] = affine(lnx[i], w[p + ".wv"], w[p + ".bv"][0]);
    }
    Mat attn(n, Vec(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      Vec heads_out(d, 0.0);
      for (std::size_t hh = 0; hh < hcount; ++hh) {
        Vec scores(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c)
            s += q[i][hh * dh + c] * k[j][hh * dh + c];
          scores[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t c = 0; c < dh; ++c)
            heads_out[hh * dh + c] += scores[j] / z * v[j][hh * dh + c];
      }
      Vec proj = affine(heads_out, w[p + ".wo"], w[p + ".bo"][0]);
      for (std::size_t c = 0; c < d; ++c) attn[i][c] = h[i][c] + proj[c];
    }
    for (std::size_t i = 0; i < n; ++i) {
      Vec mid = affine(layernorm(attn[i], w[p + ".ln2.g"][0],
                                 w[p + ".ln2.b"][0]),
                       w[p + ".ffw.w1"], w[p + ".ffw.b1"][0]);
      for (double& x : mid) x = gelu(x);
      Vec ffw = affine(mid, w[p + ".ffw.w2"], w[p + ".ffw.b2"][0]);
      for (std::size_t c = 0; c < d; ++c) h[i][c] = attn[i][c] + ffw[c];
    }

    // Adapter after layer l if the plan says so.
    while (next_adapter < preset.insert_layers.size() &&
           preset.insert_layers[next_adapter] == l) {
      const AdapterLayer& a = adapters[next_adapter];
      for (std::size_t t = 0; t < n; ++t) {
        Mat rows;
        for (std::size_t j = 0; j < feats.size(); ++j) {
          Vec u = affine(feats[j], a.vis_w, a.vis_b);
          for (std::size_t c = 0; c < d; ++c)
            u[c] += a.vis_type[c] + a.vis_slots[j][c];
          rows.push_back(u);
        }
        Vec u(d);
        for (std::size_t c = 0; c < d; ++c)
          u[c] = h[t][c] + a.lang_type[c] + a.lang_slot0[c];
        rows.push_back(u);
        Vec z = adapter_block(a, rows, rows.size() - 1);
        double gate = 0.0;
        if (!force_zero_gates) {
          Vec unit(d, 1.0), zero(d, 0.0);
          Vec lnz = layernorm(z, unit, zero);
          double s = a.gate_b;
          for (std::size_t c = 0; c < d; ++c) s += a.gate_w[c] * lnz[c];
          gate = 1.0 / (1.0 + std::exp(-s));
        }
        for (std::size_t c = 0; c < d; ++c) h[t][c] += gate * z[c];
      }
      ++next_adapter;
    }
  }

  Mat logits(n, Vec(lang.config().vocab));
  for (std::size_t i = 0; i < n; ++i) {
    Vec fin = layernorm(h[i], w["m.final.g"][0], w["m.final.b"][0]);
    for (std::size_t vtok = 0; vtok < cfg.vocab; ++vtok) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        s += fin[c] * w["m.tok_embed"][vtok][c];
      logits[i][vtok] = s;
    }
  }
  return logits;
}

// ---------------------------------------------------------------------------
// Agent presets: language + vision (+ optional second view sharing the
// vision weights) + action model, with the language frozen and served from
// the activation cache.

struct AgentPresetOptions {
  bool two_view = false;
  bool language_masked = false;  // drop the language stream from GATS input
  std::size_t gats_layers = 1;
  std::size_t gats_width = 32;
  std::size_t gats_heads = 2;
  std::size_t gats_ffw = 64;
  double gate_init_bias = -10.0;
  std::size_t lang_window = 8;    // N_m per modality
  std::size_t vision_window = 49;
  std::size_t view2_window = 9;
  std::size_t action_window = 4;
  bool steer_vision = true;
  // Rescale every GATS projection (and the action model's, when trainable)
  // from the fixed 0.02 init to std 1/sqrt(fan_in). The 0.02 scale suits
  // widths in the hundreds; at desk-scale widths it leaves multi-matmul
  // paths (notably the attention q*k selectivity) orders of magnitude too
  // faint to bootstrap, and behavior cloning stalls at the marginal action
  // distribution. Fan-in init restores unit-scale signal propagation.
  bool fan_in_init = true;
};

namespace detail {

inline void fan_in_rescale(std::vector<NamedParam> params) {
  auto ends_with = [](const std::string& s, const char* sufc) {
    std::string suf(sufc);
    return s.size() >= suf.size() &&
           s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  for (auto& p : params) {
    const std::string& n = p.name;
    if (!(ends_with(n, ".wq") || ends_with(n, ".wk") || ends_with(n, ".wv") ||
          ends_with(n, ".wo") || ends_with(n, ".w1") || ends_with(n, ".w2") ||
          ends_with(n, ".in_w") || ends_with(n, ".out_w")))
      continue;
    if (p.tensor.shape().size() != 2) continue;
    double f = (1.0 / std::sqrt(static_cast<double>(p.tensor.rows()))) / 0.02;
    for (double& v : p.tensor.mutable_data()) v *= f;
  }
}

}  // namespace detail

struct AgentPreset {
  ModelBundle bundle;
  AgentPresetOptions options;
  static constexpr int kLangId = 1;
  static constexpr int kVisionId = 2;
  static constexpr int kView2Id = 3;
  static constexpr int kActionId = 4;
};

inline AgentPreset build_agent_preset(
    std::shared_ptr<ComponentModel> lang, std::shared_ptr<ComponentModel> vision,
    std::shared_ptr<ComponentModel> action, const AgentPresetOptions& opt,
    Rng& rng) {
  // The action stream feeds `action_window` fixed slot tokens 0..W-1 into
  // the action model, so its vocabulary must cover them.
  if (opt.action_window > action->config().vocab)
    throw Error("config",
                "build_agent_preset: action_window " +
                    std::to_string(opt.action_window) +
                    " exceeds the action model vocab " +
                    std::to_string(action->config().vocab) +
                    " (slot tokens are ids 0..window-1)");
  GatsConfig cfg;
  cfg.modalities.push_back({AgentPreset::kLangId, lang->config().embed_dim,
                            opt.lang_window, false});
  cfg.modalities.push_back({AgentPreset::kVisionId,
                            vision->config().embed_dim, opt.vision_window,
                            opt.steer_vision});
  if (opt.two_view)
    cfg.modalities.push_back({AgentPreset::kView2Id,
                              vision->config().embed_dim, opt.view2_window,
                              false});
  cfg.modalities.push_back({AgentPreset::kActionId,
                            action->config().embed_dim, opt.action_window,
                            true});
  cfg.d = opt.gats_width;
  cfg.layers = opt.gats_layers;
  cfg.heads = opt.gats_heads;
  cfg.ffw_hidden = opt.gats_ffw;
  cfg.gate_init_bias = opt.gate_init_bias;
  std::map<int, std::shared_ptr<ComponentModel>> comps;
  comps[AgentPreset::kLangId] = std::move(lang);
  comps[AgentPreset::kVisionId] = vision;
  if (opt.two_view) comps[AgentPreset::kView2Id] = vision;  // shared weights
  comps[AgentPreset::kActionId] = std::move(action);
  AgentPreset p;
  p.bundle = make_bundle(cfg, std::move(comps), rng);
  if (opt.fan_in_init) {
    detail::fan_in_rescale(p.bundle.gats_params());
    auto& act = p.bundle.components.at(AgentPreset::kActionId);
    if (!act->frozen()) detail::fan_in_rescale(act->named_params("m"));
  }
  p.options = opt;
  return p;
}

}  // namespace gats
