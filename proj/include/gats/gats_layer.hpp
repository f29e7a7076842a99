#pragma once

// A single GATS layer: per-modality local-window gather over a tagged
// multimodal sequence, projection to a shared width, one pre-LN transformer
// block over the gathered set, and a gated residual scatter back into the
// steered elements' native widths.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gats/tensor.hpp"

namespace gats {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct ModalitySpec {
  int modality_id = 0;          // in [1, M]
  std::size_t embed_dim = 0;    // native activation width
  std::size_t context_len = 1;  // N_m
  bool steered = false;         // membership in S
};

struct GatsConfig {
  std::vector<ModalitySpec> modalities;
  std::size_t d = 32;
  std::size_t layers = 1;  // K
  std::size_t heads = 4;
  std::size_t ffw_hidden = 128;
  double gate_init_bias = -10.0;

  void validate() const {
    if (modalities.empty())
      throw Error("config", "GatsConfig: no modalities declared");
    if (layers < 1 || d < 1)
      throw Error("config", "GatsConfig: layers and d must be >= 1");
    if (heads < 1 || d % heads != 0)
      throw Error("config", "GatsConfig: heads must divide d");
    bool any_steered = false;
    std::map<int, bool> seen;
    for (const auto& m : modalities) {
      if (m.modality_id <= 0)
        throw Error("config", "GatsConfig: modality ids must be positive");
      if (seen.count(m.modality_id))
        throw Error("config", "GatsConfig: duplicate modality id " +
                                  std::to_string(m.modality_id));
      seen[m.modality_id] = true;
      if (m.embed_dim < 1 || m.context_len < 1)
        throw Error("config", "GatsConfig: embed_dim and context_len >= 1");
      any_steered = any_steered || m.steered;
    }
    if (!any_steered)
      throw Error("config", "GatsConfig: steered set S must be nonempty");
  }

  const ModalitySpec& spec(int modality_id) const {
    for (const auto& m : modalities)
      if (m.modality_id == modality_id) return m;
    throw Error("config",
                "unknown modality id " + std::to_string(modality_id));
  }

  bool has_modality(int modality_id) const {
    for (const auto& m : modalities)
      if (m.modality_id == modality_id) return true;
    return false;
  }
};

struct TaggedElement {
  int modality_id = 0;
  std::size_t source_index = 0;  // global arrival index, strictly increasing
  Tensor payload;                // [1, embed_dim]
};

using TaggedSequence = std::vector<TaggedElement>;

// ---------------------------------------------------------------------------
// Parameters

struct AttentionBlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor w1, b1, w2, b2;
  std::size_t heads = 1;

  static AttentionBlockParams init(std::size_t d, std::size_t heads,
                                   std::size_t hidden, Rng& rng) {
    AttentionBlockParams p;
    p.heads = heads;
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    p.ln1_g = Tensor::full({d}, 1.0, true);
    p.ln1_b = Tensor::zeros({d}, true);
    p.wq = Tensor::randn({d, d}, rng, s);
    p.bq = Tensor::zeros({d}, true);
    p.wk = Tensor::randn({d, d}, rng, s);
    p.bk = Tensor::zeros({d}, true);
    p.wv = Tensor::randn({d, d}, rng, s);
    p.bv = Tensor::zeros({d}, true);
    p.wo = Tensor::randn({d, d}, rng, s);
    p.bo = Tensor::zeros({d}, true);
    p.ln2_g = Tensor::full({d}, 1.0, true);
    p.ln2_b = Tensor::zeros({d}, true);
    p.w1 = Tensor::randn({d, hidden}, rng, s);
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = Tensor::randn({hidden, d}, rng,
                         1.0 / std::sqrt(static_cast<double>(hidden)));
    p.b2 = Tensor::zeros({d}, true);
    return p;
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".ln1.g", ln1_g);
    fn(prefix + ".ln1.b", ln1_b);
    fn(prefix + ".wq", wq);
    fn(prefix + ".bq", bq);
    fn(prefix + ".wk", wk);
    fn(prefix + ".bk", bk);
    fn(prefix + ".wv", wv);
    fn(prefix + ".bv", bv);
    fn(prefix + ".wo", wo);
    fn(prefix + ".bo", bo);
    fn(prefix + ".ln2.g", ln2_g);
    fn(prefix + ".ln2.b", ln2_b);
    fn(prefix + ".ffw.w1", w1);
    fn(prefix + ".ffw.b1", b1);
    fn(prefix + ".ffw.w2", w2);
    fn(prefix + ".ffw.b2", b2);
  }
};

// Multi-head pre-LN attention + FFW over a gathered set. `queries` selects
// which rows of x are queried; `key_mask[q][j]` restricts which rows each
// query may attend to. Returns [n_queries, d].
inline Tensor attention_block(const Tensor& x,
                              const std::vector<std::size_t>& queries,
                              const std::vector<bool>& key_mask,
                              const AttentionBlockParams& p) {
  std::size_t n = x.rows(), d = x.cols();
  std::size_t nq = queries.size();
  if (key_mask.size() != nq * n)
    throw shape_error("attention_block: key mask size mismatch");
  std::size_t dh = d / p.heads;
  Tensor ln = layernorm(x, p.ln1_g, p.ln1_b);
  Tensor lnq = select_rows(ln, queries);
  Tensor q = linear(lnq, p.wq, p.bq);
  Tensor k = linear(ln, p.wk, p.bk);
  Tensor v = linear(ln, p.wv, p.bv);
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outs;
  head_outs.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    Tensor probs = masked_softmax(scores, key_mask);
    head_outs.push_back(matmul(probs, vh));
  }
  Tensor attn = linear(concat_cols(head_outs), p.wo, p.bo);
  Tensor u = add(select_rows(x, queries), attn);
  Tensor h1 = linear(layernorm(u, p.ln2_g, p.ln2_b), p.w1, p.b1);
  Tensor ffw = linear(gelu(h1), p.w2, p.b2);
  return add(u, ffw);
}

struct GatsLayerParams {
  struct ModalityParams {
    Tensor in_w, in_b;      // p_m: embed_dim -> d
    Tensor type_embed;      // [1, d]
    Tensor slot_table;      // [N_m, d], row 0 = oldest slot in the window
    // Present only for steered modalities:
    Tensor out_w, out_b;    // r_m: d -> embed_dim
    Tensor gate_w, gate_b;  // d -> 1
  };

  std::map<int, ModalityParams> per_modality;
  AttentionBlockParams block;

  static GatsLayerParams init(const GatsConfig& cfg, Rng& rng) {
    cfg.validate();
    GatsLayerParams p;
    p.block = AttentionBlockParams::init(cfg.d, cfg.heads, cfg.ffw_hidden, rng);
    for (const auto& m : cfg.modalities) {
      ModalityParams mp;
      mp.in_w = Tensor::randn({m.embed_dim, cfg.d}, rng,
                              1.0 / std::sqrt(static_cast<double>(m.embed_dim)));
      mp.in_b = Tensor::zeros({cfg.d}, true);
      mp.type_embed = Tensor::randn({1, cfg.d}, rng, 0.02);
      mp.slot_table = Tensor::randn({m.context_len, cfg.d}, rng, 0.02);
      if (m.steered) {
        mp.out_w = Tensor::randn({cfg.d, m.embed_dim}, rng,
                                 1.0 / std::sqrt(static_cast<double>(cfg.d)));
        mp.out_b = Tensor::zeros({m.embed_dim}, true);
        // Zero weight + negative bias keeps the gate ~0 at init so frozen
        // components behave as if GATS were absent early in training.
        mp.gate_w = Tensor::zeros({cfg.d, 1}, true);
        mp.gate_b = Tensor::full({1}, cfg.gate_init_bias, true);
      }
      p.per_modality[m.modality_id] = std::move(mp);
    }
    return p;
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    block.visit(prefix + ".block", fn);
    for (auto& [id, mp] : per_modality) {
      std::string mp_prefix = prefix + ".mod" + std::to_string(id);
      fn(mp_prefix + ".in_w", mp.in_w);
      fn(mp_prefix + ".in_b", mp.in_b);
      fn(mp_prefix + ".type", mp.type_embed);
      fn(mp_prefix + ".slots", mp.slot_table);
      if (mp.out_w.numel() > 0) {
        fn(mp_prefix + ".out_w", mp.out_w);
        fn(mp_prefix + ".out_b", mp.out_b);
        fn(mp_prefix + ".gate_w", mp.gate_w);
        fn(mp_prefix + ".gate_b", mp.gate_b);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Gather

struct GatherSet {
  std::vector<std::size_t> indices;  // ascending positions into the sequence
};

// Largest subsequence with at most N_m elements per modality, keeping the
// most recent elements of each modality; original order preserved.
inline GatherSet gather(const TaggedSequence& seq, const GatsConfig& cfg) {
  std::map<int, std::size_t> counts;
  for (const auto& e : seq) {
    cfg.spec(e.modality_id);  // raises on unknown modality
    ++counts[e.modality_id];
  }
  std::map<int, std::size_t> skip;  // older elements per modality to drop
  for (auto& [id, c] : counts) {
    std::size_t cap = cfg.spec(id).context_len;
    skip[id] = c > cap ? c - cap : 0;
  }
  GatherSet g;
  std::map<int, std::size_t> seen;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::size_t s = seen[seq[i].modality_id]++;
    if (s >= skip[seq[i].modality_id]) g.indices.push_back(i);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Attend

// Projects the gathered elements (p_m, then modality-type and slot
// embeddings) and runs the attention block. `query_mask` is aligned with
// g.indices and may be true only for steered-modality elements. Returns one
// z per queried element, in gather order.
inline std::vector<Tensor> attend(const TaggedSequence& seq,
                                  const GatherSet& g,
                                  const GatsLayerParams& params,
                                  const GatsConfig& cfg,
                                  const std::vector<bool>& query_mask) {
  std::size_t n = g.indices.size();
  if (query_mask.size() != n)
    throw shape_error("attend: query mask size mismatch");
  // Slot index: rank within the modality's window, 0 = oldest gathered.
  std::map<int, std::size_t> rank;
  std::vector<Tensor> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const TaggedElement& e = seq[g.indices[i]];
    const ModalitySpec& spec = cfg.spec(e.modality_id);
    if (e.payload.cols() != spec.embed_dim || e.payload.rows() != 1)
      throw shape_error("attend: element of modality " +
                        std::to_string(e.modality_id) + " has payload " +
                        shape_str(e.payload.shape()) + ", expected (1x" +
                        std::to_string(spec.embed_dim) + ")");
    const auto& mp = params.per_modality.at(e.modality_id);
    std::size_t slot = rank[e.modality_id]++;
    Tensor projected = linear(e.payload, mp.in_w, mp.in_b);
    Tensor with_type = add(projected, mp.type_embed);
    rows.push_back(add(with_type, slice_rows(mp.slot_table, slot, slot + 1)));
  }
  Tensor x = concat_rows(rows);
  std::vector<std::size_t> queries;
  for (std::size_t i = 0; i < n; ++i) {
    if (!query_mask[i]) continue;
    if (!cfg.spec(seq[g.indices[i]].modality_id).steered)
      throw Error("config", "attend: query on non-steered modality " +
                                std::to_string(seq[g.indices[i]].modality_id));
    queries.push_back(i);
  }
  // Full bidirectional attention within the gathered set.
  std::vector<bool> key_mask(queries.size() * n, true);
  Tensor z = attention_block(x, queries, key_mask, params.block);
  std::vector<Tensor> out;
  out.reserve(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i)
    out.push_back(slice_rows(z, i, i + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Scatter

inline Tensor gate_value(const Tensor& z, const GatsLayerParams::ModalityParams& mp) {
  std::size_t d = z.cols();
  Tensor unit_g = Tensor::full({d}, 1.0);
  Tensor zero_b = Tensor::zeros({d});
  Tensor ln = layernorm(z, unit_g, zero_b);
  return sigmoid(linear(ln, mp.gate_w, mp.gate_b));
}

// Applies the gated residual update x_i + g_m(z_i) * r_m(z_i) to the queried
// elements; everything else keeps its exact input payload.
inline TaggedSequence scatter(const TaggedSequence& seq, const GatherSet& g,
                              const std::vector<bool>& query_mask,
                              const std::vector<Tensor>& z,
                              const GatsLayerParams& params,
                              const GatsConfig& cfg,
                              bool force_zero_gates = false) {
  if (query_mask.size() != g.indices.size())
    throw shape_error("scatter: query mask size mismatch");
  std::size_t nq = 0;
  for (bool q : query_mask) nq += q ? 1 : 0;
  if (z.size() != nq)
    throw shape_error("scatter: " + std::to_string(z.size()) +
                      " updates for " + std::to_string(nq) +
                      " queried elements");
  TaggedSequence out = seq;
  if (force_zero_gates) return out;
  std::size_t zi = 0;
  for (std::size_t i = 0; i < g.indices.size(); ++i) {
    if (!query_mask[i]) continue;
    TaggedElement& e = out[g.indices[i]];
    const auto& mp = params.per_modality.at(e.modality_id);
    (void)cfg;
    Tensor update = scale_by(gate_value(z[zi], mp),
                             linear(z[zi], mp.out_w, mp.out_b));
    e.payload = add(e.payload, update);
    ++zi;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full layer forward

namespace detail {

// True when no modality window can saturate anywhere in the sequence; then
// every prefix gather set is the full prefix and slot ranks are constant, so
// one shared projection + causal masked attention reproduces the per-prefix
// computation exactly.
inline bool windows_never_saturate(const TaggedSequence& seq,
                                   const GatsConfig& cfg) {
  std::map<int, std::size_t> counts;
  for (const auto& e : seq) ++counts[e.modality_id];
  for (auto& [id, c] : counts)
    if (c > cfg.spec(id).context_len) return false;
  return true;
}

}  // namespace detail

// Training-mode (causal batched) forward: for every steered element position
// t, evaluates the gather set of the prefix ending at t and applies the gated
// update, using the *input* payloads as keys and values throughout (the
// update of element i feeds the next component layer, not later queries of
// this GATS layer). Matches streaming replay exactly.
inline TaggedSequence gats_layer_forward(const TaggedSequence& seq,
                                         const GatsLayerParams& params,
                                         const GatsConfig& cfg,
                                         bool force_zero_gates = false) {
  for (std::size_t i = 1; i < seq.size(); ++i)
    if (seq[i].source_index <= seq[i - 1].source_index)
      throw Error("sequence", "source_index must be strictly increasing");
  TaggedSequence out = seq;
  if (seq.empty()) return out;

  if (detail::windows_never_saturate(seq, cfg)) {
    // Fast path: shared projections, causal key mask per query.
    GatherSet all;
    for (std::size_t i = 0; i < seq.size(); ++i) all.indices.push_back(i);
    std::map<int, std::size_t> rank;
    std::vector<Tensor> rows;
    for (const auto& e : seq) {
      const ModalitySpec& spec = cfg.spec(e.modality_id);
      if (e.payload.cols() != spec.embed_dim)
        throw shape_error("gats_layer_forward: payload width mismatch");
      const auto& mp = params.per_modality.at(e.modality_id);
      std::size_t slot = rank[e.modality_id]++;
      rows.push_back(
          add(add(linear(e.payload, mp.in_w, mp.in_b), mp.type_embed),
              slice_rows(mp.slot_table, slot, slot + 1)));
    }
    Tensor x = concat_rows(rows);
    std::vector<std::size_t> queries;
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (cfg.spec(seq[i].modality_id).steered) queries.push_back(i);
    if (queries.empty()) return out;
    std::size_t n = seq.size();
    std::vector<bool> key_mask(queries.size() * n, false);
    for (std::size_t qi = 0; qi < queries.size(); ++qi)
      for (std::size_t j = 0; j <= queries[qi]; ++j)
        key_mask[qi * n + j] = true;
    Tensor z = attention_block(x, queries, key_mask, params.block);
    if (force_zero_gates) return out;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
      TaggedElement& e = out[queries[qi]];
      const auto& mp = params.per_modality.at(e.modality_id);
      Tensor zrow = slice_rows(z, qi, qi + 1);
      Tensor update =
          scale_by(gate_value(zrow, mp), linear(zrow, mp.out_w, mp.out_b));
      e.payload = add(e.payload, update);
    }
    return out;
  }

  // General path: per-position prefix gather (slot ranks shift as windows
  // saturate, so rows are query-dependent).
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (!cfg.spec(seq[t].modality_id).steered) continue;
    TaggedSequence prefix(seq.begin(), seq.begin() + t + 1);
    GatherSet g = gather(prefix, cfg);
    std::vector<bool> qmask(g.indices.size(), false);
    // The newest element of its modality is always in the gather set.
    for (std::size_t i = 0; i < g.indices.size(); ++i)
      if (g.indices[i] == t) qmask[i] = true;
    std::vector<Tensor> z = attend(prefix, g, params, cfg, qmask);
    TaggedSequence updated =
        scatter(prefix, g, qmask, z, params, cfg, force_zero_gates);
    out[t].payload = updated[t].payload;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Streaming

// Streaming inference state for one GATS layer: retains the pre-update
// payloads of the last N_m elements per modality. step() returns the element
// with its payload updated when its modality is steered.
class GatsLayerStream {
public:
  GatsLayerStream(const GatsLayerParams& params, const GatsConfig& cfg,
                  bool force_zero_gates = false)
      : params_(params), cfg_(cfg), force_zero_gates_(force_zero_gates) {}

  TaggedElement step(const TaggedElement& element) {
    const ModalitySpec& spec = cfg_.spec(element.modality_id);
    if (!window_.empty() &&
        element.source_index <= window_.back().source_index)
      throw Error("sequence", "streaming source_index must increase");
    // Evict the oldest element of this modality if its window is full.
    std::size_t count = 0;
    for (const auto& e : window_) count += e.modality_id == element.modality_id;
    if (count >= spec.context_len) {
      for (auto it = window_.begin(); it != window_.end(); ++it)
        if (it->modality_id == element.modality_id) {
          window_.erase(it);
          break;
        }
    }
    window_.push_back(element);
    if (!spec.steered) return element;
    TaggedSequence seq(window_.begin(), window_.end());
    GatherSet g;
    for (std::size_t i = 0; i < seq.size(); ++i) g.indices.push_back(i);
    std::vector<bool> qmask(seq.size(), false);
    qmask.back() = true;
    std::vector<Tensor> z = attend(seq, g, params_, cfg_, qmask);
    TaggedSequence updated =
        scatter(seq, g, qmask, z, params_, cfg_, force_zero_gates_);
    TaggedElement out = element;
    out.payload = updated.back().payload;
    return out;
  }

private:
  const GatsLayerParams& params_;
  const GatsConfig& cfg_;
  bool force_zero_gates_;
  std::deque<TaggedElement> window_;
};

}  // namespace gats
