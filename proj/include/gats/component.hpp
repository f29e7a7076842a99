#pragma once

// Toy transformer component models with per-layer activation taps and
// injection points. Pre-layer-norm blocks, GELU feed-forwards, learned
// absolute positions, and tied input/output embeddings. Vision-style models
// can use a time-space factorized attention mask.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "gats/gats_layer.hpp"
#include "gats/optim.hpp"
#include "gats/tensor.hpp"

namespace gats {

enum class MaskMode { causal, full, time_space };

inline std::string mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::causal: return "causal";
    case MaskMode::full: return "full";
    case MaskMode::time_space: return "time_space";
  }
  return "?";
}

inline MaskMode mask_mode_from_name(const std::string& s) {
  if (s == "causal") return MaskMode::causal;
  if (s == "full") return MaskMode::full;
  if (s == "time_space") return MaskMode::time_space;
  throw Error("config", "unknown mask mode: " + s);
}

// Attention mask for one layer of a time-space factorized model with F
// tokens per frame over T steps: even layer indices (0-based) attend
// bidirectionally within their own frame, odd indices attend causally across
// time at the same spatial slot.
inline std::vector<bool> build_factorized_mask(std::size_t tokens_per_frame,
                                               std::size_t steps,
                                               std::size_t layer_index) {
  std::size_t n = tokens_per_frame * steps;
  std::vector<bool> mask(n * n, false);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t fi = i / tokens_per_frame, si = i % tokens_per_frame;
    for (std::size_t j = 0; j < n; ++j) {
      std::size_t fj = j / tokens_per_frame, sj = j % tokens_per_frame;
      if (layer_index % 2 == 0)
        mask[i * n + j] = fi == fj;
      else
        mask[i * n + j] = si == sj && fj <= fi;
    }
  }
  return mask;
}

struct ComponentConfig {
  int modality_id = 0;
  std::size_t vocab = 16;
  std::size_t embed_dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffw_hidden = 128;
  MaskMode mask = MaskMode::causal;
  std::size_t tokens_per_frame = 1;  // time_space only
  std::size_t max_len = 512;

  void validate() const {
    if (layers < 2)
      throw Error("config", "ComponentConfig: need at least 2 layers");
    if (heads < 1 || embed_dim % heads != 0)
      throw Error("config", "ComponentConfig: heads must divide embed_dim");
    if (mask == MaskMode::time_space && tokens_per_frame < 1)
      throw Error("config", "ComponentConfig: tokens_per_frame >= 1");
  }
};

class ComponentModel {
public:
  ComponentModel() = default;

  ComponentModel(ComponentConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    tok_embed_ = Tensor::randn({cfg_.vocab, cfg_.embed_dim}, rng, 0.02);
    pos_embed_ = Tensor::randn({cfg_.max_len, cfg_.embed_dim}, rng, 0.02);
    for (std::size_t l = 0; l < cfg_.layers; ++l)
      blocks_.push_back(AttentionBlockParams::init(cfg_.embed_dim, cfg_.heads,
                                                   cfg_.ffw_hidden, rng));
    final_g_ = Tensor::full({cfg_.embed_dim}, 1.0, true);
    final_b_ = Tensor::zeros({cfg_.embed_dim}, true);
  }

  const ComponentConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }

  void set_frozen(bool f) {
    frozen_ = f;
    visit("m", [f](const std::string&, Tensor& t) { t.set_requires_grad(!f); });
    // Frozen parameters cannot change, so the fingerprint can be memoized;
    // unfreezing drops the memo.
    frozen_fp_ = f ? param_fingerprint(named_params("m")) : 0;
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".tok_embed", tok_embed_);
    fn(prefix + ".pos_embed", pos_embed_);
    for (std::size_t l = 0; l < blocks_.size(); ++l)
      blocks_[l].visit(prefix + ".layer" + std::to_string(l + 1), fn);
    fn(prefix + ".final.g", final_g_);
    fn(prefix + ".final.b", final_b_);
  }

  std::vector<NamedParam> named_params(const std::string& prefix) {
    std::vector<NamedParam> out;
    visit(prefix, [&](const std::string& n, Tensor& t) {
      out.push_back({n, t});
    });
    return out;
  }

  // Always rehashes the parameters; use this to verify immutability.
  std::uint64_t fingerprint() {
    return param_fingerprint(named_params("m"));
  }

  // Cheap cache key: the fingerprint memoized at freeze time. Only frozen
  // models may be cached, and their parameters change only through an
  // unfreeze/refreeze cycle, which refreshes the memo.
  std::uint64_t cache_key() {
    return frozen_ ? frozen_fp_ : fingerprint();
  }

  // Token + position embeddings; positions are relative to the start of the
  // given sequence.
  Tensor embed(const std::vector<int>& tokens) const {
    if (tokens.size() > cfg_.max_len)
      throw Error("config", "sequence longer than max_len");
    Tensor x = embedding_lookup(tok_embed_, tokens);
    Tensor pos = slice_rows(pos_embed_, 0, tokens.size());
    return add(x, pos);
  }

  std::vector<bool> layer_mask(std::size_t layer /*1-based*/,
                               std::size_t len) const {
    switch (cfg_.mask) {
      case MaskMode::causal: {
        std::vector<bool> m(len * len, false);
        for (std::size_t i = 0; i < len; ++i)
          for (std::size_t j = 0; j <= i; ++j) m[i * len + j] = true;
        return m;
      }
      case MaskMode::full:
        return std::vector<bool>(len * len, true);
      case MaskMode::time_space: {
        if (len % cfg_.tokens_per_frame != 0)
          throw Error("sequence",
                      "time_space model: length not a multiple of frame size");
        return build_factorized_mask(cfg_.tokens_per_frame,
                                     len / cfg_.tokens_per_frame, layer - 1);
      }
    }
    throw Error("config", "bad mask mode");
  }

  // Applies layer `layer` (1-based) to activations x.
  Tensor layer_forward(std::size_t layer, const Tensor& x) const {
    if (layer < 1 || layer > cfg_.layers)
      throw Error("config", "layer index out of range");
    std::size_t len = x.rows();
    std::vector<std::size_t> all(len);
    for (std::size_t i = 0; i < len; ++i) all[i] = i;
    return attention_block(x, all, layer_mask(layer, len), blocks_[layer - 1]);
  }

  // Applies layers (from, to]; injection point: pass a (possibly modified)
  // tap from layer `from` and processing continues identically.
  Tensor forward_range(const Tensor& x, std::size_t from, std::size_t to) const {
    Tensor h = x;
    for (std::size_t l = from + 1; l <= to; ++l) h = layer_forward(l, h);
    return h;
  }

  Tensor final_norm(const Tensor& x) const {
    return layernorm(x, final_g_, final_b_);
  }

  // Tied-embedding output head.
  Tensor logits(const Tensor& x) const {
    return matmul(final_norm(x), transpose(tok_embed_));
  }

  struct ForwardResult {
    Tensor logits;
    std::vector<Tensor> taps;  // taps[l-1] = activations after layer l
  };

  ForwardResult forward_with_taps(const std::vector<int>& tokens) const {
    Tensor h = embed(tokens);
    ForwardResult r;
    for (std::size_t l = 1; l <= cfg_.layers; ++l) {
      h = layer_forward(l, h);
      r.taps.push_back(h);
    }
    r.logits = logits(h);
    return r;
  }

private:
  ComponentConfig cfg_;
  Tensor tok_embed_, pos_embed_;
  std::vector<AttentionBlockParams> blocks_;
  Tensor final_g_, final_b_;
  bool frozen_ = false;
  std::uint64_t frozen_fp_ = 0;
};

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainOptions {
  std::size_t steps = 500;
  std::size_t batch = 8;
  AdamHyper adam{1e-3, 0.9, 0.999, 1e-8, 50};
  double loss_threshold = 1e9;  // freeze-eligibility threshold
  // Masked objective (vision): fraction of tokens replaced by mask_token.
  bool masked_objective = false;
  int mask_token = -1;
  double mask_rate = 0.3;
};

struct PretrainResult {
  double final_loss = 0.0;
  bool reached_threshold = false;
  std::vector<double> loss_history;
};

// Next-token (causal) or masked-token pretraining on a corpus of token
// sequences. Throws on divergence (non-finite loss).
inline PretrainResult pretrain_component(ComponentModel& model,
                                         const std::vector<std::vector<int>>& corpus,
                                         const PretrainOptions& opt, Rng& rng) {
  if (model.frozen())
    throw Error("config", "pretrain_component: model is frozen");
  if (corpus.empty())
    throw Error("config", "pretrain_component: empty corpus");
  AdamState adam(model.named_params("m"));
  PretrainResult result;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const auto& seq = corpus[rng.uniform_int(corpus.size())];
      if (seq.size() < 2) continue;
      std::vector<int> input = seq;
      std::vector<int> targets;
      if (opt.masked_objective) {
        targets.assign(seq.size(), -1);
        for (std::size_t i = 0; i < seq.size(); ++i)
          if (rng.bernoulli(opt.mask_rate)) {
            targets[i] = seq[i];
            input[i] = opt.mask_token;
          }
      } else {
        targets.assign(seq.begin() + 1, seq.end());
        targets.push_back(-1);  // no target for the last position
      }
      auto fwd = model.forward_with_taps(input);
      loss = add(loss, cross_entropy(fwd.logits, targets));
    }
    loss = scale(loss, 1.0 / static_cast<double>(opt.batch));
    double lv = loss.item();
    if (!std::isfinite(lv))
      throw numeric_error("pretrain_component: loss diverged at step " +
                          std::to_string(step));
    result.loss_history.push_back(lv);
    backward(loss);
    adam.step(opt.adam);
    adam.zero_grad();
  }
  result.final_loss = result.loss_history.empty() ? 0.0
                                                  : result.loss_history.back();
  result.reached_threshold = result.final_loss <= opt.loss_threshold;
  return result;
}

}  // namespace gats
