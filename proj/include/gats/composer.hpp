#pragma once

// Interleaves K GATS layers with the component models according to the
// proportional plan, runs the joint forward with steering injection, and
// serves rarely-changing frozen modalities from an activation cache.

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "gats/component.hpp"
#include "gats/gats_layer.hpp"
#include "gats/interleave.hpp"
#include "gats/optim.hpp"

namespace gats {

// Token stream for one modality. `arrival` gives each element's global
// arrival index; indices are unique across streams and strictly increasing
// within one stream.
struct ModalityStream {
  int modality_id = 0;
  std::vector<int> tokens;
  std::vector<std::size_t> arrival;
};

// Cache of a frozen, non-steered model's per-layer activations for a fixed
// token sequence, keyed by (parameter fingerprint, tokens) so any parameter
// change invalidates the entry.
class ActivationCache {
public:
  struct Entry {
    std::vector<Tensor> taps;  // taps[l-1] = activations after layer l
  };

  const Entry* find(std::uint64_t fingerprint,
                    const std::vector<int>& tokens) const {
    auto it = entries_.find({fingerprint, tokens});
    return it == entries_.end() ? nullptr : &it->second;
  }

  const Entry& insert(std::uint64_t fingerprint, const std::vector<int>& tokens,
                      Entry entry) {
    return entries_[{fingerprint, tokens}] = std::move(entry);
  }

  std::size_t miss_count() const { return misses_; }
  void count_miss() { ++misses_; }
  std::size_t size() const { return entries_.size(); }

private:
  std::map<std::pair<std::uint64_t, std::vector<int>>, Entry> entries_;
  std::size_t misses_ = 0;
};

struct ModelBundle {
  GatsConfig config;
  std::vector<GatsLayerParams> gats;  // K layers
  std::map<int, std::shared_ptr<ComponentModel>> components;
  InterleavePlan plan;

  std::vector<NamedParam> gats_params() {
    std::vector<NamedParam> out;
    for (std::size_t k = 0; k < gats.size(); ++k)
      gats[k].visit("gats." + std::to_string(k + 1),
                    [&](const std::string& n, Tensor& t) {
                      out.push_back({n, t});
                    });
    return out;
  }

  std::vector<NamedParam> all_params() {
    std::vector<NamedParam> out = gats_params();
    std::set<const ComponentModel*> seen;
    for (auto& [id, comp] : components) {
      if (!seen.insert(comp.get()).second) continue;  // shared two-view model
      auto cp = comp->named_params("comp." + std::to_string(id));
      out.insert(out.end(), cp.begin(), cp.end());
    }
    return out;
  }

  std::vector<NamedParam> trainable_params() {
    std::vector<NamedParam> out;
    for (auto& p : all_params())
      if (p.tensor.requires_grad()) out.push_back(p);
    return out;
  }

  static std::size_t count(const std::vector<NamedParam>& ps) {
    std::size_t n = 0;
    for (const auto& p : ps) n += p.tensor.numel();
    return n;
  }
};

inline ModelBundle make_bundle(
    const GatsConfig& config,
    std::map<int, std::shared_ptr<ComponentModel>> components, Rng& rng) {
  config.validate();
  ModelBundle b;
  b.config = config;
  b.components = std::move(components);
  std::vector<std::size_t> depths;
  for (const auto& m : config.modalities) {
    auto it = b.components.find(m.modality_id);
    if (it == b.components.end())
      throw Error("config", "no component model for modality " +
                                std::to_string(m.modality_id));
    depths.push_back(it->second->config().layers);
  }
  b.plan = build_plan(config.layers, depths);
  for (std::size_t k = 0; k < config.layers; ++k)
    b.gats.push_back(GatsLayerParams::init(config, rng));
  return b;
}

struct JointForwardOptions {
  bool force_zero_gates = false;
  ActivationCache* cache = nullptr;
  std::set<int> cached_modalities;  // must be frozen and non-steered
};

struct JointForwardResult {
  // Final-layer activations per modality (before the model's final norm).
  std::map<int, Tensor> final_activations;
};

namespace detail {

inline ActivationCache::Entry standalone_taps(ComponentModel& model,
                                              const std::vector<int>& tokens) {
  ActivationCache::Entry e;
  Tensor h = model.embed(tokens);
  for (std::size_t l = 1; l <= model.config().layers; ++l) {
    h = model.layer_forward(l, h);
    e.taps.push_back(h);
  }
  return e;
}

}  // namespace detail

// Joint forward over per-modality streams. Each component processes only its
// native tokens; at the k-th synchronization point the activations tapped at
// the planned layers form one tagged sequence processed by GATS layer k, and
// steered models continue from the updated activations.
inline JointForwardResult joint_forward(ModelBundle& bundle,
                                        const std::vector<ModalityStream>& streams,
                                        const JointForwardOptions& opt = {}) {
  const GatsConfig& cfg = bundle.config;
  // Stream validation and arrival-ordered element list.
  struct Element {
    std::size_t arrival;
    int modality_id;
    std::size_t pos;  // index within its stream
  };
  std::vector<Element> order;
  std::set<std::size_t> arrivals;
  for (const auto& s : streams) {
    if (!cfg.has_modality(s.modality_id))
      throw Error("config", "stream for modality " +
                                std::to_string(s.modality_id) +
                                " absent from config");
    if (s.tokens.size() != s.arrival.size())
      throw Error("sequence", "stream tokens/arrival length mismatch");
    for (std::size_t i = 0; i < s.arrival.size(); ++i) {
      if (i > 0 && s.arrival[i] <= s.arrival[i - 1])
        throw Error("sequence", "arrival indices must increase within stream");
      if (!arrivals.insert(s.arrival[i]).second)
        throw Error("sequence", "duplicate arrival index");
      order.push_back({s.arrival[i], s.modality_id, i});
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Element& a, const Element& b) {
              return a.arrival < b.arrival;
            });

  std::map<int, const ModalityStream*> by_id;
  for (const auto& s : streams) by_id[s.modality_id] = &s;

  // Cached modalities are served from standalone taps; valid only when the
  // model's own processing is never altered.
  std::map<int, const ActivationCache::Entry*> cached;
  for (int id : opt.cached_modalities) {
    if (!by_id.count(id)) continue;
    const ModalitySpec& spec = cfg.spec(id);
    auto& model = *bundle.components.at(id);
    if (spec.steered || !model.frozen())
      throw Error("config",
                  "activation cache requires a frozen, non-steered modality");
    if (opt.cache == nullptr)
      throw Error("config", "cached_modalities set but no cache given");
    std::uint64_t fp = model.cache_key();
    const auto* entry = opt.cache->find(fp, by_id.at(id)->tokens);
    if (entry == nullptr) {
      opt.cache->count_miss();
      entry = &opt.cache->insert(fp, by_id.at(id)->tokens,
                                 detail::standalone_taps(model,
                                                         by_id.at(id)->tokens));
    }
    cached[id] = entry;
  }

  std::map<int, Tensor> h;          // current activations per modality
  std::map<int, std::size_t> cur;   // layers applied so far
  for (const auto& s : streams) {
    if (cached.count(s.modality_id)) continue;
    if (s.tokens.empty()) continue;
    h[s.modality_id] = bundle.components.at(s.modality_id)->embed(s.tokens);
    cur[s.modality_id] = 0;
  }

  for (std::size_t k = 0; k < cfg.layers; ++k) {
    // Advance every modality to its planned tap layer.
    for (std::size_t mi = 0; mi < cfg.modalities.size(); ++mi) {
      int id = cfg.modalities[mi].modality_id;
      if (!by_id.count(id) || by_id.at(id)->tokens.empty()) continue;
      std::size_t target = bundle.plan.insert_at[k][mi];
      if (cached.count(id)) continue;  // taps are precomputed
      h[id] = bundle.components.at(id)->forward_range(h[id], cur[id], target);
      cur[id] = target;
    }
    // Merge all modalities' tapped activations into one tagged sequence.
    TaggedSequence seq;
    for (const auto& e : order) {
      Tensor act;
      if (cached.count(e.modality_id)) {
        std::size_t mi = 0;
        while (cfg.modalities[mi].modality_id != e.modality_id) ++mi;
        const Tensor& tap =
            cached.at(e.modality_id)->taps[bundle.plan.insert_at[k][mi] - 1];
        act = slice_rows(tap, e.pos, e.pos + 1);
      } else {
        act = slice_rows(h.at(e.modality_id), e.pos, e.pos + 1);
      }
      seq.push_back({e.modality_id, e.arrival, act});
    }
    TaggedSequence updated =
        gats_layer_forward(seq, bundle.gats[k], cfg, opt.force_zero_gates);
    // Steered models continue from the GATS-updated activations.
    for (const auto& m : cfg.modalities) {
      if (!m.steered || !by_id.count(m.modality_id) ||
          by_id.at(m.modality_id)->tokens.empty())
        continue;
      std::vector<Tensor> rows;
      for (std::size_t i = 0; i < updated.size(); ++i)
        if (updated[i].modality_id == m.modality_id)
          rows.push_back(updated[i].payload);
      h[m.modality_id] = concat_rows(rows);
    }
  }

  JointForwardResult result;
  for (const auto& s : streams) {
    if (s.tokens.empty()) continue;
    int id = s.modality_id;
    if (cached.count(id)) {
      result.final_activations[id] = cached.at(id)->taps.back();
      continue;
    }
    auto& model = *bundle.components.at(id);
    result.final_activations[id] =
        model.forward_range(h.at(id), cur[id], model.config().layers);
  }
  return result;
}

// Retains the (frozen) component models of `old_bundle` and replaces the
// GATS module with freshly initialized parameters from `new_config`.
struct SubstitutionReport {
  ModelBundle bundle;
  std::size_t old_gats_param_count = 0;
  std::size_t new_gats_param_count = 0;
  std::size_t trainable_param_count = 0;
};

inline SubstitutionReport substitute_gats(ModelBundle& old_bundle,
                                          const GatsConfig& new_config,
                                          Rng& rng) {
  std::set<int> old_ids, new_ids;
  for (const auto& m : old_bundle.config.modalities) old_ids.insert(m.modality_id);
  for (const auto& m : new_config.modalities) new_ids.insert(m.modality_id);
  if (old_ids != new_ids)
    throw Error("config",
                "substitute_gats: modality set mismatch between old bundle "
                "and new config");
  SubstitutionReport report;
  report.old_gats_param_count = ModelBundle::count(old_bundle.gats_params());
  report.bundle = make_bundle(new_config, old_bundle.components, rng);
  report.new_gats_param_count = ModelBundle::count(report.bundle.gats_params());
  report.trainable_param_count =
      ModelBundle::count(report.bundle.trainable_params());
  return report;
}

}  // namespace gats
