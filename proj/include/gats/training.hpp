#pragma once

// Classifier-free guidance, instruction masking, the two-pass bimodal
// training step, and line-delimited metrics output.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "gats/composer.hpp"
#include "gats/optim.hpp"
#include "gats/tensor.hpp"

#include <nlohmann/json.hpp>

namespace gats {

struct CfgPolicyConfig {
  double lambda = 0.5;     // guidance strength
  double mask_prob = 0.02; // per-episode instruction-drop probability

  void validate() const {
    if (lambda < 0.0)
      throw Error("config", "CfgPolicyConfig: lambda must be >= 0");
    if (mask_prob < 0.0 || mask_prob > 1.0)
      throw Error("config", "CfgPolicyConfig: mask_prob must be in [0,1]");
  }
};

// softmax(l_cond + lambda * (l_cond - l_uncond)), rowwise.
inline Tensor guided_policy(const Tensor& l_cond, const Tensor& l_uncond,
                            double lambda) {
  if (l_cond.shape() != l_uncond.shape())
    throw shape_error("guided_policy: logit shapes differ, " +
                      shape_str(l_cond.shape()) + " vs " +
                      shape_str(l_uncond.shape()));
  if (lambda < 0.0)
    throw Error("config", "guided_policy: lambda must be >= 0");
  Tensor combined = add(l_cond, scale(sub(l_cond, l_uncond), lambda));
  return softmax(combined);
}

// Per-episode Bernoulli(mask_prob) replacement of the whole instruction by
// the null-conditioning token (same length, so arrival schedules are
// unaffected). Returns whether the episode was masked.
inline bool maybe_mask_instruction(std::vector<int>& instruction,
                                   double mask_prob, int null_token,
                                   Rng& rng) {
  if (!rng.bernoulli(mask_prob)) return false;
  std::fill(instruction.begin(), instruction.end(), null_token);
  return true;
}

// Batch form; returns the number of masked episodes.
inline std::size_t cfg_train_mask(std::vector<std::vector<int>>& batch,
                                  double mask_prob, int null_token, Rng& rng) {
  std::size_t masked = 0;
  for (auto& instruction : batch)
    masked += maybe_mask_instruction(instruction, mask_prob, null_token, rng)
                  ? 1
                  : 0;
  return masked;
}

// ---------------------------------------------------------------------------
// Two-pass bimodal training (caption <-> image), one shared GATS module.

struct PairedExample {
  std::vector<int> text;
  std::vector<int> vision;
};

struct TwoPassOptions {
  int text_modality = 1;
  int vision_modality = 2;
  int vision_mask_token = 0;
  double weight_masked = 1.0;   // pass A loss weight
  double weight_caption = 1.0;  // pass B loss weight
  double mask_lo = 0.2;         // uniform mask-rate range for pass A
  double mask_hi = 0.8;
};

struct TwoPassResult {
  double masked_loss = 0.0;   // pass A: masked vision tokens given text
  double caption_loss = 0.0;  // pass B: next-token text given vision
};

// One gradient accumulation over a paired batch: pass A presents the text
// first and scores masked vision-token prediction; pass B presents the
// vision first and scores next-token text prediction. Both passes backward
// into the same GATS parameters; the caller runs the optimizer step.
inline TwoPassResult two_pass_step(ModelBundle& bundle,
                                   const std::vector<PairedExample>& batch,
                                   const TwoPassOptions& opt, Rng& rng) {
  if (batch.empty())
    throw Error("config", "two_pass_step: empty batch");
  for (const auto& ex : batch)
    if (ex.text.empty() || ex.vision.empty())
      throw Error("sequence", "two_pass_step: unpaired example "
                              "(both text and vision tokens are required)");
  TwoPassResult result;
  double inv_batch = 1.0 / static_cast<double>(batch.size());

  if (opt.weight_masked > 0.0) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = Tensor::scalar(0.0);
    for (const auto& ex : batch) {
      double rate = rng.uniform(opt.mask_lo, opt.mask_hi);
      std::vector<int> vis_in = ex.vision;
      std::vector<int> targets(ex.vision.size(), -1);
      for (std::size_t i = 0; i < vis_in.size(); ++i)
        if (rng.bernoulli(rate)) {
          targets[i] = ex.vision[i];
          vis_in[i] = opt.vision_mask_token;
        }
      std::vector<ModalityStream> streams(2);
      streams[0].modality_id = opt.text_modality;
      streams[0].tokens = ex.text;
      streams[1].modality_id = opt.vision_modality;
      streams[1].tokens = vis_in;
      for (std::size_t i = 0; i < ex.text.size(); ++i)
        streams[0].arrival.push_back(i);
      for (std::size_t i = 0; i < vis_in.size(); ++i)
        streams[1].arrival.push_back(ex.text.size() + i);
      auto joint = joint_forward(bundle, streams);
      Tensor logits = bundle.components.at(opt.vision_modality)
                          ->logits(joint.final_activations.at(opt.vision_modality));
      loss = add(loss, cross_entropy(logits, targets));
    }
    loss = scale(loss, inv_batch);
    result.masked_loss = loss.item();
    backward(scale(loss, opt.weight_masked));
  }

  if (opt.weight_caption > 0.0) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = Tensor::scalar(0.0);
    for (const auto& ex : batch) {
      std::vector<ModalityStream> streams(2);
      streams[0].modality_id = opt.vision_modality;
      streams[0].tokens = ex.vision;
      streams[1].modality_id = opt.text_modality;
      streams[1].tokens = ex.text;
      for (std::size_t i = 0; i < ex.vision.size(); ++i)
        streams[0].arrival.push_back(i);
      for (std::size_t i = 0; i < ex.text.size(); ++i)
        streams[1].arrival.push_back(ex.vision.size() + i);
      auto joint = joint_forward(bundle, streams);
      Tensor logits = bundle.components.at(opt.text_modality)
                          ->logits(joint.final_activations.at(opt.text_modality));
      std::vector<int> targets(ex.text.begin() + 1, ex.text.end());
      targets.push_back(-1);
      loss = add(loss, cross_entropy(logits, targets));
    }
    loss = scale(loss, inv_batch);
    result.caption_loss = loss.item();
    backward(scale(loss, opt.weight_caption));
  }

  if (!std::isfinite(result.masked_loss) ||
      !std::isfinite(result.caption_loss))
    throw numeric_error("two_pass_step: loss diverged");
  return result;
}

// ---------------------------------------------------------------------------
// Metrics: one JSON record per line.

class MetricsWriter {
public:
  MetricsWriter() = default;

  explicit MetricsWriter(const std::string& path) {
    if (path.empty()) return;
    out_.open(path);
    if (!out_)
      throw Error("config", "MetricsWriter: cannot open " + path);
  }

  void record(std::size_t step, double loss, double lr, double grad_norm,
              const std::map<std::string, double>& extra = {}) {
    if (!out_.is_open()) return;
    nlohmann::json j{{"step", step}, {"loss", loss}, {"lr", lr},
                     {"grad_norm", grad_norm}};
    for (const auto& [k, v] : extra) j[k] = v;
    out_ << j.dump() << "\n";
    out_.flush();
  }

private:
  std::ofstream out_;
};

}  // namespace gats
