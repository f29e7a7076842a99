#pragma once

// Behavior cloning on the grid environment: assembles per-step modality
// streams for the composed agent, maps the action model's output through a
// small MLP head to action logits, trains with cross-entropy against the
// scripted expert, and evaluates success with classifier-free guidance.

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gats/composer.hpp"
#include "gats/env.hpp"
#include "gats/presets.hpp"
#include "gats/training.hpp"

namespace gats {

// ---------------------------------------------------------------------------
// Action head: 2-layer MLP from the action model's width to action logits.

struct ActionHead {
  Tensor w1, b1, w2, b2;

  static ActionHead init(std::size_t in_dim, std::size_t hidden,
                         std::size_t actions, Rng& rng) {
    ActionHead h;
    h.w1 = Tensor::randn({in_dim, hidden}, rng,
                         1.0 / std::sqrt(static_cast<double>(in_dim)));
    h.b1 = Tensor::zeros({hidden}, true);
    h.w2 = Tensor::randn({hidden, actions}, rng,
                         1.0 / std::sqrt(static_cast<double>(hidden)));
    h.b2 = Tensor::zeros({actions}, true);
    h.w1.set_requires_grad(true);
    h.w2.set_requires_grad(true);
    return h;
  }

  Tensor forward(const Tensor& x) const {
    return linear(gelu(linear(x, w1, b1)), w2, b2);
  }

  void visit(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }

  std::vector<NamedParam> named_params(const std::string& prefix) {
    std::vector<NamedParam> out;
    visit(prefix, [&](const std::string& n, Tensor& t) {
      out.push_back({n, t});
    });
    return out;
  }
};

// ---------------------------------------------------------------------------
// One decision step's inputs. The agent is Markovian: only the current
// views and the instruction enter; past actions do not.

struct AgentObservation {
  std::vector<int> instruction;  // kInstructionLen language tokens
  std::vector<int> view;         // 49 global-view tokens
  std::vector<int> ego;          // 9 tokens when the second view is present
};

// Streams in arrival order: instruction, global view, optional second view,
// then the action model's learned slot tokens (fixed ids, no past actions).
// A language-masked agent drops the language stream entirely, so its output
// cannot depend on instruction content.
inline std::vector<ModalityStream> agent_streams(const AgentPreset& p,
                                                 const AgentObservation& obs) {
  std::vector<ModalityStream> streams;
  std::size_t arrival = 0;
  auto push = [&](int id, const std::vector<int>& tokens) {
    ModalityStream s;
    s.modality_id = id;
    s.tokens = tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i)
      s.arrival.push_back(arrival++);
    streams.push_back(std::move(s));
  };
  if (!p.options.language_masked) push(AgentPreset::kLangId, obs.instruction);
  push(AgentPreset::kVisionId, obs.view);
  if (p.options.two_view && !obs.ego.empty())
    push(AgentPreset::kView2Id, obs.ego);
  std::vector<int> slots(p.options.action_window);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = static_cast<int>(i);
  push(AgentPreset::kActionId, slots);
  return streams;
}

// Runs the composed forward for one decision step and returns [1, actions]
// logits from the last action slot. When `cache` is given and the language
// model is frozen and non-steered, its activations are served from the cache
// (one language forward per distinct instruction).
inline Tensor agent_action_logits(AgentPreset& p, const ActionHead& head,
                                  const AgentObservation& obs,
                                  ActivationCache* cache = nullptr,
                                  bool force_zero_gates = false) {
  JointForwardOptions opt;
  opt.force_zero_gates = force_zero_gates;
  if (cache != nullptr && !p.options.language_masked &&
      p.bundle.components.at(AgentPreset::kLangId)->frozen() &&
      !p.bundle.config.spec(AgentPreset::kLangId).steered) {
    opt.cache = cache;
    opt.cached_modalities = {AgentPreset::kLangId};
  }
  auto result = joint_forward(p.bundle, agent_streams(p, obs), opt);
  auto& action_model = *p.bundle.components.at(AgentPreset::kActionId);
  Tensor a = action_model.final_norm(
      result.final_activations.at(AgentPreset::kActionId));
  // All slots feed the head: each slot is an independent read of the
  // gathered context, so flattening them widens the extraction bandwidth.
  return head.forward(reshape(a, {1, a.rows() * a.cols()}));
}

// ---------------------------------------------------------------------------
// Behavior-cloning dataset: one example per recorded step.

struct BcExample {
  std::vector<int> instruction;
  std::vector<int> view;
  std::vector<int> ego;  // empty when the step had no second view
  int action = kActionStay;
};

inline std::vector<BcExample> bc_examples(
    const std::vector<EpisodeRecord>& episodes) {
  std::vector<BcExample> out;
  for (const auto& ep : episodes)
    for (const auto& s : ep.steps)
      out.push_back({ep.instruction, s.observation,
                     s.has_ego ? s.ego : std::vector<int>{}, s.action});
  return out;
}

struct BcOptions {
  std::size_t batch = 16;
  AdamHyper adam{2e-3, 0.9, 0.999, 1e-8, 200, 1.0};
  CfgPolicyConfig cfg;           // mask_prob drives instruction dropping
  std::size_t checkpoint_every = 0;  // 0 = never
  std::function<void(std::size_t step)> checkpoint_hook;
  std::string metrics_path;
};

struct BcResult {
  std::vector<double> losses;  // one per optimizer step
  std::size_t steps = 0;
  std::size_t cache_misses = 0;  // language forwards during training
};

// Cross-entropy behavior cloning. Preconditions: the language and vision
// models are frozen; the GATS module, action model, and head train. With
// probability cfg.mask_prob per example the instruction is replaced by null
// tokens, which trains the unconditional branch used for guidance.
inline BcResult bc_train(AgentPreset& p, ActionHead& head,
                         const std::vector<EpisodeRecord>& dataset,
                         std::size_t steps, const BcOptions& opt, Rng& rng) {
  opt.cfg.validate();
  if (!p.bundle.components.at(AgentPreset::kLangId)->frozen() ||
      !p.bundle.components.at(AgentPreset::kVisionId)->frozen())
    throw Error("config",
                "bc_train: language and vision models must be frozen");
  BcResult result;
  if (steps == 0) return result;
  auto examples = bc_examples(dataset);
  if (examples.empty())
    throw Error("config", "bc_train: dataset has no steps");
  std::vector<NamedParam> params = p.bundle.trainable_params();
  auto hp = head.named_params("head");
  params.insert(params.end(), hp.begin(), hp.end());
  AdamState adam(std::move(params));
  ActivationCache cache;
  MetricsWriter metrics(opt.metrics_path);
  for (std::size_t step = 1; step <= steps; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const BcExample& ex = examples[rng.uniform_int(examples.size())];
      AgentObservation obs{ex.instruction, ex.view, ex.ego};
      maybe_mask_instruction(obs.instruction, opt.cfg.mask_prob, kWordNull,
                             rng);
      Tensor logits = agent_action_logits(p, head, obs, &cache);
      loss = add(loss, cross_entropy(logits, {ex.action}));
    }
    loss = scale(loss, 1.0 / static_cast<double>(opt.batch));
    double value = loss.item();
    if (!std::isfinite(value))
      throw numeric_error("bc_train: loss diverged at step " +
                          std::to_string(step));
    adam.zero_grad();
    backward(loss);
    double gn = adam.grad_norm();
    adam.step(opt.adam);
    metrics.record(step, value, adam.current_lr(opt.adam), gn);
    result.losses.push_back(value);
    if (opt.checkpoint_every != 0 && step % opt.checkpoint_every == 0 &&
        opt.checkpoint_hook)
      opt.checkpoint_hook(step);
  }
  result.steps = steps;
  result.cache_misses = cache.miss_count();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation: greedy rollouts with classifier-free guidance; the lambda=0
// baseline is reported from the same invocation on the same episode seeds.

struct EvalOptions {
  std::size_t episodes = 500;
  double lambda = 0.5;
  std::uint64_t seed = 0x5eedULL;  // episode seed stream, held out from training
};

struct TemplateStat {
  std::size_t episodes = 0;
  std::size_t guided = 0;    // successes at lambda
  std::size_t baseline = 0;  // successes at lambda = 0
};

struct EvalReport {
  double lambda = 0.0;
  double success_guided = 0.0;
  double success_baseline = 0.0;
  std::array<TemplateStat, kNumTemplates> per_template{};
};

inline int greedy_agent_action(AgentPreset& p, const ActionHead& head,
                               const std::vector<int>& instruction,
                               const GridEnv& env, double lambda,
                               ActivationCache& cache) {
  AgentObservation obs;
  obs.instruction = instruction;
  obs.view = env.observation();
  if (p.options.two_view && env.steps() % 2 == 0)
    obs.ego = env.ego_observation();
  Tensor probs;
  Tensor l_cond = agent_action_logits(p, head, obs, &cache);
  if (lambda == 0.0) {
    probs = softmax(l_cond);
  } else {
    AgentObservation uncond = obs;
    uncond.instruction.assign(obs.instruction.size(), kWordNull);
    Tensor l_uncond = agent_action_logits(p, head, uncond, &cache);
    probs = guided_policy(l_cond, l_uncond, lambda);
  }
  int best = 0;
  for (std::size_t a = 1; a < probs.cols(); ++a)
    if (probs.at(0, a) > probs.at(0, best)) best = static_cast<int>(a);
  return best;
}

inline EvalReport evaluate_agent(AgentPreset& p, const ActionHead& head,
                                 const EvalOptions& opt) {
  NoGradGuard no_grad;
  EvalReport report;
  report.lambda = opt.lambda;
  ActivationCache cache;
  Rng rng(opt.seed);
  std::size_t guided_total = 0, baseline_total = 0;
  for (std::size_t i = 0; i < opt.episodes; ++i) {
    std::uint64_t seed = rng.next_u64();
    for (int guided = 0; guided < 2; ++guided) {
      double lambda = guided ? opt.lambda : 0.0;
      GridEnv env(seed);
      const auto instruction = env.instruction();
      while (!env.done())
        env.step(greedy_agent_action(p, head, instruction, env, lambda,
                                     cache));
      auto& stat = report.per_template[env.instruction_template()];
      if (guided) {
        ++stat.episodes;
        stat.guided += env.success() ? 1 : 0;
        guided_total += env.success() ? 1 : 0;
      } else {
        stat.baseline += env.success() ? 1 : 0;
        baseline_total += env.success() ? 1 : 0;
      }
    }
  }
  report.success_guided =
      static_cast<double>(guided_total) / static_cast<double>(opt.episodes);
  report.success_baseline =
      static_cast<double>(baseline_total) / static_cast<double>(opt.episodes);
  return report;
}

}  // namespace gats
