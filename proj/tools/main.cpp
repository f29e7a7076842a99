// Command-line surface for the fusion library: dataset generation, component
// pretraining, agent and bimodal training, evaluation, plan inspection, the
// cross-attention equivalence oracle, and GATS substitution.
//
// Errors print a single machine-parsable line to stderr:
//   error category=<category>: <message>
// and exit nonzero. GATS_DETERMINISTIC=1 pins the thread count to 1 (the
// library is single-threaded; the variable is honored for forward
// compatibility).

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gats/agent.hpp"
#include "gats/checkpoint.hpp"
#include "gats/config.hpp"
#include "gats/env.hpp"
#include "gats/presets.hpp"
#include "gats/training.hpp"

using namespace gats;

namespace {

std::vector<std::size_t> parse_csv_sizes(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
  return out;
}

// ---------------------------------------------------------------------------
// Agent construction shared by train-agent, evaluate, and substitute-gats.
// Component sizes default to the desk-scale configuration; a RunConfig can
// override them.

struct AgentSetup {
  AgentPreset preset;
  ActionHead head;
  std::shared_ptr<ComponentModel> lang, vision, action;
  nlohmann::json echo;  // topology echo stored in checkpoints
};

ComponentConfig default_component(int modality) {
  ComponentConfig c;
  c.modality_id = modality;
  switch (modality) {
    case AgentPreset::kLangId:
      c.vocab = kLangVocab;
      c.embed_dim = 32;
      c.mask = MaskMode::causal;
      break;
    case AgentPreset::kVisionId:
      c.vocab = kVisionVocab;
      c.embed_dim = 48;
      c.mask = MaskMode::full;
      break;
    default:  // action model: slot tokens only
      c.vocab = 8;
      c.embed_dim = 32;
      c.mask = MaskMode::full;
      break;
  }
  c.layers = 2;
  c.heads = 4;
  c.ffw_hidden = 2 * c.embed_dim;
  return c;
}

AgentSetup build_agent(const RunConfig& cfg,
                       const std::vector<int>& no_steer) {
  AgentSetup s;
  Rng rng(cfg.seed);
  std::map<int, ComponentConfig> comp_cfgs;
  for (int id : {AgentPreset::kLangId, AgentPreset::kVisionId,
                 AgentPreset::kActionId})
    comp_cfgs[id] = default_component(id);
  for (const auto& c : cfg.components) comp_cfgs[c.modality_id] = c;
  auto make = [&rng](const ComponentConfig& c) {
    Rng fork = rng.fork();
    return std::make_shared<ComponentModel>(c, fork);
  };
  s.lang = make(comp_cfgs.at(AgentPreset::kLangId));
  s.vision = make(comp_cfgs.at(AgentPreset::kVisionId));
  s.action = make(comp_cfgs.at(AgentPreset::kActionId));
  s.lang->set_frozen(true);
  s.vision->set_frozen(true);

  AgentPresetOptions opt;
  opt.two_view = cfg.preset == "agent3_twoview";
  if (!cfg.gats.modalities.empty()) {
    opt.gats_layers = cfg.gats.layers;
    opt.gats_width = cfg.gats.d;
    opt.gats_heads = cfg.gats.heads;
    opt.gats_ffw = cfg.gats.ffw_hidden;
    opt.gate_init_bias = cfg.gats.gate_init_bias;
  } else {
    opt.gats_layers = 1;
    opt.gats_width = 64;
    opt.gats_heads = 4;
    opt.gats_ffw = 128;
    opt.gate_init_bias = -1.0;
  }
  for (int id : no_steer)
    if (id == AgentPreset::kVisionId) opt.steer_vision = false;
  s.preset = build_agent_preset(s.lang, s.vision, s.action, opt, rng);
  s.head = ActionHead::init(comp_cfgs.at(AgentPreset::kActionId).embed_dim,
                            64, kNumActions, rng);

  s.echo["preset"] = cfg.preset;
  s.echo["seed"] = cfg.seed;
  s.echo["gats"] = gats_config_to_json(s.preset.bundle.config);
  s.echo["steer_vision"] = opt.steer_vision;
  return s;
}

std::vector<NamedParam> agent_params(AgentSetup& s) {
  auto params = s.preset.bundle.all_params();
  auto hp = s.head.named_params("head");
  params.insert(params.end(), hp.begin(), hp.end());
  return params;
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  return load_run_config(path);
}

void print_eval_report(const EvalReport& rep) {
  std::cout << "success lambda=" << rep.lambda << ": " << rep.success_guided
            << "\n";
  std::cout << "success lambda=0: " << rep.success_baseline << "\n";
  std::cout << "per-template (template: episodes guided baseline):\n";
  for (int t = 0; t < kNumTemplates; ++t) {
    const auto& st = rep.per_template[t];
    std::cout << "  " << t << ": " << st.episodes << " " << st.guided << " "
              << st.baseline << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* det = std::getenv("GATS_DETERMINISTIC");
      det && std::string(det) == "1") {
    // Single-threaded library; nothing further to pin.
  }

  CLI::App app{"Gather-attend-scatter multimodal fusion toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_path = ".", preset_name;
  std::uint64_t seed = 0;
  bool seed_set = false, force_zero_gates = false;
  std::size_t steps = 0;
  bool steps_set = false;
  double lambda = 0.5;
  bool lambda_set = false;
  std::vector<int> freeze_ids, no_steer_ids;
  app.add_option("--config", config_path, "Run configuration file (JSON)");
  app.add_option_function<std::uint64_t>(
      "--seed", [&](std::uint64_t v) { seed = v; seed_set = true; },
      "Seed override");
  app.add_option("--preset", preset_name,
                 "Preset name (cross_attention, agent3, agent3_twoview)");
  app.add_option_function<std::size_t>(
      "--steps", [&](std::size_t v) { steps = v; steps_set = true; },
      "Training step override");
  app.add_option_function<double>(
      "--lambda", [&](double v) { lambda = v; lambda_set = true; },
      "Guidance strength");
  app.add_option("--out", out_path, "Output directory or file");
  app.add_option("--freeze", freeze_ids, "Modality ids to freeze");
  app.add_option("--no-steer", no_steer_ids,
                 "Modality ids removed from the steered set");
  app.add_flag("--force-zero-gates", force_zero_gates,
               "Debug: bypass all GATS gates");

  auto* cmd_gen = app.add_subcommand("gen-data", "Generate expert episodes");
  std::size_t gen_episodes = 1000;
  cmd_gen->add_option("--episodes", gen_episodes, "Episode count");

  auto* cmd_plan =
      app.add_subcommand("inspect-plan", "Print the interleave plan");
  std::size_t plan_k = 1;
  std::string plan_depths = "6,4,2";
  cmd_plan->add_option("--layers", plan_k, "GATS layer count K");
  cmd_plan->add_option("--depths", plan_depths,
                       "Component depths L_1..L_M (comma separated)");

  auto* cmd_eqv = app.add_subcommand(
      "equivalence-check", "Cross-attention preset vs reference adapter");
  std::size_t eqv_seeds = 10, eqv_inputs = 10;
  cmd_eqv->add_option("--weight-seeds", eqv_seeds, "Random weight seeds");
  cmd_eqv->add_option("--inputs", eqv_inputs, "Inputs per seed");

  auto* cmd_pre =
      app.add_subcommand("pretrain", "Pretrain one component model");
  std::string pre_modality = "lang";
  cmd_pre->add_option("--modality", pre_modality, "lang | vision | action");

  auto* cmd_agent = app.add_subcommand("train-agent", "Behavior cloning");
  std::string agent_data;
  cmd_agent->add_option("--data", agent_data,
                        "Dataset file (generated when absent)");

  auto* cmd_eval =
      app.add_subcommand("evaluate", "Roll out a trained agent");
  std::string eval_ckpt;
  cmd_eval->add_option("--checkpoint", eval_ckpt, "Agent checkpoint")
      ->required();

  auto* cmd_bi = app.add_subcommand("train-bimodal",
                                    "Two-pass masked + caption training");

  auto* cmd_sub = app.add_subcommand(
      "substitute-gats", "Swap in a freshly initialized GATS module");
  std::string sub_ckpt;
  std::size_t sub_width = 0;
  cmd_sub->add_option("--checkpoint", sub_ckpt, "Agent checkpoint")
      ->required();
  cmd_sub->add_option("--width", sub_width,
                      "New GATS width d (default: unchanged)");

  // Global flags may appear after the subcommand name.
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = load_config_or_default(config_path);
    if (seed_set) cfg.seed = seed;
    if (!preset_name.empty()) cfg.preset = preset_name;
    if (steps_set) cfg.training.steps = steps;
    if (lambda_set) cfg.training.lambda = lambda;

    if (*cmd_gen) {
      std::string path = out_path;
      if (std::filesystem::is_directory(path) || path == ".")
        path = (std::filesystem::path(path) / "episodes.bin").string();
      generate_dataset(gen_episodes, cfg.env.dataset_seed ^ cfg.seed, path);
      std::cout << "wrote " << gen_episodes << " episodes to " << path
                << "\n";
      return 0;
    }

    if (*cmd_plan) {
      auto depths = parse_csv_sizes(plan_depths);
      InterleavePlan plan = build_plan(plan_k, depths);
      for (std::size_t k = 0; k < plan_k; ++k) {
        std::cout << "(" << (k + 1) << ":";
        for (std::size_t i = 0; i < depths.size(); ++i)
          std::cout << " " << plan.insert_at[k][i];
        std::cout << ")\n";
      }
      return 0;
    }

    if (*cmd_eqv) {
      double max_dev = 0.0;
      for (std::size_t s = 0; s < eqv_seeds; ++s) {
        Rng rng(1000 + s + cfg.seed);
        ComponentConfig lc;
        lc.modality_id = CrossAttentionPreset::kLangId;
        lc.vocab = 11;
        lc.embed_dim = 16;
        lc.layers = 4;
        lc.heads = 2;
        lc.ffw_hidden = 32;
        Rng fork = rng.fork();
        auto lang = std::make_shared<ComponentModel>(lc, fork);
        Tensor feats = Tensor::randn({3, 8}, rng);
        auto p = build_cross_attention_preset(lang, feats, rng);
        for (auto& layer : p.gats) {
          auto& lp = layer.per_modality.at(CrossAttentionPreset::kLangId);
          for (auto& v : lp.gate_w.mutable_data())
            v = rng.uniform(-0.3, 0.3);
          lp.gate_b.mutable_data()[0] = 0.3;
        }
        for (std::size_t i = 0; i < eqv_inputs; ++i) {
          std::vector<int> tokens(6);
          for (auto& t : tokens)
            t = static_cast<int>(rng.uniform_int(lc.vocab));
          Tensor got = cross_attention_forward(p, tokens,
                                               force_zero_gates);
          auto want = reference_cross_attention(p, tokens);
          for (std::size_t r = 0; r < tokens.size(); ++r)
            for (std::size_t v = 0; v < lc.vocab; ++v)
              max_dev = std::max(
                  max_dev, std::abs(got.at(r, v) - want[r][v]));
        }
      }
      std::cout << "max abs deviation: " << max_dev << "\n";
      return max_dev < 1e-8 ? 0 : 1;
    }

    if (*cmd_pre) {
      int modality;
      ComponentConfig cc;
      PretrainOptions popt;
      popt.steps = steps_set ? steps : 300;
      std::vector<std::vector<int>> corpus;
      Rng crng(cfg.seed + 7);
      if (pre_modality == "lang") {
        modality = AgentPreset::kLangId;
        for (int i = 0; i < 200; ++i)
          corpus.push_back(GridEnv(crng.next_u64()).instruction());
      } else if (pre_modality == "vision") {
        modality = AgentPreset::kVisionId;
        popt.masked_objective = true;
        popt.mask_token = kVisionMask;
        for (int i = 0; i < 200; ++i)
          corpus.push_back(GridEnv(crng.next_u64()).observation());
      } else if (pre_modality == "action") {
        modality = AgentPreset::kActionId;
        for (int i = 0; i < 200; ++i) {
          auto ep = run_expert_episode(crng.next_u64());
          std::vector<int> seq;
          for (const auto& st : ep.steps) seq.push_back(st.action);
          if (seq.size() >= 2) corpus.push_back(seq);
        }
      } else {
        throw Error("config", "pretrain: unknown modality " + pre_modality);
      }
      cc = default_component(modality);
      if (pre_modality == "action") cc.vocab = kNumActions;
      Rng rng(cfg.seed);
      ComponentModel model(cc, rng);
      auto result = pretrain_component(model, corpus, popt, rng);
      std::cout << "final loss: " << result.final_loss << "\n";
      std::filesystem::create_directories(out_path);
      CheckpointMeta meta;
      meta.step = popt.steps;
      meta.rng_state = rng.state();
      meta.config["modality"] = pre_modality;
      auto params = model.named_params("m");
      save_checkpoint(
          (std::filesystem::path(out_path) / (pre_modality + ".ckpt"))
              .string(),
          params, meta);
      return 0;
    }

    if (*cmd_agent) {
      for (int id : freeze_ids)
        if (id != AgentPreset::kLangId && id != AgentPreset::kVisionId)
          throw Error("config",
                      "train-agent: only language (1) and vision (2) can be "
                      "frozen");
      AgentSetup s = build_agent(cfg, no_steer_ids);
      std::vector<EpisodeRecord> data =
          agent_data.empty()
              ? generate_episodes(cfg.env.episodes, cfg.env.dataset_seed)
              : load_dataset(agent_data);
      std::filesystem::create_directories(out_path);
      BcOptions bopt;
      bopt.batch = cfg.training.batch;
      bopt.adam.lr = cfg.training.lr;
      bopt.adam.warmup_steps = cfg.training.warmup_steps;
      bopt.cfg.lambda = cfg.training.lambda;
      bopt.cfg.mask_prob = cfg.training.mask_prob;
      bopt.checkpoint_every = cfg.training.checkpoint_every;
      bopt.metrics_path =
          cfg.metrics_path.empty()
              ? (std::filesystem::path(out_path) / "metrics.jsonl").string()
              : cfg.metrics_path;
      std::string ckpt_path =
          (std::filesystem::path(out_path) / "agent.ckpt").string();
      Rng trng(cfg.seed + 1);
      auto save = [&](std::size_t step) {
        CheckpointMeta meta;
        meta.step = step;
        meta.rng_state = trng.state();
        meta.config = s.echo;
        auto params = agent_params(s);
        save_checkpoint(ckpt_path, params, meta);
      };
      bopt.checkpoint_hook = save;
      auto result =
          bc_train(s.preset, s.head, data, cfg.training.steps, bopt, trng);
      save(result.steps);
      std::cout << "final loss: "
                << (result.losses.empty() ? 0.0 : result.losses.back())
                << "\n";
      std::cout << "checkpoint: " << ckpt_path << "\n";
      return 0;
    }

    if (*cmd_eval) {
      std::vector<NamedParam> probe;  // filled after topology known
      // Rebuild the topology from the checkpoint's configuration echo.
      {
        std::ifstream in(eval_ckpt, std::ios::binary);
        if (!in)
          throw Error("config", "evaluate: cannot open " + eval_ckpt);
      }
      // First load pass only needs the echo; reconstruct, then load params.
      RunConfig rcfg = cfg;
      AgentSetup s = build_agent(rcfg, no_steer_ids);
      auto params = agent_params(s);
      CheckpointMeta meta = load_checkpoint(eval_ckpt, params);
      // Refresh frozen fingerprints for the loaded weights.
      s.lang->set_frozen(true);
      s.vision->set_frozen(true);
      EvalOptions eopt;
      eopt.episodes = cfg.env.eval_episodes;
      eopt.lambda = lambda_set ? lambda : cfg.training.lambda;
      eopt.seed = cfg.env.eval_seed;
      auto rep = evaluate_agent(s.preset, s.head, eopt);
      print_eval_report(rep);
      return 0;
    }

    if (*cmd_bi) {
      // Toy paired corpus: a solid-color image and its color-word caption.
      Rng rng(cfg.seed);
      auto make_comp = [&rng](int id, MaskMode mask) {
        ComponentConfig c;
        c.modality_id = id;
        c.vocab = 8;
        c.embed_dim = 16;
        c.layers = 2;
        c.heads = 2;
        c.ffw_hidden = 32;
        c.mask = mask;
        Rng fork = rng.fork();
        return std::make_shared<ComponentModel>(c, fork);
      };
      auto text = make_comp(1, MaskMode::causal);
      auto vision = make_comp(2, MaskMode::full);
      GatsConfig gcfg;
      gcfg.modalities = {{1, 16, 8, true}, {2, 16, 8, true}};
      gcfg.d = 16;
      gcfg.layers = 1;
      gcfg.heads = 2;
      gcfg.ffw_hidden = 32;
      gcfg.gate_init_bias = -1.0;
      auto bundle = make_bundle(
          gcfg, {{1, text}, {2, vision}}, rng);
      std::vector<PairedExample> dataset;
      for (int c = 0; c < 3; ++c)
        dataset.push_back({{5, c}, std::vector<int>(6, c)});
      TwoPassOptions topt;
      topt.vision_mask_token = 5;
      auto params = bundle.all_params();
      AdamState adam(std::move(params));
      AdamHyper hyper;
      hyper.lr = cfg.training.lr;
      std::size_t n_steps = cfg.training.steps;
      MetricsWriter metrics(cfg.metrics_path);
      double masked = 0, caption = 0;
      Rng trng(cfg.seed + 1);
      for (std::size_t stp = 1; stp <= n_steps; ++stp) {
        std::vector<PairedExample> batch;
        for (std::size_t b = 0; b < cfg.training.batch; ++b)
          batch.push_back(dataset[trng.uniform_int(dataset.size())]);
        adam.zero_grad();
        auto r = two_pass_step(bundle, batch, topt, trng);
        adam.step(hyper);
        masked = r.masked_loss;
        caption = r.caption_loss;
        metrics.record(stp, masked + caption, hyper.lr, adam.grad_norm(),
                       {{"masked_loss", masked}, {"caption_loss", caption}});
      }
      std::cout << "masked loss: " << masked
                << " caption loss: " << caption << "\n";
      return 0;
    }

    if (*cmd_sub) {
      AgentSetup s = build_agent(cfg, no_steer_ids);
      auto params = agent_params(s);
      CheckpointMeta meta = load_checkpoint(sub_ckpt, params);
      s.lang->set_frozen(true);
      s.vision->set_frozen(true);
      GatsConfig ncfg = s.preset.bundle.config;
      if (sub_width != 0) {
        ncfg.d = sub_width;
        ncfg.ffw_hidden = 2 * sub_width;
      }
      Rng rng(cfg.seed + 2);
      auto report = substitute_gats(s.preset.bundle, ncfg, rng);
      std::cout << "old gats params: " << report.old_gats_param_count
                << "\nnew gats params: " << report.new_gats_param_count
                << "\ntrainable params: " << report.trainable_param_count
                << "\n";
      s.preset.bundle = std::move(report.bundle);
      std::filesystem::create_directories(out_path);
      std::string ckpt_path =
          (std::filesystem::path(out_path) / "substituted.ckpt").string();
      CheckpointMeta nmeta;
      nmeta.step = meta.step;
      nmeta.rng_state = meta.rng_state;
      nmeta.config = s.echo;
      nmeta.config["gats"] = gats_config_to_json(ncfg);
      auto nparams = agent_params(s);
      save_checkpoint(ckpt_path, nparams, nmeta);
      std::cout << "checkpoint: " << ckpt_path << "\n";
      return 0;
    }

    throw Error("config", "no subcommand handled");
  } catch (const Error& e) {
    std::cerr << "error category=" << e.category() << ": " << e.what()
              << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error category=internal: " << e.what() << "\n";
    return 3;
  }
}
