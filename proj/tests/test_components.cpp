#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gats/component.hpp"
#include "gats/optim.hpp"
#include "test_util.hpp"

using namespace gats;

namespace {

ComponentConfig tiny_config(std::size_t layers = 2, std::size_t dim = 16,
                            std::size_t heads = 2, std::size_t vocab = 12) {
  ComponentConfig c;
  c.modality_id = 1;
  c.vocab = vocab;
  c.embed_dim = dim;
  c.layers = layers;
  c.heads = heads;
  c.ffw_hidden = 2 * dim;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.uniform_int(vocab));
  return t;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Straight-line reference transformer sharing no code with the library: raw
// double vectors and explicit loops only.

using Mat = std::vector<std::vector<double>>;

Mat grab(ComponentModel& m, const std::string& name) {
  Mat out;
  m.visit("m", [&](const std::string& n, Tensor& t) {
    if (n != name) return;
    // 1-d tensors (biases, layer-norm gains) become a single row.
    std::size_t r = t.shape().size() == 1 ? 1 : t.rows();
    std::size_t c = t.numel() / r;
    out.assign(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i][j] = t.data()[i * c + j];
  });
  REQUIRE(!out.empty());
  return out;
}

std::vector<double> ref_layernorm(const std::vector<double>& x,
                                  const Mat& g, const Mat& b) {
  std::size_t d = x.size();
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= d;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= d;
  double istd = 1.0 / std::sqrt(var + 1e-5);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i)
    out[i] = (x[i] - mu) * istd * g[0][i] + b[0][i];
  return out;
}

std::vector<double> ref_affine(const std::vector<double>& x, const Mat& w,
                               const Mat& b) {
  std::size_t in = w.size(), out_dim = w[0].size();
  REQUIRE(x.size() == in);
  std::vector<double> out(out_dim);
  for (std::size_t j = 0; j < out_dim; ++j) {
    double s = b[0][j];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * w[i][j];
    out[j] = s;
  }
  return out;
}

// Full reference forward for a causal model; returns logits [n][vocab].
Mat ref_forward(ComponentModel& m, const std::vector<int>& tokens) {
  const auto& cfg = m.config();
  Mat tok = grab(m, "m.tok_embed"), pos = grab(m, "m.pos_embed");
  std::size_t n = tokens.size(), d = cfg.embed_dim, H = cfg.heads, dh = d / H;
  Mat h(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      h[i][j] = tok[static_cast<std::size_t>(tokens[i])][j] + pos[i][j];
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    std::string p = "m.layer" + std::to_string(l);
    Mat ln1g = grab(m, p + ".ln1.g"), ln1b = grab(m, p + ".ln1.b");
    Mat wq = grab(m, p + ".wq"), bq = grab(m, p + ".bq");
    Mat wk = grab(m, p + ".wk"), bk = grab(m, p + ".bk");
    Mat wv = grab(m, p + ".wv"), bv = grab(m, p + ".bv");
    Mat wo = grab(m, p + ".wo"), bo = grab(m, p + ".bo");
    Mat ln2g = grab(m, p + ".ln2.g"), ln2b = grab(m, p + ".ln2.b");
    Mat w1 = grab(m, p + ".ffw.w1"), b1 = grab(m, p + ".ffw.b1");
    Mat w2 = grab(m, p + ".ffw.w2"), b2 = grab(m, p + ".ffw.b2");
    Mat lnx(n), q(n), k(n), v(n);
    for (std::size_t i = 0; i < n; ++i) {
      lnx[i] = ref_layernorm(h[i], ln1g, ln1b);
      q[i] = ref_affine(lnx[i], wq, bq);
      k[i] = ref_affine(lnx[i], wk, bk);
      v[i] = ref_affine(lnx[i], wv, bv);
    }
    Mat attn(n, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> heads_out(d, 0.0);
      for (std::size_t hh = 0; hh < H; ++hh) {
        std::vector<double> scores(i + 1);
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
      std::vector<double> proj = ref_affine(heads_out, wo, bo);
      for (std::size_t c = 0; c < d; ++c) attn[i][c] = h[i][c] + proj[c];
    }
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> u = ref_layernorm(attn[i], ln2g, ln2b);
      std::vector<double> mid = ref_affine(u, w1, b1);
      for (double& x : mid) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
      std::vector<double> ffw = ref_affine(mid, w2, b2);
      for (std::size_t c = 0; c < d; ++c) h[i][c] = attn[i][c] + ffw[c];
    }
  }
  Mat fg = grab(m, "m.final.g"), fb = grab(m, "m.final.b");
  Mat logits(n, std::vector<double>(cfg.vocab));
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> fin = ref_layernorm(h[i], fg, fb);
    for (std::size_t vtok = 0; vtok < cfg.vocab; ++vtok) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += fin[c] * tok[vtok][c];
      logits[i][vtok] = s;
    }
  }
  return logits;
}

// Toy grammar: cyclic walks tok_{t+1} = (tok_t + stride) mod V with a
// per-sequence stride in {1, 2}; highly predictable, so a trained model must
// beat the 1/V chance rate.
std::vector<std::vector<int>> grammar_corpus(std::size_t count, std::size_t len,
                                             std::size_t vocab, Rng& rng) {
  std::vector<std::vector<int>> corpus;
  for (std::size_t s = 0; s < count; ++s) {
    int stride = 1 + static_cast<int>(rng.uniform_int(2));
    int cur = static_cast<int>(rng.uniform_int(vocab));
    std::vector<int> seq{cur};
    for (std::size_t t = 1; t < len; ++t) {
      cur = (cur + stride) % static_cast<int>(vocab);
      seq.push_back(cur);
    }
    corpus.push_back(seq);
  }
  return corpus;
}

}  // namespace

TEST_CASE("factorized mask: F=2 T=2 even layer is block-diagonal by frame") {
  auto m = build_factorized_mask(2, 2, 0);
  std::vector<bool> want = {
      1, 1, 0, 0,
      1, 1, 0, 0,
      0, 0, 1, 1,
      0, 0, 1, 1};
  REQUIRE(m == want);
}

TEST_CASE("factorized mask: F=2 T=2 odd layer links same slot causally") {
  auto m = build_factorized_mask(2, 2, 1);
  std::vector<bool> want = {
      1, 0, 0, 0,
      0, 1, 0, 0,
      1, 0, 1, 0,
      0, 1, 0, 1};
  REQUIRE(m == want);
}

TEST_CASE("factorized mask: F=1 degenerates to self-only / plain causal") {
  auto even = build_factorized_mask(1, 3, 0);
  std::vector<bool> want_even = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  REQUIRE(even == want_even);
  auto odd = build_factorized_mask(1, 3, 1);
  std::vector<bool> want_odd = {1, 0, 0, 1, 1, 0, 1, 1, 1};
  REQUIRE(odd == want_odd);
}

TEST_CASE("tap/injection round-trip reproduces logits bitwise") {
  Rng rng(11);
  for (MaskMode mode : {MaskMode::causal, MaskMode::full}) {
    ComponentConfig cfg = tiny_config(3);
    cfg.mask = mode;
    ComponentModel model(cfg, rng);
    auto tokens = random_tokens(7, cfg.vocab, rng);
    auto plain = model.forward_with_taps(tokens);
    for (std::size_t l = 1; l <= cfg.layers; ++l) {
      Tensor h = model.forward_range(plain.taps[l - 1], l, cfg.layers);
      Tensor logits = model.logits(h);
      REQUIRE(bitwise_equal(logits, plain.logits));
    }
  }
}

TEST_CASE("causal mask: logits at t ignore later tokens") {
  Rng rng(12);
  ComponentConfig cfg = tiny_config();
  ComponentModel model(cfg, rng);
  auto tokens = random_tokens(8, cfg.vocab, rng);
  auto base = model.forward_with_taps(tokens);
  for (int trial = 0; trial < 5; ++trial) {
    std::size_t t = 2 + rng.uniform_int(5);  // change some position > 1
    auto changed = tokens;
    changed[t] = (changed[t] + 1) % static_cast<int>(cfg.vocab);
    auto out = model.forward_with_taps(changed);
    for (std::size_t i = 0; i < t; ++i)
      REQUIRE(bitwise_equal(slice_rows(out.logits, i, i + 1),
                            slice_rows(base.logits, i, i + 1)));
  }
}

TEST_CASE("tiny model matches the dense straight-line reference") {
  Rng rng(13);
  ComponentConfig cfg = tiny_config(2, 8, 2, 10);
  cfg.ffw_hidden = 16;
  ComponentModel model(cfg, rng);
  for (int trial = 0; trial < 3; ++trial) {
    auto tokens = random_tokens(6, cfg.vocab, rng);
    auto got = model.forward_with_taps(tokens);
    Mat want = ref_forward(model, tokens);
    for (std::size_t i = 0; i < tokens.size(); ++i)
      for (std::size_t vtok = 0; vtok < cfg.vocab; ++vtok)
        REQUIRE(std::abs(got.logits.at(i, vtok) - want[i][vtok]) < 1e-10);
  }
}

TEST_CASE("time-space reachability: cross-frame flow only through odd layers") {
  Rng rng(14);
  ComponentConfig cfg = tiny_config(2);
  cfg.mask = MaskMode::time_space;
  cfg.tokens_per_frame = 3;
  ComponentModel model(cfg, rng);
  auto tokens = random_tokens(6, cfg.vocab, rng);  // 2 frames of 3 slots
  auto changed = tokens;
  changed[0] = (changed[0] + 1) % static_cast<int>(cfg.vocab);  // frame 0, slot 0
  auto a = model.forward_with_taps(tokens);
  auto b = model.forward_with_taps(changed);
  // After the even (space) layer, frame-1 rows are untouched by the change.
  for (std::size_t i = 3; i < 6; ++i)
    REQUIRE(bitwise_equal(slice_rows(a.taps[0], i, i + 1),
                          slice_rows(b.taps[0], i, i + 1)));
  // The odd (time) layer applied in isolation moves information across
  // frames only along its own slot.
  Tensor ta = model.layer_forward(2, model.embed(tokens));
  Tensor tb = model.layer_forward(2, model.embed(changed));
  for (std::size_t i : {std::size_t{4}, std::size_t{5}})
    REQUIRE(bitwise_equal(slice_rows(ta, i, i + 1), slice_rows(tb, i, i + 1)));
  REQUIRE(!bitwise_equal(slice_rows(ta, 3, 4), slice_rows(tb, 3, 4)));
  // After both layers, the change has reached every frame-1 row (it spread
  // spatially in layer 1 and crossed frames in layer 2).
  for (std::size_t i = 3; i < 6; ++i)
    REQUIRE(!bitwise_equal(slice_rows(a.taps[1], i, i + 1),
                           slice_rows(b.taps[1], i, i + 1)));
}

TEST_CASE("out-of-vocab token id is rejected") {
  Rng rng(15);
  ComponentConfig cfg = tiny_config();
  ComponentModel model(cfg, rng);
  std::vector<int> bad{0, 1, static_cast<int>(cfg.vocab)};
  REQUIRE_THROWS_AS(model.forward_with_taps(bad), Error);
  try {
    model.forward_with_taps(bad);
  } catch (const Error& e) {
    REQUIRE(e.category() == "vocab");
  }
}

TEST_CASE("frozen model is bitwise unchanged by optimizer steps") {
  Rng rng(16);
  ComponentConfig cfg = tiny_config();
  ComponentModel model(cfg, rng);
  model.set_frozen(true);
  std::uint64_t before = model.fingerprint();
  // A trainable probe keeps the loss attached to the tape even though every
  // model parameter is frozen.
  Tensor probe = Tensor::from({1}, {0.1}, true);
  auto params = model.named_params("m");
  params.push_back({"probe", probe});
  AdamState adam(params);
  auto tokens = random_tokens(6, cfg.vocab, rng);
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    auto fwd = model.forward_with_taps(tokens);
    Tensor loss = add(cross_entropy(fwd.logits, tokens), mul(probe, probe));
    backward(loss);
    adam.step({1e-2, 0.9, 0.999, 1e-8, 0});
    adam.zero_grad();
  }
  REQUIRE(model.fingerprint() == before);
  REQUIRE_THROWS_AS(
      pretrain_component(model, {tokens}, PretrainOptions{}, rng), Error);
}

TEST_CASE("seed-fixed pretraining is deterministic") {
  auto run = [] {
    Rng rng(17);
    ComponentConfig cfg = tiny_config();
    ComponentModel model(cfg, rng);
    Rng data_rng(18);
    auto corpus = grammar_corpus(16, 10, cfg.vocab, data_rng);
    PretrainOptions opt;
    opt.steps = 20;
    opt.batch = 4;
    Rng train_rng(19);
    pretrain_component(model, corpus, opt, train_rng);
    return model.fingerprint();
  };
  REQUIRE(run() == run());
}

TEST_CASE("toy grammar pretraining beats chance on held-out data") {
  Rng rng(20);
  ComponentConfig cfg = tiny_config(2, 16, 2, 8);
  cfg.ffw_hidden = 32;
  ComponentModel model(cfg, rng);
  Rng data_rng(21);
  auto train = grammar_corpus(64, 12, cfg.vocab, data_rng);
  auto held_out = grammar_corpus(16, 12, cfg.vocab, data_rng);
  PretrainOptions opt;
  opt.steps = 250;
  opt.batch = 4;
  opt.adam = {3e-3, 0.9, 0.999, 1e-8, 20};
  Rng train_rng(22);
  auto result = pretrain_component(model, train, opt, train_rng);
  REQUIRE(result.loss_history.front() > result.final_loss);
  std::size_t hits = 0, total = 0;
  NoGradGuard ng;
  for (const auto& seq : held_out) {
    auto fwd = model.forward_with_taps(seq);
    // Skip position 0: the stride is only identifiable after two tokens.
    for (std::size_t t = 1; t + 1 < seq.size(); ++t) {
      int best = 0;
      for (std::size_t vtok = 1; vtok < cfg.vocab; ++vtok)
        if (fwd.logits.at(t, vtok) > fwd.logits.at(t, best))
          best = static_cast<int>(vtok);
      hits += best == seq[t + 1] ? 1 : 0;
      ++total;
    }
  }
  double acc = static_cast<double>(hits) / static_cast<double>(total);
  REQUIRE(acc > 1.0 / static_cast<double>(cfg.vocab));
  REQUIRE(acc > 0.5);  // the grammar is nearly deterministic
}

TEST_CASE("masked-token pretraining decreases loss") {
  Rng rng(23);
  ComponentConfig cfg = tiny_config(2, 16, 2, 10);
  cfg.mask = MaskMode::full;
  ComponentModel model(cfg, rng);
  Rng data_rng(24);
  auto corpus = grammar_corpus(32, 8, cfg.vocab - 1, data_rng);
  PretrainOptions opt;
  opt.steps = 120;
  opt.batch = 4;
  opt.adam = {3e-3, 0.9, 0.999, 1e-8, 10};
  opt.masked_objective = true;
  opt.mask_token = static_cast<int>(cfg.vocab) - 1;
  opt.mask_rate = 0.4;
  Rng train_rng(25);
  auto result = pretrain_component(model, corpus, opt, train_rng);
  REQUIRE(result.final_loss < result.loss_history.front());
}

TEST_CASE("pretraining aborts on divergence") {
  Rng rng(26);
  ComponentConfig cfg = tiny_config();
  ComponentModel model(cfg, rng);
  Rng data_rng(27);
  auto corpus = grammar_corpus(8, 8, cfg.vocab, data_rng);
  PretrainOptions opt;
  opt.steps = 50;
  opt.batch = 2;
  opt.adam = {1e160, 0.9, 0.999, 1e-8, 0};  // absurd lr forces overflow
  Rng train_rng(28);
  REQUIRE_THROWS_AS(pretrain_component(model, corpus, opt, train_rng), Error);
}

// ---------------------------------------------------------------------------
// Optimizer unit behavior.

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  Rng rng(29);
  Tensor p = Tensor::randn({4}, rng, 1.0, true);
  auto before = p.data();
  AdamState adam({{"p", p}});
  p.zero_grad();
  adam.step({1e-2, 0.9, 0.999, 1e-8, 0});
  REQUIRE(p.data() == before);
}

TEST_CASE("adam: first step moves each weight by about -lr * sign(grad)") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 3.0}, true);
  auto before = p.data();
  AdamState adam({{"p", p}});
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(mul(p, Tensor::from({3}, {2.0, -0.5, 1.0})));
    backward(loss);
  }
  double lr = 1e-2;
  adam.step({lr, 0.9, 0.999, 1e-8, 0});
  std::vector<double> sign{1.0, -1.0, 1.0};  // signs of the gradient
  for (std::size_t i = 0; i < 3; ++i)
    REQUIRE(std::abs((p.data()[i] - before[i]) - (-lr * sign[i])) < 1e-6);
}

TEST_CASE("adam: quadratic bowl converges") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  AdamState adam({{"x", x}});
  for (int step = 0; step < 2000; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum(mul(x, x));
    backward(loss);
    adam.step({1e-2, 0.9, 0.999, 1e-8, 0});
    adam.zero_grad();
  }
  REQUIRE(std::abs(x.data()[0]) < 1e-3);
}

TEST_CASE("adam: linear warm-up ramps the learning rate") {
  Tensor x = Tensor::from({1}, {0.0}, true);
  AdamState adam({{"x", x}});
  AdamHyper h{1e-2, 0.9, 0.999, 1e-8, 10};
  REQUIRE(adam.current_lr(h) == Catch::Approx(1e-3));
  for (int i = 0; i < 10; ++i) {
    x.zero_grad();
    adam.step(h);
  }
  REQUIRE(adam.current_lr(h) == Catch::Approx(1e-2));
}

TEST_CASE("parameter fingerprint reacts to any value change") {
  Rng rng(30);
  Tensor a = Tensor::randn({3, 3}, rng);
  Tensor b = Tensor::randn({3}, rng);
  std::vector<NamedParam> ps{{"a", a}, {"b", b}};
  std::uint64_t fp = param_fingerprint(ps);
  REQUIRE(param_fingerprint(ps) == fp);
  b.mutable_data()[1] += 1e-12;
  REQUIRE(param_fingerprint(ps) != fp);
}
