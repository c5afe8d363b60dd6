#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "gklab/model/checkpoint.hpp"
#include "gklab/model/transformer.hpp"
#include "support.hpp"

using namespace gklab::model;
using gklab::compute::Rng;
using gklab::compute::Tensor;
using namespace testing_support;

namespace {

std::size_t edge_count_formula(std::size_t L, std::size_t H, bool split) {
  const std::size_t slots = split ? 3 : 1;
  std::size_t total = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const std::size_t upstream = 1 + l * (H + 1);  // embed + earlier heads and MLPs
    total += H * slots * upstream;
    total += upstream + H;
  }
  return total + 1 + L * (H + 1);
}

}  // namespace

TEST(EdgeList, SingleLayerSingleHeadByHand) {
  ModelConfig cfg = small_config(1, 1);
  const auto edges = edge_list(cfg);
  std::vector<std::string> names;
  for (const auto& e : edges) names.push_back(to_string(e));
  const std::vector<std::string> expected = {
      "embed->a0.h0.q", "embed->a0.h0.k", "embed->a0.h0.v", "embed->m0", "a0.h0->m0",
      "embed->logits",  "a0.h0->logits",  "m0->logits"};
  EXPECT_EQ(names, expected);
}

TEST(EdgeList, NoLayersOnlyEmbedToLogits) {
  ModelConfig cfg = small_config(0, 1);
  const auto edges = edge_list(cfg);
  ASSERT_EQ(edges.size(), 1u);
  EXPECT_EQ(to_string(edges[0]), "embed->logits");
}

TEST(EdgeList, CountMatchesClosedForm) {
  for (bool split : {true, false}) {
    for (std::size_t L : {1u, 2u, 4u}) {
      for (std::size_t H : {1u, 3u, 4u}) {
        ModelConfig cfg = small_config(L, H);
        cfg.split_qkv = split;
        EXPECT_EQ(edge_list(cfg).size(), edge_count_formula(L, H, split)) << L << "x" << H;
      }
    }
  }
  EXPECT_EQ(edge_list(small_config(4, 4)).size(), 479u);
}

TEST(EdgeList, EveryEdgeLegalUniqueAndRoundTrips) {
  ModelConfig cfg = small_config(3, 2);
  std::set<EdgeId> seen;
  for (const auto& e : edge_list(cfg)) {
    EXPECT_TRUE(is_legal(e, cfg));
    EXPECT_TRUE(seen.insert(e).second);
    EXPECT_EQ(parse_edge(to_string(e)), e);
    EXPECT_LT(node_index(e.parent, cfg), node_index(e.child, cfg));
  }
  EXPECT_FALSE(is_legal(EdgeId{NodeId::attn(1, 0), NodeId::attn(1, 1), Slot::kQ}, cfg));
  EXPECT_TRUE(is_legal(EdgeId{NodeId::attn(1, 0), NodeId::mlp(1), Slot::kIn}, cfg));
  EXPECT_FALSE(is_legal(EdgeId{NodeId::mlp(0), NodeId::embed(), Slot::kIn}, cfg));
  EXPECT_FALSE(is_legal(EdgeId{NodeId::embed(), NodeId::attn(0, 0), Slot::kIn}, cfg));
  EXPECT_THROW(parse_edge("embed=>m0"), ParseError);
  EXPECT_THROW(parse_node("a1h2"), ParseError);
}

TEST(Forward, HandComputedSingleLayer) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_model = 3;
  cfg.d_head = 3;
  cfg.d_ff = 2;
  cfg.vocab_size = 3;
  cfg.max_seq_len = 4;
  Parameters p = Parameters::zeros(cfg);
  for (std::size_t i = 0; i < 3; ++i) {
    p.embed.at(i, i) = 1.0;
    p.unembed.at(i, i) = 1.0;
  }
  p.position = Tensor({4, 3}, {0.1, 0, 0, 0, 0.2, 0, 0, 0, 0.3, 0.1, 0.1, 0.1});
  // W_Q = 0 makes every score zero, so attention is uniform over the causal prefix.
  p.layers[0].heads[0].w_v = Tensor({3, 3}, {1, 0, 0, 0, 2, 0, 0, 0, -1});
  p.layers[0].heads[0].w_o = Tensor({3, 3}, {0.5, 0, 0, 0, 0.5, 0, 0, 0, 0.5});
  p.layers[0].w_1 = Tensor({3, 2}, {1, 0, 0, 1, 1, -1});
  p.layers[0].w_2 = Tensor({2, 3}, {1, 1, 0, 0, -1, 2});
  const std::vector<std::size_t> toks = {2, 0, 1};

  double x[3][3], a[3][3], r[3][3], out[3][3];
  for (int t = 0; t < 3; ++t)
    for (int d = 0; d < 3; ++d) x[t][d] = (toks[t] == static_cast<std::size_t>(d) ? 1.0 : 0.0) + p.position.at(t, d);
  const double vscale[3] = {1, 2, -1};
  for (int t = 0; t < 3; ++t)
    for (int d = 0; d < 3; ++d) {
      double m = 0;
      for (int s = 0; s <= t; ++s) m += x[s][d];
      a[t][d] = 0.5 * vscale[d] * m / (t + 1);
      r[t][d] = x[t][d] + a[t][d];
    }
  auto gelu = [](double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); };
  for (int t = 0; t < 3; ++t) {
    const double h0 = gelu(r[t][0] + r[t][2]);
    const double h1 = gelu(r[t][1] - r[t][2]);
    const double f[3] = {h0, h0 - h1, 2 * h1};
    for (int d = 0; d < 3; ++d) out[t][d] = r[t][d] + f[d];
  }
  auto tr = forward(p, toks);
  for (int t = 0; t < 3; ++t)
    for (int d = 0; d < 3; ++d) EXPECT_NEAR(tr.logits().at(t, d), out[t][d], 1e-10);
}

TEST(Forward, SelfPatchingIsIdentity) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 1);
  Rng rng(2);
  auto toks = random_tokens(6, cfg.vocab_size, rng);
  auto clean = forward(p, toks);
  auto patches = patch_all_edges(cfg, clean.node_outputs());
  auto patched = forward(p, toks, patches);
  EXPECT_LE(gklab::compute::max_abs_diff(patched.logits(), clean.logits()), 1e-10);
}

TEST(Forward, PatchingAllEdgesWithCorruptedReproducesCorrupted) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 3);
  Rng rng(4);
  auto a = random_tokens(6, cfg.vocab_size, rng);
  auto b = random_tokens(6, cfg.vocab_size, rng);
  auto corrupted = forward(p, b);
  auto patched = forward(p, a, patch_all_edges(cfg, corrupted.node_outputs()));
  EXPECT_LE(gklab::compute::max_abs_diff(patched.logits(), corrupted.logits()), 1e-8);
}

TEST(Forward, NoOpClampIsBitIdentical) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 5);
  for (std::size_t r = 0; r < cfg.d_model; ++r) p.layers[1].w_1.at(r, 3) = 0.0;
  Rng rng(6);
  auto toks = random_tokens(5, cfg.vocab_size, rng);
  auto plain = forward(p, toks);
  for (std::size_t t = 0; t < toks.size(); ++t) ASSERT_EQ(plain.ffn_hidden(1).at(t, 3), 0.0);
  const Intervention clamp[] = {NeuronClamp{1, 3, {0.0}, ClampPositions::kAll}};
  auto clamped = forward(p, toks, clamp);
  EXPECT_EQ(clamped.logits(), plain.logits());
}

TEST(Forward, ClampSetsHiddenValue) {
  ModelConfig cfg = small_config(1, 1);
  Parameters p = random_params(cfg, 5);
  const std::vector<std::size_t> toks = {1, 2, 3};
  const Intervention clamps[] = {NeuronClamp{0, 2, {4.0}, ClampPositions::kFinal},
                                 NeuronClamp{0, 5, {1.0, 2.0, 3.0}, ClampPositions::kAll}};
  auto tr = forward(p, toks, clamps);
  auto plain = forward(p, toks);
  EXPECT_EQ(tr.ffn_hidden(0).at(2, 2), 4.0);
  EXPECT_EQ(tr.ffn_hidden(0).at(0, 2), plain.ffn_hidden(0).at(0, 2));
  EXPECT_EQ(tr.ffn_hidden(0).at(1, 5), 2.0);
}

TEST(Forward, ResidualIsSumOfNodeOutputs) {
  ModelConfig cfg = small_config(3, 2);
  Parameters p = random_params(cfg, 7);
  Rng rng(8);
  auto tr = forward(p, random_tokens(7, cfg.vocab_size, rng));
  Tensor sum(tr.final_residual().shape());
  for (const Tensor& t : tr.node_outputs())
    for (std::size_t i = 0; i < t.size(); ++i) sum[i] += t[i];
  EXPECT_LE(gklab::compute::max_abs_diff(sum, tr.final_residual()), 1e-10);
}

TEST(Forward, DeterministicAndCausal) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 9);
  std::vector<std::size_t> a = {1, 2, 3, 4, 5}, b = {1, 2, 3, 9, 0};
  auto ta = forward(p, a), ta2 = forward(p, a), tb = forward(p, b);
  EXPECT_EQ(ta.logits(), ta2.logits());
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) EXPECT_NEAR(ta.logits().at(t, v), tb.logits().at(t, v), 1e-12);
}

TEST(Forward, RejectsBadInput) {
  ModelConfig cfg = small_config(1, 1);
  Parameters p = random_params(cfg, 1);
  const std::vector<std::size_t> bad = {1, 99};
  EXPECT_THROW(forward(p, bad), VocabularyError);
  EXPECT_THROW(forward(p, std::vector<std::size_t>{}), InterventionError);
  const std::vector<std::size_t> ok = {1, 2};
  const Intervention wrong_shape[] = {EdgePatch{edge_list(cfg)[0], Tensor({3, cfg.d_model})}};
  EXPECT_THROW(forward(p, ok, wrong_shape), InterventionError);
  const Intervention illegal[] = {EdgePatch{{NodeId::mlp(0), NodeId::attn(0, 0), Slot::kQ}, Tensor({2, cfg.d_model})}};
  EXPECT_THROW(forward(p, ok, illegal), InterventionError);
  const Intervention bad_clamp[] = {NeuronClamp{0, cfg.d_ff, {0.0}}};
  EXPECT_THROW(forward(p, ok, bad_clamp), InterventionError);
}

TEST(PredictDistribution, UniformSaturatedAndOracle) {
  ModelConfig cfg = small_config(1, 1);
  Parameters p = Parameters::zeros(cfg);
  const std::vector<std::size_t> toks = {1, 2};
  for (double v : predict_distribution(forward(p, toks))) EXPECT_NEAR(v, 1.0 / cfg.vocab_size, 1e-15);

  // Logit of token 4 at +1000 via the position embedding and unembedding.
  p.position.at(1, 0) = 1.0;
  p.unembed.at(0, 4) = 1000.0;
  auto sat = predict_distribution(forward(p, toks));
  EXPECT_NEAR(sat[4], 1.0, 1e-12);

  Parameters r = random_params(cfg, 3);
  auto tr = forward(r, toks);
  auto dist = predict_distribution(tr);
  const Tensor lg = tr.final_logits();
  double z = 0;
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) z += std::exp(lg[v]);
  double total = 0;
  for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
    EXPECT_NEAR(dist[v], std::exp(lg[v]) / z, 1e-12);
    total += dist[v];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(LogitDiff, BasicCases) {
  ModelConfig cfg = small_config(1, 1);
  Parameters p = Parameters::zeros(cfg);
  const std::vector<std::size_t> toks = {3};
  p.embed.at(3, 0) = 1.0;
  p.unembed.at(0, 5) = 5.0;
  p.unembed.at(0, 6) = 2.0;
  auto tr = forward(p, toks);
  EXPECT_EQ(metric_logit_diff(tr, 5, 5), 0.0);
  EXPECT_DOUBLE_EQ(metric_logit_diff(tr, 5, 6), 3.0);

  Parameters r = random_params(cfg, 4);
  auto tr2 = forward(r, std::vector<std::size_t>{1, 2, 3});
  EXPECT_EQ(metric_logit_diff(tr2, 7, 2), tr2.logits().at(2, 7) - tr2.logits().at(2, 2));
}

TEST(ChildGrads, ConstantLossGivesZero) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 10);
  const std::vector<std::size_t> toks = {1, 2, 3, 4};
  auto g = grads_wrt_child_inputs(p, toks, LossSpec{LossKind::kLogitDiff, 4, 4});
  EXPECT_EQ(g.size(), child_slots(cfg).size());
  for (const auto& [slot, t] : g)
    for (double v : t.data()) EXPECT_EQ(v, 0.0);
}

TEST(ChildGrads, LogitsInputGradientIsUnembeddingDifference) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 11);
  const std::vector<std::size_t> toks = {1, 2, 3, 4};
  auto g = grads_wrt_child_inputs(p, toks, LossSpec{LossKind::kLogitDiff, 6, 2});
  const Tensor& gl = g.at(ChildSlot{NodeId::logits(), Slot::kIn});
  for (std::size_t t = 0; t < toks.size(); ++t)
    for (std::size_t d = 0; d < cfg.d_model; ++d) {
      const double want = t + 1 == toks.size() ? p.unembed.at(d, 6) - p.unembed.at(d, 2) : 0.0;
      EXPECT_NEAR(gl.at(t, d), want, 1e-14);
    }
}

TEST(ChildGrads, MatchFiniteDifferencesOnSingleLayer) {
  ModelConfig cfg = small_config(1, 2);
  Parameters p = random_params(cfg, 12);
  const std::vector<std::size_t> toks = {1, 5, 3};
  for (LossKind kind : {LossKind::kLogitDiff, LossKind::kCrossEntropy}) {
    const LossSpec loss{kind, 4, 7};
    auto grads = grads_wrt_child_inputs(p, toks, loss);
    auto clean = forward(p, toks);
    const Tensor z_embed = clean.node_output(NodeId::embed());
    const double eps = 1e-5;
    for (const auto& [slot, g] : grads) {
      // Shifting one child input alone = patching its embed edge with a shifted embed output.
      const EdgeId edge{NodeId::embed(), slot.node, slot.slot};
      double worst = 0;
      for (std::size_t i = 0; i < z_embed.size(); ++i) {
        Tensor up = z_embed, down = z_embed;
        up[i] += eps;
        down[i] -= eps;
        const Intervention pu[] = {EdgePatch{edge, up}};
        const Intervention pd[] = {EdgePatch{edge, down}};
        const double num = (loss_value(forward(p, toks, pu), loss) - loss_value(forward(p, toks, pd), loss)) / (2 * eps);
        if (std::abs(num) < 1e-7 && std::abs(g[i]) < 1e-7) continue;
        worst = std::max(worst, rel_err(g[i], num));
      }
      EXPECT_LE(worst, 1e-5) << to_string(slot.node) << "." << to_string(slot.slot);
    }
  }
}

TEST(ModelGradients, FullLossMatchesFiniteDifferences) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 13);
  const std::vector<std::size_t> toks = {1, 5, 3, 2};
  const LossSpec loss{LossKind::kCrossEntropy, 4, 0};
  ForwardTrace tr = forward(p, toks, {}, ForwardOptions{.final_logits_only = true});
  const auto l = record_loss(tr, loss);
  const auto grads = tr.tape().backward(l, tr.parameter_ids());
  auto named = p.named_mut();
  const double eps = 1e-5;
  double worst = 0;
  for (std::size_t k = 0; k < named.size(); ++k) {
    Tensor& w = *named[k].second;
    const Tensor& g = grads.at(tr.parameter_ids()[k]);
    for (std::size_t i = 0; i < w.size(); i += 3) {
      const double orig = w[i];
      w[i] = orig + eps;
      const double up = loss_value(forward(p, toks), loss);
      w[i] = orig - eps;
      const double down = loss_value(forward(p, toks), loss);
      w[i] = orig;
      const double num = (up - down) / (2 * eps);
      if (std::abs(num) < 1e-6 && std::abs(g[i]) < 1e-6) continue;
      worst = std::max(worst, rel_err(g[i], num));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Checkpoint, RoundTripAndBadMagic) {
  ModelConfig cfg = small_config(2, 2);
  Parameters p = random_params(cfg, 14);
  const auto dir = std::filesystem::temp_directory_path() / "gklab_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "m.ckpt", p, {{"note", "x"}});
  auto loaded = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(loaded.params.config, cfg);
  EXPECT_EQ(loaded.metadata.at("note"), "x");
  const auto a = p.named(), b = loaded.params.named();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second);
  std::ofstream(dir / "bad.ckpt") << "NOTACHECKPOINT";
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
}
