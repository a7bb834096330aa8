// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fanformer/model.hpp"
#include "gradcheck.hpp"

using namespace fanformer;

namespace {

ModelConfig tiny_config(Variant v = Variant::fanformer) {
  ModelConfig c;
  c.variant = v;
  c.d_h = 8;
  c.n_layers = 2;
  c.heads = 2;
  c.d_f = 16;
  c.vocab_size = 11;
  c.max_seq_len = 16;
  c.seed = 5;
  return c;
}

long long enumerated_count(Model& m) {
  long long total = 0;
  for (auto& [name, t] : m.named_parameters()) total += static_cast<long long>(t->size());
  return total;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_SUITE_BEGIN("model");

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  c.heads = 3;  // does not divide d_h = 8
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.p = 0.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.p = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("config json round-trip; unknown keys rejected") {
  ModelConfig c = tiny_config(Variant::transformer_atm);
  c.norm = NormKind::layernorm;
  c.score_divisor = ScoreDivisor::sqrt_dh;
  c.weight_tying = false;
  nlohmann::json j = c;
  ModelConfig back = j.get<ModelConfig>();
  nlohmann::json j2 = back;
  CHECK(j == j2);

  j["bogus_key"] = 1;
  CHECK_THROWS_AS(j.get<ModelConfig>(), ConfigError);
}

TEST_CASE("same seed gives bit-identical parameters") {
  for (Variant v :
       {Variant::fanformer, Variant::transformer, Variant::transformer_atm,
        Variant::transformer_atl, Variant::fanformer_original_fan,
        Variant::transformer_ffn_fan}) {
    Model a = build(tiny_config(v));
    Model b = build(tiny_config(v));
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      for (std::size_t k = 0; k < pa[i].second->size(); ++k)
        CHECK(pa[i].second->data()[k] == pb[i].second->data()[k]);
    }
  }
}

TEST_CASE("param_count hand example: transformer d_h=8 N=1 k=2 d_f=16 vocab=10 tied") {
  ModelConfig c;
  c.variant = Variant::transformer;
  c.d_h = 8;
  c.n_layers = 1;
  c.heads = 2;
  c.d_f = 16;
  c.vocab_size = 10;
  CHECK(param_count(c) == 744);
}

TEST_CASE("param_count equals enumeration for every variant") {
  for (Variant v :
       {Variant::fanformer, Variant::transformer, Variant::transformer_atm,
        Variant::transformer_atl, Variant::fanformer_original_fan,
        Variant::transformer_ffn_fan}) {
    ModelConfig c = tiny_config(v);
    Model m = build(c);
    CHECK_MESSAGE(param_count(c) == enumerated_count(m), variant_name(v));
    c.weight_tying = false;
    Model mu = build(c);
    CHECK(param_count(c) == enumerated_count(mu));
  }
}

TEST_CASE("tied vs untied differ by exactly vocab*d_h") {
  ModelConfig c = tiny_config();
  long long tied = param_count(c);
  c.weight_tying = false;
  CHECK(param_count(c) - tied ==
        static_cast<long long>(c.vocab_size * c.d_h));
}

TEST_CASE("fanformer minus transformer at equal d_f matches the closed form") {
  ModelConfig t = tiny_config(Variant::transformer);
  ModelConfig f = t;
  f.variant = Variant::fanformer;
  std::size_t d_p = periodic_dim(t.d_h, f.p);
  long long per_layer =
      static_cast<long long>(t.d_h * d_p + t.d_h * (t.d_h - 2 * d_p) +
                             (t.d_h - 2 * d_p));
  CHECK(param_count(f) - param_count(t) ==
        static_cast<long long>(t.n_layers) * per_layer);
}

TEST_CASE("match_params analytic delta and closeness") {
  ModelConfig base;
  base.variant = Variant::transformer;
  base.d_h = 2048;
  base.heads = 16;
  base.d_f = 8192;
  base.n_layers = 4;
  base.vocab_size = 256;
  CHECK(analytic_df_delta(base) == doctest::Approx(512.0).epsilon(1e-9));

  for (std::size_t d_h : {std::size_t{64}, std::size_t{256}}) {
    ModelConfig b = tiny_config(Variant::transformer);
    b.d_h = d_h;
    b.heads = 4;
    b.d_f = 8 * d_h / 3;
    ModelConfig matched = match_params(b, Variant::fanformer);
    double rel = std::abs(static_cast<double>(param_count(matched) - param_count(b))) /
                 static_cast<double>(param_count(b));
    CHECK(rel <= 0.001);
    // analytic start within +-2 of the searched optimum
    double delta = static_cast<double>(b.d_f) - static_cast<double>(matched.d_f);
    CHECK(std::abs(delta - analytic_df_delta(b)) <= 2.0 + 0.5);
  }

  ModelConfig b = tiny_config(Variant::transformer);
  ModelConfig same = match_params(b, Variant::transformer);
  CHECK(same.d_f == b.d_f);
}

TEST_CASE("forward shape, determinism and causality") {
  for (Variant v :
       {Variant::fanformer, Variant::transformer, Variant::transformer_atm,
        Variant::transformer_atl, Variant::fanformer_original_fan,
        Variant::transformer_ffn_fan}) {
    Model m = build(tiny_config(v));
    std::vector<int> toks = {1, 4, 7, 2, 9};
    Tensor out = forward(m, toks);
    CHECK(out.shape() == Shape{5, 11});
    Tensor again = forward(m, toks);
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK(out.data()[i] == again.data()[i]);

    std::vector<int> toks2 = {1, 4, 7, 2, 3};  // only the last token differs
    Tensor out2 = forward(m, toks2);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 11; ++j)
        CHECK_MESSAGE(out.at(i, j) == out2.at(i, j), variant_name(v));
  }
}

TEST_CASE("forward rejects bad tokens and overlong sequences") {
  Model m = build(tiny_config());
  std::vector<int> bad = {0, 11};
  CHECK_THROWS(forward(m, bad));
  std::vector<int> longseq(m.config.max_seq_len + 1, 0);
  CHECK_THROWS(forward(m, longseq));
}

TEST_CASE("logits match a hand-wired composition of layer calls") {
  ModelConfig c = tiny_config(Variant::fanformer);
  Model m = build(c);
  std::vector<int> toks = {3, 1, 4, 1, 5};
  Tensor fast = forward(m, toks);

  Tensor x = embedding_lookup(m.embedding, toks);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerParams& lp = m.layers[l];
    Tensor h = add(x, atf(rms_norm(x, lp.norm1_gain), *lp.fan, lp.attn, true));
    x = add(h, swiglu_ffn(rms_norm(h, lp.norm2_gain), lp.ffn));
  }
  x = rms_norm(x, m.final_norm_gain);
  Tensor logits = matmul(x, transpose(m.embedding));
  for (std::size_t i = 0; i < fast.size(); ++i)
    CHECK(std::abs(fast.data()[i] - logits.data()[i]) < 1e-12);
}

TEST_CASE("block_forward composes into forward for the transformer too") {
  ModelConfig c = tiny_config(Variant::transformer);
  c.weight_tying = false;
  Model m = build(c);
  std::vector<int> toks = {0, 9, 2};
  Tensor fast = forward(m, toks);
  Tensor x = embedding_lookup(m.embedding, toks);
  for (std::size_t l = 0; l < c.n_layers; ++l) x = block_forward(m, l, x, true);
  Tensor logits = matmul(rms_norm(x, m.final_norm_gain), m.lm_head);
  for (std::size_t i = 0; i < fast.size(); ++i)
    CHECK(fast.data()[i] == logits.data()[i]);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "ff_ckpt_test";
  fs::create_directories(dir);
  fs::path p1 = dir / "a.ckpt", p2 = dir / "b.ckpt";

  ModelConfig c = tiny_config(Variant::fanformer_original_fan);
  Model m = build(c);
  save_model(p1, m, {{"step", "42"}});

  Checkpoint ck = load_checkpoint(p1);
  CHECK(ck.meta.at("step") == "42");
  Model m2 = model_from_checkpoint(ck);
  auto pa = m.named_parameters();
  auto pb = m2.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t k = 0; k < pa[i].second->size(); ++k)
      CHECK(pa[i].second->data()[k] == pb[i].second->data()[k]);

  save_model(p2, m2, {{"step", "42"}});
  CHECK(slurp(p1) == slurp(p2));  // byte-exact round trip
  fs::remove_all(dir);
}

TEST_CASE("full model loss gradient matches finite differences") {
  ModelConfig c = tiny_config(Variant::fanformer);
  c.n_layers = 1;
  Model m = build(c);
  std::vector<int> toks = {1, 2, 3, 4};
  std::vector<int> targets = {2, 3, 4, 5};
  std::vector<std::uint8_t> mask = {1, 1, 1, 1};
  auto loss = [&] {
    return masked_cross_entropy(forward(m, toks), targets, mask);
  };
  std::vector<Tensor*> picks;
  for (auto& [name, t] : m.named_parameters())
    if (name == "embedding" || name.find("w_q") != std::string::npos ||
        name.find("fan.w_p") != std::string::npos ||
        name.find("ffn.w_1") != std::string::npos)
      picks.push_back(t);
  REQUIRE(!picks.empty());
  auto res = testutil::check_gradients(loss, picks, 1e-5, 1e-6, 1e-4);
  CHECK_MESSAGE(res.pass, "worst_abs=" << res.worst_abs
                                       << " worst_rel=" << res.worst_rel);
}

TEST_SUITE_END();
