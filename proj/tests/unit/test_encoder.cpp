#include "medfuse/encoder.hpp"
#include "medfuse/rng.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace medfuse;

namespace {

EncoderConfig small_cfg() {
  EncoderConfig e;
  e.d_model = 8;
  e.ff_dim = 12;
  e.num_layers = 2;
  e.num_heads = 2;
  e.dropout = 0.0;
  return e;
}

Matrix<double> random_tokens(std::mt19937_64& rng, int n, int d) {
  std::normal_distribution<double> g;
  Matrix<double> m(n, d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = g(rng);
  return m;
}

}  // namespace

TEST(Encoder, PaddingDoesNotChangeRealTokens) {
  const auto cfg = small_cfg();
  ParamStore<double> params;
  init_encoder_params(params, cfg, 3);
  std::mt19937_64 rng(1);
  const Matrix<double> x = random_tokens(rng, 5, 8);

  BatchInput<double> plain;
  plain.token_embeddings = {x};
  plain.pad_mask = {std::vector<std::uint8_t>(5, 1)};
  plain.lengths = {5};
  plain.labels = {0};

  BatchInput<double> padded;
  Matrix<double> xp = Matrix<double>::Zero(9, 8);
  xp.topRows(5) = x;
  xp.bottomRows(4) = random_tokens(rng, 4, 8);  // garbage at pads must not leak
  padded.token_embeddings = {xp};
  std::vector<std::uint8_t> mask(9, 0);
  std::fill(mask.begin(), mask.begin() + 5, 1);
  padded.pad_mask = {mask};
  padded.lengths = {5};
  padded.labels = {0};

  const auto a = encode(plain, params, cfg);
  const auto b = encode(padded, params, cfg);
  EXPECT_LE((a[0] - b[0].topRows(5)).cwiseAbs().maxCoeff(), 1e-12);
  const auto pa = pool_and_classify(a, plain.pad_mask, params);
  const auto pb = pool_and_classify(b, padded.pad_mask, params);
  EXPECT_LE((pa - pb).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(pa.row(0).sum(), 1.0, 1e-12);
}

TEST(Encoder, PermutingOtherSequencesInBatchIsIrrelevant) {
  const auto cfg = small_cfg();
  ParamStore<double> params;
  init_encoder_params(params, cfg, 4);
  std::mt19937_64 rng(2);
  BatchInput<double> batch;
  for (int len : {3, 6, 1}) {
    batch.token_embeddings.push_back(random_tokens(rng, len, 8));
    batch.pad_mask.push_back(std::vector<std::uint8_t>(len, 1));
    batch.lengths.push_back(len);
    batch.labels.push_back(0);
  }
  const auto probs = pool_and_classify(encode(batch, params, cfg), batch.pad_mask, params);
  BatchInput<double> single;
  single.token_embeddings = {batch.token_embeddings[1]};
  single.pad_mask = {batch.pad_mask[1]};
  single.lengths = {6};
  single.labels = {0};
  const auto p1 = pool_and_classify(encode(single, params, cfg), single.pad_mask, params);
  EXPECT_LE((probs.row(1) - p1.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, ConfigValidation) {
  auto cfg = small_cfg();
  cfg.num_heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.dropout = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_cfg();
  cfg.ff_dim = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Encoder, InitStreamsAreNamed) {
  auto cfg = small_cfg();
  ParamStore<double> a, b;
  init_encoder_params(a, cfg, 5);
  cfg.num_layers = 3;
  init_encoder_params(b, cfg, 5);
  for (const auto& p : a.all()) EXPECT_TRUE(p.value == b.at(p.name).value) << p.name;
  EXPECT_TRUE(a.at("encoder.0.ln1.gain").value.isOnes());
  EXPECT_TRUE(a.at("encoder.0.attn.bq").value.isZero());
}

TEST(Encoder, SingleTokenAttentionIsIdentityMix) {
  // One token attends only to itself, so attention returns its value path.
  Tape<double> tape;
  std::mt19937_64 rng(3);
  const Matrix<double> v = random_tokens(rng, 1, 4);
  auto q = tape.constant(random_tokens(rng, 1, 4));
  auto k = tape.constant(random_tokens(rng, 1, 4));
  auto out = tape.attention(q, k, tape.constant(v), 2);
  EXPECT_LE((tape.value(out) - v).cwiseAbs().maxCoeff(), 1e-15);
}
