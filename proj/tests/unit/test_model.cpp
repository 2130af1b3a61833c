#include "medfuse/model.hpp"
#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace medfuse;

TEST(Model, CheckpointRoundTripIsExact) {
  const auto data = fixture::tiny_dataset();
  for (auto kind : {FusionKind::kMuFuse, FusionKind::kConcat}) {
    auto model = make_model<float>(fixture::toy_config(kind), data.schema, 9);
    model.meta["note"] = "x";
    const std::string text = serialize_checkpoint(model);
    const auto back = deserialize_checkpoint<float>(text);
    EXPECT_EQ(params_hash(back.params), params_hash(model.params));
    EXPECT_EQ(serialize_checkpoint(back), text);
    EXPECT_EQ(back.meta.at("note"), "x");
    EXPECT_EQ(predict<float>(back, data.test), predict<float>(model, data.test));
  }
  const auto m64 = make_model<double>(fixture::toy_config(), data.schema, 9);
  EXPECT_EQ(params_hash(deserialize_checkpoint<double>(serialize_checkpoint(m64)).params), params_hash(m64.params));
}

TEST(Model, CheckpointRejectsTampering) {
  const auto data = fixture::tiny_dataset();
  const auto model = make_model<float>(fixture::toy_config(), data.schema, 9);
  std::string text = serialize_checkpoint(model);
  const auto pos = text.find("schema_hash ");
  text[pos + 12] = text[pos + 12] == 'a' ? 'b' : 'a';
  EXPECT_THROW(deserialize_checkpoint<float>(text), SchemaError);
  EXPECT_THROW(deserialize_checkpoint<float>("not a checkpoint"), std::exception);
}

TEST(Model, PredictionsIgnoreThreadCount) {
  const auto data = fixture::tiny_dataset(300);
  const auto model = make_model<float>(fixture::toy_config(), data.schema, 4);
  const auto a = predict<float>(model, data.train, 1);
  const auto b = predict<float>(model, data.train, 3);
  EXPECT_EQ(a, b);
  for (double p : a) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(Model, SequenceScoreDoesNotDependOnBatchNeighbours) {
  const auto data = fixture::tiny_dataset();
  const auto model = make_model<double>(fixture::toy_config(), data.schema, 4);
  const auto all = predict<double>(model, data.train);
  std::span<const TokenSequence> one(&data.train[3], 1);
  EXPECT_NEAR(predict<double>(model, one)[0], all[3], 1e-12);
}

TEST(Model, EqualTokensGiveEqualFusedVectors) {
  const auto data = fixture::tiny_dataset();
  const auto model = make_model<double>(fixture::toy_config(), data.schema, 4);
  TokenSequence seq;
  seq.entity_id = "x";
  Token t;
  t.feature_id = 0;
  t.value = 0.3;
  t.time = 1.0;
  seq.tokens = {t, t};
  seq.tokens[1].feature_id = 0;
  const auto st = token_stages(model, seq);
  EXPECT_TRUE(st.post_fusion.row(0) == st.post_fusion.row(1));
  EXPECT_EQ(st.post_layer1.rows(), 2);
}

TEST(Model, ConfigRoundTrip) {
  const auto cfg = fixture::toy_config(FusionKind::kMuFuse, 8, 2);
  const auto back = ModelConfig::from_config(cfg.to_config());
  EXPECT_EQ(back.fusion, cfg.fusion);
  EXPECT_EQ(back.encoder.num_layers, 2);
  auto bad = cfg;
  bad.encoder.d_model = 16;
  EXPECT_THROW(bad.validate(), ConfigError);
}
