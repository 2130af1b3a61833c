#include "medfuse/metrics.hpp"
#include "medfuse/training.hpp"
#include "support/fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace medfuse;

TEST(Loss, Examples) {
  Matrix<double> perfect(2, 2);
  perfect << 0.0, 1.0, 1.0, 0.0;
  const std::vector<int> y{1, 0};
  EXPECT_DOUBLE_EQ(cross_entropy_loss(perfect, y), 0.0);
  Matrix<double> uniform = Matrix<double>::Constant(2, 2, 0.5);
  EXPECT_NEAR(cross_entropy_loss(uniform, y), std::log(2.0), 1e-15);
  Matrix<double> p(2, 2);
  p << 0.2, 0.8, 0.6, 0.4;
  EXPECT_NEAR(cross_entropy_loss(p, y), 0.3670, 5e-5);
  EXPECT_NEAR(cross_entropy_loss(p, y), -(std::log(0.8) + std::log(0.6)) / 2.0, 1e-15);
}

TEST(Loss, ZeroProbabilityIsClampedAndCounted) {
  Matrix<double> p(2, 2);
  p << 1.0, 0.0, 0.5, 0.5;
  const std::vector<int> y{1, 0};
  int clamped = 0;
  const double l = cross_entropy_loss(p, y, 1e-12, &clamped);
  EXPECT_EQ(clamped, 1);
  EXPECT_NEAR(l, (-std::log(1e-12) + std::log(2.0)) / 2.0, 1e-9);
  EXPECT_TRUE(std::isfinite(l));
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  ParamStore<double> store;
  store.add("w", Matrix<double>::Constant(2, 3, 0.7));
  Adam<double> opt(0.1, 0.9, 0.999, 1e-8);
  for (int i = 0; i < 5; ++i) {
    store.zero_grad();
    opt.step(store);
  }
  EXPECT_TRUE(store.at("w").value == Matrix<double>::Constant(2, 3, 0.7));
  EXPECT_EQ(opt.steps(), 5);
}

TEST(Adam, FrozenRowsKeepValue) {
  ParamStore<double> store;
  store.add("t", Matrix<double>::Constant(3, 2, 1.0));
  Adam<double> opt(0.1, 0.9, 0.999, 1e-8);
  opt.freeze_rows("t", {0, 2});
  for (int i = 0; i < 3; ++i) {
    store.at("t").grad.setConstant(1.0);
    opt.step(store);
  }
  const auto& v = store.at("t").value;
  EXPECT_TRUE(v.row(0) == Matrix<double>::Constant(1, 2, 1.0));
  EXPECT_TRUE(v.row(2) == Matrix<double>::Constant(1, 2, 1.0));
  EXPECT_LT(v(1, 0), 1.0);
  opt.unfreeze_all();
  store.at("t").grad.setConstant(1.0);
  opt.step(store);
  EXPECT_LT(store.at("t").value(0, 0), 1.0);
}

TEST(Training, ZeroLearningRateKeepsParametersBitIdentical) {
  const auto data = fixture::tiny_dataset();
  const auto model = make_model<double>(fixture::toy_config(), data.schema, 5);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.max_epochs = 2;
  tc.batch_size = 8;
  const auto res = train<double>(model, data.train, data.val, tc);
  for (const auto& p : model.params.all()) EXPECT_TRUE(p.value == res.model.params.at(p.name).value) << p.name;
}

TEST(Training, SameSeedSameTrace) {
  const auto data = fixture::tiny_dataset();
  const auto model = make_model<float>(fixture::toy_config(), data.schema, 5);
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.max_epochs = 3;
  tc.patience = 10;
  tc.batch_size = 8;
  const auto a = train<float>(model, data.train, data.val, tc);
  const auto b = train<float>(model, data.train, data.val, tc);
  EXPECT_EQ(a.trace.to_csv(false), b.trace.to_csv(false));
  EXPECT_EQ(params_hash(a.model.params), params_hash(b.model.params));
  tc.seed = 2;
  const auto c = train<float>(model, data.train, data.val, tc);
  EXPECT_NE(a.trace.to_csv(false), c.trace.to_csv(false));
}

TEST(Training, BestEpochHasTheHighestValidationAuprc) {
  const auto data = fixture::tiny_dataset(80);
  const auto model = make_model<float>(fixture::toy_config(), data.schema, 2);
  TrainConfig tc;
  tc.learning_rate = 2e-2;
  tc.max_epochs = 8;
  tc.patience = 2;
  tc.batch_size = 8;
  const auto res = train<float>(model, data.train, data.val, tc);
  ASSERT_GE(res.trace.best_epoch, 1);
  for (const auto& e : res.trace.epochs) EXPECT_LE(e.val_auprc, res.trace.best_val_auprc);
  const auto scores = predict<float>(res.model, data.val);
  std::vector<int> labels;
  for (const auto& s : data.val) labels.push_back(s.label);
  EXPECT_DOUBLE_EQ(auprc(scores, labels), res.trace.best_val_auprc);
  if (res.trace.stopped_early) {
    EXPECT_EQ(static_cast<int>(res.trace.epochs.size()), res.trace.best_epoch + tc.patience);
  }
}

TEST(Training, OverlappingSplitsAreRejected) {
  const auto data = fixture::tiny_dataset();
  const auto model = make_model<float>(fixture::toy_config(), data.schema, 1);
  TrainConfig tc;
  EXPECT_THROW(train<float>(model, data.train, data.train, tc), std::exception);
}

TEST(Training, LossFallsOverTheFirstEpoch) {
  // Separable linear task; reduced seed count of the full 100-seed check.
  SyntheticSpec spec;
  spec.n_entities = 160;
  spec.n_numeric = 3;
  spec.n_categorical = 0;
  spec.window_length = 12;
  spec.label_rule = LabelRule::kLinear;
  spec.p_min = 0.05;
  spec.p_max = 0.95;
  const auto data = tokenize_cohort(generate_synthetic(spec, 4), {12.0, 2.0, 0.0}, SplitConfig{});
  std::vector<const TokenSequence*> all;
  for (const auto& s : data.train) all.push_back(&s);
  int fell = 0;
  const int seeds = 20;
  for (int seed = 1; seed <= seeds; ++seed) {
    auto model = make_model<double>(fixture::toy_config(), data.schema, static_cast<std::uint64_t>(seed));
    const double before = loss_and_grad(model, all);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.max_epochs = 1;
    tc.batch_size = 8;
    tc.seed = static_cast<std::uint64_t>(seed);
    auto res = train<double>(model, data.train, data.val, tc);
    fell += loss_and_grad(res.model, all) < before;
  }
  EXPECT_GE(fell, 19);
}

TEST(Gradients, FiniteDifferencesAgreeForEveryKind) {
  const auto data = fixture::tiny_dataset(30);
  const auto batch = fixture::pointers(data.train, 3);
  for (auto kind : {FusionKind::kMuFuse, FusionKind::kAdditive, FusionKind::kConcat, FusionKind::kScane}) {
    for (auto mode : {TimeMode::kAdd, TimeMode::kMultiply}) {
      auto cfg = fixture::toy_config(kind);
      cfg.time.mode = mode;
      const auto rep = grad_check(make_model<double>(cfg, data.schema, 7), batch);
      EXPECT_TRUE(rep.pass()) << to_string(kind) << "\n" << rep.to_csv();
    }
  }
}

TEST(Gradients, CorruptedGradientIsReported) {
  const auto data = fixture::tiny_dataset(30);
  const auto batch = fixture::pointers(data.train, 3);
  GradCheckOptions opts;
  opts.corrupt = [](ParamStore<double>& p) { p.at("head.b").grad(0, 0) += 0.5; };
  const auto rep = grad_check(make_model<double>(fixture::toy_config(), data.schema, 7), batch, opts);
  EXPECT_FALSE(rep.pass());
  for (const auto& t : rep.tensors) EXPECT_EQ(t.pass, t.tensor != "head.b") << t.tensor;
}

TEST(Gradients, LookupGradientsAreSparse) {
  const auto data = fixture::tiny_dataset(30);
  const auto batch = fixture::pointers(data.train, 1);
  std::set<int> present;
  for (const auto& t : batch[0]->tokens) present.insert(t.feature_id);
  auto model = make_model<double>(fixture::toy_config(), data.schema, 3);
  loss_and_grad(model, batch);
  const auto& g = model.params.at(names::kGamma).grad;
  for (int f = 0; f < data.schema.size(); ++f) {
    const bool numeric = data.schema.at(f).kind == FeatureKind::kNumeric;
    const bool nonzero = g.row(f).cwiseAbs().maxCoeff() > 0.0;
    EXPECT_EQ(nonzero, numeric && present.count(f) > 0) << "feature " << f;
  }
}

TEST(Gradients, ScalingTheLossScalesGradients) {
  Tape<double> t1, t2;
  ParamStore<double> s1, s2;
  s1.add("w", Matrix<double>::Constant(3, 1, 0.3));
  s2.add("w", Matrix<double>::Constant(3, 1, 0.3));
  ParamBinder<double> b1(t1, s1), b2(t2, s2);
  auto l1 = t1.masked_mean_rows(t1.tanh(b1("w")));
  auto l2 = t2.scale(t2.masked_mean_rows(t2.tanh(b2("w"))), 2.0);
  t1.backward(l1);
  t2.backward(l2);
  EXPECT_TRUE(s2.at("w").grad == 2.0 * s1.at("w").grad);
}

TEST(Config, TrainKeys) {
  auto cfg = KeyValueConfig::parse("[train]\nlearning_rate = 0.01\nbatch_size = 4\nprecision = 64\n");
  const auto tc = TrainConfig::from_config(cfg);
  EXPECT_DOUBLE_EQ(tc.learning_rate, 0.01);
  EXPECT_EQ(tc.batch_size, 4);
  EXPECT_EQ(tc.precision, Precision::kFloat64);
  EXPECT_THROW(TrainConfig::from_config(KeyValueConfig::parse("[train]\nprecision = 16\n")), ConfigError);
}

TEST(Gradients, UnusedConcatProjectionGetsNoGradient) {
  const auto data = fixture::tiny_dataset(30);
  const auto batch = fixture::pointers(data.train, 4);
  auto model = make_model<double>(fixture::toy_config(FusionKind::kAdditive), data.schema, 3);
  loss_and_grad(model, batch);
  EXPECT_TRUE(model.params.at(names::kConcatProj).grad.isZero(0.0));
  EXPECT_FALSE(model.params.at(names::kFeatureTable).grad.isZero(0.0));
}
