#include "mrnn/training.h"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mrnn/inference.h"

namespace mrnn {
namespace {

ModelConfig small_config(const SyntheticCorpus& corpus, Variant variant = Variant::kMultimodal) {
  ModelConfig mc;
  mc.variant = variant;
  mc.vocab_size = corpus.vocab.size();
  mc.image_dim = corpus.features.dim();
  mc.embed1_dim = 16;
  mc.embed2_dim = 16;
  mc.recurrent_dim = 32;
  mc.multimodal_dim = 32;
  return mc;
}

SyntheticCorpus small_corpus(std::uint64_t seed, std::size_t n_images) {
  Rng rng(seed);
  SynthSpec spec;
  spec.n_images = n_images;
  spec.noise_dims = 8;
  return generate_synthetic_corpus(rng, spec);
}

std::vector<const CaptionedExample*> pointers(const std::vector<CaptionedExample>& v) {
  std::vector<const CaptionedExample*> out;
  for (const auto& ex : v) out.push_back(&ex);
  return out;
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.lambda_reg = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.learning_rate = -0.1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.clip_norm = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Cost, UniformModelDataTermIsLog2M) {
  ModelConfig mc;
  mc.vocab_size = 8;
  mc.embed1_dim = 3;
  mc.embed2_dim = 3;
  mc.recurrent_dim = 4;
  mc.multimodal_dim = 5;
  mc.image_dim = 2;
  const ModelParams zero(mc);
  ImageFeatureStore store(2);
  store.add("x", {0.3, -1.0});
  const std::vector<CaptionedExample> data{{"x", {3, 4, 5}, "a b c"}};
  const CostBreakdown c = cost_breakdown(zero, data, store, 0.0);
  EXPECT_DOUBLE_EQ(c.data_term, 3.0);
  EXPECT_EQ(c.predicted_words, 4u);
  EXPECT_DOUBLE_EQ(cost(zero, data, store, 0.5), 3.0);
}

TEST(Cost, DuplicatingDatasetLeavesDataTermUnchanged) {
  const auto corpus = small_corpus(2, 6);
  Rng rng(1);
  const ModelParams p = ModelParams::initialize(small_config(corpus), InitScheme::uniform(0.3), rng);
  auto doubled = corpus.dataset.train;
  doubled.insert(doubled.end(), corpus.dataset.train.begin(), corpus.dataset.train.end());
  EXPECT_NEAR(cost_breakdown(p, corpus.dataset.train, corpus.features, 0).data_term,
              cost_breakdown(p, doubled, corpus.features, 0).data_term, 1e-12);
}

TEST(Cost, RegularizerCoversWeightsOnly) {
  const auto corpus = small_corpus(2, 4);
  ModelParams p(small_config(corpus));
  p.block(MultimodalBlock::kOutputBias)(0, 0) = 10.0;
  p.block(MultimodalBlock::kOutput)(0, 0) = 2.0;
  const CostBreakdown c = cost_breakdown(p, corpus.dataset.train, corpus.features, 0.25);
  EXPECT_DOUBLE_EQ(c.regularizer, 0.25 * 4.0);
}

TEST(Cost, MissingFeatureThrows) {
  const auto corpus = small_corpus(2, 4);
  const ModelParams p(small_config(corpus));
  const std::vector<CaptionedExample> data{{"ghost", {3}, "x"}};
  EXPECT_THROW(cost(p, data, corpus.features, 0), std::out_of_range);
}

TEST(BatchGradient, ThreadCountDoesNotChangeBits) {
  const auto corpus = small_corpus(5, 12);
  Rng rng(2);
  const ModelParams p = ModelParams::initialize(small_config(corpus), InitScheme::xavier(), rng);
  const auto batch = pointers(corpus.dataset.train);
  const BatchGradient one = batch_gradient(p, batch, corpus.features, 1);
  for (const std::size_t threads : {2u, 3u, 8u}) {
    const BatchGradient many = batch_gradient(p, batch, corpus.features, threads);
    EXPECT_EQ(one.gradients, many.gradients);
    EXPECT_EQ(one.loss, many.loss);
  }
}

TEST(BatchGradient, DuplicateSentenceDoublesContribution) {
  const auto corpus = small_corpus(5, 3);
  Rng rng(2);
  const ModelParams p = ModelParams::initialize(small_config(corpus), InitScheme::uniform(0.2), rng);
  const CaptionedExample* ex = &corpus.dataset.train[0];
  const std::vector<const CaptionedExample*> single{ex}, twice{ex, ex};
  const BatchGradient a = batch_gradient(p, single, corpus.features);
  const BatchGradient b = batch_gradient(p, twice, corpus.features);
  for (std::size_t blk = 0; blk < p.block_count(); ++blk) {
    for (std::size_t i = 0; i < a.gradients.block(blk).size(); ++i) {
      EXPECT_NEAR(b.gradients.block(blk).flat()[i], 2 * a.gradients.block(blk).flat()[i], 1e-13);
    }
  }
  EXPECT_EQ(b.predicted_words, 2 * a.predicted_words);
}

TEST(Sgd, StepFollowsPerWordLog2CostGradient) {
  // One step must move params by -lr * d(cost)/d(theta), checked against a
  // central difference of the full per-word log2 cost along the update direction.
  const auto corpus = small_corpus(9, 4);
  Rng rng(3);
  const ModelParams p = ModelParams::initialize(small_config(corpus), InitScheme::uniform(0.3), rng);
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.lambda_reg = 0.01;
  tc.clip_norm.reset();
  ModelParams q = p;
  const auto batch = pointers(corpus.dataset.train);
  sgd_step(q, batch, corpus.features, tc);
  ModelParams delta = q;
  delta.add_scaled(p, -1.0);  // -lr * g
  const double g_sq = delta.squared_norm() / (tc.learning_rate * tc.learning_rate);
  const double h = 1e-6;
  ModelParams plus = p, minus = p;
  plus.add_scaled(delta, h / tc.learning_rate);
  minus.add_scaled(delta, -h / tc.learning_rate);
  const double directional = (cost(plus, corpus.dataset.train, corpus.features, tc.lambda_reg) -
                              cost(minus, corpus.dataset.train, corpus.features, tc.lambda_reg)) /
                             (2 * h);
  // Moving along -g changes the cost at rate -|g|^2.
  EXPECT_NEAR(directional, -g_sq, 1e-6 * std::max(1.0, g_sq));
}

TEST(Sgd, ClippedNormNeverExceedsBound) {
  const auto corpus = small_corpus(4, 8);
  Rng rng(3);
  const ModelParams p = ModelParams::initialize(small_config(corpus), InitScheme::uniform(2.0), rng);
  TrainConfig tc;
  tc.learning_rate = 1.0;
  tc.clip_norm = 0.01;
  ModelParams q = p;
  const double applied = sgd_step(q, pointers(corpus.dataset.train), corpus.features, tc);
  EXPECT_LE(applied, 0.01 + 1e-9);
  ModelParams delta = q;
  delta.add_scaled(p, -1.0);
  EXPECT_LE(std::sqrt(delta.squared_norm()), 0.01 + 1e-9);
}

TEST(Sgd, RegularizerAloneShrinksWeights) {
  const auto corpus = small_corpus(4, 4);
  Rng rng(8);
  ModelParams p = ModelParams::initialize(small_config(corpus), InitScheme::xavier(), rng);
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.lambda_reg = 0.5;
  const double before = p.squared_norm();
  sgd_step(p, std::span<const CaptionedExample* const>{}, corpus.features, tc);
  EXPECT_LT(p.squared_norm(), before);
}

TEST(Sgd, ClipGradientsScalesToBound) {
  const auto corpus = small_corpus(4, 4);
  Gradients g(small_config(corpus));
  g.block(0)(0, 0) = 3.0;
  g.block(1)(0, 0) = 4.0;
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), 5.0);
  EXPECT_NEAR(std::sqrt(g.squared_norm()), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(clip_gradients(g, 10.0), std::sqrt(g.squared_norm()));
}

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
  const auto corpus = small_corpus(6, 6);
  TrainConfig tc;
  tc.learning_rate = 0.0;
  tc.epochs = 3;
  const TrainResult r = train(tc, small_config(corpus), corpus.dataset, corpus.features);
  Rng rng(tc.seed);
  EXPECT_EQ(r.params, ModelParams::initialize(small_config(corpus), tc.init, rng));
}

TEST(Train, SameSeedIdenticalCheckpointAcrossThreadCounts) {
  const auto corpus = small_corpus(6, 10);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  const auto a = train(tc, small_config(corpus), corpus.dataset, corpus.features);
  const auto b = train(tc, small_config(corpus), corpus.dataset, corpus.features);
  tc.threads = 4;
  const auto c = train(tc, small_config(corpus), corpus.dataset, corpus.features);
  EXPECT_EQ(serialize_model(a.params), serialize_model(b.params));
  EXPECT_EQ(serialize_model(a.params), serialize_model(c.params));
  tc.seed = 2;
  const auto d = train(tc, small_config(corpus), corpus.dataset, corpus.features);
  EXPECT_NE(serialize_model(a.params), serialize_model(d.params));
}

TEST(Train, OverfitsEightCaptions) {
  const auto corpus = small_corpus(11, 8);
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.batch_size = 1;
  tc.epochs = 200;
  tc.lambda_reg = 0.0;
  tc.eval_every = 0;
  std::vector<double> costs;
  const auto r = train(tc, small_config(corpus), corpus.dataset, corpus.features,
                       [&](const EpochRecord& e) { costs.push_back(e.cost); });
  ASSERT_EQ(costs.size(), 200u);
  EXPECT_LT(costs.back(), costs.front());
  const double ppl = std::exp2(cost_breakdown(r.params, corpus.dataset.train, corpus.features, 0).data_term);
  EXPECT_LT(ppl, 1.3);
  for (const auto& ex : corpus.dataset.train) {
    EXPECT_EQ(generate(r.params, corpus.features.at(ex.image_id), {}), ex.tokens) << ex.raw_text;
  }
}

TEST(Train, ReportHasValidationAndCsv) {
  Rng rng(3);
  SynthSpec spec;
  spec.n_images = 20;
  spec.validation_fraction = 0.25;
  const auto corpus = generate_synthetic_corpus(rng, spec);
  TrainConfig tc;
  tc.epochs = 3;
  tc.eval_every = 2;
  const auto r = train(tc, small_config(corpus), corpus.dataset, corpus.features);
  ASSERT_EQ(r.report.epochs.size(), 3u);
  EXPECT_TRUE(std::isnan(r.report.epochs[0].validation_ppl));
  EXPECT_GT(r.report.epochs[1].validation_ppl, 1.0);
  EXPECT_GT(r.report.epochs[2].validation_ppl, 1.0);
  const std::string csv = r.report.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,cost,val_ppl,seconds");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Train, DivergenceIsReported) {
  const auto corpus = small_corpus(6, 6);
  TrainConfig tc;
  tc.learning_rate = 1e300;
  tc.clip_norm.reset();
  tc.epochs = 2;
  EXPECT_THROW(train(tc, small_config(corpus), corpus.dataset, corpus.features), TrainingDiverged);
}

TEST(Train, BaselineTrains) {
  const auto corpus = small_corpus(6, 8);
  TrainConfig tc;
  tc.learning_rate = 0.5;
  tc.batch_size = 2;
  tc.epochs = 30;
  std::vector<double> costs;
  train(tc, small_config(corpus, Variant::kBaseline), corpus.dataset, corpus.features,
        [&](const EpochRecord& e) { costs.push_back(e.cost); });
  EXPECT_LT(costs.back(), costs.front());
}

TEST(GradientCheck, ZeroModelMatchesToTighterTolerance) {
  GradCheckConfig gc;
  gc.samples = 3;
  gc.init_scale = 0.0;
  const GradCheckReport r = gradient_check(gc);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(GradientCheck, TwentyRandomInstancesPass) {
  GradCheckConfig gc;
  const GradCheckReport r = gradient_check(gc);
  ASSERT_EQ(r.instances.size(), 20u);
  EXPECT_TRUE(r.passed) << r.worst_block << " " << r.max_relative_error;
  EXPECT_LT(r.max_relative_error, 1e-4);
}

TEST(GradientCheck, BaselinePasses) {
  GradCheckConfig gc;
  gc.variant = Variant::kBaseline;
  EXPECT_TRUE(gradient_check(gc).passed);
}

TEST(GradientCheck, CorruptedRecurrentGradientFails) {
  GradCheckConfig gc;
  gc.samples = 4;
  gc.corrupt_block = "U_r";
  const GradCheckReport r = gradient_check(gc);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_block, "U_r");
}

TEST(GradientCheck, UnknownCorruptBlockThrows) {
  GradCheckConfig gc;
  gc.samples = 1;
  gc.corrupt_block = "nope";
  EXPECT_THROW(gradient_check(gc), std::invalid_argument);
}

TEST(GradientCheck, Deterministic) {
  GradCheckConfig gc;
  gc.samples = 1;
  gc.seed = 3;
  EXPECT_EQ(gradient_check(gc).max_relative_error, gradient_check(gc).max_relative_error);
}

}  // namespace
}  // namespace mrnn
