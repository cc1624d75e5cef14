#include <benchmark/benchmark.h>

#include <vector>

#include "mrnn/model.h"

namespace {

using namespace mrnn;

ModelConfig bench_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.embed1_dim = 128;
  c.embed2_dim = 128;
  c.recurrent_dim = 256;
  c.multimodal_dim = 512;
  c.image_dim = 256;
  return c;
}

struct Fixture {
  explicit Fixture(std::size_t vocab) : rng(1), params(ModelParams::initialize(bench_config(vocab), InitScheme::xavier(), rng)) {
    image.resize(256);
    for (double& x : image) x = rng.normal();
    for (std::size_t i = 0; i < 12; ++i) tokens.push_back(static_cast<TokenId>(3 + rng.below(vocab - 3)));
  }
  Rng rng;
  ModelParams params;
  Vector image;
  std::vector<TokenId> tokens;
};

void BM_Softmax(benchmark::State& state) {
  Rng rng(2);
  Vector logits(static_cast<std::size_t>(state.range(0)));
  for (double& x : logits) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(softmax(logits));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Softmax)->Arg(1000)->Arg(10000);

void BM_ForwardSentence(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(forward_sentence(f.params, f.tokens, f.image));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.tokens.size() + 1));
}
BENCHMARK(BM_ForwardSentence)->Arg(1000)->Arg(5000)->Unit(benchmark::kMicrosecond);

void BM_BackwardSentence(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  const ForwardTrace trace = forward_sentence(f.params, f.tokens, f.image);
  const auto targets = prediction_targets(f.tokens);
  for (auto _ : state) benchmark::DoNotOptimize(backward_sentence(f.params, trace, targets, f.image));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.tokens.size() + 1));
}
BENCHMARK(BM_BackwardSentence)->Arg(1000)->Arg(5000)->Unit(benchmark::kMicrosecond);

void BM_SentenceLoss(benchmark::State& state) {
  Fixture f(1000);
  for (auto _ : state) benchmark::DoNotOptimize(sentence_loss(f.params, f.tokens, f.image));
}
BENCHMARK(BM_SentenceLoss)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
