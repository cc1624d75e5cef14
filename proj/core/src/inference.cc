#include "mrnn/inference.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mrnn/parallel.h"

namespace mrnn {
namespace {

std::size_t argmax_lowest(std::span<const double> probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.size(); ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return best;
}

void sort_ranking(std::vector<RankedCandidate>& ranking, bool descending) {
  std::sort(ranking.begin(), ranking.end(), [descending](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.score != b.score) return descending ? a.score > b.score : a.score < b.score;
    return a.id < b.id;
  });
}

}  // namespace

void GenerationConfig::validate() const {
  if (max_length == 0) throw std::invalid_argument("max_length must be >= 1");
}

std::vector<TokenId> generate(const ModelParams& params, std::span<const double> image_feature,
                              const GenerationConfig& config) {
  config.validate();
  const auto& c = params.config();
  Rng rng(config.seed);
  std::vector<TokenId> sentence(config.prefix.begin(), config.prefix.end());
  if (config.exact_length && sentence.size() >= *config.exact_length) {
    sentence.resize(*config.exact_length);
    return sentence;
  }

  const Vector projection = image_projection(params, image_feature);
  Vector r(c.recurrent_dim, 0.0);
  Vector probs;
  const auto step = [&](TokenId input) {
    StepTrace s = forward_step_projected(params, input, r, projection);
    r = std::move(s.recurrent);
    probs = std::move(s.probs);
  };
  step(Vocabulary::kStart);
  for (const TokenId t : config.prefix) step(t);

  for (std::size_t generated = 0; generated < config.max_length; ++generated) {
    const bool suppress_end = config.exact_length.has_value();
    if (suppress_end) probs[Vocabulary::kEnd] = 0.0;
    TokenId next = 0;
    if (config.mode == DecodeMode::kGreedy) {
      next = static_cast<TokenId>(argmax_lowest(probs));
    } else {
      next = static_cast<TokenId>(rng.categorical(probs));
    }
    if (next == Vocabulary::kEnd) break;
    sentence.push_back(next);
    if (config.exact_length && sentence.size() >= *config.exact_length) break;
    step(next);
  }
  return sentence;
}

SentenceScore sentence_log2prob(const ModelParams& params, std::span<const TokenId> tokens,
                                std::span<const double> image_feature) {
  SentenceScore s;
  s.length = tokens.size() + 1;
  s.log2prob = -sentence_loss(params, tokens, image_feature) / std::numbers::ln2;
  s.perplexity = std::exp2(-s.log2prob / static_cast<double>(s.length));
  return s;
}

RetrievalResult retrieve_images(const ModelParams& params, std::span<const TokenId> query_tokens,
                                const ImageFeatureStore& store, std::size_t threads) {
  const auto ids = store.ids();
  RetrievalResult result;
  result.direction = RetrievalDirection::kTextToImage;
  result.ranking.resize(ids.size());
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    result.ranking[i] = {ids[i], sentence_log2prob(params, query_tokens, store.at(ids[i])).perplexity};
  });
  sort_ranking(result.ranking, /*descending=*/false);
  return result;
}

std::vector<double> sentence_log2_marginals(const ModelParams& params, std::span<const SentenceCandidate> candidates,
                                            std::span<const Vector> norm_images, std::size_t threads) {
  if (norm_images.empty()) throw std::invalid_argument("sentence retrieval needs at least one normalization image");
  std::vector<double> out(candidates.size());
  const double log2_k = std::log2(static_cast<double>(norm_images.size()));
  parallel_for(candidates.size(), threads, [&](std::size_t c) {
    std::vector<double> terms(norm_images.size());
    for (std::size_t k = 0; k < norm_images.size(); ++k) {
      terms[k] = sentence_log2prob(params, candidates[c].tokens, norm_images[k]).log2prob;
    }
    out[c] = log2_sum_exp2(terms) - log2_k;
  });
  return out;
}

RetrievalResult retrieve_sentences(const ModelParams& params, std::span<const double> query_feature,
                                   std::span<const SentenceCandidate> candidates,
                                   std::span<const double> log2_marginals, std::size_t threads) {
  if (candidates.empty()) throw std::invalid_argument("sentence retrieval needs at least one candidate");
  if (log2_marginals.size() != candidates.size()) {
    throw DimensionError("one marginal per candidate sentence is required");
  }
  RetrievalResult result;
  result.direction = RetrievalDirection::kImageToText;
  result.ranking.resize(candidates.size());
  parallel_for(candidates.size(), threads, [&](std::size_t c) {
    const double conditional = sentence_log2prob(params, candidates[c].tokens, query_feature).log2prob;
    result.ranking[c] = {candidates[c].id, conditional - log2_marginals[c]};
  });
  sort_ranking(result.ranking, /*descending=*/true);
  return result;
}

RetrievalResult retrieve_sentences(const ModelParams& params, std::span<const double> query_feature,
                                   std::span<const SentenceCandidate> candidates, std::span<const Vector> norm_images,
                                   std::size_t threads) {
  if (candidates.empty()) throw std::invalid_argument("sentence retrieval needs at least one candidate");
  const auto marginals = sentence_log2_marginals(params, candidates, norm_images, threads);
  return retrieve_sentences(params, query_feature, candidates, marginals, threads);
}

std::vector<Vector> sample_norm_images(const ImageFeatureStore& store, std::size_t k, std::uint64_t seed) {
  auto ids = store.ids();
  Rng rng(seed);
  rng.shuffle(ids.begin(), ids.end());
  ids.resize(std::min(k, ids.size()));
  std::vector<Vector> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(store.at(id));
  return out;
}

}  // namespace mrnn
