#pragma once

// Caption generation, sentence scoring, and the two retrieval directions.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mrnn/corpus.h"
#include "mrnn/model.h"

namespace mrnn {

enum class DecodeMode { kGreedy, kSample };

struct GenerationConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  /// Upper bound on newly generated tokens.
  std::size_t max_length = 50;
  /// Reference words fed after START; they are part of the returned sentence.
  std::vector<TokenId> prefix;
  std::uint64_t seed = 0;
  /// When set, END is suppressed until the sentence holds exactly this many
  /// tokens and generation stops there (length-matched BLEU protocol).
  std::optional<std::size_t> exact_length;

  void validate() const;
};

/// Feeds START (then the prefix) and emits tokens until END or the length cap.
/// Greedy ties go to the lowest vocabulary index. The result excludes START/END.
std::vector<TokenId> generate(const ModelParams& params, std::span<const double> image_feature,
                              const GenerationConfig& config);

struct SentenceScore {
  /// Sum of log2 P over the L predicted positions (content words plus END).
  double log2prob = 0.0;
  double perplexity = 0.0;
  /// Number of predicted positions: tokens.size() + 1.
  std::size_t length = 0;
};

/// Satisfies log2prob == -length * log2(perplexity).
SentenceScore sentence_log2prob(const ModelParams& params, std::span<const TokenId> tokens,
                                std::span<const double> image_feature);

enum class RetrievalDirection { kImageToText, kTextToImage };

struct RankedCandidate {
  std::string id;
  double score = 0.0;
};

struct RetrievalResult {
  RetrievalDirection direction = RetrievalDirection::kTextToImage;
  /// Text-to-image: ascending perplexity. Image-to-text: descending normalized
  /// log2 probability. Ties are ordered by id.
  std::vector<RankedCandidate> ranking;
};

/// Ranks every image of `store` by the perplexity of `query_tokens` given that image.
RetrievalResult retrieve_images(const ModelParams& params, std::span<const TokenId> query_tokens,
                                const ImageFeatureStore& store, std::size_t threads = 1);

struct SentenceCandidate {
  std::string id;
  std::vector<TokenId> tokens;
};

/// log2 of the mean of P(w | I'_k) over the normalization images, per candidate:
/// the estimate of log2 P(w) with a uniform prior over those images.
std::vector<double> sentence_log2_marginals(const ModelParams& params, std::span<const SentenceCandidate> candidates,
                                            std::span<const Vector> norm_images, std::size_t threads = 1);

/// score = log2 P(w|I) - log2((1/K) sum_k P(w|I'_k)), descending. Throws
/// std::invalid_argument when norm_images or candidates is empty.
RetrievalResult retrieve_sentences(const ModelParams& params, std::span<const double> query_feature,
                                   std::span<const SentenceCandidate> candidates, std::span<const Vector> norm_images,
                                   std::size_t threads = 1);

/// Same ranking with the marginals precomputed by sentence_log2_marginals.
RetrievalResult retrieve_sentences(const ModelParams& params, std::span<const double> query_feature,
                                   std::span<const SentenceCandidate> candidates,
                                   std::span<const double> log2_marginals, std::size_t threads = 1);

/// K feature vectors drawn without replacement from `store` (all of them when
/// K >= store.size()), in a seed-determined order.
std::vector<Vector> sample_norm_images(const ImageFeatureStore& store, std::size_t k, std::uint64_t seed);

}  // namespace mrnn
