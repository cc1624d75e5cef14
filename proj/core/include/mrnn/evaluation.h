#pragma once

// Caption and retrieval metrics: BLEU-1..n, corpus perplexity, R@K and median
// rank, recall-vs-fraction curves, and the nearest-neighbour image shortlist.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mrnn/corpus.h"
#include "mrnn/inference.h"
#include "mrnn/model.h"
#include "mrnn/numerics.h"

namespace mrnn {

// ---------------------------------------------------------------------------
// BLEU

enum class BleuMode {
  /// B-n is the geometric mean of the clipped precisions of orders 1..n.
  kCumulative,
  /// B-n is the clipped precision of order n alone.
  kOrderOnly,
};

struct BleuScore {
  /// Clipped n-gram precision per order, index 0 = unigrams.
  std::vector<double> precisions;
  /// B-1..B-n after the brevity penalty.
  std::vector<double> scores;
  double brevity_penalty = 1.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;

  double b(std::size_t n) const { return scores.at(n - 1); }
};

/// Corpus-level, unsmoothed BLEU. references[i] lists the references of
/// candidates[i]. The effective reference length of a candidate is the closest
/// reference length (shorter wins ties). Throws std::invalid_argument when the
/// lists are misaligned or empty.
template <typename Token>
BleuScore bleu(std::span<const std::vector<Token>> candidates,
               std::span<const std::vector<std::vector<Token>>> references, std::size_t n_max = 3,
               BleuMode mode = BleuMode::kCumulative);

extern template BleuScore bleu<TokenId>(std::span<const std::vector<TokenId>>,
                                        std::span<const std::vector<std::vector<TokenId>>>, std::size_t, BleuMode);
extern template BleuScore bleu<std::string>(std::span<const std::vector<std::string>>,
                                            std::span<const std::vector<std::vector<std::string>>>, std::size_t,
                                            BleuMode);

// ---------------------------------------------------------------------------
// Perplexity

/// 2^(sum_i L_i log2 PPL_i / sum_i L_i), L_i counting the END prediction.
double corpus_perplexity(const ModelParams& params, std::span<const CaptionedExample> examples,
                         const ImageFeatureStore& features, std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Retrieval metrics. Score matrices are queries × candidates with higher =
// better; -infinity marks a candidate excluded for that query (e.g. outside a
// shortlist). Groundtruth lists candidate column indices per query.

using Groundtruth = std::vector<std::vector<std::size_t>>;

/// Candidate columns of one query in ranked order: descending score, then
/// non-groundtruth before groundtruth on equal scores, then column index. The
/// groundtruth never profits from a tie.
std::vector<std::size_t> rank_candidates(std::span<const double> scores, std::span<const std::size_t> groundtruth);

/// 1-based rank of each query's first groundtruth candidate. Throws
/// std::invalid_argument for a query without (finite-scored) groundtruth.
std::vector<std::size_t> first_groundtruth_ranks(const Matrix& scores, const Groundtruth& groundtruth);

struct RetrievalMetrics {
  /// K -> percentage of queries whose first groundtruth rank is <= K.
  std::map<std::size_t, double> recall_at;
  /// Lower median of the first-groundtruth ranks.
  std::size_t median_rank = 0;
  std::vector<std::size_t> ranks;
};

RetrievalMetrics retrieval_eval(const Matrix& scores, const Groundtruth& groundtruth,
                                std::span<const std::size_t> ks = std::vector<std::size_t>{1, 5, 10});

struct CurvePoint {
  double fraction = 0.0;
  double mean_matches = 0.0;
};

struct RecallCurve {
  std::vector<CurvePoint> points;
};

/// At each fraction f in (0, 1], the mean over queries of how many groundtruth
/// items fall within the top ceil(f * C_q) candidates, C_q being the number of
/// candidates with a finite score for query q. Fractions are sorted ascending.
RecallCurve recall_curve(const Matrix& scores, const Groundtruth& groundtruth, std::vector<double> fractions);

std::vector<double> default_curve_fractions();

/// For every query image, the `size` nearest images of `store` in Euclidean
/// feature distance (ties by id), the query itself included. Throws
/// std::invalid_argument when the store holds fewer than `size` images.
std::vector<std::vector<std::string>> shortlist(std::span<const std::string> query_ids, const ImageFeatureStore& store,
                                                std::size_t size = 100);

// ---------------------------------------------------------------------------
// Retrieval protocols over a dataset part

struct RetrievalProblem {
  Matrix scores;
  Groundtruth groundtruth;
  std::vector<std::string> query_ids;
  std::vector<std::string> candidate_ids;
};

/// Text-to-image: one query per caption, candidates are the distinct images of
/// `examples`; score = -log2 PPL(caption | image).
RetrievalProblem text_to_image_problem(const ModelParams& params, std::span<const CaptionedExample> examples,
                                       const ImageFeatureStore& features, std::size_t threads = 1);

struct SentenceRetrievalOptions {
  /// Normalization images, typically sampled from the training set.
  std::vector<Vector> norm_images;
  /// 0 disables the shortlist; otherwise only captions of the query image's
  /// `shortlist_size` nearest images are candidates.
  std::size_t shortlist_size = 0;
  std::size_t threads = 1;
};

/// Image-to-text: one query per distinct image of `examples`, candidates are all
/// captions; score = normalized log2 probability.
RetrievalProblem image_to_text_problem(const ModelParams& params, std::span<const CaptionedExample> examples,
                                       const ImageFeatureStore& features, const SentenceRetrievalOptions& options);

// ---------------------------------------------------------------------------
// Reporting

std::string bleu_to_csv(const BleuScore& score);
std::string bleu_to_json(const BleuScore& score);
std::string retrieval_to_csv(const RetrievalMetrics& metrics);
std::string retrieval_to_json(const RetrievalMetrics& metrics);
/// "fraction,mean_matches" rows.
std::string curve_to_csv(const RecallCurve& curve);

}  // namespace mrnn
