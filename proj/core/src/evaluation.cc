#include "mrnn/evaluation.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mrnn/parallel.h"

namespace mrnn {
namespace {

template <typename Token>
using NgramCounts = std::map<std::vector<Token>, std::size_t>;

template <typename Token>
NgramCounts<Token> count_ngrams(const std::vector<Token>& tokens, std::size_t n) {
  NgramCounts<Token> counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

}  // namespace

template <typename Token>
BleuScore bleu(std::span<const std::vector<Token>> candidates,
               std::span<const std::vector<std::vector<Token>>> references, std::size_t n_max, BleuMode mode) {
  if (candidates.empty()) throw std::invalid_argument("BLEU needs at least one candidate");
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("BLEU: " + std::to_string(candidates.size()) + " candidates but " +
                                std::to_string(references.size()) + " reference sets");
  }
  if (n_max == 0) throw std::invalid_argument("BLEU order must be >= 1");

  std::vector<std::size_t> matched(n_max, 0);
  std::vector<std::size_t> total(n_max, 0);
  BleuScore out;

  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    const auto& refs = references[i];
    if (refs.empty()) throw std::invalid_argument("BLEU: candidate " + std::to_string(i) + " has no reference");
    out.candidate_length += cand.size();

    std::size_t closest = refs.front().size();
    for (const auto& ref : refs) {
      const auto diff = [&](std::size_t len) {
        return len > cand.size() ? len - cand.size() : cand.size() - len;
      };
      if (diff(ref.size()) < diff(closest) || (diff(ref.size()) == diff(closest) && ref.size() < closest)) {
        closest = ref.size();
      }
    }
    out.reference_length += closest;

    for (std::size_t n = 1; n <= n_max; ++n) {
      const auto cand_counts = count_ngrams(cand, n);
      NgramCounts<Token> max_ref;
      for (const auto& ref : refs) {
        for (const auto& [gram, count] : count_ngrams(ref, n)) {
          auto& slot = max_ref[gram];
          slot = std::max(slot, count);
        }
      }
      for (const auto& [gram, count] : cand_counts) {
        const auto it = max_ref.find(gram);
        matched[n - 1] += std::min(count, it == max_ref.end() ? std::size_t{0} : it->second);
        total[n - 1] += count;
      }
    }
  }

  if (out.candidate_length == 0) {
    out.brevity_penalty = 0.0;
  } else if (out.candidate_length < out.reference_length) {
    out.brevity_penalty = std::exp(1.0 - static_cast<double>(out.reference_length) /
                                             static_cast<double>(out.candidate_length));
  }

  double log_sum = 0.0;
  bool any_zero = false;
  for (std::size_t n = 0; n < n_max; ++n) {
    const double p = total[n] == 0 ? 0.0 : static_cast<double>(matched[n]) / static_cast<double>(total[n]);
    out.precisions.push_back(p);
    if (mode == BleuMode::kOrderOnly) {
      out.scores.push_back(out.brevity_penalty * p);
      continue;
    }
    if (p == 0.0) any_zero = true;
    if (!any_zero) log_sum += std::log(p);
    const double geo = any_zero ? 0.0 : std::exp(log_sum / static_cast<double>(n + 1));
    out.scores.push_back(out.brevity_penalty * geo);
  }
  return out;
}

template BleuScore bleu<TokenId>(std::span<const std::vector<TokenId>>,
                                 std::span<const std::vector<std::vector<TokenId>>>, std::size_t, BleuMode);
template BleuScore bleu<std::string>(std::span<const std::vector<std::string>>,
                                     std::span<const std::vector<std::vector<std::string>>>, std::size_t, BleuMode);

double corpus_perplexity(const ModelParams& params, std::span<const CaptionedExample> examples,
                         const ImageFeatureStore& features, std::size_t threads) {
  if (examples.empty()) throw std::invalid_argument("perplexity over an empty corpus");
  const bool multimodal = params.config().variant == Variant::kMultimodal;
  std::vector<SentenceScore> scores(examples.size());
  parallel_for(examples.size(), threads, [&](std::size_t i) {
    std::span<const double> feature;
    if (multimodal) feature = features.at(examples[i].image_id);
    scores[i] = sentence_log2prob(params, examples[i].tokens, feature);
  });
  double neg_log2 = 0.0;
  std::size_t words = 0;
  for (const auto& s : scores) {
    neg_log2 -= s.log2prob;
    words += s.length;
  }
  return std::exp2(neg_log2 / static_cast<double>(words));
}

std::vector<std::size_t> rank_candidates(std::span<const double> scores, std::span<const std::size_t> groundtruth) {
  std::vector<bool> is_gt(scores.size(), false);
  for (const std::size_t g : groundtruth) {
    if (g >= scores.size()) throw std::out_of_range("groundtruth index outside the candidate list");
    is_gt[g] = true;
  }
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    if (is_gt[a] != is_gt[b]) return !is_gt[a];
    return a < b;
  });
  return order;
}

std::vector<std::size_t> first_groundtruth_ranks(const Matrix& scores, const Groundtruth& groundtruth) {
  if (groundtruth.size() != scores.rows()) {
    throw std::invalid_argument("groundtruth has " + std::to_string(groundtruth.size()) + " queries, scores have " +
                                std::to_string(scores.rows()));
  }
  std::vector<std::size_t> ranks(scores.rows());
  for (std::size_t q = 0; q < scores.rows(); ++q) {
    const auto row = scores.row(q);
    const bool any_valid = std::any_of(groundtruth[q].begin(), groundtruth[q].end(), [&](std::size_t g) {
      return g < row.size() && row[g] != -std::numeric_limits<double>::infinity();
    });
    if (!any_valid) throw std::invalid_argument("query " + std::to_string(q) + " has no groundtruth candidate");
    const auto order = rank_candidates(row, groundtruth[q]);
    const std::set<std::size_t> gt(groundtruth[q].begin(), groundtruth[q].end());
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gt.count(order[r])) {
        ranks[q] = r + 1;
        break;
      }
    }
  }
  return ranks;
}

RetrievalMetrics retrieval_eval(const Matrix& scores, const Groundtruth& groundtruth, std::span<const std::size_t> ks) {
  if (scores.rows() == 0) throw std::invalid_argument("retrieval evaluation needs at least one query");
  RetrievalMetrics out;
  out.ranks = first_groundtruth_ranks(scores, groundtruth);
  const double n = static_cast<double>(out.ranks.size());
  for (const std::size_t k : ks) {
    const auto hits = std::count_if(out.ranks.begin(), out.ranks.end(), [k](std::size_t r) { return r <= k; });
    out.recall_at[k] = 100.0 * static_cast<double>(hits) / n;
  }
  auto sorted = out.ranks;
  std::sort(sorted.begin(), sorted.end());
  out.median_rank = sorted[(sorted.size() - 1) / 2];
  return out;
}

RecallCurve recall_curve(const Matrix& scores, const Groundtruth& groundtruth, std::vector<double> fractions) {
  if (groundtruth.size() != scores.rows() || scores.rows() == 0) {
    throw std::invalid_argument("recall curve needs one groundtruth set per query");
  }
  for (const double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("curve fractions must lie in (0, 1]");
  }
  // Validates every query has groundtruth.
  (void)first_groundtruth_ranks(scores, groundtruth);
  std::sort(fractions.begin(), fractions.end());

  RecallCurve curve;
  std::vector<double> sums(fractions.size(), 0.0);
  for (std::size_t q = 0; q < scores.rows(); ++q) {
    const auto row = scores.row(q);
    const auto order = rank_candidates(row, groundtruth[q]);
    const std::set<std::size_t> gt(groundtruth[q].begin(), groundtruth[q].end());
    const auto valid = static_cast<std::size_t>(std::count_if(
        row.begin(), row.end(), [](double s) { return s != -std::numeric_limits<double>::infinity(); }));
    for (std::size_t f = 0; f < fractions.size(); ++f) {
      const auto top = std::min<std::size_t>(
          valid, static_cast<std::size_t>(std::ceil(fractions[f] * static_cast<double>(valid) - 1e-12)));
      std::size_t matches = 0;
      for (std::size_t r = 0; r < top; ++r) matches += gt.count(order[r]);
      sums[f] += static_cast<double>(matches);
    }
  }
  for (std::size_t f = 0; f < fractions.size(); ++f) {
    curve.points.push_back({fractions[f], sums[f] / static_cast<double>(scores.rows())});
  }
  return curve;
}

std::vector<double> default_curve_fractions() {
  std::vector<double> out = {0.01, 0.02};
  for (int i = 1; i <= 20; ++i) out.push_back(0.05 * i);
  out.back() = 1.0;
  return out;
}

std::vector<std::vector<std::string>> shortlist(std::span<const std::string> query_ids, const ImageFeatureStore& store,
                                                std::size_t size) {
  if (store.size() < size) {
    throw std::invalid_argument("shortlist of " + std::to_string(size) + " needs at least that many images, store has " +
                                std::to_string(store.size()));
  }
  std::vector<std::vector<std::string>> out;
  out.reserve(query_ids.size());
  for (const auto& qid : query_ids) {
    const Vector& q = store.at(qid);
    std::vector<std::pair<double, const std::string*>> dist;
    dist.reserve(store.size());
    for (const auto& [id, feature] : store.entries()) dist.emplace_back(squared_distance(q, feature), &id);
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(size), dist.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first < b.first;
                        return *a.second < *b.second;
                      });
    std::vector<std::string> ids;
    ids.reserve(size);
    for (std::size_t i = 0; i < size; ++i) ids.push_back(*dist[i].second);
    // A duplicate feature vector can tie the query at distance 0 and sort ahead of it.
    if (std::find(ids.begin(), ids.end(), qid) == ids.end() && !ids.empty()) {
      ids.back() = qid;
    }
    out.push_back(std::move(ids));
  }
  return out;
}

RetrievalProblem text_to_image_problem(const ModelParams& params, std::span<const CaptionedExample> examples,
                                       const ImageFeatureStore& features, std::size_t threads) {
  RetrievalProblem p;
  std::map<std::string, std::size_t> column;
  for (const auto& ex : examples) column.emplace(ex.image_id, 0);
  for (auto& [id, col] : column) {
    col = p.candidate_ids.size();
    p.candidate_ids.push_back(id);
  }
  p.scores = Matrix(examples.size(), p.candidate_ids.size());
  p.groundtruth.resize(examples.size());
  for (std::size_t q = 0; q < examples.size(); ++q) {
    p.query_ids.push_back(examples[q].image_id);
    p.groundtruth[q] = {column.at(examples[q].image_id)};
  }
  const std::size_t n_cand = p.candidate_ids.size();
  parallel_for(examples.size() * n_cand, threads, [&](std::size_t k) {
    const std::size_t q = k / n_cand;
    const std::size_t c = k % n_cand;
    const auto s = sentence_log2prob(params, examples[q].tokens, features.at(p.candidate_ids[c]));
    p.scores(q, c) = -std::log2(s.perplexity);
  });
  return p;
}

RetrievalProblem image_to_text_problem(const ModelParams& params, std::span<const CaptionedExample> examples,
                                       const ImageFeatureStore& features, const SentenceRetrievalOptions& options) {
  RetrievalProblem p;
  std::vector<SentenceCandidate> candidates;
  std::map<std::string, std::vector<std::size_t>> captions_of;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    candidates.push_back({examples[i].image_id + "#" + std::to_string(i), examples[i].tokens});
    p.candidate_ids.push_back(candidates.back().id);
    captions_of[examples[i].image_id].push_back(i);
  }
  for (const auto& [id, caps] : captions_of) {
    p.query_ids.push_back(id);
    p.groundtruth.push_back(caps);
  }

  std::vector<std::vector<std::string>> lists;
  if (options.shortlist_size > 0) {
    // Shortlists are drawn among the images under evaluation.
    ImageFeatureStore pool(features.dim());
    for (const auto& id : p.query_ids) pool.add(id, features.at(id));
    lists = shortlist(p.query_ids, pool, options.shortlist_size);
  }

  const auto marginals = sentence_log2_marginals(params, candidates, options.norm_images, options.threads);
  const std::size_t n_cand = candidates.size();
  p.scores = Matrix(p.query_ids.size(), n_cand, -std::numeric_limits<double>::infinity());
  std::vector<std::vector<bool>> allowed(p.query_ids.size(), std::vector<bool>(n_cand, lists.empty()));
  for (std::size_t q = 0; q < lists.size(); ++q) {
    for (const auto& img : lists[q]) {
      for (const std::size_t c : captions_of.at(img)) allowed[q][c] = true;
    }
  }
  parallel_for(p.query_ids.size() * n_cand, options.threads, [&](std::size_t k) {
    const std::size_t q = k / n_cand;
    const std::size_t c = k % n_cand;
    if (!allowed[q][c]) return;
    const double conditional = sentence_log2prob(params, candidates[c].tokens, features.at(p.query_ids[q])).log2prob;
    p.scores(q, c) = conditional - marginals[c];
  });
  return p;
}

std::string bleu_to_csv(const BleuScore& score) {
  std::ostringstream os;
  os << "metric,value\n";
  for (std::size_t n = 1; n <= score.scores.size(); ++n) os << "B-" << n << ',' << format_double(score.b(n)) << '\n';
  for (std::size_t n = 1; n <= score.precisions.size(); ++n) {
    os << "p" << n << ',' << format_double(score.precisions[n - 1]) << '\n';
  }
  os << "brevity_penalty," << format_double(score.brevity_penalty) << '\n';
  return os.str();
}

std::string bleu_to_json(const BleuScore& score) {
  nlohmann::ordered_json j;
  for (std::size_t n = 1; n <= score.scores.size(); ++n) j["B-" + std::to_string(n)] = score.b(n);
  j["precisions"] = score.precisions;
  j["brevity_penalty"] = score.brevity_penalty;
  j["candidate_length"] = score.candidate_length;
  j["reference_length"] = score.reference_length;
  return j.dump(2) + "\n";
}

std::string retrieval_to_csv(const RetrievalMetrics& metrics) {
  std::ostringstream os;
  os << "metric,value\n";
  for (const auto& [k, v] : metrics.recall_at) os << "R@" << k << ',' << format_double(v) << '\n';
  os << "med_r," << metrics.median_rank << '\n';
  return os.str();
}

std::string retrieval_to_json(const RetrievalMetrics& metrics) {
  nlohmann::ordered_json j;
  for (const auto& [k, v] : metrics.recall_at) j["R@" + std::to_string(k)] = v;
  j["med_r"] = metrics.median_rank;
  j["queries"] = metrics.ranks.size();
  return j.dump(2) + "\n";
}

std::string curve_to_csv(const RecallCurve& curve) {
  std::ostringstream os;
  os << "fraction,mean_matches\n";
  for (const auto& p : curve.points) os << format_double(p.fraction) << ',' << format_double(p.mean_matches) << '\n';
  return os.str();
}

}  // namespace mrnn
