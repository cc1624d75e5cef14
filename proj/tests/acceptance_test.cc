// Acceptance gate: runs each criterion at its stated tolerance and prints one
// PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>

#include "cli.h"
#include "mrnn/evaluation.h"
#include "mrnn/inference.h"
#include "mrnn/training.h"
#include "oracles.h"
#include "test_util.h"

namespace mrnn {
namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::size_t worker_count() { return std::max(1u, std::min(8u, std::thread::hardware_concurrency())); }

ModelConfig small_model(const SyntheticCorpus& corpus, std::size_t multimodal_dim) {
  ModelConfig mc;
  mc.vocab_size = corpus.vocab.size();
  mc.image_dim = corpus.features.dim();
  mc.embed1_dim = 16;
  mc.embed2_dim = 16;
  mc.recurrent_dim = 32;
  mc.multimodal_dim = multimodal_dim;
  return mc;
}

void gradient_fidelity(Verdict& v) {
  GradCheckConfig gc;
  gc.samples = 20;
  const GradCheckReport r = gradient_check(gc);
  v.detail << "instances=" << r.instances.size() << " max_relative_error=" << r.max_relative_error
           << " worst_block=" << r.worst_block;
  v.require(r.instances.size() >= 20, "at least 20 instances");
  v.require(r.passed && r.max_relative_error < 1e-4, "max relative error < 1e-4");
}

void memorization(Verdict& v) {
  Rng rng(11);
  SynthSpec spec;
  spec.n_images = 8;
  spec.noise_dims = 8;
  const SyntheticCorpus corpus = generate_synthetic_corpus(rng, spec);
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.batch_size = 1;
  tc.epochs = 200;
  tc.eval_every = 0;
  tc.lambda_reg = 0.0;
  const TrainResult res = train(tc, small_model(corpus, 32), corpus.dataset, corpus.features);
  const double ppl = corpus_perplexity(res.params, corpus.dataset.train, corpus.features);
  std::size_t exact = 0;
  for (const auto& ex : corpus.dataset.train) {
    exact += generate(res.params, corpus.features.at(ex.image_id), {}) == ex.tokens ? 1 : 0;
  }
  v.detail << "captions=" << corpus.dataset.train.size() << " train_ppl=" << ppl << " exact=" << exact << "/"
           << corpus.dataset.train.size();
  v.require(corpus.dataset.train.size() == 8, "8 captions");
  v.require(ppl < 1.3, "training perplexity < 1.3");
  v.require(exact == corpus.dataset.train.size(), "every caption reproduced");
}

void uniform_identities(Verdict& v) {
  Rng rng(2);
  SynthSpec spec;
  spec.n_images = 30;
  const SyntheticCorpus corpus = generate_synthetic_corpus(rng, spec);
  const ModelParams zero(small_model(corpus, 32));
  const double m = static_cast<double>(corpus.vocab.size());
  const double ppl = corpus_perplexity(zero, corpus.dataset.train, corpus.features);
  const CostBreakdown c = cost_breakdown(zero, corpus.dataset.train, corpus.features, 0.0);
  v.detail << "M=" << m << " ppl=" << std::setprecision(17) << ppl << " data_term=" << c.data_term
           << " log2M=" << std::log2(m) << std::setprecision(6);
  v.require(std::abs(ppl - m) <= 1e-9, "perplexity == M");
  v.require(std::abs(c.data_term - std::log2(m)) <= 1e-9, "data term == log2 M");
}

void conditioning_gap(Verdict& v) {
  for (const std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    SynthSpec spec;
    spec.n_images = 200;
    spec.validation_fraction = 0.2;
    spec.captions_per_image = 2;
    const SyntheticCorpus corpus = generate_synthetic_corpus(rng, spec);
    double val[2];
    for (int k = 0; k < 2; ++k) {
      ModelConfig mc = small_model(corpus, 32);
      mc.variant = k == 0 ? Variant::kMultimodal : Variant::kBaseline;
      TrainConfig tc;
      tc.learning_rate = 0.2;
      tc.batch_size = 8;
      tc.epochs = 60;
      tc.eval_every = 0;
      tc.seed = seed;
      tc.threads = worker_count();
      const TrainResult res = train(tc, mc, corpus.dataset, corpus.features);
      val[k] = corpus_perplexity(res.params, corpus.dataset.validation, corpus.features, worker_count());
    }
    const double gap = 1.0 - val[0] / val[1];
    v.detail << "seed" << seed << ": mrnn=" << val[0] << " baseline=" << val[1] << " gap=" << 100 * gap << "% ";
    v.require(gap >= 0.10, "seed " + std::to_string(seed) + " relative gap >= 10%");
  }
}

bool matches_oracle(const RetrievalProblem& p, const RetrievalMetrics& m) {
  const std::vector<std::size_t> ks{1, 5, 10};
  const oracle::Metrics o = oracle::retrieval(p.scores, p.groundtruth, ks);
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (m.recall_at.at(ks[i]) != o.recall[i]) return false;
  }
  for (std::size_t q = 0; q < p.scores.rows(); ++q) {
    if (m.ranks[q] != oracle::first_rank(p.scores, q, p.groundtruth[q])) return false;
  }
  return m.median_rank == o.median;
}

void retrieval_round_trip(Verdict& v) {
  Rng rng(5);
  SynthSpec spec;
  spec.n_images = 50;
  spec.words_per_slot = 5;
  const SyntheticCorpus corpus = generate_synthetic_corpus(rng, spec);
  TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.batch_size = 1;
  tc.epochs = 100;
  tc.eval_every = 0;
  tc.lambda_reg = 0.0;
  tc.threads = worker_count();
  const TrainResult res = train(tc, small_model(corpus, 64), corpus.dataset, corpus.features);
  const auto& examples = corpus.dataset.train;

  const RetrievalProblem t2i = text_to_image_problem(res.params, examples, corpus.features, worker_count());
  const RetrievalMetrics mt = retrieval_eval(t2i.scores, t2i.groundtruth);
  SentenceRetrievalOptions o;
  o.norm_images = sample_norm_images(corpus.features, 100, 3);
  o.threads = worker_count();
  const RetrievalProblem i2t = image_to_text_problem(res.params, examples, corpus.features, o);
  const RetrievalMetrics mi = retrieval_eval(i2t.scores, i2t.groundtruth);

  v.detail << "images=" << corpus.features.size() << " t2i R@1=" << mt.recall_at.at(1)
           << " i2t R@1=" << mi.recall_at.at(1);
  v.require(mt.recall_at.at(1) >= 90.0, "image retrieval R@1 >= 90%");
  v.require(mi.recall_at.at(1) >= 90.0, "sentence retrieval R@1 >= 90%");
  v.require(matches_oracle(t2i, mt) && matches_oracle(i2t, mi), "R@K and med r match the brute-force oracle");
}

void metric_oracles(Verdict& v) {
  const auto fixtures = oracle::bleu_fixtures();
  std::vector<std::vector<std::string>> cands;
  std::vector<std::vector<std::vector<std::string>>> refs;
  for (const auto& f : fixtures) {
    cands.push_back(f.candidate);
    refs.push_back(f.references);
  }
  double bleu_err = 0.0;
  for (const bool cumulative : {true, false}) {
    const auto expected = oracle::bleu(fixtures, 4, cumulative);
    const BleuScore s = bleu<std::string>(cands, refs, 4, cumulative ? BleuMode::kCumulative : BleuMode::kOrderOnly);
    for (std::size_t n = 1; n <= 4; ++n) bleu_err = std::max(bleu_err, std::abs(s.b(n) - expected[n - 1]));
  }
  v.require(fixtures.size() == 20, "20 BLEU fixtures");
  v.require(bleu_err <= 1e-9, "BLEU within 1e-9 of the oracle");

  Rng rng(77);
  std::size_t curve_mismatch = 0, curve_cases = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t q = 1 + rng.below(5), c = 1 + rng.below(10);
    Matrix scores(q, c);
    Groundtruth gt(q);
    for (std::size_t i = 0; i < q; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        scores(i, j) = static_cast<double>(rng.below(4));
        if (rng.uniform() < 0.15) scores(i, j) = -std::numeric_limits<double>::infinity();
      }
      gt[i].push_back(rng.below(c));
      if (c > 1 && rng.uniform() < 0.5) {
        const std::size_t extra = rng.below(c);
        if (extra != gt[i][0]) gt[i].push_back(extra);
      }
      // A groundtruth item excluded from every shortlist is not a valid query.
      scores(i, gt[i][0]) = static_cast<double>(rng.below(4));
    }
    const RecallCurve curve = recall_curve(scores, gt, default_curve_fractions());
    for (const auto& point : curve.points) {
      ++curve_cases;
      curve_mismatch += point.mean_matches != oracle::curve_point(scores, gt, point.fraction) ? 1 : 0;
    }
  }
  v.require(curve_mismatch == 0, "recall_curve equals exhaustive computation");

  std::size_t shortlist_mismatch = 0, shortlist_cases = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(9);
    ImageFeatureStore store(3);
    std::vector<std::pair<std::string, Vector>> items;
    for (std::size_t i = 0; i < n; ++i) {
      Vector f(3);
      for (double& x : f) x = static_cast<double>(rng.below(3));
      const std::string id = "img" + std::to_string(i);
      store.add(id, f);
      items.emplace_back(id, f);
    }
    const std::vector<std::string> ids = store.ids();
    for (std::size_t k = 1; k <= n; ++k) {
      const auto lists = shortlist(ids, store, k);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        ++shortlist_cases;
        auto expected = oracle::nearest(items, store.at(ids[i]), k);
        if (std::find(expected.begin(), expected.end(), ids[i]) == expected.end()) expected.back() = ids[i];
        shortlist_mismatch += lists[i] != expected ? 1 : 0;
      }
    }
  }
  v.require(shortlist_mismatch == 0, "shortlist equals exhaustive nearest neighbours");
  v.detail << "bleu_max_error=" << bleu_err << " curve_mismatches=" << curve_mismatch << "/" << curve_cases
           << " shortlist_mismatches=" << shortlist_mismatch << "/" << shortlist_cases;
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mrnn");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

void determinism(Verdict& v) {
  testing::TempDir dir;
  const std::string data = (dir / "data").string();
  v.require(cli({"synth", "--out", data, "--images", "40", "--words-per-slot", "5", "--val-fraction", "0.25",
                 "--test-fraction", "0.25", "--seed", "8"}) == 0,
            "synth");
  testing::write_file(dir / "train.ini",
                      "embed1_dim = 16\nembed2_dim = 16\nrecurrent_dim = 24\nmultimodal_dim = 24\n"
                      "epochs = 5\nbatch_size = 4\nlearning_rate = 0.1\nseed = 3\n");
  const auto train_run = [&](const std::string& out, const std::string& threads) {
    return cli({"train", "--captions", data + "/captions.tsv", "--features", data + "/features.mrnf", "--splits",
                data + "/splits.tsv", "--out", (dir / out).string(), "--config", (dir / "train.ini").string(),
                "--threads", threads, "--quiet"});
  };
  v.require(train_run("run1", "1") == 0 && train_run("run2", "1") == 0 && train_run("run8", "8") == 0, "train");
  const std::string ckpt = testing::read_file(dir / "run1" / "model.mrnm");
  v.require(ckpt == testing::read_file(dir / "run2" / "model.mrnm"), "repeated runs give identical checkpoints");
  v.require(ckpt == testing::read_file(dir / "run8" / "model.mrnm"), "1 and 8 threads give identical checkpoints");

  std::size_t compared = 0;
  const std::vector<std::vector<std::string>> evals{{"eval", "ppl"},
                                                    {"eval", "bleu"},
                                                    {"eval", "retrieval", "t2i"},
                                                    {"eval", "retrieval", "i2t", "--shortlist", "5"},
                                                    {"eval", "curve", "i2t"}};
  for (const auto& head : evals) {
    std::string files[2];
    for (int i = 0; i < 2; ++i) {
      const std::string threads = i == 0 ? "1" : "8";
      const auto csv = dir / ("m" + threads + ".csv");
      auto args = head;
      for (const std::string& a : {std::string("--model"), (dir / "run1").string(), std::string("--captions"),
                                   data + "/captions.tsv", std::string("--features"), data + "/features.mrnf",
                                   std::string("--splits"), data + "/splits.tsv", std::string("--threads"), threads,
                                   std::string("--out-csv"), csv.string()}) {
        args.push_back(a);
      }
      const bool has_json = head[1] != "curve";
      if (has_json) args.insert(args.end(), {"--out-json", (dir / ("m" + threads + ".json")).string()});
      v.require(cli(args) == 0, "eval " + head[1]);
      files[i] = testing::read_file(csv);
      if (has_json) files[i] += testing::read_file(dir / ("m" + threads + ".json"));
    }
    ++compared;
    v.require(!files[0].empty() && files[0] == files[1], head[1] + " metrics identical across thread counts");
  }
  v.detail << "checkpoint_bytes=" << ckpt.size() << " metric_commands_compared=" << compared;
}

}  // namespace
}  // namespace mrnn

int main() {
  struct Criterion {
    int number;
    const char* name;
    double limit_seconds;
    std::function<void(mrnn::Verdict&)> run;
  };
  const Criterion criteria[] = {
      {1, "gradient fidelity", 30, mrnn::gradient_fidelity},
      {2, "memorization", 60, mrnn::memorization},
      {3, "uniform-model identities", 0, mrnn::uniform_identities},
      {4, "image-conditioning gap", 600, mrnn::conditioning_gap},
      {5, "retrieval round-trip", 0, mrnn::retrieval_round_trip},
      {6, "metric oracles", 0, mrnn::metric_oracles},
      {7, "determinism", 0, mrnn::determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    mrnn::Verdict v;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(v);
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_seconds > 0) v.require(seconds < c.limit_seconds, "runtime limit");
    failures += v.pass ? 0 : 1;
    std::cout << "[criterion " << c.number << "] " << (v.pass ? "PASS" : "FAIL") << " " << c.name << ": "
              << v.detail.str() << " (" << std::fixed << std::setprecision(2) << seconds << " s)" << std::defaultfloat
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
