#include "mrnn/training.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "mrnn/parallel.h"

namespace mrnn {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5851f42d4c957f2dULL;

double natural_to_log2(double nats) { return nats / std::numbers::ln2; }

std::vector<const CaptionedExample*> pointers(std::span<const CaptionedExample> examples) {
  std::vector<const CaptionedExample*> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(&ex);
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be a non-negative finite number");
  }
  if (!(lambda_reg >= 0.0)) throw std::invalid_argument("lambda_reg must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  if (clip_norm && !(*clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << "epoch,cost,val_ppl,seconds\n";
  for (const auto& e : epochs) {
    os << e.epoch << ',' << format_double(e.cost) << ',';
    if (!std::isnan(e.validation_ppl)) os << format_double(e.validation_ppl);
    os << ',' << e.seconds << '\n';
  }
  return os.str();
}

CostBreakdown cost_breakdown(const ModelParams& params, std::span<const CaptionedExample> examples,
                             const ImageFeatureStore& features, double lambda_reg, std::size_t threads) {
  if (examples.empty()) throw std::invalid_argument("cost over an empty dataset");
  const bool multimodal = params.config().variant == Variant::kMultimodal;
  std::vector<double> losses(examples.size());
  // Resolve features up front so a missing id is reported deterministically.
  std::vector<std::span<const double>> feats(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (multimodal || features.contains(examples[i].image_id)) {
      feats[i] = features.at(examples[i].image_id);
    }
  }
  parallel_for(examples.size(), threads,
               [&](std::size_t i) { losses[i] = sentence_loss(params, examples[i].tokens, feats[i]); });
  CostBreakdown out;
  double total = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    total += losses[i];
    out.predicted_words += examples[i].tokens.size() + 1;
  }
  out.data_term = natural_to_log2(total) / static_cast<double>(out.predicted_words);
  out.regularizer = lambda_reg * params.squared_norm(/*weights_only=*/true);
  return out;
}

double cost(const ModelParams& params, std::span<const CaptionedExample> examples, const ImageFeatureStore& features,
            double lambda_reg, std::size_t threads) {
  return cost_breakdown(params, examples, features, lambda_reg, threads).total();
}

BatchGradient batch_gradient(const ModelParams& params, std::span<const CaptionedExample* const> batch,
                             const ImageFeatureStore& features, std::size_t threads) {
  BatchGradient out{Gradients(params.config()), 0.0, 0};
  const bool multimodal = params.config().variant == Variant::kMultimodal;
  const std::size_t wave = std::max<std::size_t>(1, std::min(threads, batch.size()));
  std::vector<Gradients> scratch(wave, Gradients(params.config()));
  std::vector<double> losses(wave);

  for (std::size_t begin = 0; begin < batch.size(); begin += wave) {
    const std::size_t n = std::min(wave, batch.size() - begin);
    parallel_for(n, threads, [&](std::size_t k) {
      const CaptionedExample& ex = *batch[begin + k];
      std::span<const double> feature;
      if (multimodal) feature = features.at(ex.image_id);
      scratch[k].set_zero();
      const ForwardTrace trace = forward_sentence(params, ex.tokens, feature);
      losses[k] = accumulate_gradients(params, trace, prediction_targets(ex.tokens), feature, scratch[k]);
    });
    for (std::size_t k = 0; k < n; ++k) {
      out.gradients.add_scaled(scratch[k], 1.0);
      out.loss += losses[k];
      out.predicted_words += batch[begin + k]->tokens.size() + 1;
    }
  }
  return out;
}

double clip_gradients(Gradients& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

void add_regularizer_gradient(const ModelParams& params, double lambda_reg, Gradients& grads) {
  if (lambda_reg == 0.0) return;
  for (std::size_t i = 0; i < params.block_count(); ++i) {
    if (params.block_is_bias(i)) continue;
    axpy(2.0 * lambda_reg, params.block(i).flat(), grads.block(i).flat());
  }
}

double sgd_step(ModelParams& params, std::span<const CaptionedExample* const> batch, const ImageFeatureStore& features,
                const TrainConfig& config) {
  Gradients grads(params.config());
  if (!batch.empty()) {
    BatchGradient bg = batch_gradient(params, batch, features, config.threads);
    grads = std::move(bg.gradients);
    // d/dθ of the per-word log2 cost: natural-log gradient / (ln 2 · N).
    grads.scale(1.0 / (std::numbers::ln2 * static_cast<double>(bg.predicted_words)));
  }
  add_regularizer_gradient(params, config.lambda_reg, grads);
  double norm = std::sqrt(grads.squared_norm());
  if (config.clip_norm) {
    clip_gradients(grads, *config.clip_norm);
    norm = std::min(norm, *config.clip_norm);
  }
  if (!grads.all_finite()) throw TrainingDiverged("non-finite gradient during SGD step");
  params.add_scaled(grads, -config.learning_rate);
  return norm;
}

TrainReport train_params(ModelParams& params, const TrainConfig& config, const DatasetSplit& split,
                         const ImageFeatureStore& features, const EpochCallback& on_epoch) {
  config.validate();
  if (split.train.empty()) throw std::invalid_argument("training split is empty");
  const bool multimodal = params.config().variant == Variant::kMultimodal;
  if (multimodal) {
    validate_examples(split.train, features, params.config().vocab_size);
    validate_examples(split.validation, features, params.config().vocab_size);
  }

  Rng shuffle_rng(config.seed ^ kShuffleStream);
  auto order = pointers(split.train);
  TrainReport report;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - b);
      sgd_step(params, std::span(order).subspan(b, n), features, config);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.cost = cost(params, split.train, features, config.lambda_reg, config.threads);
    if (!std::isfinite(rec.cost)) {
      throw TrainingDiverged("training cost became non-finite at epoch " + std::to_string(epoch) +
                             " (learning_rate=" + format_double(config.learning_rate) + ")");
    }
    rec.validation_ppl = std::numeric_limits<double>::quiet_NaN();
    const bool eval_due = config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
    if (eval_due && !split.validation.empty()) {
      rec.validation_ppl =
          std::exp2(cost_breakdown(params, split.validation, features, 0.0, config.threads).data_term);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return report;
}

TrainResult train(const TrainConfig& config, const ModelConfig& model, const DatasetSplit& split,
                  const ImageFeatureStore& features, const EpochCallback& on_epoch) {
  config.validate();
  model.validate();
  Rng init_rng(config.seed);
  TrainResult result{ModelParams::initialize(model, config.init, init_rng), {}};
  result.report = train_params(result.params, config, split, features, on_epoch);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

struct Evaluation {
  double loss = 0.0;
  std::vector<bool> active;  // ReLU on/off pattern across the sentence
};

Evaluation evaluate(const ModelParams& params, std::span<const TokenId> tokens, std::span<const double> feature) {
  const ForwardTrace trace = forward_sentence(params, tokens, feature);
  Evaluation e;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const auto& s = trace.steps[t];
    const TokenId target = t < tokens.size() ? tokens[t] : Vocabulary::kEnd;
    e.loss -= std::log(s.probs[target]);
    if (params.config().variant == Variant::kMultimodal) {
      for (const double v : s.embed2) e.active.push_back(v > 0.0);
      for (const double v : s.recurrent) e.active.push_back(v > 0.0);
    }
  }
  return e;
}

}  // namespace

GradCheckInstance check_gradients(const ModelParams& params, std::span<const TokenId> tokens,
                                  std::span<const double> image_feature, double step,
                                  const std::optional<std::string>& corrupt_block) {
  const ForwardTrace trace = forward_sentence(params, tokens, image_feature);
  Gradients analytic = backward_sentence(params, trace, prediction_targets(tokens), image_feature).gradients;

  if (corrupt_block) {
    bool found = false;
    for (std::size_t i = 0; i < analytic.block_count(); ++i) {
      if (analytic.block_name(i) != *corrupt_block) continue;
      auto flat = analytic.block(i).flat();
      double scale = 0.0;
      for (const double v : flat) scale = std::max(scale, std::abs(v));
      flat[0] += 1e-2 * std::max(scale, 1e-3);
      found = true;
    }
    if (!found) throw std::invalid_argument("no parameter block named '" + *corrupt_block + "'");
  }

  const std::vector<bool> base_pattern = evaluate(params, tokens, image_feature).active;
  ModelParams probe = params;
  GradCheckInstance out;

  for (std::size_t b = 0; b < probe.block_count(); ++b) {
    auto values = probe.block(b).flat();
    const auto grad = analytic.block(b).flat();
    double max_diff = 0.0;
    double max_scale = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      std::optional<double> numeric;
      // Retry with smaller steps when the perturbation flips a ReLU.
      for (double h = step; h >= step * 1e-2 && !numeric; h *= 0.1) {
        values[i] = original + h;
        const Evaluation plus = evaluate(probe, tokens, image_feature);
        values[i] = original - h;
        const Evaluation minus = evaluate(probe, tokens, image_feature);
        values[i] = original;
        if (plus.active == base_pattern && minus.active == base_pattern) {
          numeric = (plus.loss - minus.loss) / (2.0 * h);
        }
      }
      if (!numeric) {
        ++out.skipped_entries;
        continue;
      }
      max_diff = std::max(max_diff, std::abs(grad[i] - *numeric));
      max_scale = std::max({max_scale, std::abs(grad[i]), std::abs(*numeric)});
    }
    const double rel = max_diff / std::max(max_scale, 1e-7);
    out.blocks.push_back({probe.block_name(b), rel});
    if (rel >= out.max_relative_error) {
      out.max_relative_error = rel;
      out.worst_block = probe.block_name(b);
    }
  }
  return out;
}

GradCheckReport gradient_check(const GradCheckConfig& config) {
  ModelConfig mc;
  mc.variant = config.variant;
  mc.vocab_size = config.vocab_size;
  mc.embed1_dim = config.embed1_dim;
  mc.embed2_dim = config.embed2_dim;
  mc.recurrent_dim = config.recurrent_dim;
  mc.multimodal_dim = config.multimodal_dim;
  mc.image_dim = config.image_dim;
  mc.validate();
  if (config.vocab_size <= 3) throw std::invalid_argument("gradient check needs a vocabulary beyond the reserved tokens");

  GradCheckReport report;
  for (std::size_t s = 0; s < config.samples; ++s) {
    Rng rng(config.seed * 0x9e3779b97f4a7c15ULL + s);
    ModelParams params(mc);
    if (config.init_scale > 0.0) {
      // Biases are randomized too so their gradients are exercised away from zero.
      for (std::size_t b = 0; b < params.block_count(); ++b) {
        for (double& v : params.block(b).flat()) v = rng.uniform(-config.init_scale, config.init_scale);
      }
    }
    std::vector<TokenId> tokens(config.sentence_length);
    for (auto& t : tokens) t = static_cast<TokenId>(2 + rng.below(config.vocab_size - 2));
    Vector feature(config.image_dim);
    for (double& v : feature) v = rng.normal();

    GradCheckInstance inst = check_gradients(params, tokens, feature, config.step, config.corrupt_block);
    report.skipped_entries += inst.skipped_entries;
    if (inst.max_relative_error >= report.max_relative_error) {
      report.max_relative_error = inst.max_relative_error;
      report.worst_block = inst.worst_block;
    }
    report.instances.push_back(std::move(inst));
  }
  report.passed = !report.instances.empty() && report.max_relative_error < config.tolerance;
  return report;
}

}  // namespace mrnn
