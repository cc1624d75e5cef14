#pragma once

// Perplexity cost, mini-batch SGD with full BPTT, and finite-difference
// gradient verification.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrnn/corpus.h"
#include "mrnn/model.h"
#include "mrnn/numerics.h"

namespace mrnn {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 0.05;
  /// Coefficient on the squared L2 norm of the weight matrices (biases excluded).
  double lambda_reg = 1e-5;
  std::size_t batch_size = 16;
  std::size_t epochs = 10;
  /// Global gradient-norm cap; nullopt disables clipping.
  std::optional<double> clip_norm = 5.0;
  std::uint64_t seed = 1;
  /// Validation perplexity every this many epochs (and after the last); 0 disables it.
  std::size_t eval_every = 1;
  std::size_t threads = 1;
  InitScheme init = InitScheme::xavier();

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  /// Full training-set cost after the epoch's updates.
  double cost = 0.0;
  /// NaN when validation was skipped this epoch.
  double validation_ppl = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::filesystem::path checkpoint_path;

  /// "epoch,cost,val_ppl,seconds" header plus one row per epoch.
  std::string to_csv() const;
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

struct CostBreakdown {
  /// (1/N) * sum over predicted positions of -log2 P(target); N counts END predictions.
  double data_term = 0.0;
  double regularizer = 0.0;
  std::size_t predicted_words = 0;

  double total() const { return data_term + regularizer; }
};

/// Per-word log2 cost over `examples` plus lambda_reg * ||W||^2. Throws
/// std::out_of_range for an example whose image has no feature.
CostBreakdown cost_breakdown(const ModelParams& params, std::span<const CaptionedExample> examples,
                             const ImageFeatureStore& features, double lambda_reg, std::size_t threads = 1);
double cost(const ModelParams& params, std::span<const CaptionedExample> examples, const ImageFeatureStore& features,
            double lambda_reg, std::size_t threads = 1);

/// Sum of per-sentence gradients of the natural-log loss over `batch`, reduced in
/// batch order so the result does not depend on `threads`. Returns the summed
/// loss and the number of predicted positions.
struct BatchGradient {
  Gradients gradients;
  double loss = 0.0;
  std::size_t predicted_words = 0;
};
BatchGradient batch_gradient(const ModelParams& params, std::span<const CaptionedExample* const> batch,
                             const ImageFeatureStore& features, std::size_t threads = 1);

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the norm before clipping.
double clip_gradients(Gradients& grads, double max_norm);

/// Adds 2 * lambda * W for every weight matrix W of `params` into `grads`.
void add_regularizer_gradient(const ModelParams& params, double lambda_reg, Gradients& grads);

/// One SGD update on the per-word log2 cost plus regularizer for `batch`. Returns
/// the gradient norm actually applied (post-clip).
double sgd_step(ModelParams& params, std::span<const CaptionedExample* const> batch, const ImageFeatureStore& features,
                const TrainConfig& config);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from a fresh seeded initialization. `model.vocab_size` and
/// `model.image_dim` must already be set. Throws TrainingDiverged if the cost
/// becomes non-finite.
TrainResult train(const TrainConfig& config, const ModelConfig& model, const DatasetSplit& split,
                  const ImageFeatureStore& features, const EpochCallback& on_epoch = {});

/// Continues training existing parameters.
TrainReport train_params(ModelParams& params, const TrainConfig& config, const DatasetSplit& split,
                         const ImageFeatureStore& features, const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckConfig {
  std::size_t samples = 20;
  std::uint64_t seed = 1;
  Variant variant = Variant::kMultimodal;
  std::size_t vocab_size = 11;
  std::size_t embed1_dim = 4;
  std::size_t embed2_dim = 4;
  std::size_t recurrent_dim = 6;
  std::size_t multimodal_dim = 8;
  std::size_t image_dim = 5;
  std::size_t sentence_length = 5;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Weight init half-width for the random instances; 0 gives the all-zero model.
  double init_scale = 0.5;
  /// Negative control: perturbs the analytic gradient of this block before comparing.
  std::optional<std::string> corrupt_block;
};

struct BlockError {
  std::string name;
  double relative_error = 0.0;
};

struct GradCheckInstance {
  std::vector<BlockError> blocks;
  double max_relative_error = 0.0;
  std::string worst_block;
  /// Entries skipped because every step size crossed a ReLU kink.
  std::size_t skipped_entries = 0;
};

struct GradCheckReport {
  std::vector<GradCheckInstance> instances;
  double max_relative_error = 0.0;
  std::string worst_block;
  std::size_t skipped_entries = 0;
  bool passed = false;
};

/// Compares analytic gradients of one sentence's loss to central differences.
/// The error of a parameter block is max|a - n| / max(max|a|, max|n|, 1e-7),
/// a relative error measured against the block's gradient scale.
GradCheckInstance check_gradients(const ModelParams& params, std::span<const TokenId> tokens,
                                  std::span<const double> image_feature, double step,
                                  const std::optional<std::string>& corrupt_block = std::nullopt);

/// Runs check_gradients on `samples` random tiny models and sentences.
GradCheckReport gradient_check(const GradCheckConfig& config);

}  // namespace mrnn
