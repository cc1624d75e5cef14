#pragma once

// m-RNN and the image-free Elman baseline: parameters, forward pass, full BPTT
// backward pass, embedding neighbours and checkpoint I/O.
//
// m-RNN, per step t with input word index k and image feature I:
//   e1 = E1[k]                                  (embedding layer 1, lookup)
//   e2 = relu(E2 e1 + b_e2)                     (embedding layer 2, the word representation w(t))
//   r  = relu(U_r r_prev + W_in e2 + b_r)       (recurrent layer)
//   m  = g(V_w e2 + V_r r + V_I I + b_m)        (multimodal layer, g = 1.7159 tanh(2x/3))
//   y  = softmax(W_out m + b_out)
//
// Baseline, with x = [onehot(k) ; r_prev]:
//   r = sigmoid(U x + b_r),  y = softmax(V r + b_out)

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mrnn/corpus.h"
#include "mrnn/numerics.h"

namespace mrnn {

enum class Variant { kMultimodal, kBaseline };

std::string_view to_string(Variant variant);
Variant parse_variant(std::string_view name);

struct ModelConfig {
  Variant variant = Variant::kMultimodal;
  std::size_t vocab_size = 0;
  std::size_t embed1_dim = 128;
  std::size_t embed2_dim = 128;
  std::size_t recurrent_dim = 256;
  std::size_t multimodal_dim = 512;
  /// Unused by the baseline.
  std::size_t image_dim = 0;

  /// Throws std::invalid_argument when a required dimension is zero.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Block indices into ParameterSet::blocks for the m-RNN variant.
struct MultimodalBlock {
  enum : std::size_t {
    kEmbed1,
    kEmbed2,
    kEmbed2Bias,
    kRecurrent,
    kWordToRecurrent,
    kRecurrentBias,
    kMmWord,
    kMmRecurrent,
    kMmImage,
    kMmBias,
    kOutput,
    kOutputBias,
    kCount
  };
};

/// Block indices for the baseline variant.
struct BaselineBlock {
  enum : std::size_t { kInput, kHiddenBias, kOutput, kOutputBias, kCount };
};

struct BlockInfo {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  bool is_bias;
};

std::vector<BlockInfo> block_layout(const ModelConfig& config);

/// All learnable weights of one model. Weights are shared by every timestep.
/// Biases are stored as n×1 matrices. The same type holds gradients.
class ParameterSet {
 public:
  ParameterSet() = default;
  explicit ParameterSet(const ModelConfig& config);  // all zeros

  /// Weights drawn from `scheme`, biases zero.
  static ParameterSet initialize(const ModelConfig& config, const InitScheme& scheme, Rng& rng);

  const ModelConfig& config() const { return config_; }
  std::size_t block_count() const { return blocks_.size(); }
  Matrix& block(std::size_t i) { return blocks_.at(i); }
  const Matrix& block(std::size_t i) const { return blocks_.at(i); }
  const std::string& block_name(std::size_t i) const { return layout_.at(i).name; }
  bool block_is_bias(std::size_t i) const { return layout_.at(i).is_bias; }
  std::size_t parameter_count() const;

  void set_zero();
  /// this += scale * other. Shapes must match.
  void add_scaled(const ParameterSet& other, double scale);
  void scale(double factor);
  /// Sum of squares over all entries, or over weight matrices only.
  double squared_norm(bool weights_only = false) const;
  bool all_finite() const;

  bool operator==(const ParameterSet& other) const { return config_ == other.config_ && blocks_ == other.blocks_; }

 private:
  ModelConfig config_;
  std::vector<BlockInfo> layout_;
  std::vector<Matrix> blocks_;
};

using ModelParams = ParameterSet;
using Gradients = ParameterSet;

/// Activations of one timestep. The baseline fills only input, recurrent and probs.
struct StepTrace {
  TokenId input = 0;
  Vector embed1;
  Vector embed2;
  Vector recurrent;
  Vector multimodal_pre;
  Vector multimodal;
  Vector probs;
};

struct ForwardTrace {
  Vector initial_recurrent;
  /// V_I I + b_m, constant across the sentence. Empty for the baseline.
  Vector image_projection;
  std::vector<StepTrace> steps;
};

/// One step. Throws std::out_of_range for a bad word index and DimensionError
/// for mismatched r_prev / image_feature.
StepTrace forward_step(const ModelParams& params, TokenId word, std::span<const double> r_prev,
                       std::span<const double> image_feature);

/// V_I I + b_m for the m-RNN; empty for the baseline.
Vector image_projection(const ModelParams& params, std::span<const double> image_feature);

/// forward_step with the image term already projected (see image_projection).
StepTrace forward_step_projected(const ModelParams& params, TokenId word, std::span<const double> r_prev,
                                 std::span<const double> projection);

/// Unrolls START, w_1..w_L: step t consumes token t-1 and predicts token t,
/// the last step predicting END. Returns L+1 steps. r(0) is zero.
ForwardTrace forward_sentence(const ModelParams& params, std::span<const TokenId> tokens,
                              std::span<const double> image_feature);

/// tokens followed by END: the prediction targets matching forward_sentence.
std::vector<TokenId> prediction_targets(std::span<const TokenId> tokens);

/// Adds d(loss)/d(theta) into `grads` and returns loss = -sum_t ln y_t[target_t].
/// Full, untruncated BPTT.
double accumulate_gradients(const ModelParams& params, const ForwardTrace& trace, std::span<const TokenId> targets,
                            std::span<const double> image_feature, Gradients& grads);

struct BackwardResult {
  Gradients gradients;
  double loss = 0.0;
};

BackwardResult backward_sentence(const ModelParams& params, const ForwardTrace& trace,
                                 std::span<const TokenId> targets, std::span<const double> image_feature);

/// Natural-log loss of one sentence (including the END prediction), forward only.
double sentence_loss(const ModelParams& params, std::span<const TokenId> tokens, std::span<const double> image_feature);

/// k nearest vocabulary words to `token` by Euclidean distance between rows of
/// the first embedding table, excluding the query; ties go to the lower index.
/// Throws std::invalid_argument for an unknown token or a baseline model.
std::vector<std::string> nearest_words(const ModelParams& params, const Vocabulary& vocab, std::string_view token,
                                       std::size_t k);

// ---------------------------------------------------------------------------
// Checkpoints: "MRNM" | u32 version | u32 variant | u64 × 6 dims | u32 block count |
// per block: u64 rows, u64 cols, rows*cols f64. Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_model(const ModelParams& params);
ModelParams deserialize_model(std::string_view bytes);
void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace mrnn
