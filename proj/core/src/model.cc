#include "mrnn/model.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binary_io.h"

namespace mrnn {
namespace {

using MB = MultimodalBlock;
using BB = BaselineBlock;

constexpr char kCheckpointMagic[4] = {'M', 'R', 'N', 'M'};

std::span<const double> col_vector(const Matrix& m) { return m.flat(); }
std::span<double> col_vector(Matrix& m) { return m.flat(); }

void check_word(const ModelConfig& config, TokenId word) {
  if (word >= config.vocab_size) {
    throw std::out_of_range("word index " + std::to_string(word) + " outside vocabulary of size " +
                            std::to_string(config.vocab_size));
  }
}

void check_size(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw DimensionError(std::string(what) + " has dimension " + std::to_string(got) + ", expected " +
                         std::to_string(want));
  }
}

StepTrace multimodal_step(const ModelParams& p, TokenId word, std::span<const double> r_prev,
                          std::span<const double> projection) {
  const auto& c = p.config();
  check_word(c, word);
  check_size(r_prev.size(), c.recurrent_dim, "previous recurrent state");
  StepTrace s;
  s.input = word;

  const auto e1_row = p.block(MB::kEmbed1).row(word);
  s.embed1.assign(e1_row.begin(), e1_row.end());

  const auto e2_bias = col_vector(p.block(MB::kEmbed2Bias));
  s.embed2.assign(e2_bias.begin(), e2_bias.end());
  matvec_add(p.block(MB::kEmbed2), s.embed1, s.embed2);
  relu_inplace(s.embed2);

  const auto r_bias = col_vector(p.block(MB::kRecurrentBias));
  s.recurrent.assign(r_bias.begin(), r_bias.end());
  matvec_add(p.block(MB::kRecurrent), r_prev, s.recurrent);
  matvec_add(p.block(MB::kWordToRecurrent), s.embed2, s.recurrent);
  relu_inplace(s.recurrent);

  s.multimodal_pre.assign(projection.begin(), projection.end());
  matvec_add(p.block(MB::kMmWord), s.embed2, s.multimodal_pre);
  matvec_add(p.block(MB::kMmRecurrent), s.recurrent, s.multimodal_pre);
  s.multimodal = scaled_tanh(s.multimodal_pre);

  const auto out_bias = col_vector(p.block(MB::kOutputBias));
  s.probs.assign(out_bias.begin(), out_bias.end());
  matvec_add(p.block(MB::kOutput), s.multimodal, s.probs);
  softmax_inplace(s.probs);
  return s;
}

StepTrace baseline_step(const ModelParams& p, TokenId word, std::span<const double> r_prev) {
  const auto& c = p.config();
  check_word(c, word);
  check_size(r_prev.size(), c.recurrent_dim, "previous recurrent state");
  StepTrace s;
  s.input = word;

  const Matrix& u = p.block(BB::kInput);
  const std::size_t m = c.vocab_size;
  const auto bias = col_vector(p.block(BB::kHiddenBias));
  s.recurrent.assign(bias.begin(), bias.end());
  for (std::size_t i = 0; i < u.rows(); ++i) {
    const auto row = u.row(i);
    double acc = row[word];
    for (std::size_t j = 0; j < r_prev.size(); ++j) acc += row[m + j] * r_prev[j];
    s.recurrent[i] += acc;
  }
  sigmoid_inplace(s.recurrent);

  const auto out_bias = col_vector(p.block(BB::kOutputBias));
  s.probs.assign(out_bias.begin(), out_bias.end());
  matvec_add(p.block(BB::kOutput), s.recurrent, s.probs);
  softmax_inplace(s.probs);
  return s;
}

void check_trace(const ForwardTrace& trace, std::span<const TokenId> targets, const ModelConfig& config) {
  if (targets.size() != trace.steps.size()) {
    throw std::invalid_argument("target count " + std::to_string(targets.size()) + " does not match trace length " +
                                std::to_string(trace.steps.size()));
  }
  for (const TokenId t : targets) check_word(config, t);
}

double multimodal_backward(const ModelParams& p, const ForwardTrace& trace, std::span<const TokenId> targets,
                           std::span<const double> image_feature, Gradients& g) {
  const auto& c = p.config();
  check_size(image_feature.size(), c.image_dim, "image feature");
  const Matrix& w_out = p.block(MB::kOutput);
  const Matrix& v_w = p.block(MB::kMmWord);
  const Matrix& v_r = p.block(MB::kMmRecurrent);
  const Matrix& u_r = p.block(MB::kRecurrent);
  const Matrix& w_in = p.block(MB::kWordToRecurrent);
  const Matrix& e2 = p.block(MB::kEmbed2);

  double loss = 0.0;
  Vector d_logits(c.vocab_size);
  Vector d_mm(c.multimodal_dim);
  Vector d_r(c.recurrent_dim);
  Vector d_r_carry(c.recurrent_dim, 0.0);
  Vector d_e2(c.embed2_dim);
  Vector d_e1(c.embed1_dim);
  Vector d_mm_total(c.multimodal_dim, 0.0);  // image pathway and b_m share this sum

  for (std::size_t t = trace.steps.size(); t-- > 0;) {
    const StepTrace& s = trace.steps[t];
    const auto& r_prev = t == 0 ? trace.initial_recurrent : trace.steps[t - 1].recurrent;
    const TokenId target = targets[t];
    loss -= std::log(s.probs[target]);

    // softmax + cross-entropy
    std::copy(s.probs.begin(), s.probs.end(), d_logits.begin());
    d_logits[target] -= 1.0;
    outer_add(d_logits, s.multimodal, g.block(MB::kOutput));
    axpy(1.0, d_logits, col_vector(g.block(MB::kOutputBias)));

    // multimodal layer
    std::fill(d_mm.begin(), d_mm.end(), 0.0);
    matvec_transposed_add(w_out, d_logits, d_mm);
    for (std::size_t i = 0; i < d_mm.size(); ++i) d_mm[i] *= scaled_tanh_grad_from_output(s.multimodal[i]);
    outer_add(d_mm, s.embed2, g.block(MB::kMmWord));
    outer_add(d_mm, s.recurrent, g.block(MB::kMmRecurrent));
    axpy(1.0, d_mm, d_mm_total);

    // recurrent layer: from the multimodal layer and from step t+1
    std::copy(d_r_carry.begin(), d_r_carry.end(), d_r.begin());
    matvec_transposed_add(v_r, d_mm, d_r);
    for (std::size_t i = 0; i < d_r.size(); ++i) {
      if (!(s.recurrent[i] > 0.0)) d_r[i] = 0.0;
    }
    outer_add(d_r, r_prev, g.block(MB::kRecurrent));
    outer_add(d_r, s.embed2, g.block(MB::kWordToRecurrent));
    axpy(1.0, d_r, col_vector(g.block(MB::kRecurrentBias)));
    std::fill(d_r_carry.begin(), d_r_carry.end(), 0.0);
    matvec_transposed_add(u_r, d_r, d_r_carry);

    // word representation feeds both the recurrent and the multimodal layer
    std::fill(d_e2.begin(), d_e2.end(), 0.0);
    matvec_transposed_add(v_w, d_mm, d_e2);
    matvec_transposed_add(w_in, d_r, d_e2);
    for (std::size_t i = 0; i < d_e2.size(); ++i) {
      if (!(s.embed2[i] > 0.0)) d_e2[i] = 0.0;
    }
    outer_add(d_e2, s.embed1, g.block(MB::kEmbed2));
    axpy(1.0, d_e2, col_vector(g.block(MB::kEmbed2Bias)));

    std::fill(d_e1.begin(), d_e1.end(), 0.0);
    matvec_transposed_add(e2, d_e2, d_e1);
    axpy(1.0, d_e1, g.block(MB::kEmbed1).row(s.input));
  }

  outer_add(d_mm_total, image_feature, g.block(MB::kMmImage));
  axpy(1.0, d_mm_total, col_vector(g.block(MB::kMmBias)));
  return loss;
}

double baseline_backward(const ModelParams& p, const ForwardTrace& trace, std::span<const TokenId> targets,
                         Gradients& g) {
  const auto& c = p.config();
  const std::size_t m = c.vocab_size;
  const Matrix& u = p.block(BB::kInput);
  const Matrix& v = p.block(BB::kOutput);
  Matrix& du = g.block(BB::kInput);

  double loss = 0.0;
  Vector d_logits(m);
  Vector d_h(c.recurrent_dim);
  Vector d_r_carry(c.recurrent_dim, 0.0);

  for (std::size_t t = trace.steps.size(); t-- > 0;) {
    const StepTrace& s = trace.steps[t];
    const auto& r_prev = t == 0 ? trace.initial_recurrent : trace.steps[t - 1].recurrent;
    const TokenId target = targets[t];
    loss -= std::log(s.probs[target]);

    std::copy(s.probs.begin(), s.probs.end(), d_logits.begin());
    d_logits[target] -= 1.0;
    outer_add(d_logits, s.recurrent, g.block(BB::kOutput));
    axpy(1.0, d_logits, col_vector(g.block(BB::kOutputBias)));

    std::copy(d_r_carry.begin(), d_r_carry.end(), d_h.begin());
    matvec_transposed_add(v, d_logits, d_h);
    for (std::size_t i = 0; i < d_h.size(); ++i) d_h[i] *= s.recurrent[i] * (1.0 - s.recurrent[i]);

    axpy(1.0, d_h, col_vector(g.block(BB::kHiddenBias)));
    std::fill(d_r_carry.begin(), d_r_carry.end(), 0.0);
    for (std::size_t i = 0; i < d_h.size(); ++i) {
      const double dh = d_h[i];
      if (dh == 0.0) continue;
      auto du_row = du.row(i);
      const auto u_row = u.row(i);
      du_row[s.input] += dh;
      for (std::size_t j = 0; j < r_prev.size(); ++j) {
        du_row[m + j] += dh * r_prev[j];
        d_r_carry[j] += u_row[m + j] * dh;
      }
    }
  }
  return loss;
}

}  // namespace

std::string_view to_string(Variant variant) {
  return variant == Variant::kMultimodal ? "mrnn" : "baseline";
}

Variant parse_variant(std::string_view name) {
  if (name == "mrnn" || name == "m-rnn") return Variant::kMultimodal;
  if (name == "baseline" || name == "rnn") return Variant::kBaseline;
  throw std::invalid_argument("unknown model variant '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  const auto require = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("model dimension ") + name + " must be positive");
  };
  require(vocab_size, "vocab_size");
  require(recurrent_dim, "recurrent_dim");
  if (variant == Variant::kMultimodal) {
    require(embed1_dim, "embed1_dim");
    require(embed2_dim, "embed2_dim");
    require(multimodal_dim, "multimodal_dim");
    require(image_dim, "image_dim");
  }
}

std::vector<BlockInfo> block_layout(const ModelConfig& c) {
  c.validate();
  if (c.variant == Variant::kBaseline) {
    return {
        {"U", c.recurrent_dim, c.vocab_size + c.recurrent_dim, false},
        {"b_r", c.recurrent_dim, 1, true},
        {"V", c.vocab_size, c.recurrent_dim, false},
        {"b_out", c.vocab_size, 1, true},
    };
  }
  return {
      {"E1", c.vocab_size, c.embed1_dim, false},
      {"E2", c.embed2_dim, c.embed1_dim, false},
      {"b_e2", c.embed2_dim, 1, true},
      {"U_r", c.recurrent_dim, c.recurrent_dim, false},
      {"W_in", c.recurrent_dim, c.embed2_dim, false},
      {"b_r", c.recurrent_dim, 1, true},
      {"V_w", c.multimodal_dim, c.embed2_dim, false},
      {"V_r", c.multimodal_dim, c.recurrent_dim, false},
      {"V_I", c.multimodal_dim, c.image_dim, false},
      {"b_m", c.multimodal_dim, 1, true},
      {"W_out", c.vocab_size, c.multimodal_dim, false},
      {"b_out", c.vocab_size, 1, true},
  };
}

ParameterSet::ParameterSet(const ModelConfig& config) : config_(config), layout_(block_layout(config)) {
  blocks_.reserve(layout_.size());
  for (const auto& info : layout_) blocks_.emplace_back(info.rows, info.cols);
}

ParameterSet ParameterSet::initialize(const ModelConfig& config, const InitScheme& scheme, Rng& rng) {
  ParameterSet p(config);
  for (std::size_t i = 0; i < p.blocks_.size(); ++i) {
    const auto& info = p.layout_[i];
    if (info.is_bias) continue;
    p.blocks_[i] = init_matrix(info.rows, info.cols, scheme, rng);
  }
  return p;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.size();
  return n;
}

void ParameterSet::set_zero() {
  for (auto& b : blocks_) b.set_zero();
}

void ParameterSet::add_scaled(const ParameterSet& other, double scale) {
  if (other.blocks_.size() != blocks_.size()) throw DimensionError("parameter sets have different layouts");
  for (std::size_t i = 0; i < blocks_.size(); ++i) axpy(scale, other.blocks_[i].flat(), blocks_[i].flat());
}

void ParameterSet::scale(double factor) {
  for (auto& b : blocks_) {
    for (double& x : b.flat()) x *= factor;
  }
}

double ParameterSet::squared_norm(bool weights_only) const {
  double acc = 0.0;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (weights_only && layout_[i].is_bias) continue;
    acc += mrnn::squared_norm(blocks_[i].flat());
  }
  return acc;
}

bool ParameterSet::all_finite() const {
  return std::all_of(blocks_.begin(), blocks_.end(), [](const Matrix& b) { return b.all_finite(); });
}

Vector image_projection(const ModelParams& params, std::span<const double> image_feature) {
  if (params.config().variant == Variant::kBaseline) return {};
  check_size(image_feature.size(), params.config().image_dim, "image feature");
  const auto bias = col_vector(params.block(MB::kMmBias));
  Vector proj(bias.begin(), bias.end());
  matvec_add(params.block(MB::kMmImage), image_feature, proj);
  return proj;
}

StepTrace forward_step_projected(const ModelParams& params, TokenId word, std::span<const double> r_prev,
                                 std::span<const double> projection) {
  if (params.config().variant == Variant::kBaseline) return baseline_step(params, word, r_prev);
  check_size(projection.size(), params.config().multimodal_dim, "image projection");
  return multimodal_step(params, word, r_prev, projection);
}

StepTrace forward_step(const ModelParams& params, TokenId word, std::span<const double> r_prev,
                       std::span<const double> image_feature) {
  if (params.config().variant == Variant::kBaseline) return baseline_step(params, word, r_prev);
  const Vector proj = image_projection(params, image_feature);
  return multimodal_step(params, word, r_prev, proj);
}

ForwardTrace forward_sentence(const ModelParams& params, std::span<const TokenId> tokens,
                              std::span<const double> image_feature) {
  const auto& c = params.config();
  ForwardTrace trace;
  trace.initial_recurrent.assign(c.recurrent_dim, 0.0);
  const bool multimodal = c.variant == Variant::kMultimodal;
  if (multimodal) trace.image_projection = image_projection(params, image_feature);
  trace.steps.reserve(tokens.size() + 1);
  for (std::size_t t = 0; t <= tokens.size(); ++t) {
    const TokenId input = t == 0 ? Vocabulary::kStart : tokens[t - 1];
    const auto& r_prev = t == 0 ? trace.initial_recurrent : trace.steps.back().recurrent;
    trace.steps.push_back(multimodal ? multimodal_step(params, input, r_prev, trace.image_projection)
                                     : baseline_step(params, input, r_prev));
  }
  return trace;
}

std::vector<TokenId> prediction_targets(std::span<const TokenId> tokens) {
  std::vector<TokenId> targets(tokens.begin(), tokens.end());
  targets.push_back(Vocabulary::kEnd);
  return targets;
}

double accumulate_gradients(const ModelParams& params, const ForwardTrace& trace, std::span<const TokenId> targets,
                            std::span<const double> image_feature, Gradients& grads) {
  check_trace(trace, targets, params.config());
  if (grads.config() != params.config()) throw DimensionError("gradient buffer does not match model layout");
  if (params.config().variant == Variant::kBaseline) return baseline_backward(params, trace, targets, grads);
  return multimodal_backward(params, trace, targets, image_feature, grads);
}

BackwardResult backward_sentence(const ModelParams& params, const ForwardTrace& trace,
                                 std::span<const TokenId> targets, std::span<const double> image_feature) {
  BackwardResult result{Gradients(params.config()), 0.0};
  result.loss = accumulate_gradients(params, trace, targets, image_feature, result.gradients);
  return result;
}

double sentence_loss(const ModelParams& params, std::span<const TokenId> tokens, std::span<const double> image_feature) {
  const ForwardTrace trace = forward_sentence(params, tokens, image_feature);
  double loss = 0.0;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const TokenId target = t < tokens.size() ? tokens[t] : Vocabulary::kEnd;
    loss -= std::log(trace.steps[t].probs[target]);
  }
  return loss;
}

std::vector<std::string> nearest_words(const ModelParams& params, const Vocabulary& vocab, std::string_view token,
                                       std::size_t k) {
  if (params.config().variant != Variant::kMultimodal) {
    throw std::invalid_argument("the baseline model has no word embedding table");
  }
  const auto query = vocab.find(token);
  if (!query) throw std::invalid_argument("unknown token '" + std::string(token) + "'");
  const Matrix& table = params.block(MB::kEmbed1);
  if (table.rows() != vocab.size()) throw DimensionError("vocabulary does not match the model");

  std::vector<std::pair<double, TokenId>> dist;
  for (TokenId i = 0; i < table.rows(); ++i) {
    if (i == *query) continue;
    dist.emplace_back(squared_distance(table.row(*query), table.row(i)), i);
  }
  const std::size_t n = std::min(k, dist.size());
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(n), dist.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(vocab.token(dist[i].second));
  return out;
}

std::string serialize_model(const ModelParams& params) {
  std::ostringstream out(std::ios::binary);
  const auto& c = params.config();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_le<std::uint32_t>(out, kCheckpointVersion);
  detail::write_le<std::uint32_t>(out, c.variant == Variant::kMultimodal ? 0u : 1u);
  for (const std::size_t d : {c.vocab_size, c.embed1_dim, c.embed2_dim, c.recurrent_dim, c.multimodal_dim, c.image_dim}) {
    detail::write_le<std::uint64_t>(out, d);
  }
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.block_count()));
  for (std::size_t i = 0; i < params.block_count(); ++i) {
    const Matrix& b = params.block(i);
    detail::write_le<std::uint64_t>(out, b.rows());
    detail::write_le<std::uint64_t>(out, b.cols());
    for (const double v : b.flat()) detail::write_le<double>(out, v);
  }
  return std::move(out).str();
}

ModelParams deserialize_model(std::string_view bytes) {
  std::istringstream in{std::string(bytes), std::ios::binary};
  const auto truncated = [] { return FormatError(FormatError::Kind::kTruncated, "truncated model checkpoint"); };
  char magic[4] = {};
  if (!in.read(magic, 4)) throw truncated();
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) {
    throw FormatError(FormatError::Kind::kBadMagic, "not a model checkpoint (missing MRNM magic)");
  }
  std::uint32_t version = 0;
  std::uint32_t variant = 0;
  if (!detail::read_le(in, version) || !detail::read_le(in, variant)) throw truncated();
  if (version != kCheckpointVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  if (variant > 1) throw FormatError(FormatError::Kind::kSyntax, "unknown model variant in checkpoint");
  std::uint64_t dims[6] = {};
  for (auto& d : dims) {
    if (!detail::read_le(in, d)) throw truncated();
  }
  ModelConfig c;
  c.variant = variant == 0 ? Variant::kMultimodal : Variant::kBaseline;
  c.vocab_size = dims[0];
  c.embed1_dim = dims[1];
  c.embed2_dim = dims[2];
  c.recurrent_dim = dims[3];
  c.multimodal_dim = dims[4];
  c.image_dim = dims[5];
  ModelParams params(c);
  std::uint32_t count = 0;
  if (!detail::read_le(in, count)) throw truncated();
  if (count != params.block_count()) {
    throw FormatError(FormatError::Kind::kDimensionMismatch, "checkpoint block count does not match its config");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    if (!detail::read_le(in, rows) || !detail::read_le(in, cols)) throw truncated();
    Matrix& b = params.block(i);
    if (rows != b.rows() || cols != b.cols()) {
      throw FormatError(FormatError::Kind::kDimensionMismatch,
                        "checkpoint block " + params.block_name(i) + " has unexpected shape");
    }
    for (double& v : b.flat()) {
      if (!detail::read_le(in, v)) throw truncated();
    }
  }
  return params;
}

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  const std::string bytes = serialize_model(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatError::Kind::kIo, "failed writing " + path.string());
}

ModelParams load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_model(buf.str());
}

}  // namespace mrnn
