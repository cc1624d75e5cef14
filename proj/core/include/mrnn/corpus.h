#pragma once

// Vocabulary, caption/feature/split file formats, dataset assembly and the
// synthetic corpus generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mrnn/numerics.h"

namespace mrnn {

using TokenId = std::uint32_t;

/// Any malformed input file. `kind` distinguishes the failure for callers.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { kIo, kBadMagic, kBadVersion, kTruncated, kDimensionMismatch, kSyntax, kDuplicate };

  FormatError(Kind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Lowercases ASCII letters, emits every ASCII punctuation character as its own
/// token and splits on whitespace. Non-ASCII bytes are kept inside words.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr TokenId kStart = 0;
  static constexpr TokenId kEnd = 1;
  static constexpr TokenId kUnknown = 2;
  static constexpr std::string_view kStartToken = "##START##";
  static constexpr std::string_view kEndToken = "##END##";
  static constexpr std::string_view kUnknownToken = "##UNK##";

  /// Vocabulary holding only the three reserved tokens.
  Vocabulary();

  /// Tokens seen at least `min_count` times get an index, ordered by descending
  /// frequency then lexicographically. Throws std::invalid_argument on an empty
  /// caption list.
  static Vocabulary build(std::span<const std::string> captions, std::size_t min_count = 1);
  /// From an explicit token list; the first three entries must be the reserved tokens.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const { return index_to_token_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  TokenId index_of(std::string_view token) const;  // kUnknown for OOV
  const std::string& token(TokenId id) const { return index_to_token_.at(id); }
  const std::vector<std::string>& tokens() const { return index_to_token_; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;
  std::string decode_text(std::span<const TokenId> ids) const;

  /// One token per line, in index order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return index_to_token_ == other.index_to_token_; }

 private:
  void add(std::string token);

  std::unordered_map<std::string, TokenId> token_to_index_;
  std::vector<std::string> index_to_token_;
};

struct CaptionRecord {
  std::string image_id;
  std::string text;

  bool operator==(const CaptionRecord&) const = default;
};

struct CaptionedExample {
  std::string image_id;
  /// Content tokens only; START/END are added by the model.
  std::vector<TokenId> tokens;
  std::string raw_text;
};

/// Fixed per-image feature vectors, keyed and iterated by image id.
class ImageFeatureStore {
 public:
  ImageFeatureStore() = default;
  explicit ImageFeatureStore(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(std::string_view id) const { return entries_.find(std::string(id)) != entries_.end(); }

  /// Throws FormatError(kDimensionMismatch) on a wrong-length vector and
  /// FormatError(kDuplicate) on a repeated id.
  void add(std::string id, Vector feature);
  /// Throws std::out_of_range naming the id if absent.
  const Vector& at(std::string_view id) const;
  std::vector<std::string> ids() const;

  const std::map<std::string, Vector>& entries() const { return entries_; }

  bool operator==(const ImageFeatureStore&) const = default;

 private:
  std::size_t dim_ = 0;
  std::map<std::string, Vector> entries_;
};

/// Binary feature file: "MRNF" | u32 version | u64 count | u32 dim | entries of
/// (u16 id length, id bytes, dim × f32), all little-endian.
inline constexpr std::uint32_t kFeatureFileVersion = 1;

void save_features(const ImageFeatureStore& store, const std::filesystem::path& path);
void save_features_tsv(const ImageFeatureStore& store, const std::filesystem::path& path);
/// Reads either the binary format or `id<TAB>v1<TAB>...<TAB>vD` text lines.
ImageFeatureStore load_features(const std::filesystem::path& path);

std::vector<CaptionRecord> read_captions(const std::filesystem::path& path);
void write_captions(std::span<const CaptionRecord> captions, const std::filesystem::path& path);

enum class SplitName { kTrain, kValidation, kTest };
std::string_view to_string(SplitName split);
SplitName parse_split_name(std::string_view name);

using SplitAssignment = std::map<std::string, SplitName>;

SplitAssignment read_splits(const std::filesystem::path& path);
void write_splits(const SplitAssignment& splits, const std::filesystem::path& path);

struct DatasetSplit {
  std::vector<CaptionedExample> train;
  std::vector<CaptionedExample> validation;
  std::vector<CaptionedExample> test;

  const std::vector<CaptionedExample>& part(SplitName name) const;
};

/// Tokenizes captions into their assigned split. Captions whose image has no
/// split line, or that are empty after tokenization, are rejected with FormatError.
DatasetSplit assemble_dataset(std::span<const CaptionRecord> captions, const SplitAssignment& splits,
                              const Vocabulary& vocab);

/// Captions of the training images only, for vocabulary construction.
std::vector<std::string> training_texts(std::span<const CaptionRecord> captions, const SplitAssignment& splits);

/// Checks every example's image resolves in `store` and every token is < vocab_size.
void validate_examples(std::span<const CaptionedExample> examples, const ImageFeatureStore& store,
                       std::size_t vocab_size);

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Shape of a synthetic captioning corpus. Each image has a latent topic and
/// colour; its feature vector is [topic one-hot | colour one-hot | noise], and
/// each caption reads "a <colour> <noun> <verb> in the <place>" with noun,
/// verb and place drawn from the topic's own word lists.
struct SynthSpec {
  std::size_t n_images = 50;
  std::size_t n_topics = 4;
  std::size_t words_per_slot = 3;
  std::size_t n_colors = 4;
  std::size_t captions_per_image = 1;
  /// Per-image Gaussian dims that make every image distinguishable.
  std::size_t noise_dims = 16;
  double attribute_scale = 1.0;
  double noise_scale = 1.0;
  double validation_fraction = 0.0;
  double test_fraction = 0.0;
  std::size_t min_count = 1;
};

struct SyntheticImage {
  std::size_t topic = 0;
  std::size_t color = 0;
};

struct SyntheticCorpus {
  SynthSpec spec;
  std::vector<CaptionRecord> captions;
  SplitAssignment splits;
  ImageFeatureStore features;
  std::map<std::string, SyntheticImage> latent;
  Vocabulary vocab;
  DatasetSplit dataset;
};

/// Seed-deterministic. Requires spec.n_images >= 2.
SyntheticCorpus generate_synthetic_corpus(Rng& rng, const SynthSpec& spec);

/// Name of the k-th word of `slot` ("noun", "verb", "place") for `topic`.
std::string synthetic_topic_word(std::string_view slot, std::size_t topic, std::size_t k);
std::string synthetic_color_word(std::size_t color);

}  // namespace mrnn
