#include "mrnn/corpus.h"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "binary_io.h"

namespace mrnn {
namespace {

constexpr char kFeatureMagic[4] = {'M', 'R', 'N', 'F'};

bool is_ascii_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string path_str(const std::filesystem::path& p) { return p.string(); }

std::ifstream open_in(const std::filesystem::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream in(path, mode);
  if (!in) throw FormatError(FormatError::Kind::kIo, "cannot open " + path_str(path));
  return in;
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(path, mode | std::ios::trunc);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path_str(path));
  return out;
}

std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return fields;
}

ImageFeatureStore load_features_binary(std::istream& in, const std::filesystem::path& path) {
  const auto truncated = [&] {
    return FormatError(FormatError::Kind::kTruncated, "truncated feature file " + path_str(path));
  };
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  std::uint32_t dim = 0;
  if (!detail::read_le(in, version)) throw truncated();
  if (version != kFeatureFileVersion) {
    throw FormatError(FormatError::Kind::kBadVersion,
                      "unsupported feature file version " + std::to_string(version) + " in " + path_str(path));
  }
  if (!detail::read_le(in, count) || !detail::read_le(in, dim)) throw truncated();
  if (dim == 0) throw FormatError(FormatError::Kind::kDimensionMismatch, "zero feature dimension in " + path_str(path));
  ImageFeatureStore store(dim);
  for (std::uint64_t e = 0; e < count; ++e) {
    std::uint16_t id_len = 0;
    if (!detail::read_le(in, id_len)) throw truncated();
    std::string id(id_len, '\0');
    if (!in.read(id.data(), id_len)) throw truncated();
    Vector feature(dim);
    for (std::uint32_t d = 0; d < dim; ++d) {
      float v = 0.0f;
      if (!detail::read_le(in, v)) throw truncated();
      feature[d] = v;
    }
    store.add(std::move(id), std::move(feature));
  }
  return store;
}

ImageFeatureStore load_features_tsv(std::istream& in, const std::filesystem::path& path) {
  std::optional<ImageFeatureStore> store;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto view = strip_cr(line);
    if (view.empty()) continue;
    const auto fields = split_tabs(view);
    if (fields.size() < 2) {
      throw FormatError(FormatError::Kind::kSyntax,
                        path_str(path) + ":" + std::to_string(line_no) + ": expected id and values");
    }
    Vector feature;
    feature.reserve(fields.size() - 1);
    for (std::size_t i = 1; i < fields.size(); ++i) {
      // std::from_chars for double is incomplete on some toolchains; strtod on a copy is portable.
      const std::string field(fields[i]);
      char* end = nullptr;
      const double v = std::strtod(field.c_str(), &end);
      if (field.empty() || end != field.c_str() + field.size()) {
        throw FormatError(FormatError::Kind::kSyntax,
                          path_str(path) + ":" + std::to_string(line_no) + ": bad number '" + field + "'");
      }
      feature.push_back(v);
    }
    if (!store) store.emplace(feature.size());
    if (feature.size() != store->dim()) {
      throw FormatError(FormatError::Kind::kDimensionMismatch,
                        path_str(path) + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(store->dim()) + " values, got " + std::to_string(feature.size()));
    }
    store->add(std::string(fields[0]), std::move(feature));
  }
  if (!store) throw FormatError(FormatError::Kind::kTruncated, "empty feature file " + path_str(path));
  return std::move(*store);
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  const auto flush = [&] {
    if (!current.empty()) tokens.push_back(std::move(current));
    current.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_ascii_space(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, ch);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return tokens;
}

Vocabulary::Vocabulary() {
  add(std::string(kStartToken));
  add(std::string(kEndToken));
  add(std::string(kUnknownToken));
}

void Vocabulary::add(std::string token) {
  const auto id = static_cast<TokenId>(index_to_token_.size());
  const auto [it, inserted] = token_to_index_.emplace(token, id);
  if (!inserted) throw std::invalid_argument("duplicate vocabulary token '" + token + "'");
  index_to_token_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(std::span<const std::string> captions, std::size_t min_count) {
  if (captions.empty()) throw std::invalid_argument("cannot build a vocabulary from zero captions");
  std::map<std::string, std::size_t> counts;
  for (const auto& caption : captions) {
    for (auto& token : tokenize(caption)) ++counts[std::move(token)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [token, count] : counts) {
    if (count >= std::max<std::size_t>(min_count, 1)) kept.emplace_back(token, count);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  for (auto& [token, count] : kept) {
    if (vocab.find(token)) continue;  // a caption literally containing a reserved token
    vocab.add(std::move(token));
  }
  return vocab;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 3 || tokens[kStart] != kStartToken || tokens[kEnd] != kEndToken ||
      tokens[kUnknown] != kUnknownToken) {
    throw FormatError(FormatError::Kind::kSyntax, "vocabulary must begin with the reserved tokens");
  }
  Vocabulary vocab;
  for (std::size_t i = 3; i < tokens.size(); ++i) {
    try {
      vocab.add(std::move(tokens[i]));
    } catch (const std::invalid_argument& e) {
      throw FormatError(FormatError::Kind::kDuplicate, e.what());
    }
  }
  return vocab;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  const auto it = token_to_index_.find(std::string(token));
  if (it == token_to_index_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::index_of(std::string_view token) const { return find(token).value_or(kUnknown); }

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& token : tokenize(text)) ids.push_back(index_of(token));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (const TokenId id : ids) out.push_back(token(id));
  return out;
}

std::string Vocabulary::decode_text(std::span<const TokenId> ids) const {
  std::string out;
  for (const TokenId id : ids) {
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  auto out = open_out(path);
  for (const auto& token : index_to_token_) out << token << '\n';
  if (!out) throw FormatError(FormatError::Kind::kIo, "failed writing " + path_str(path));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.emplace_back(strip_cr(line));
  return from_tokens(std::move(tokens));
}

void ImageFeatureStore::add(std::string id, Vector feature) {
  if (entries_.empty() && dim_ == 0) dim_ = feature.size();
  if (feature.size() != dim_) {
    throw FormatError(FormatError::Kind::kDimensionMismatch, "feature for '" + id + "' has dimension " +
                                                                 std::to_string(feature.size()) + ", expected " +
                                                                 std::to_string(dim_));
  }
  if (id.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw FormatError(FormatError::Kind::kSyntax, "image id longer than 65535 bytes");
  }
  const auto [it, inserted] = entries_.emplace(id, std::move(feature));
  if (!inserted) throw FormatError(FormatError::Kind::kDuplicate, "duplicate image id '" + id + "'");
}

const Vector& ImageFeatureStore::at(std::string_view id) const {
  const auto it = entries_.find(std::string(id));
  if (it == entries_.end()) throw std::out_of_range("unknown image id '" + std::string(id) + "'");
  return it->second;
}

std::vector<std::string> ImageFeatureStore::ids() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [id, feature] : entries_) out.push_back(id);
  return out;
}

void save_features(const ImageFeatureStore& store, const std::filesystem::path& path) {
  auto out = open_out(path, std::ios::binary);
  out.write(kFeatureMagic, sizeof(kFeatureMagic));
  detail::write_le<std::uint32_t>(out, kFeatureFileVersion);
  detail::write_le<std::uint64_t>(out, store.size());
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
  for (const auto& [id, feature] : store.entries()) {
    detail::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out.write(id.data(), static_cast<std::streamsize>(id.size()));
    for (const double v : feature) detail::write_le<float>(out, static_cast<float>(v));
  }
  if (!out) throw FormatError(FormatError::Kind::kIo, "failed writing " + path_str(path));
}

void save_features_tsv(const ImageFeatureStore& store, const std::filesystem::path& path) {
  auto out = open_out(path);
  out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& [id, feature] : store.entries()) {
    out << id;
    for (const double v : feature) out << '\t' << v;
    out << '\n';
  }
  if (!out) throw FormatError(FormatError::Kind::kIo, "failed writing " + path_str(path));
}

ImageFeatureStore load_features(const std::filesystem::path& path) {
  auto in = open_in(path, std::ios::binary);
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() == 4 && std::equal(magic.begin(), magic.end(), kFeatureMagic)) {
    return load_features_binary(in, path);
  }
  // Text files must start with a printable id; anything else is a bad binary header.
  const bool looks_textual = in.gcount() > 0 && std::all_of(magic.begin(), magic.begin() + in.gcount(), [](char c) {
                               const auto u = static_cast<unsigned char>(c);
                               return u >= 0x20 || u == '\t' || u == '\n' || u == '\r';
                             });
  if (!looks_textual) {
    throw FormatError(FormatError::Kind::kBadMagic, "feature file " + path_str(path) + " has no MRNF magic");
  }
  in.clear();
  in.seekg(0);
  return load_features_tsv(in, path);
}

std::vector<CaptionRecord> read_captions(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<CaptionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto view = strip_cr(line);
    if (view.empty()) continue;
    const auto tab = view.find('\t');
    if (tab == std::string_view::npos || tab == 0) {
      throw FormatError(FormatError::Kind::kSyntax,
                        path_str(path) + ":" + std::to_string(line_no) + ": expected image_id<TAB>caption");
    }
    out.push_back({std::string(view.substr(0, tab)), std::string(view.substr(tab + 1))});
  }
  return out;
}

void write_captions(std::span<const CaptionRecord> captions, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& c : captions) out << c.image_id << '\t' << c.text << '\n';
  if (!out) throw FormatError(FormatError::Kind::kIo, "failed writing " + path_str(path));
}

std::string_view to_string(SplitName split) {
  switch (split) {
    case SplitName::kTrain:
      return "train";
    case SplitName::kValidation:
      return "val";
    case SplitName::kTest:
      return "test";
  }
  return "train";
}

SplitName parse_split_name(std::string_view name) {
  if (name == "train") return SplitName::kTrain;
  if (name == "val") return SplitName::kValidation;
  if (name == "test") return SplitName::kTest;
  throw FormatError(FormatError::Kind::kSyntax, "unknown split '" + std::string(name) + "'");
}

SplitAssignment read_splits(const std::filesystem::path& path) {
  auto in = open_in(path);
  SplitAssignment out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto view = strip_cr(line);
    if (view.empty()) continue;
    const auto fields = split_tabs(view);
    if (fields.size() != 2 || fields[0].empty()) {
      throw FormatError(FormatError::Kind::kSyntax,
                        path_str(path) + ":" + std::to_string(line_no) + ": expected image_id<TAB>split");
    }
    const SplitName split = parse_split_name(fields[1]);
    const auto [it, inserted] = out.emplace(std::string(fields[0]), split);
    if (!inserted && it->second != split) {
      throw FormatError(FormatError::Kind::kDuplicate, "image '" + it->first + "' assigned to two splits");
    }
  }
  return out;
}

void write_splits(const SplitAssignment& splits, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (const auto& [id, split] : splits) out << id << '\t' << to_string(split) << '\n';
  if (!out) throw FormatError(FormatError::Kind::kIo, "failed writing " + path_str(path));
}

const std::vector<CaptionedExample>& DatasetSplit::part(SplitName name) const {
  switch (name) {
    case SplitName::kTrain:
      return train;
    case SplitName::kValidation:
      return validation;
    case SplitName::kTest:
      return test;
  }
  return train;
}

DatasetSplit assemble_dataset(std::span<const CaptionRecord> captions, const SplitAssignment& splits,
                              const Vocabulary& vocab) {
  DatasetSplit out;
  for (const auto& c : captions) {
    const auto it = splits.find(c.image_id);
    if (it == splits.end()) {
      throw FormatError(FormatError::Kind::kSyntax, "caption image '" + c.image_id + "' has no split assignment");
    }
    CaptionedExample ex{c.image_id, vocab.encode(c.text), c.text};
    if (ex.tokens.empty()) {
      throw FormatError(FormatError::Kind::kSyntax, "empty caption for image '" + c.image_id + "'");
    }
    switch (it->second) {
      case SplitName::kTrain:
        out.train.push_back(std::move(ex));
        break;
      case SplitName::kValidation:
        out.validation.push_back(std::move(ex));
        break;
      case SplitName::kTest:
        out.test.push_back(std::move(ex));
        break;
    }
  }
  return out;
}

std::vector<std::string> training_texts(std::span<const CaptionRecord> captions, const SplitAssignment& splits) {
  std::vector<std::string> out;
  for (const auto& c : captions) {
    const auto it = splits.find(c.image_id);
    if (it != splits.end() && it->second == SplitName::kTrain) out.push_back(c.text);
  }
  return out;
}

void validate_examples(std::span<const CaptionedExample> examples, const ImageFeatureStore& store,
                       std::size_t vocab_size) {
  for (const auto& ex : examples) {
    if (!store.contains(ex.image_id)) {
      throw std::out_of_range("no image feature for '" + ex.image_id + "'");
    }
    for (const TokenId t : ex.tokens) {
      if (t >= vocab_size) {
        throw std::out_of_range("token index " + std::to_string(t) + " outside vocabulary of size " +
                                std::to_string(vocab_size));
      }
    }
  }
}

std::string synthetic_topic_word(std::string_view slot, std::size_t topic, std::size_t k) {
  return "t" + std::to_string(topic) + std::string(slot) + std::to_string(k);
}

std::string synthetic_color_word(std::size_t color) {
  static constexpr std::array<std::string_view, 8> kColors = {"red",   "blue",  "green", "yellow",
                                                              "white", "black", "brown", "gray"};
  if (color < kColors.size()) return std::string(kColors[color]);
  return "color" + std::to_string(color);
}

SyntheticCorpus generate_synthetic_corpus(Rng& rng, const SynthSpec& spec) {
  if (spec.n_images < 2) throw std::invalid_argument("synthetic corpus needs at least two images");
  if (spec.n_topics == 0 || spec.n_colors == 0 || spec.words_per_slot == 0 || spec.captions_per_image == 0) {
    throw std::invalid_argument("synthetic corpus spec has an empty word list");
  }
  if (spec.validation_fraction < 0 || spec.test_fraction < 0 || spec.validation_fraction + spec.test_fraction >= 1.0) {
    throw std::invalid_argument("split fractions must be non-negative and sum below 1");
  }

  SyntheticCorpus corpus;
  corpus.spec = spec;
  const std::size_t dim = spec.n_topics + spec.n_colors + spec.noise_dims;
  corpus.features = ImageFeatureStore(dim);

  const std::size_t width = std::to_string(spec.n_images - 1).size();
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < spec.n_images; ++i) {
    std::string num = std::to_string(i);
    ids.push_back("img" + std::string(std::max<std::size_t>(width, 4) - num.size(), '0') + num);
  }

  for (const auto& id : ids) {
    SyntheticImage latent{rng.below(spec.n_topics), rng.below(spec.n_colors)};
    Vector feature(dim, 0.0);
    feature[latent.topic] = spec.attribute_scale;
    feature[spec.n_topics + latent.color] = spec.attribute_scale;
    for (std::size_t d = 0; d < spec.noise_dims; ++d) {
      feature[spec.n_topics + spec.n_colors + d] = spec.noise_scale * rng.normal();
    }
    // The binary format stores f32; keep the in-memory store exactly representable.
    for (double& v : feature) v = static_cast<float>(v);
    corpus.features.add(id, std::move(feature));

    for (std::size_t c = 0; c < spec.captions_per_image; ++c) {
      const auto noun = synthetic_topic_word("noun", latent.topic, rng.below(spec.words_per_slot));
      const auto verb = synthetic_topic_word("verb", latent.topic, rng.below(spec.words_per_slot));
      const auto place = synthetic_topic_word("place", latent.topic, rng.below(spec.words_per_slot));
      corpus.captions.push_back(
          {id, "a " + synthetic_color_word(latent.color) + " " + noun + " " + verb + " in the " + place});
    }
    corpus.latent.emplace(id, latent);
  }

  auto order = ids;
  rng.shuffle(order.begin(), order.end());
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(spec.n_images)));
  const auto n_val =
      static_cast<std::size_t>(std::llround(spec.validation_fraction * static_cast<double>(spec.n_images)));
  for (std::size_t i = 0; i < order.size(); ++i) {
    SplitName split = SplitName::kTrain;
    if (i < n_test) {
      split = SplitName::kTest;
    } else if (i < n_test + n_val) {
      split = SplitName::kValidation;
    }
    corpus.splits.emplace(order[i], split);
  }

  corpus.vocab = Vocabulary::build(training_texts(corpus.captions, corpus.splits), spec.min_count);
  corpus.dataset = assemble_dataset(corpus.captions, corpus.splits, corpus.vocab);
  return corpus;
}

}  // namespace mrnn
