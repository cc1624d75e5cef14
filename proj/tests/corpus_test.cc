#include "mrnn/corpus.h"

#include <gtest/gtest.h>

#include <set>

#include "test_util.h"

namespace mrnn {
namespace {

using mrnn::testing::TempDir;

FormatError::Kind load_error_kind(const std::filesystem::path& path) {
  try {
    load_features(path);
  } catch (const FormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a FormatError";
  return FormatError::Kind::kIo;
}

TEST(Tokenize, LowercasesAndSplitsPunctuation) {
  EXPECT_EQ(tokenize("A Dog, running!"), (std::vector<std::string>{"a", "dog", ",", "running", "!"}));
  EXPECT_TRUE(tokenize("   ").empty());
  EXPECT_EQ(tokenize("two\tspaces  here"), (std::vector<std::string>{"two", "spaces", "here"}));
}

TEST(Vocabulary, ReservedTokensAtFixedIndices) {
  const Vocabulary v;
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.token(Vocabulary::kStart), "##START##");
  EXPECT_EQ(v.token(Vocabulary::kEnd), "##END##");
  EXPECT_EQ(v.token(Vocabulary::kUnknown), "##UNK##");
}

TEST(Vocabulary, CountsUniqueTokens) {
  const std::vector<std::string> captions{"a b", "a c"};
  EXPECT_EQ(Vocabulary::build(captions, 1).size(), 6u);
}

TEST(Vocabulary, MinCountKeepsFrequentToken) {
  const std::vector<std::string> captions{"a a a"};
  const Vocabulary v = Vocabulary::build(captions, 2);
  EXPECT_EQ(v.size(), 4u);
  EXPECT_TRUE(v.find("a").has_value());
}

TEST(Vocabulary, MinCountDropsRareTokens) {
  const std::vector<std::string> captions{"a a b"};
  const Vocabulary v = Vocabulary::build(captions, 2);
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.index_of("b"), Vocabulary::kUnknown);
}

TEST(Vocabulary, EmptyCaptionListThrows) {
  EXPECT_THROW(Vocabulary::build(std::vector<std::string>{}, 1), std::invalid_argument);
}

TEST(Vocabulary, OrderedByFrequencyThenLexically) {
  const std::vector<std::string> captions{"c b b a", "c b"};
  const Vocabulary v = Vocabulary::build(captions);
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"##START##", "##END##", "##UNK##", "b", "c", "a"}));
}

TEST(Vocabulary, Bijection) {
  const std::vector<std::string> captions{"the cat sat on the mat", "a dog ran in the park ."};
  const Vocabulary v = Vocabulary::build(captions);
  for (TokenId i = 0; i < v.size(); ++i) EXPECT_EQ(v.index_of(v.token(i)), i);
}

TEST(Vocabulary, EncodeDecode) {
  const std::vector<std::string> captions{"the cat sat"};
  const Vocabulary v = Vocabulary::build(captions);
  const auto ids = v.encode("The cat sat");
  EXPECT_EQ(v.decode(ids), (std::vector<std::string>{"the", "cat", "sat"}));
  EXPECT_TRUE(v.encode("").empty());
  const auto oov = v.encode("the dog sat");
  EXPECT_EQ(oov[1], Vocabulary::kUnknown);
  EXPECT_EQ(v.decode_text(oov), "the ##UNK## sat");
}

TEST(Vocabulary, SaveLoadRoundTrip) {
  TempDir dir;
  const std::vector<std::string> captions{"x y z y"};
  const Vocabulary v = Vocabulary::build(captions);
  v.save(dir / "vocab.txt");
  EXPECT_EQ(Vocabulary::load(dir / "vocab.txt"), v);
}

TEST(Features, BinaryRoundTripIsBitExact) {
  TempDir dir;
  ImageFeatureStore store(4);
  store.add("img0", {0.5, -1.25, 3.0, 0.0});
  store.add("img1", {static_cast<float>(0.1), 2.0, -0.0, 1e-30f});
  save_features(store, dir / "f.bin");
  const ImageFeatureStore loaded = load_features(dir / "f.bin");
  EXPECT_EQ(loaded.size(), 2u);
  EXPECT_EQ(loaded.dim(), 4u);
  EXPECT_EQ(loaded, store);
  save_features(loaded, dir / "g.bin");
  EXPECT_EQ(mrnn::testing::read_file(dir / "f.bin"), mrnn::testing::read_file(dir / "g.bin"));
}

TEST(Features, TsvRoundTrip) {
  TempDir dir;
  ImageFeatureStore store(3);
  store.add("a", {1.5, 2.0, -3.25});
  store.add("b", {0.0, 0.125, 7.0});
  save_features_tsv(store, dir / "f.tsv");
  EXPECT_EQ(load_features(dir / "f.tsv"), store);
}

TEST(Features, TsvWrongRowLengthThrows) {
  TempDir dir;
  mrnn::testing::write_file(dir / "f.tsv", "a\t1\t2\t3\nb\t1\t2\n");
  EXPECT_EQ(load_error_kind(dir / "f.tsv"), FormatError::Kind::kDimensionMismatch);
}

TEST(Features, DistinctErrors) {
  TempDir dir;
  ImageFeatureStore store(2);
  store.add("x", {1, 2});
  save_features(store, dir / "ok.bin");
  const std::string bytes = mrnn::testing::read_file(dir / "ok.bin");

  std::string bad_magic = bytes;
  bad_magic[0] = '\x01';
  mrnn::testing::write_file(dir / "magic.bin", bad_magic);
  EXPECT_EQ(load_error_kind(dir / "magic.bin"), FormatError::Kind::kBadMagic);

  mrnn::testing::write_file(dir / "short.bin", bytes.substr(0, bytes.size() - 3));
  EXPECT_EQ(load_error_kind(dir / "short.bin"), FormatError::Kind::kTruncated);

  std::string bad_version = bytes;
  bad_version[4] = 9;
  mrnn::testing::write_file(dir / "version.bin", bad_version);
  EXPECT_EQ(load_error_kind(dir / "version.bin"), FormatError::Kind::kBadVersion);

  EXPECT_EQ(load_error_kind(dir / "missing.bin"), FormatError::Kind::kIo);
}

TEST(Features, StoreRejectsWrongDimensionAndDuplicates) {
  ImageFeatureStore store(2);
  store.add("a", {1, 2});
  try {
    store.add("b", {1, 2, 3});
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::kDimensionMismatch);
  }
  try {
    store.add("a", {3, 4});
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::kDuplicate);
  }
  EXPECT_THROW(store.at("zzz"), std::out_of_range);
}

TEST(CaptionsAndSplits, RoundTripAndAssembly) {
  TempDir dir;
  const std::vector<CaptionRecord> captions{{"i1", "a red ball"}, {"i1", "red ball ."}, {"i2", "a cat"},
                                            {"i3", "the dog"}};
  const SplitAssignment splits{{"i1", SplitName::kTrain}, {"i2", SplitName::kValidation}, {"i3", SplitName::kTest}};
  write_captions(captions, dir / "c.tsv");
  write_splits(splits, dir / "s.tsv");
  EXPECT_EQ(read_captions(dir / "c.tsv"), captions);
  EXPECT_EQ(read_splits(dir / "s.tsv"), splits);

  const auto texts = training_texts(captions, splits);
  EXPECT_EQ(texts.size(), 2u);
  const Vocabulary vocab = Vocabulary::build(texts);
  const DatasetSplit ds = assemble_dataset(captions, splits, vocab);
  EXPECT_EQ(ds.train.size(), 2u);
  EXPECT_EQ(ds.validation.size(), 1u);
  EXPECT_EQ(ds.test.size(), 1u);
  EXPECT_EQ(ds.validation[0].tokens[1], Vocabulary::kUnknown);
  EXPECT_EQ(ds.part(SplitName::kTest)[0].image_id, "i3");
}

TEST(CaptionsAndSplits, Errors) {
  TempDir dir;
  mrnn::testing::write_file(dir / "c.tsv", "no tab here\n");
  EXPECT_THROW(read_captions(dir / "c.tsv"), FormatError);
  mrnn::testing::write_file(dir / "s.tsv", "i1\ttrain\ni1\ttest\n");
  EXPECT_THROW(read_splits(dir / "s.tsv"), FormatError);
  mrnn::testing::write_file(dir / "s2.tsv", "i1\tdev\n");
  EXPECT_THROW(read_splits(dir / "s2.tsv"), FormatError);
  EXPECT_EQ(parse_split_name("val"), SplitName::kValidation);
}

TEST(Validation, MissingFeatureOrBadIndex) {
  ImageFeatureStore store(1);
  store.add("a", {1});
  const std::vector<CaptionedExample> missing{{"b", {3}, "x"}};
  EXPECT_THROW(validate_examples(missing, store, 5), std::out_of_range);
  const std::vector<CaptionedExample> bad_index{{"a", {7}, "x"}};
  EXPECT_THROW(validate_examples(bad_index, store, 5), std::out_of_range);
}

TEST(Synthetic, SameSeedSameCorpus) {
  Rng a(7), b(7);
  const SynthSpec spec;
  const auto x = generate_synthetic_corpus(a, spec);
  const auto y = generate_synthetic_corpus(b, spec);
  EXPECT_EQ(x.captions, y.captions);
  EXPECT_EQ(x.features, y.features);
  EXPECT_EQ(x.splits, y.splits);
  EXPECT_EQ(x.vocab, y.vocab);
}

TEST(Synthetic, TwoImagesHaveDistinctFeatures) {
  Rng rng(1);
  SynthSpec spec;
  spec.n_images = 2;
  const auto corpus = generate_synthetic_corpus(rng, spec);
  const auto ids = corpus.features.ids();
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_NE(corpus.features.at(ids[0]), corpus.features.at(ids[1]));
  spec.n_images = 1;
  EXPECT_THROW(generate_synthetic_corpus(rng, spec), std::invalid_argument);
}

TEST(Synthetic, SplitFractionsAndDisjointImages) {
  Rng rng(3);
  SynthSpec spec;
  spec.n_images = 100;
  spec.captions_per_image = 2;
  spec.validation_fraction = 0.2;
  spec.test_fraction = 0.1;
  const auto corpus = generate_synthetic_corpus(rng, spec);
  EXPECT_EQ(corpus.dataset.train.size(), 140u);
  EXPECT_EQ(corpus.dataset.validation.size(), 40u);
  EXPECT_EQ(corpus.dataset.test.size(), 20u);
  std::set<std::string> train_ids;
  for (const auto& ex : corpus.dataset.train) train_ids.insert(ex.image_id);
  for (const auto& ex : corpus.dataset.validation) EXPECT_FALSE(train_ids.count(ex.image_id));
  for (const auto& ex : corpus.dataset.test) EXPECT_FALSE(train_ids.count(ex.image_id));
}

TEST(Synthetic, TopicWordsDependOnFeature) {
  // Count-based oracle: how often a topic's noun words appear in captions of
  // images whose topic block is hot, versus captions of all other images.
  Rng rng(21);
  SynthSpec spec;
  spec.n_images = 400;
  const auto corpus = generate_synthetic_corpus(rng, spec);
  for (std::size_t topic = 0; topic < spec.n_topics; ++topic) {
    std::size_t matching_hits = 0, matching_total = 0, other_hits = 0, other_total = 0;
    for (const auto& cap : corpus.captions) {
      const Vector& f = corpus.features.at(cap.image_id);
      const bool hot = f[topic] == spec.attribute_scale;
      bool has_word = false;
      for (const auto& tok : tokenize(cap.text)) {
        for (std::size_t k = 0; k < spec.words_per_slot; ++k) has_word |= tok == synthetic_topic_word("noun", topic, k);
      }
      (hot ? matching_hits : other_hits) += has_word;
      (hot ? matching_total : other_total) += 1;
    }
    ASSERT_GT(matching_total, 0u);
    const double p_match = static_cast<double>(matching_hits) / static_cast<double>(matching_total);
    const double p_other = static_cast<double>(other_hits) / static_cast<double>(other_total);
    EXPECT_EQ(p_match, 1.0);
    EXPECT_EQ(p_other, 0.0);
  }
}

TEST(Synthetic, ColourWordMatchesColourBlock) {
  Rng rng(8);
  const auto corpus = generate_synthetic_corpus(rng, SynthSpec{});
  for (const auto& cap : corpus.captions) {
    const auto& latent = corpus.latent.at(cap.image_id);
    EXPECT_EQ(tokenize(cap.text)[1], synthetic_color_word(latent.color));
    EXPECT_EQ(corpus.features.at(cap.image_id)[corpus.spec.n_topics + latent.color], 1.0);
  }
}

}  // namespace
}  // namespace mrnn
