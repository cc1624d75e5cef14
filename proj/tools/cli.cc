#include "cli.h"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mrnn/corpus.h"
#include "mrnn/evaluation.h"
#include "mrnn/inference.h"
#include "mrnn/model.h"
#include "mrnn/parallel.h"
#include "mrnn/training.h"

namespace mrnn::cli {
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kCheckpointFile = "model.mrnm";
constexpr const char* kVocabFile = "model.vocab";
constexpr const char* kReportFile = "report.csv";
constexpr const char* kManifestFile = "manifest.json";

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError("io", "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw CliError("io", "failed writing " + path.string());
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

// ---------------------------------------------------------------------------
// Option bundles

struct ModelInputs {
  std::string model_dir;
  std::string captions;
  std::string features;
  std::string splits;
  std::string split = "test";
};

void add_model_inputs(CLI::App* app, ModelInputs& in, bool need_captions) {
  app->add_option("--model", in.model_dir, "Directory holding model.mrnm and model.vocab")->required();
  app->add_option("--features", in.features, "Feature file (MRNF binary or TSV)")->required();
  if (need_captions) {
    app->add_option("--captions", in.captions, "Caption file: image_id<TAB>text")->required();
    app->add_option("--splits", in.splits, "Split file: image_id<TAB>train|val|test")->required();
    app->add_option("--split", in.split, "Which split to evaluate")->check(CLI::IsMember({"train", "val", "test"}));
  }
}

struct LoadedModel {
  ModelParams params;
  Vocabulary vocab;
};

LoadedModel load_model_dir(const std::string& dir) {
  return {load_model(fs::path(dir) / kCheckpointFile), Vocabulary::load(fs::path(dir) / kVocabFile)};
}

struct EvalData {
  LoadedModel model;
  ImageFeatureStore features;
  DatasetSplit dataset;
  SplitAssignment splits;
  std::vector<CaptionedExample> examples;
};

EvalData load_eval_data(const ModelInputs& in) {
  EvalData d{load_model_dir(in.model_dir), load_features(in.features), {}, {}, {}};
  const auto captions = read_captions(in.captions);
  d.splits = read_splits(in.splits);
  d.dataset = assemble_dataset(captions, d.splits, d.model.vocab);
  d.examples = d.dataset.part(parse_split_name(in.split));
  if (d.examples.empty()) throw CliError("invalid", "split '" + in.split + "' has no captions");
  if (d.model.params.config().variant == Variant::kMultimodal) {
    if (d.features.dim() != d.model.params.config().image_dim) {
      throw CliError("invalid", "feature dimension " + std::to_string(d.features.dim()) + " does not match model (" +
                                    std::to_string(d.model.params.config().image_dim) + ")");
    }
  }
  validate_examples(d.examples, d.features, d.model.params.config().vocab_size);
  return d;
}

struct MetricOutputs {
  std::string csv;
  std::string json;
};

void add_metric_outputs(CLI::App* app, MetricOutputs& out) {
  app->add_option("--out-csv", out.csv, "Write metrics as CSV");
  app->add_option("--out-json", out.json, "Write metrics as JSON");
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string out_dir;
  SynthSpec spec;
  std::uint64_t seed = 1;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  Rng rng(a.seed);
  const SyntheticCorpus corpus = generate_synthetic_corpus(rng, a.spec);
  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  write_captions(corpus.captions, dir / "captions.tsv");
  save_features(corpus.features, dir / "features.mrnf");
  write_splits(corpus.splits, dir / "splits.tsv");
  out << "wrote " << corpus.captions.size() << " captions for " << corpus.features.size() << " images to "
      << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string captions;
  std::string features;
  std::string splits;
  std::string out_dir;
  std::string verify_manifest;
  std::string variant = "mrnn";
  std::string init = "xavier";
  ModelConfig model;
  TrainConfig train;
  double clip_norm = 5.0;
  std::size_t min_count = 1;
  bool quiet = false;
};

ordered_json config_json(const TrainArgs& a, const ModelConfig& mc) {
  ordered_json c;
  c["variant"] = std::string(to_string(mc.variant));
  c["vocab_size"] = mc.vocab_size;
  c["embed1_dim"] = mc.embed1_dim;
  c["embed2_dim"] = mc.embed2_dim;
  c["recurrent_dim"] = mc.recurrent_dim;
  c["multimodal_dim"] = mc.multimodal_dim;
  c["image_dim"] = mc.image_dim;
  c["learning_rate"] = a.train.learning_rate;
  c["lambda_reg"] = a.train.lambda_reg;
  c["batch_size"] = a.train.batch_size;
  c["epochs"] = a.train.epochs;
  c["clip_norm"] = a.train.clip_norm ? *a.train.clip_norm : 0.0;
  c["eval_every"] = a.train.eval_every;
  c["init"] = to_string(a.train.init);
  c["min_count"] = a.min_count;
  return c;
}

ordered_json input_json(const std::string& path) {
  return {{"path", path}, {"fnv1a64", hash_file(path)}};
}

void verify_manifest(const fs::path& previous, const ordered_json& current) {
  ordered_json old;
  try {
    old = ordered_json::parse(read_bytes(previous));
  } catch (const ordered_json::exception& e) {
    throw CliError("format", "manifest " + previous.string() + " is not valid JSON: " + e.what());
  }
  for (const char* section : {"inputs", "config", "seeds"}) {
    if (!old.contains(section)) throw CliError("format", "manifest " + previous.string() + " lacks '" + section + "'");
    for (const auto& [key, value] : current[section].items()) {
      if (!old[section].contains(key)) throw CliError("drift", std::string(section) + "." + key + " is new");
      const auto& before = section == std::string("inputs") ? old[section][key]["fnv1a64"] : old[section][key];
      const auto& now = section == std::string("inputs") ? value["fnv1a64"] : value;
      if (before != now) {
        throw CliError("drift", std::string(section) + "." + key + " changed from " + before.dump() + " to " +
                                    now.dump());
      }
    }
  }
}

int cmd_train(TrainArgs a, std::ostream& out) {
  a.model.variant = parse_variant(a.variant);
  a.train.init = parse_init_scheme(a.init);
  a.train.clip_norm = a.clip_norm > 0 ? std::optional<double>(a.clip_norm) : std::nullopt;

  const auto captions = read_captions(a.captions);
  const auto splits = read_splits(a.splits);
  const auto features = load_features(a.features);
  const Vocabulary vocab = Vocabulary::build(training_texts(captions, splits), a.min_count);
  const DatasetSplit dataset = assemble_dataset(captions, splits, vocab);
  a.model.vocab_size = vocab.size();
  a.model.image_dim = features.dim();

  ordered_json manifest;
  manifest["tool"] = "mrnn";
  manifest["version"] = std::string(kToolVersion);
  manifest["command"] = "train";
  manifest["config"] = config_json(a, a.model);
  manifest["seeds"] = {{"train", a.train.seed}};
  manifest["inputs"] = {
      {"captions", input_json(a.captions)}, {"features", input_json(a.features)}, {"splits", input_json(a.splits)}};
  if (!a.verify_manifest.empty()) verify_manifest(a.verify_manifest, manifest);

  const TrainResult result = train(a.train, a.model, dataset, features, [&](const EpochRecord& e) {
    if (a.quiet) return;
    out << "epoch " << e.epoch << " cost " << fmt(e.cost);
    if (!std::isnan(e.validation_ppl)) out << " val_ppl " << fmt(e.validation_ppl);
    out << "\n";
  });

  const fs::path dir(a.out_dir);
  fs::create_directories(dir);
  save_model(result.params, dir / kCheckpointFile);
  vocab.save(dir / kVocabFile);
  write_text(dir / kReportFile, result.report.to_csv());

  manifest["runtime"] = {{"threads", a.train.threads}};
  manifest["artifacts"] = {
      {"checkpoint", input_json((dir / kCheckpointFile).string())},
      {"vocab", input_json((dir / kVocabFile).string())},
      {"report", {{"path", (dir / kReportFile).string()}}},
  };
  write_text(dir / kManifestFile, manifest.dump(2) + "\n");
  out << "checkpoint " << (dir / kCheckpointFile).string() << " fnv1a64 "
      << manifest["artifacts"]["checkpoint"]["fnv1a64"].get<std::string>() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  ModelInputs in;
  std::vector<std::string> images;
  std::string prefix;
  std::string mode = "greedy";
  std::uint64_t seed = 0;
  std::size_t max_len = 50;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  const LoadedModel m = load_model_dir(a.in.model_dir);
  const ImageFeatureStore features = load_features(a.in.features);
  GenerationConfig g;
  g.mode = a.mode == "sample" ? DecodeMode::kSample : DecodeMode::kGreedy;
  g.seed = a.seed;
  g.max_length = a.max_len;
  g.prefix = m.vocab.encode(a.prefix);
  const bool multimodal = m.params.config().variant == Variant::kMultimodal;
  std::vector<std::pair<std::string, std::string>> lines;
  for (const auto& id : a.images) {
    const Vector& feature = features.at(id);
    const auto tokens = generate(m.params, multimodal ? std::span<const double>(feature) : std::span<const double>(), g);
    lines.emplace_back(id, m.vocab.decode_text(tokens));
  }
  for (const auto& [id, text] : lines) out << id << '\t' << text << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval

void emit_metrics(const MetricOutputs& o, const std::string& csv, const std::string& json) {
  if (!o.csv.empty()) write_text(o.csv, csv);
  if (!o.json.empty()) write_text(o.json, json);
}

struct PplArgs {
  ModelInputs in;
  MetricOutputs outputs;
  std::size_t threads = 1;
};

int cmd_eval_ppl(const PplArgs& a, std::ostream& out) {
  const EvalData d = load_eval_data(a.in);
  const double ppl = corpus_perplexity(d.model.params, d.examples, d.features, a.threads);
  std::ostringstream csv;
  csv << "metric,value\nppl," << std::setprecision(17) << ppl << "\nsentences," << d.examples.size() << "\n";
  ordered_json j{{"ppl", ppl}, {"sentences", d.examples.size()}, {"split", a.in.split}};
  emit_metrics(a.outputs, csv.str(), j.dump(2) + "\n");
  out << "ppl=" << fmt(ppl, 8) << "\n";
  return 0;
}

struct BleuArgs {
  ModelInputs in;
  MetricOutputs outputs;
  std::string candidates;
  std::string references;
  std::size_t order = 3;
  bool order_only = false;
  std::size_t threads = 1;
};

BleuScore bleu_from_fixture(const BleuArgs& a) {
  const auto cands = read_captions(a.candidates);
  const auto refs = read_captions(a.references);
  std::map<std::string, std::vector<std::vector<std::string>>> by_id;
  for (const auto& r : refs) by_id[r.image_id].push_back(tokenize(r.text));
  std::vector<std::vector<std::string>> c;
  std::vector<std::vector<std::vector<std::string>>> r;
  for (const auto& cand : cands) {
    const auto it = by_id.find(cand.image_id);
    if (it == by_id.end()) throw CliError("invalid", "candidate '" + cand.image_id + "' has no reference");
    c.push_back(tokenize(cand.text));
    r.push_back(it->second);
  }
  return bleu<std::string>(c, r, a.order, a.order_only ? BleuMode::kOrderOnly : BleuMode::kCumulative);
}

// One greedy candidate per reference caption, generated to exactly that
// reference's length; scored against all captions of the same image.
BleuScore bleu_from_model(const BleuArgs& a) {
  const EvalData d = load_eval_data(a.in);
  const bool multimodal = d.model.params.config().variant == Variant::kMultimodal;
  std::map<std::string, std::vector<std::vector<TokenId>>> refs_of;
  for (const auto& ex : d.examples) refs_of[ex.image_id].push_back(ex.tokens);
  std::vector<std::vector<TokenId>> cands(d.examples.size());
  std::vector<std::vector<std::vector<TokenId>>> refs(d.examples.size());
  const std::size_t threads = std::max<std::size_t>(1, a.threads);
  parallel_for(d.examples.size(), threads, [&](std::size_t i) {
    const auto& ex = d.examples[i];
    GenerationConfig g;
    g.exact_length = ex.tokens.size();
    g.max_length = ex.tokens.size();
    std::span<const double> feature;
    if (multimodal) feature = d.features.at(ex.image_id);
    cands[i] = generate(d.model.params, feature, g);
    refs[i] = refs_of.at(ex.image_id);
  });
  return bleu<TokenId>(cands, refs, a.order, a.order_only ? BleuMode::kOrderOnly : BleuMode::kCumulative);
}

int cmd_eval_bleu(const BleuArgs& a, std::ostream& out) {
  const bool fixture = !a.candidates.empty() || !a.references.empty();
  if (fixture && (a.candidates.empty() || a.references.empty())) {
    throw CliError("usage", "--candidates and --references must be given together");
  }
  if (!fixture && a.in.model_dir.empty()) throw CliError("usage", "give --model or --candidates/--references");
  const BleuScore s = fixture ? bleu_from_fixture(a) : bleu_from_model(a);
  emit_metrics(a.outputs, bleu_to_csv(s), bleu_to_json(s));
  for (std::size_t n = 1; n <= s.scores.size(); ++n) {
    out << (n > 1 ? " " : "") << "B-" << n << "=" << std::fixed << std::setprecision(4) << s.b(n);
  }
  out << std::defaultfloat << "\n";
  return 0;
}

struct RetrievalArgs {
  ModelInputs in;
  MetricOutputs outputs;
  std::string direction;
  std::string scores;
  std::string groundtruth;
  std::size_t shortlist = 0;
  std::size_t norm_images = 100;
  std::uint64_t norm_seed = 1;
  std::vector<std::size_t> ks{1, 5, 10};
  std::vector<double> fractions;
  std::size_t threads = 1;
};

Matrix read_score_matrix(const fs::path& path) {
  std::istringstream in(read_bytes(path));
  std::vector<Vector> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Vector row;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw CliError("format", path.string() + ":" + std::to_string(line_no) + ": bad score '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw CliError("format", path.string() + ":" + std::to_string(line_no) + ": row has " +
                                   std::to_string(row.size()) + " scores, expected " +
                                   std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw CliError("format", path.string() + ": no scores");
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  return m;
}

Groundtruth read_groundtruth(const fs::path& path) {
  std::istringstream in(read_bytes(path));
  Groundtruth gt;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::size_t> cols;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) {
      if (cell.empty()) continue;
      if (cell.find_first_not_of("0123456789 ") != std::string::npos) {
        throw CliError("format", path.string() + ":" + std::to_string(line_no) + ": bad column index '" + cell + "'");
      }
      cols.push_back(std::stoul(cell));
    }
    gt.push_back(std::move(cols));
  }
  while (!gt.empty() && gt.back().empty()) gt.pop_back();
  return gt;
}

struct ScoredProblem {
  Matrix scores;
  Groundtruth groundtruth;
};

ScoredProblem retrieval_problem(const RetrievalArgs& a) {
  const bool fixture = !a.scores.empty() || !a.groundtruth.empty();
  if (fixture) {
    if (a.scores.empty() || a.groundtruth.empty()) {
      throw CliError("usage", "--scores and --groundtruth must be given together");
    }
    ScoredProblem p{read_score_matrix(a.scores), read_groundtruth(a.groundtruth)};
    for (const auto& g : p.groundtruth) {
      for (const std::size_t c : g) {
        if (c >= p.scores.cols()) throw CliError("format", "groundtruth column " + std::to_string(c) + " out of range");
      }
    }
    return p;
  }
  if (a.in.model_dir.empty()) throw CliError("usage", "give --model or --scores/--groundtruth");
  const EvalData d = load_eval_data(a.in);
  if (d.model.params.config().variant != Variant::kMultimodal) {
    throw CliError("invalid", "retrieval needs an image-conditioned model");
  }
  if (a.direction == "t2i") {
    RetrievalProblem p = text_to_image_problem(d.model.params, d.examples, d.features, a.threads);
    return {std::move(p.scores), std::move(p.groundtruth)};
  }
  ImageFeatureStore train_images(d.features.dim());
  for (const auto& ex : d.dataset.train) {
    if (!train_images.contains(ex.image_id)) train_images.add(ex.image_id, d.features.at(ex.image_id));
  }
  if (train_images.empty()) throw CliError("invalid", "no training images to sample normalization images from");
  SentenceRetrievalOptions o;
  o.norm_images = sample_norm_images(train_images, a.norm_images, a.norm_seed);
  o.shortlist_size = a.shortlist;
  o.threads = a.threads;
  RetrievalProblem p = image_to_text_problem(d.model.params, d.examples, d.features, o);
  return {std::move(p.scores), std::move(p.groundtruth)};
}

int cmd_eval_retrieval(const RetrievalArgs& a, std::ostream& out) {
  const ScoredProblem p = retrieval_problem(a);
  const RetrievalMetrics m = retrieval_eval(p.scores, p.groundtruth, a.ks);
  emit_metrics(a.outputs, retrieval_to_csv(m), retrieval_to_json(m));
  for (const auto& [k, v] : m.recall_at) out << "R@" << k << "=" << fmt(v) << " ";
  out << "med_r=" << m.median_rank << "\n";
  return 0;
}

int cmd_eval_curve(const RetrievalArgs& a, std::ostream& out) {
  const ScoredProblem p = retrieval_problem(a);
  const RecallCurve c = recall_curve(p.scores, p.groundtruth, a.fractions.empty() ? default_curve_fractions() : a.fractions);
  const std::string csv = curve_to_csv(c);
  if (a.outputs.csv.empty()) {
    out << csv;
  } else {
    write_text(a.outputs.csv, csv);
    out << "wrote " << c.points.size() << " curve points to " << a.outputs.csv << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck / nearest

struct GradArgs {
  GradCheckConfig config;
  std::string variant = "mrnn";
  std::string corrupt;
};

int cmd_gradcheck(GradArgs a, std::ostream& out) {
  a.config.variant = parse_variant(a.variant);
  if (!a.corrupt.empty()) a.config.corrupt_block = a.corrupt;
  const GradCheckReport r = gradient_check(a.config);
  out << "gradcheck samples=" << r.instances.size() << " variant=" << to_string(a.config.variant)
      << " max_relative_error=" << fmt(r.max_relative_error, 4) << " worst_block=" << r.worst_block
      << " skipped_entries=" << r.skipped_entries << (r.passed ? " PASS" : " FAIL") << "\n";
  if (!r.passed) {
    std::ostringstream msg;
    msg << "worst block " << r.worst_block << " relative error " << fmt(r.max_relative_error, 4) << " >= "
        << fmt(a.config.tolerance, 4);
    throw CliError("gradcheck", msg.str());
  }
  return 0;
}

struct NearestArgs {
  std::string model_dir;
  std::string word;
  std::size_t k = 5;
};

int cmd_nearest(const NearestArgs& a, std::ostream& out) {
  const LoadedModel m = load_model_dir(a.model_dir);
  for (const auto& w : nearest_words(m.params, m.vocab, a.word, a.k)) out << w << "\n";
  return 0;
}

int report_error(std::ostream& err, const std::string& category, const std::string& message, int code = 1) {
  err << "error: " << category << ": " << one_line(message) << "\n";
  return code;
}

std::string format_category(const FormatError& e) {
  switch (e.kind()) {
    case FormatError::Kind::kIo:
      return "io";
    case FormatError::Kind::kBadMagic:
      return "bad-magic";
    case FormatError::Kind::kBadVersion:
      return "bad-version";
    case FormatError::Kind::kTruncated:
      return "truncated";
    case FormatError::Kind::kDimensionMismatch:
      return "dimension";
    case FormatError::Kind::kSyntax:
      return "syntax";
    case FormatError::Kind::kDuplicate:
      return "duplicate";
  }
  return "format";
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_file(const fs::path& path) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(read_bytes(path));
  return os.str();
}

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::optional<std::string> config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CliError("usage", "--config needs a file");
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!config) return rest;

  std::istringstream in(read_bytes(*config));
  std::vector<std::string> expanded;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CliError("syntax", *config + ":" + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    expanded.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  // Insert before the first flag so that explicit flags, parsed later, win.
  auto pos = std::find_if(rest.begin() + (rest.empty() ? 0 : 1), rest.end(),
                          [](const std::string& s) { return s.rfind("-", 0) == 0; });
  rest.insert(pos, expanded.begin(), expanded.end());
  return rest;
}

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"m-RNN image captioning and retrieval", "mrnn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  // synth
  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic captioned-image corpus");
  s->add_option("--out", synth.out_dir, "Output directory")->required();
  s->add_option("--seed", synth.seed);
  s->add_option("--images", synth.spec.n_images);
  s->add_option("--topics", synth.spec.n_topics);
  s->add_option("--words-per-slot", synth.spec.words_per_slot);
  s->add_option("--colors", synth.spec.n_colors);
  s->add_option("--captions-per-image", synth.spec.captions_per_image);
  s->add_option("--noise-dims", synth.spec.noise_dims);
  s->add_option("--attribute-scale", synth.spec.attribute_scale);
  s->add_option("--noise-scale", synth.spec.noise_scale);
  s->add_option("--val-fraction", synth.spec.validation_fraction);
  s->add_option("--test-fraction", synth.spec.test_fraction);

  // train
  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model and write checkpoint, report and manifest");
  t->add_option("--captions", tr.captions)->required();
  t->add_option("--features", tr.features)->required();
  t->add_option("--splits", tr.splits)->required();
  t->add_option("--out", tr.out_dir, "Output directory")->required();
  t->add_option("--verify-manifest", tr.verify_manifest, "Fail if inputs or config differ from this manifest");
  t->add_option("--variant", tr.variant)->check(CLI::IsMember({"mrnn", "baseline"}));
  t->add_option("--init", tr.init, "zeros | xavier | uniform:<a>");
  t->add_option("--learning-rate,--lr", tr.train.learning_rate);
  t->add_option("--lambda-reg", tr.train.lambda_reg);
  t->add_option("--batch-size", tr.train.batch_size);
  t->add_option("--epochs", tr.train.epochs);
  t->add_option("--clip-norm", tr.clip_norm, "Global gradient norm cap; 0 disables");
  t->add_option("--seed", tr.train.seed);
  t->add_option("--eval-every", tr.train.eval_every);
  t->add_option("--threads", tr.train.threads)->check(CLI::PositiveNumber);
  t->add_option("--embed1-dim", tr.model.embed1_dim);
  t->add_option("--embed2-dim", tr.model.embed2_dim);
  t->add_option("--recurrent-dim", tr.model.recurrent_dim);
  t->add_option("--multimodal-dim", tr.model.multimodal_dim);
  t->add_option("--min-count", tr.min_count);
  t->add_flag("--quiet", tr.quiet, "Do not print per-epoch progress");

  // generate
  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Generate captions for images");
  add_model_inputs(g, gen.in, false);
  g->add_option("--image", gen.images, "Image id (repeatable)")->required()->multi_option_policy(
      CLI::MultiOptionPolicy::TakeAll);
  g->add_option("--prefix", gen.prefix, "Reference words to start the caption with");
  g->add_option("--mode", gen.mode)->check(CLI::IsMember({"greedy", "sample"}));
  g->add_option("--seed", gen.seed);
  g->add_option("--max-len,--max-length", gen.max_len)->check(CLI::PositiveNumber);

  // eval
  auto* e = app.add_subcommand("eval", "Evaluate perplexity, BLEU or retrieval");
  e->require_subcommand(1);

  PplArgs ppl;
  auto* ep = e->add_subcommand("ppl", "Corpus perplexity of a split");
  add_model_inputs(ep, ppl.in, true);
  add_metric_outputs(ep, ppl.outputs);
  ep->add_option("--threads", ppl.threads)->check(CLI::PositiveNumber);

  BleuArgs bl;
  auto* eb = e->add_subcommand("bleu", "BLEU of length-matched generations, or of a candidate/reference fixture");
  eb->add_option("--model", bl.in.model_dir);
  eb->add_option("--captions", bl.in.captions);
  eb->add_option("--features", bl.in.features);
  eb->add_option("--splits", bl.in.splits);
  eb->add_option("--split", bl.in.split)->check(CLI::IsMember({"train", "val", "test"}));
  eb->add_option("--candidates", bl.candidates, "Fixture: id<TAB>candidate text");
  eb->add_option("--references", bl.references, "Fixture: id<TAB>reference text, repeatable ids");
  eb->add_option("--order", bl.order)->check(CLI::PositiveNumber);
  eb->add_flag("--order-only", bl.order_only, "B-n is the order-n precision alone");
  eb->add_option("--threads", bl.threads)->check(CLI::PositiveNumber);
  add_metric_outputs(eb, bl.outputs);

  RetrievalArgs rt;
  const auto add_retrieval = [&](CLI::App* sub) {
    sub->add_option("direction", rt.direction, "i2t or t2i")->required()->check(CLI::IsMember({"i2t", "t2i"}));
    sub->add_option("--model", rt.in.model_dir);
    sub->add_option("--captions", rt.in.captions);
    sub->add_option("--features", rt.in.features);
    sub->add_option("--splits", rt.in.splits);
    sub->add_option("--split", rt.in.split)->check(CLI::IsMember({"train", "val", "test"}));
    sub->add_option("--scores", rt.scores, "Fixture: CSV score matrix, one query per row");
    sub->add_option("--groundtruth", rt.groundtruth, "Fixture: comma-separated groundtruth columns per query");
    sub->add_option("--shortlist", rt.shortlist, "i2t: restrict to captions of the N nearest images");
    sub->add_option("--norm-images", rt.norm_images, "i2t: images sampled for the sentence prior")
        ->check(CLI::PositiveNumber);
    sub->add_option("--norm-seed", rt.norm_seed);
    sub->add_option("--threads", rt.threads)->check(CLI::PositiveNumber);
  };
  auto* er = e->add_subcommand("retrieval", "R@K and median rank");
  add_retrieval(er);
  er->add_option("--k", rt.ks, "Recall cutoffs")->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  add_metric_outputs(er, rt.outputs);
  auto* ec = e->add_subcommand("curve", "Mean matches versus fraction retrieved");
  add_retrieval(ec);
  ec->add_option("--fractions", rt.fractions)->delimiter(',')->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  ec->add_option("--out-csv", rt.outputs.csv, "Write the curve here instead of stdout");

  // gradcheck
  GradArgs gc;
  auto* gcs = app.add_subcommand("gradcheck", "Finite-difference check of the analytic gradients");
  gcs->add_option("--samples", gc.config.samples)->check(CLI::PositiveNumber);
  gcs->add_option("--seed", gc.config.seed);
  gcs->add_option("--variant", gc.variant)->check(CLI::IsMember({"mrnn", "baseline"}));
  gcs->add_option("--corrupt", gc.corrupt, "Perturb this block's analytic gradient (negative control)");
  gcs->add_option("--tolerance", gc.config.tolerance);

  // nearest
  NearestArgs nn;
  auto* n = app.add_subcommand("nearest", "Nearest words in the first embedding layer");
  n->add_option("--model", nn.model_dir)->required();
  n->add_option("--word", nn.word)->required();
  n->add_option("-k,--k", nn.k);

  try {
    std::vector<std::string> args = expand_config(raw_args);
    if (args.empty()) args.emplace_back("mrnn");
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& ex) {
    return report_error(err, "usage", ex.what(), 2);
  } catch (const CliError& ex) {
    return report_error(err, ex.category(), ex.what(), 2);
  }

  try {
    if (s->parsed()) return cmd_synth(synth, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (g->parsed()) return cmd_generate(gen, out);
    if (ep->parsed()) return cmd_eval_ppl(ppl, out);
    if (eb->parsed()) return cmd_eval_bleu(bl, out);
    if (er->parsed()) return cmd_eval_retrieval(rt, out);
    if (ec->parsed()) return cmd_eval_curve(rt, out);
    if (gcs->parsed()) return cmd_gradcheck(gc, out);
    if (n->parsed()) return cmd_nearest(nn, out);
  } catch (const CliError& ex) {
    return report_error(err, ex.category(), ex.what());
  } catch (const FormatError& ex) {
    return report_error(err, format_category(ex), ex.what());
  } catch (const TrainingDiverged& ex) {
    return report_error(err, "diverged", ex.what());
  } catch (const std::out_of_range& ex) {
    return report_error(err, "lookup", ex.what());
  } catch (const std::invalid_argument& ex) {
    return report_error(err, "invalid", ex.what());
  } catch (const std::exception& ex) {
    return report_error(err, "internal", ex.what());
  }
  return report_error(err, "usage", "no command given", 2);
}

}  // namespace mrnn::cli
