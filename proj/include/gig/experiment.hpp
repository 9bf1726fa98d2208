#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// suite: on-disk data bundles, single training runs, ablation grids over
// seeds and cross-domain matrices.

#include "gig/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace gig {

namespace fs = std::filesystem;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Data bundles

struct DataConfig {
  std::string corpus;  // empty: synthesize from `synth`
  SynthConfig synth;
  std::uint64_t synth_seed = 1;
  SplitRatios ratios;
  std::uint64_t split_seed = 1;
  std::size_t min_count = 3;

  static std::set<std::string> keys() {
    return {"data.corpus",         "data.split_seed",       "data.train",         "data.validation",
            "data.test",           "data.min_count",        "synth.seed",         "synth.terms",
            "synth.genes",         "synth.branching",       "synth.depth",        "synth.concepts_per_level",
            "synth.keywords_per_level", "synth.noise_words", "synth.noise_per_gene", "synth.min_overlap",
            "synth.id_prefix",     "synth.word_prefix"};
  }

  void write(KvDocument& doc) const {
    if (!corpus.empty()) doc.set("data.corpus", corpus);
    doc.set("data.split_seed", std::to_string(split_seed));
    doc.set("data.train", format_double(ratios.train));
    doc.set("data.validation", format_double(ratios.validation));
    doc.set("data.test", format_double(ratios.test));
    doc.set("data.min_count", std::to_string(min_count));
    if (!corpus.empty()) return;
    doc.set("synth.seed", std::to_string(synth_seed));
    doc.set("synth.terms", std::to_string(synth.terms));
    doc.set("synth.genes", std::to_string(synth.genes));
    doc.set("synth.branching", std::to_string(synth.branching));
    doc.set("synth.depth", std::to_string(synth.depth));
    doc.set("synth.concepts_per_level", std::to_string(synth.concepts_per_level));
    doc.set("synth.keywords_per_level", std::to_string(synth.keywords_per_level));
    doc.set("synth.noise_words", std::to_string(synth.noise_words));
    doc.set("synth.noise_per_gene", std::to_string(synth.noise_per_gene));
    doc.set("synth.min_overlap", format_double(synth.min_overlap));
    doc.set("synth.id_prefix", synth.id_prefix);
    doc.set("synth.word_prefix", synth.word_prefix);
  }

  static DataConfig read(const KvDocument& doc) {
    DataConfig c;
    c.corpus = doc.get_string("data.corpus", "");
    c.split_seed = doc.get("data.split_seed", c.split_seed);
    c.ratios.train = doc.get("data.train", c.ratios.train);
    c.ratios.validation = doc.get("data.validation", c.ratios.validation);
    c.ratios.test = doc.get("data.test", c.ratios.test);
    c.min_count = doc.get("data.min_count", c.min_count);
    c.synth_seed = doc.get("synth.seed", c.synth_seed);
    auto& s = c.synth;
    s.terms = doc.get("synth.terms", s.terms);
    s.genes = doc.get("synth.genes", s.genes);
    s.branching = doc.get("synth.branching", s.branching);
    s.depth = doc.get("synth.depth", s.depth);
    s.concepts_per_level = doc.get("synth.concepts_per_level", s.concepts_per_level);
    s.keywords_per_level = doc.get("synth.keywords_per_level", s.keywords_per_level);
    s.noise_words = doc.get("synth.noise_words", s.noise_words);
    s.noise_per_gene = doc.get("synth.noise_per_gene", s.noise_per_gene);
    s.min_overlap = doc.get("synth.min_overlap", s.min_overlap);
    s.id_prefix = doc.get_string("synth.id_prefix", s.id_prefix);
    s.word_prefix = doc.get_string("synth.word_prefix", s.word_prefix);
    if (c.min_count == 0) throw ConfigError("data.min_count must be >= 1");
    const double sum = c.ratios.train + c.ratios.validation + c.ratios.test;
    if (c.ratios.train <= 0 || c.ratios.validation < 0 || c.ratios.test <= 0 || std::abs(sum - 1.0) > 1e-9) {
      throw ConfigError("data.train/validation/test must be non-negative, train and test positive, summing to 1");
    }
    return c;
  }
};

struct DataBundle {
  std::string name;
  Ontology corpus;
  DatasetSplit split;
  Vocabulary vocab;
};

/// Vocabulary over training descriptions, every term name and every gene
/// text. Validation and test descriptions never contribute.
inline Vocabulary training_vocabulary(const Ontology& o, const DatasetSplit& split, std::size_t min_count) {
  std::vector<Tokens> texts;
  for (const auto& id : split.train) {
    if (const auto& d = o.term(id).description) texts.push_back(*d);
  }
  for (const auto& [id, t] : o.terms) texts.push_back(t.name);
  for (const auto& [id, g] : o.genes) texts.push_back(g.text);
  return build_vocabulary(texts, min_count);
}

inline Ontology read_corpus_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  try {
    return parse_ontology(in);
  } catch (const OntologyError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Only terms with a description and at least one gene enter the split.
inline DataBundle build_data(const DataConfig& cfg) {
  DataBundle b;
  if (cfg.corpus.empty()) {
    b.corpus = synthesize_corpus(cfg.synth, cfg.synth_seed);
    b.name = cfg.synth.id_prefix;
  } else {
    b.corpus = read_corpus_file(cfg.corpus);
    b.name = fs::path(cfg.corpus).stem().string();
  }
  std::vector<TermId> usable;
  for (const auto& id : b.corpus.described_terms()) {
    if (!b.corpus.term(id).gene_ids.empty()) usable.push_back(id);
  }
  if (usable.size() < 3) throw DataError("corpus has fewer than 3 described terms with genes");
  b.split = split_dataset(usable, cfg.ratios, cfg.split_seed);
  b.vocab = training_vocabulary(b.corpus, b.split, cfg.min_count);
  return b;
}

inline constexpr const char* kCorpusFile = "corpus.txt";
inline constexpr const char* kSplitFile = "split.txt";
inline constexpr const char* kVocabFile = "vocab.txt";
inline constexpr const char* kNameFile = "name.txt";

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Writes the bundle and returns the file names written.
inline std::vector<std::string> save_data(const DataBundle& b, const fs::path& dir) {
  fs::create_directories(dir);
  write_text_file(dir / kCorpusFile, serialize_ontology(b.corpus));
  std::ostringstream split, vocab;
  b.split.save(split);
  b.vocab.save(vocab);
  write_text_file(dir / kSplitFile, split.str());
  write_text_file(dir / kVocabFile, vocab.str());
  write_text_file(dir / kNameFile, b.name + '\n');
  return {kCorpusFile, kSplitFile, kVocabFile, kNameFile};
}

inline DataBundle load_data(const fs::path& dir) {
  for (const char* f : {kCorpusFile, kSplitFile, kVocabFile}) {
    if (!fs::exists(dir / f)) throw DataError("missing data artifact " + (dir / f).string() + " (run build-data first)");
  }
  DataBundle b;
  b.corpus = read_corpus_file(dir / kCorpusFile);
  try {
    std::istringstream split(read_text_file(dir / kSplitFile));
    b.split = DatasetSplit::load(split);
    std::istringstream vocab(read_text_file(dir / kVocabFile));
    b.vocab = Vocabulary::load(vocab);
  } catch (const OntologyError& e) {
    throw DataError((dir / kSplitFile).string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError((dir / kVocabFile).string() + ": " + e.what());
  }
  for (const auto* part : {&b.split.train, &b.split.validation, &b.split.test}) {
    for (const auto& id : *part) {
      if (!b.corpus.terms.count(id)) throw DataError("split references unknown term " + id);
    }
  }
  b.name = dir.filename().string();
  if (fs::exists(dir / kNameFile)) {
    std::istringstream in(read_text_file(dir / kNameFile));
    std::getline(in, b.name);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Single runs

inline constexpr const char* kModelFile = "model.ckpt";
inline constexpr const char* kStateFile = "train_state.ckpt";
inline constexpr const char* kHistoryFile = "history.jsonl";
inline constexpr const char* kModelConfigFile = "model.conf";

struct TrainedModel {
  std::unique_ptr<GenerationModel> model;
  std::vector<HistoryRecord> history;
  TrainProgress progress;
};

/// Writes model.conf, model.ckpt and the model's own vocab.txt.
inline void save_model(GenerationModel& m, const fs::path& dir) {
  KvDocument doc;
  m.config().write(doc);
  write_text_file(dir / kModelConfigFile, doc.str());
  std::ostringstream vocab;
  m.vocab().save(vocab);
  write_text_file(dir / kVocabFile, vocab.str());
  save_checkpoint((dir / kModelFile).string(), m.state());
}

inline std::unique_ptr<GenerationModel> load_model(const fs::path& dir) {
  for (const char* f : {kModelConfigFile, kModelFile, kVocabFile}) {
    if (!fs::exists(dir / f)) throw DataError("missing model artifact " + (dir / f).string() + " (run train first)");
  }
  const auto doc = KvDocument::parse(read_text_file(dir / kModelConfigFile), (dir / kModelConfigFile).string());
  doc.check_known(ModelConfig::keys());
  std::istringstream vocab(read_text_file(dir / kVocabFile));
  auto m = std::make_unique<GenerationModel>(ModelConfig::read(doc), Vocabulary::load(vocab), 0);
  m->load_state(load_checkpoint((dir / kModelFile).string()));
  return m;
}

struct RunOptions {
  // Steps between resumable state snapshots; 0 only at the end.
  std::size_t checkpoint_every = 0;
  bool resume = false;
  std::function<void(const HistoryRecord&)> on_record;
};

/// Trains one model (parameters initialised from `train.seed`). With `out`
/// set, streams history.jsonl and leaves model.ckpt, model.conf and
/// train_state.ckpt there.
inline TrainedModel train_model(const DataBundle& data, const ModelConfig& mc, const TrainConfig& tc,
                                const std::optional<fs::path>& out = std::nullopt, const RunOptions& opts = {}) {
  TrainedModel r;
  r.model = std::make_unique<GenerationModel>(mc, data.vocab, tc.seed);
  Trainer trainer(*r.model, data.corpus, data.split, tc);
  std::ofstream history;
  if (out) {
    fs::create_directories(*out);
    std::vector<std::string> kept;
    if (opts.resume && fs::exists(*out / kStateFile)) {
      trainer.load_state(load_checkpoint((*out / kStateFile).string()));
      std::istringstream lines(fs::exists(*out / kHistoryFile) ? read_text_file(*out / kHistoryFile) : "");
      for (std::string line; std::getline(lines, line);) {
        // A torn final line from an interrupted run fails to parse and is dropped.
        if (!line.empty() && nlohmann::json::accept(line) &&
            nlohmann::json::parse(line).at("step").get<std::uint64_t>() <= trainer.optimizer().step) {
          kept.push_back(line);
        }
      }
    }
    history.open(*out / kHistoryFile, std::ios::binary | std::ios::trunc);
    if (!history) throw DataError("cannot write " + (*out / kHistoryFile).string());
    for (const auto& line : kept) history << line << '\n';
  }
  trainer.on_record = [&](const HistoryRecord& rec) {
    if (history.is_open()) write_history_line(history, rec);
    if (opts.on_record) opts.on_record(rec);
  };
  const std::size_t chunk = opts.checkpoint_every;
  while (!trainer.run(chunk > 0 ? trainer.optimizer().step + chunk : 0)) {
    if (out) {
      // History must cover every step the snapshot claims.
      history.flush();
      save_checkpoint((*out / kStateFile).string(), trainer.save_state());
    }
  }
  if (out) {
    history.flush();
    save_checkpoint((*out / kStateFile).string(), trainer.save_state());
    save_model(*r.model, *out);
  }
  r.history = trainer.history();
  r.progress = trainer.progress();
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grid

struct AblationCell {
  Variant variant = Variant::Baseline;
  std::uint64_t seed = 0;
  ScoreReport report;
  std::uint64_t best_step = 0;
};

struct AblationRow {
  Variant variant = Variant::Baseline;
  Summary bleu, rouge_l, meteor;
  std::optional<TTestResult> vs_baseline;  // paired over seeds on BLEU
};

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  std::vector<Variant> variants;
  std::vector<AblationCell> cells;  // variant-major
  std::vector<AblationRow> rows;

  /// Test BLEU per seed, in seed order.
  std::vector<double> bleu(Variant v) const {
    std::vector<double> out;
    for (const auto& c : cells) {
      if (c.variant == v) out.push_back(c.report.bleu);
    }
    return out;
  }

  const AblationRow& row(Variant v) const {
    for (const auto& r : rows) {
      if (r.variant == v) return r;
    }
    throw std::out_of_range(std::string("ablation: no row for setting ") + variant_name(v));
  }

  /// Paired t-test of BLEU (a minus b) over seeds.
  TTestResult compare(Variant a, Variant b) const { return paired_t_test(bleu(a), bleu(b)); }
};

/// Trains every setting for every seed on one bundle and scores the test
/// split. Both the parameter initialisation and the batch order follow the
/// run seed, so settings are paired by seed.
inline AblationReport run_ablation(const DataBundle& data, const ModelConfig& base, const TrainConfig& tc,
                                   const std::vector<std::uint64_t>& seeds, const std::vector<Variant>& variants,
                                   const std::optional<fs::path>& out = std::nullopt,
                                   const std::function<void(const AblationCell&)>& on_cell = {},
                                   const DecodeStrategy& strategy = {}) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (variants.empty()) throw ConfigError("ablation needs at least one setting");
  AblationReport rep;
  rep.seeds = seeds;
  rep.variants = variants;
  for (Variant v : variants) {
    for (std::uint64_t seed : seeds) {
      ModelConfig mc = base;
      mc.set_variant(v);
      TrainConfig t = tc;
      t.seed = seed;
      std::optional<fs::path> dir;
      if (out) dir = *out / (std::string(variant_name(v)) + "-seed" + std::to_string(seed));
      const TrainedModel m = train_model(data, mc, t, dir);
      AblationCell cell{v, seed, evaluate(*m.model, data.corpus, data.split.test, strategy), m.progress.best_step};
      cell.report.metadata["setting"] = variant_name(v);
      cell.report.metadata["seed"] = std::to_string(seed);
      if (on_cell) on_cell(cell);
      rep.cells.push_back(std::move(cell));
    }
  }
  const bool has_baseline = std::find(variants.begin(), variants.end(), Variant::Baseline) != variants.end();
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    std::vector<double> b, r, m;
    for (const auto& c : rep.cells) {
      if (c.variant != v) continue;
      b.push_back(c.report.bleu);
      r.push_back(c.report.rouge_l);
      m.push_back(c.report.meteor);
    }
    row.bleu = summarize(b);
    row.rouge_l = summarize(r);
    row.meteor = summarize(m);
    if (has_baseline && v != Variant::Baseline && seeds.size() >= 2) row.vs_baseline = rep.compare(v, Variant::Baseline);
    rep.rows.push_back(row);
  }
  return rep;
}

namespace detail {

inline std::string fixed(double v, int digits = 2) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

inline std::string mean_sd(const Summary& s) { return fixed(s.mean) + " +- " + fixed(s.sd); }

inline std::string setting_label(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline (no graphs)";
    case Variant::GeneGraph: return "(a) gene graph";
    case Variant::Parents: return "(b) + parent nodes";
    case Variant::Children: return "(c) + child nodes";
    case Variant::Full: return "full";
  }
  return "?";
}

}  // namespace detail

inline void write_ablation_table(const AblationReport& rep, std::ostream& out) {
  out << "setting                  BLEU             ROUGE-L          METEOR           p vs baseline\n";
  for (const auto& r : rep.rows) {
    std::string label = detail::setting_label(r.variant);
    label.resize(24, ' ');
    out << label << ' ' << std::left << std::setw(16) << detail::mean_sd(r.bleu) << ' ' << std::setw(16)
        << detail::mean_sd(r.rouge_l) << ' ' << std::setw(16) << detail::mean_sd(r.meteor) << ' ' << std::right;
    if (r.vs_baseline) {
      out << detail::fixed(r.vs_baseline->p_two_sided, 4);
    } else {
      out << '-';
    }
    out << '\n';
  }
  out << "seeds:";
  for (auto s : rep.seeds) out << ' ' << s;
  out << "\nscores are test-split means +- sample sd over seeds; p is a two-sided paired t-test on BLEU\n";
  out << "metrics: " << kMetricNote << '\n';
}

/// One record per (setting, seed) run, then one summary record per setting.
inline void write_ablation_records(const AblationReport& rep, std::ostream& out) {
  for (const auto& c : rep.cells) {
    nlohmann::ordered_json j;
    j["record"] = "run";
    j["setting"] = variant_name(c.variant);
    j["seed"] = c.seed;
    j["bleu"] = c.report.bleu;
    j["rouge_l"] = c.report.rouge_l;
    j["meteor"] = c.report.meteor;
    j["best_step"] = c.best_step;
    out << j.dump() << '\n';
  }
  for (const auto& r : rep.rows) {
    nlohmann::ordered_json j;
    j["record"] = "summary";
    j["setting"] = variant_name(r.variant);
    j["seeds"] = r.bleu.n;
    for (const auto& [name, s] : {std::pair{"bleu", r.bleu}, {"rouge_l", r.rouge_l}, {"meteor", r.meteor}}) {
      j[std::string(name) + "_mean"] = s.mean;
      j[std::string(name) + "_sd"] = s.sd;
    }
    if (r.vs_baseline) {
      j["t_vs_baseline"] = r.vs_baseline->t;
      j["p_vs_baseline"] = r.vs_baseline->p_two_sided;
    }
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Cross-domain matrix

/// Trains one model per bundle (each with its own vocabulary) and evaluates
/// each on every bundle's test split.
inline CrossDomainMatrix run_cross_domain(const std::vector<DataBundle>& bundles, const ModelConfig& mc,
                                          const TrainConfig& tc, const std::optional<fs::path>& out = std::nullopt,
                                          const DecodeStrategy& strategy = {}) {
  if (bundles.size() < 2) throw ConfigError("cross-domain needs at least two corpora");
  std::vector<TrainedModel> trained;
  std::vector<DomainModel> models;
  std::vector<DomainCorpus> corpora;
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (bundles[i].name == bundles[j].name) throw ConfigError("cross-domain corpora share the name " + bundles[i].name);
    }
    std::optional<fs::path> dir;
    if (out) dir = *out / ("model-" + bundles[i].name);
    trained.push_back(train_model(bundles[i], mc, tc, dir));
  }
  for (std::size_t i = 0; i < bundles.size(); ++i) {
    models.push_back({bundles[i].name, trained[i].model.get()});
    corpora.push_back({bundles[i].name, &bundles[i].corpus, bundles[i].split.test});
  }
  return cross_domain_matrix(models, corpora, strategy);
}

inline void write_cross_domain_table(const CrossDomainMatrix& m, std::ostream& out) {
  out << "trained on -> evaluated on      BLEU    ROUGE-L  METEOR   delta BLEU  delta ROUGE-L  delta METEOR\n";
  for (const auto& row : m.cells) {
    for (const auto& c : row) {
      std::string label = c.trained_on + " -> " + c.evaluated_on + (c.in_domain ? " (in)" : " (out)");
      label.resize(31, ' ');
      out << label << ' ' << std::setw(6) << detail::fixed(c.report.bleu) << "  " << std::setw(7)
          << detail::fixed(c.report.rouge_l) << "  " << std::setw(6) << detail::fixed(c.report.meteor) << "   "
          << std::setw(10) << detail::fixed(c.bleu_delta) << "  " << std::setw(13) << detail::fixed(c.rouge_l_delta)
          << "  " << std::setw(12) << detail::fixed(c.meteor_delta) << '\n';
    }
  }
  out << "delta = in-domain score on the evaluated corpus minus this cell\n";
  out << "metrics: " << kMetricNote << '\n';
}

inline void write_cross_domain_records(const CrossDomainMatrix& m, std::ostream& out) {
  for (const auto& row : m.cells) {
    for (const auto& c : row) {
      nlohmann::ordered_json j;
      j["trained_on"] = c.trained_on;
      j["evaluated_on"] = c.evaluated_on;
      j["domain"] = c.in_domain ? "in" : "out";
      j["bleu"] = c.report.bleu;
      j["rouge_l"] = c.report.rouge_l;
      j["meteor"] = c.report.meteor;
      j["bleu_delta"] = c.bleu_delta;
      j["rouge_l_delta"] = c.rouge_l_delta;
      j["meteor_delta"] = c.meteor_delta;
      out << j.dump() << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Score reports

inline void write_score_records(const ScoreReport& r, std::ostream& out) {
  for (const auto& e : r.examples) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["hypothesis"] = join_tokens(e.hypothesis);
    j["reference"] = join_tokens(e.reference);
    j["rouge_l"] = e.rouge_l;
    j["meteor"] = e.meteor;
    out << j.dump() << '\n';
  }
  nlohmann::ordered_json j;
  j["record"] = "corpus";
  j["bleu"] = r.bleu;
  j["rouge_l"] = r.rouge_l;
  j["meteor"] = r.meteor;
  for (const auto& [k, v] : r.metadata) j[k] = v;
  out << j.dump() << '\n';
}

}  // namespace gig
