// gig: build data, train, generate, evaluate, ablate and compare domains.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numerical failure (including a replay whose outputs differ).

#include "gig/manifest.hpp"
#include "gig/selftest.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <random>

namespace {

using namespace gig;

enum ExitCode { kOk = 0, kUsage = 1, kDataFailure = 2, kNumericalFailure = 3 };

class ReplayMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::set<std::string>& run_keys() {
  static const std::set<std::string> k{"run.seeds",       "run.variants", "run.split",    "run.terms",
                                       "run.checkpoint_every", "decode.beam", "decode.attention", "decode.top_k"};
  return k;
}

std::set<std::string> known_keys() {
  std::set<std::string> all = DataConfig::keys();
  all.insert(run_keys().begin(), run_keys().end());
  for (const auto& part : {ModelConfig::keys(), TrainConfig::keys()}) all.insert(part.begin(), part.end());
  return all;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--set", c.sets, "override one key, e.g. --set model.d=32")->take_all();
  cmd->add_option("--output", c.output,
                  "output directory; relative paths resolve against $GIG_OUTPUT_ROOT when set");
}

/// Config file, then --set overrides; unknown keys are rejected.
KvDocument load_config(const Common& c) {
  KvDocument doc;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw ConfigError("config file not found: " + c.config);
    doc = KvDocument::parse(read_text_file(c.config), c.config);
  }
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    doc.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  doc.check_known(known_keys());
  return doc;
}

fs::path output_dir(const Common& c, const std::string& command) {
  fs::path p = c.output.empty() ? fs::path("runs") / command : fs::path(c.output);
  const char* root = std::getenv("GIG_OUTPUT_ROOT");
  if (p.is_relative() && root && *root) p = fs::path(root) / p;
  fs::create_directories(p);
  return p;
}

void require_dir(const std::string& path, const char* what) {
  if (!fs::is_directory(path)) throw DataError(std::string(what) + " directory not found: " + path);
}

DecodeStrategy strategy_of(const KvDocument& doc) {
  const auto beam = doc.get<std::size_t>("decode.beam", 1);
  return beam <= 1 ? DecodeStrategy::greedy() : DecodeStrategy::beam(beam);
}

void write_decode(KvDocument& resolved, const KvDocument& doc) {
  resolved.set("decode.beam", std::to_string(doc.get<std::size_t>("decode.beam", 1)));
}

Manifest begin_manifest(const std::string& command, const KvDocument& resolved) {
  Manifest m;
  m.command = command;
  m.config = resolved.str();
  return m;
}

void finish_manifest(Manifest& m, const fs::path& out) {
  m.record_outputs(out);
  m.write(out);
  std::cerr << "manifest: " << (out / kManifestFile).string() << '\n';
}

// ---------------------------------------------------------------------------
// Commands

struct BuildDataArgs {
  Common common;
  std::string corpus;
  std::optional<std::uint64_t> seed;
};

int cmd_build_data(const BuildDataArgs& a) {
  KvDocument doc = load_config(a.common);
  if (!a.corpus.empty()) doc.set("data.corpus", a.corpus);
  if (a.seed) {
    doc.set("synth.seed", std::to_string(*a.seed));
    doc.set("data.split_seed", std::to_string(*a.seed));
  }
  const DataConfig cfg = DataConfig::read(doc);
  if (!cfg.corpus.empty() && !fs::exists(cfg.corpus)) throw DataError("corpus not found: " + cfg.corpus);
  KvDocument resolved;
  cfg.write(resolved);
  const fs::path out = output_dir(a.common, "build-data");

  const DataBundle b = build_data(cfg);
  save_data(b, out);
  const CorpusStats s = corpus_stats(b.corpus);
  nlohmann::ordered_json j;
  j["name"] = b.name;
  j["terms"] = s.terms;
  j["genes"] = s.genes;
  j["described_terms"] = s.described;
  j["isa_edges"] = s.isa_edges;
  j["mean_description_length"] = s.mean_description_length;
  j["train"] = b.split.train.size();
  j["validation"] = b.split.validation.size();
  j["test"] = b.split.test.size();
  j["vocabulary"] = b.vocab.size();
  write_text_file(out / "stats.json", j.dump(2) + '\n');
  write_text_file(out / "config.txt", resolved.str());

  std::cout << "corpus " << b.name << ": " << s.terms << " terms, " << s.genes << " genes, " << s.described
            << " described, mean description length " << detail::fixed(s.mean_description_length) << '\n'
            << "split " << b.split.train.size() << "/" << b.split.validation.size() << "/" << b.split.test.size()
            << " (train/validation/test), vocabulary " << b.vocab.size() << " tokens\n";

  Manifest m = begin_manifest("build-data", resolved);
  if (cfg.corpus.empty()) {
    m.seeds = {cfg.synth_seed, cfg.split_seed};
  } else {
    m.seeds = {cfg.split_seed};
    m.add_input(cfg.corpus);
  }
  finish_manifest(m, out);
  return kOk;
}

struct ModelArgs {
  std::string variant;
  std::string decoder;
  std::optional<std::uint64_t> seed;
};

void add_model_args(CLI::App* cmd, ModelArgs& a) {
  cmd->add_option("--variant", a.variant, "baseline, a, b, c or full");
  cmd->add_option("--decoder", a.decoder, "transformer or lstm");
  cmd->add_option("--seed", a.seed, "initialisation and batch-order seed (train.seed)");
}

std::pair<ModelConfig, TrainConfig> model_and_train(KvDocument doc, const ModelArgs& a) {
  if (!a.decoder.empty()) doc.set("model.decoder", a.decoder);
  if (a.seed) doc.set("train.seed", std::to_string(*a.seed));
  ModelConfig mc = ModelConfig::read(doc);
  if (!a.variant.empty()) mc.set_variant(parse_variant(a.variant));
  mc.validate();
  return {mc, TrainConfig::read(doc)};
}

struct TrainArgs {
  Common common;
  ModelArgs model;
  std::string data;
  bool resume = false;
  std::optional<std::size_t> checkpoint_every;
};

int cmd_train(const TrainArgs& a) {
  KvDocument doc = load_config(a.common);
  if (a.checkpoint_every) doc.set("run.checkpoint_every", std::to_string(*a.checkpoint_every));
  const auto [mc, tc] = model_and_train(doc, a.model);
  KvDocument resolved;
  mc.write(resolved);
  tc.write(resolved);
  RunOptions opts;
  opts.checkpoint_every = doc.get<std::size_t>("run.checkpoint_every", 0);
  resolved.set("run.checkpoint_every", std::to_string(opts.checkpoint_every));
  require_dir(a.data, "data");
  const fs::path out = output_dir(a.common, "train");

  const DataBundle data = load_data(a.data);
  opts.resume = a.resume;
  opts.on_record = [](const HistoryRecord& r) {
    if (r.split != "validation") return;
    std::cerr << "step " << r.step << " epoch " << r.epoch << " validation loss " << detail::fixed(r.loss, 4)
              << " BLEU " << detail::fixed(*r.bleu) << " ROUGE-L " << detail::fixed(*r.rouge_l) << " METEOR "
              << detail::fixed(*r.meteor) << '\n';
  };
  write_text_file(out / "config.txt", resolved.str());
  const TrainedModel t = train_model(data, mc, tc, out, opts);
  std::cout << "trained " << variant_name(mc.variant()) << " for " << (t.history.empty() ? 0 : t.history.back().step)
            << " steps; best validation BLEU " << detail::fixed(t.progress.best_bleu) << " at step "
            << t.progress.best_step << (t.progress.stopped_early ? " (early stop)" : "") << '\n';

  Manifest m = begin_manifest("train", resolved);
  m.arguments = {"--data", a.data};
  m.seeds = {tc.seed};
  m.add_input(a.data);
  finish_manifest(m, out);
  return kOk;
}

const std::vector<TermId>& split_ids(const DataBundle& d, const std::string& split) {
  if (split == "train") return d.split.train;
  if (split == "validation") return d.split.validation;
  if (split == "test") return d.split.test;
  throw ConfigError("run.split must be train, validation or test, got '" + split + "'");
}

struct GenerateArgs {
  Common common;
  std::string data, model, split;
  std::vector<std::string> terms;
  std::optional<std::size_t> beam, top_k;
  bool attention = false;
};

int cmd_generate(const GenerateArgs& a) {
  KvDocument doc = load_config(a.common);
  if (!a.split.empty()) doc.set("run.split", a.split);
  if (!a.terms.empty()) {
    std::string joined;
    for (const auto& t : a.terms) joined += (joined.empty() ? "" : ",") + t;
    doc.set("run.terms", joined);
  }
  if (a.beam) doc.set("decode.beam", std::to_string(*a.beam));
  if (a.attention) doc.set("decode.attention", "true");
  if (a.top_k) doc.set("decode.top_k", std::to_string(*a.top_k));
  KvDocument resolved;
  write_decode(resolved, doc);
  const bool attention = doc.get("decode.attention", false);
  const auto top_k = doc.get<std::size_t>("decode.top_k", 2);
  if (top_k == 0) throw ConfigError("decode.top_k must be >= 1");
  resolved.set("decode.attention", attention ? "true" : "false");
  resolved.set("decode.top_k", std::to_string(top_k));
  const auto terms = doc.get_list<std::string>("run.terms", {});
  const std::string split = doc.get_string("run.split", "test");
  if (terms.empty()) {
    resolved.set("run.split", split);
  } else {
    resolved.set("run.terms", doc.get_string("run.terms", ""));
  }
  const DecodeStrategy strategy = strategy_of(doc);
  require_dir(a.data, "data");
  require_dir(a.model, "model");
  const fs::path out = output_dir(a.common, "generate");

  const DataBundle data = load_data(a.data);
  const auto model = load_model(a.model);
  const std::vector<TermId> ids = terms.empty() ? split_ids(data, split) : terms;
  const TermGraphBuilder neighbourhood(data.corpus);
  std::ostringstream generations, attn;
  for (const auto& id : ids) {
    const Generation g = model->generate(model->prepare(data.corpus, neighbourhood, id), strategy);
    generations << id << '\t' << join_tokens(g.tokens) << '\n';
    std::cout << id << '\t' << join_tokens(g.tokens) << '\n';
    if (!attention) continue;
    const auto steps = top_attention(g, top_k);
    for (std::size_t s = 0; s < steps.size(); ++s) {
      nlohmann::ordered_json j;
      j["id"] = id;
      j["position"] = s;
      j["token"] = steps[s].token;
      j["row_sum"] = steps[s].row_sum;
      auto& top = j["top"] = nlohmann::ordered_json::array();
      std::cout << "  " << steps[s].token << ':';
      for (const auto& n : steps[s].top) {
        nlohmann::ordered_json e;
        e["row"] = n.row;
        e["label"] = n.label;
        e["weight"] = n.weight;
        top.push_back(e);
        std::cout << "  [" << n.label << " " << detail::fixed(n.weight, 3) << "]";
      }
      std::cout << '\n';
      attn << j.dump() << '\n';
    }
  }
  write_text_file(out / "generations.tsv", generations.str());
  if (attention) write_text_file(out / "attention.jsonl", attn.str());
  write_text_file(out / "config.txt", resolved.str());

  Manifest m = begin_manifest("generate", resolved);
  m.arguments = {"--data", a.data, "--model", a.model};
  m.add_input(a.data);
  m.add_input(a.model);
  finish_manifest(m, out);
  return kOk;
}

/// "id<TAB>text" lines as written by generate.
std::vector<std::pair<TermId, Tokens>> read_hypotheses(const fs::path& path) {
  std::vector<std::pair<TermId, Tokens>> out;
  std::istringstream in(read_text_file(path));
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected '<term-id><TAB><text>'");
    }
    out.emplace_back(line.substr(0, tab), tokenize(line.substr(tab + 1)));
  }
  if (out.empty()) throw DataError(path.string() + ": no hypotheses");
  return out;
}

struct EvalArgs {
  Common common;
  std::string data, model, hypotheses, split;
  std::optional<std::size_t> beam;
};

int cmd_eval(const EvalArgs& a) {
  KvDocument doc = load_config(a.common);
  if (!a.split.empty()) doc.set("run.split", a.split);
  if (a.beam) doc.set("decode.beam", std::to_string(*a.beam));
  if (a.model.empty() == a.hypotheses.empty()) throw ConfigError("eval needs exactly one of --model or --hypotheses");
  KvDocument resolved;
  const std::string split = doc.get_string("run.split", "test");
  if (!a.model.empty()) {
    write_decode(resolved, doc);
    resolved.set("run.split", split);
  }
  const DecodeStrategy strategy = strategy_of(doc);
  require_dir(a.data, "data");
  if (!a.model.empty()) require_dir(a.model, "model");
  if (!a.hypotheses.empty() && !fs::exists(a.hypotheses)) throw DataError("hypotheses not found: " + a.hypotheses);
  const fs::path out = output_dir(a.common, "eval");

  const DataBundle data = load_data(a.data);
  ScoreReport report;
  if (!a.model.empty()) {
    const auto model = load_model(a.model);
    report = evaluate(*model, data.corpus, split_ids(data, split), strategy);
    report.metadata["model"] = fs::path(a.model).filename().string();
    report.metadata["split"] = split;
    if (const auto conf = fs::path(a.model) / "config.txt"; fs::exists(conf)) {
      report.metadata["seed"] = KvDocument::parse(read_text_file(conf)).get_string("train.seed", "");
    }
  } else {
    std::vector<TermId> ids;
    std::vector<Tokens> hyps, refs;
    for (auto& [id, h] : read_hypotheses(a.hypotheses)) {
      const Term& t = data.corpus.term(id);
      if (!t.description) throw DataError("term " + id + " has no reference description");
      ids.push_back(id);
      hyps.push_back(std::move(h));
      refs.push_back(*t.description);
    }
    report = score_corpus(ids, hyps, refs);
    report.metadata["hypotheses"] = fs::path(a.hypotheses).filename().string();
  }
  std::ostringstream text, records;
  text << "BLEU-4   " << detail::fixed(report.bleu) << "\nROUGE-L  " << detail::fixed(report.rouge_l) << "\nMETEOR   "
       << detail::fixed(report.meteor) << "\nexamples " << report.examples.size() << "\nmetrics: " << kMetricNote
       << '\n';
  write_score_records(report, records);
  write_text_file(out / "report.txt", text.str());
  write_text_file(out / "scores.jsonl", records.str());
  write_text_file(out / "config.txt", resolved.str());
  std::cout << text.str();

  Manifest m = begin_manifest("eval", resolved);
  m.arguments = {"--data", a.data};
  m.add_input(a.data);
  if (!a.model.empty()) {
    m.arguments.insert(m.arguments.end(), {"--model", a.model});
    m.add_input(a.model);
  } else {
    m.arguments.insert(m.arguments.end(), {"--hypotheses", a.hypotheses});
    m.add_input(a.hypotheses);
  }
  finish_manifest(m, out);
  return kOk;
}

struct AblateArgs {
  Common common;
  ModelArgs model;
  std::string data, seeds, variants;
};

int cmd_ablate(const AblateArgs& a) {
  KvDocument doc = load_config(a.common);
  if (!a.seeds.empty()) doc.set("run.seeds", a.seeds);
  if (!a.variants.empty()) doc.set("run.variants", a.variants);
  const auto [mc, tc] = model_and_train(doc, a.model);
  const auto seeds = doc.get_list<std::uint64_t>("run.seeds", {1, 2, 3});
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  std::vector<Variant> variants;
  std::string names;
  for (const auto& n : doc.get_list<std::string>("run.variants", {"baseline", "a", "b", "c", "full"})) {
    variants.push_back(parse_variant(n));
    names += (names.empty() ? "" : ",") + n;
  }
  if (variants.empty()) throw ConfigError("run.variants must list at least one setting");
  KvDocument resolved;
  mc.write(resolved);
  tc.write(resolved);
  write_decode(resolved, doc);
  std::string seed_list;
  for (auto s : seeds) seed_list += (seed_list.empty() ? "" : ",") + std::to_string(s);
  resolved.set("run.seeds", seed_list);
  resolved.set("run.variants", names);
  require_dir(a.data, "data");
  const fs::path out = output_dir(a.common, "ablate");

  const DataBundle data = load_data(a.data);
  std::cerr << "ablation: " << variants.size() << " settings x " << seeds.size() << " seeds = "
            << variants.size() * seeds.size() << " runs\n";
  const AblationReport rep = run_ablation(
      data, mc, tc, seeds, variants, out,
      [](const AblationCell& c) {
        std::cerr << variant_name(c.variant) << " seed " << c.seed << ": BLEU " << detail::fixed(c.report.bleu)
                  << " ROUGE-L " << detail::fixed(c.report.rouge_l) << " METEOR " << detail::fixed(c.report.meteor)
                  << '\n';
      },
      strategy_of(doc));
  std::ostringstream table, records;
  write_ablation_table(rep, table);
  write_ablation_records(rep, records);
  write_text_file(out / "ablation.txt", table.str());
  write_text_file(out / "ablation.jsonl", records.str());
  write_text_file(out / "config.txt", resolved.str());
  std::cout << table.str();

  Manifest m = begin_manifest("ablate", resolved);
  m.arguments = {"--data", a.data};
  m.seeds = seeds;
  m.add_input(a.data);
  finish_manifest(m, out);
  return kOk;
}

struct CrossDomainArgs {
  Common common;
  ModelArgs model;
  std::vector<std::string> data;
};

int cmd_cross_domain(const CrossDomainArgs& a) {
  KvDocument doc = load_config(a.common);
  ModelArgs margs = a.model;
  if (margs.variant.empty()) margs.variant = "full";
  const auto [mc, tc] = model_and_train(doc, margs);
  if (a.data.size() < 2) throw ConfigError("cross-domain needs at least two --data directories");
  KvDocument resolved;
  mc.write(resolved);
  tc.write(resolved);
  write_decode(resolved, doc);
  for (const auto& d : a.data) require_dir(d, "data");
  const fs::path out = output_dir(a.common, "cross-domain");

  std::vector<DataBundle> bundles;
  for (const auto& d : a.data) bundles.push_back(load_data(d));
  const CrossDomainMatrix matrix = run_cross_domain(bundles, mc, tc, out, strategy_of(doc));
  std::ostringstream table, records;
  write_cross_domain_table(matrix, table);
  write_cross_domain_records(matrix, records);
  write_text_file(out / "cross_domain.txt", table.str());
  write_text_file(out / "cross_domain.jsonl", records.str());
  write_text_file(out / "config.txt", resolved.str());
  std::cout << table.str();

  Manifest m = begin_manifest("cross-domain", resolved);
  for (const auto& d : a.data) {
    m.arguments.insert(m.arguments.end(), {"--data", d});
    m.add_input(d);
  }
  m.seeds = {tc.seed};
  finish_manifest(m, out);
  return kOk;
}

int cmd_selftest(const Common& common) {
  KvDocument resolved;
  load_config(common);
  const fs::path out = output_dir(common, "selftest");
  std::ostringstream file;
  bool ok = true;
  for (const auto& c : run_selftest()) {
    ok = ok && c.passed;
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << (c.detail.empty() ? "" : " (" + c.detail + ")") << '\n';
    file << (c.passed ? "PASS " : "FAIL ") << c.name << '\n';
  }
  write_text_file(out / "selftest.txt", file.str());
  Manifest m = begin_manifest("selftest", resolved);
  finish_manifest(m, out);
  return ok ? kOk : kNumericalFailure;
}

int run_cli(std::vector<std::string> args);

struct ReplayArgs {
  std::string manifest;
  std::string output;
};

/// Re-runs the command recorded in a manifest into a new directory and
/// compares every output checksum.
int cmd_replay(const ReplayArgs& a) {
  const Manifest recorded = Manifest::read(a.manifest);
  for (const auto& [path, sum] : recorded.inputs) {
    if (!fs::exists(path)) throw DataError("recorded input missing: " + path);
    if (file_sha256(path) != sum) throw DataError("recorded input changed: " + path);
  }
  const fs::path config = fs::temp_directory_path() / ("gig-replay-" + recorded.config_sha256().substr(0, 16) + "-" +
                                                        std::to_string(std::random_device{}()) + ".conf");
  write_text_file(config, recorded.config);
  std::vector<std::string> args{recorded.command};
  args.insert(args.end(), recorded.arguments.begin(), recorded.arguments.end());
  args.insert(args.end(), {"--config", config.string(), "--output", a.output});
  const int code = run_cli(args);
  fs::remove(config);
  if (code != kOk) return code;
  std::string out = a.output;
  const char* root = std::getenv("GIG_OUTPUT_ROOT");
  if (fs::path(out).is_relative() && root && *root) out = (fs::path(root) / out).string();
  const Manifest replayed = Manifest::read(fs::path(out) / kManifestFile);
  const auto diff = differing_outputs(recorded, replayed);
  if (!diff.empty()) {
    std::string list;
    for (const auto& d : diff) list += "\n  " + d;
    throw ReplayMismatch("replay outputs differ from the manifest:" + list);
  }
  std::cout << "replay identical: " << replayed.outputs.size() << " outputs match\n";
  return kOk;
}

int run_cli(std::vector<std::string> args) {
  CLI::App app{"gig: gene-graph and term-graph description generation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every subcommand");
  app.footer(
      "Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.\n"
      "Environment: GIG_OUTPUT_ROOT prefixes relative --output directories.");

  BuildDataArgs build;
  auto* c_build = app.add_subcommand("build-data", "synthesize or read a corpus; write splits and vocabulary");
  add_common(c_build, build.common);
  c_build->add_option("--corpus", build.corpus, "corpus file (TERM/GENE/ANNOT/DESC/ISA records); omit to synthesize");
  c_build->add_option("--seed", build.seed, "synthesis and split seed");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train one model and keep the best validation checkpoint");
  add_common(c_train, train.common);
  add_model_args(c_train, train.model);
  c_train->add_option("--data", train.data, "directory written by build-data")->required();
  c_train->add_flag("--resume", train.resume, "continue from train_state.ckpt in the output directory");
  c_train->add_option("--checkpoint-every", train.checkpoint_every, "steps between resumable snapshots");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "generate descriptions, optionally with attention export");
  add_common(c_gen, gen.common);
  c_gen->add_option("--data", gen.data, "directory written by build-data")->required();
  c_gen->add_option("--model", gen.model, "directory written by train")->required();
  c_gen->add_option("--split", gen.split, "train, validation or test (default test)");
  c_gen->add_option("--term", gen.terms, "generate for these term ids instead of a split");
  c_gen->add_option("--beam", gen.beam, "beam width; 1 is greedy");
  c_gen->add_flag("--attention", gen.attention, "report the top attended memory nodes per token");
  c_gen->add_option("--top-k", gen.top_k, "nodes reported per token (default 2)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "score a model or a hypothesis file with BLEU, ROUGE-L and METEOR");
  add_common(c_eval, ev.common);
  c_eval->add_option("--data", ev.data, "directory written by build-data")->required();
  c_eval->add_option("--model", ev.model, "directory written by train");
  c_eval->add_option("--hypotheses", ev.hypotheses, "'<term-id><TAB><text>' lines, e.g. generations.tsv");
  c_eval->add_option("--split", ev.split, "split scored with --model (default test)");
  c_eval->add_option("--beam", ev.beam, "beam width; 1 is greedy");

  AblateArgs abl;
  auto* c_abl = app.add_subcommand("ablate", "train every setting for every seed and tabulate test scores");
  add_common(c_abl, abl.common);
  add_model_args(c_abl, abl.model);
  c_abl->add_option("--data", abl.data, "directory written by build-data")->required();
  c_abl->add_option("--seeds", abl.seeds, "comma-separated seeds (default 1,2,3)");
  c_abl->add_option("--variants", abl.variants, "comma-separated settings (default baseline,a,b,c,full)");

  CrossDomainArgs cross;
  auto* c_cross = app.add_subcommand("cross-domain", "train on each corpus and evaluate on every corpus");
  add_common(c_cross, cross.common);
  add_model_args(c_cross, cross.model);
  c_cross->add_option("--data", cross.data, "two or more directories written by build-data")->required();

  Common self;
  auto* c_self = app.add_subcommand("selftest", "gradient checks and hand-evaluated oracle cases");
  add_common(c_self, self);

  ReplayArgs replay;
  auto* c_replay = app.add_subcommand("replay", "re-run a manifest and verify byte-identical outputs");
  c_replay->add_option("--manifest", replay.manifest, "manifest.json to replay")->required();
  c_replay->add_option("--output", replay.output, "fresh output directory")->required();

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*c_build) return cmd_build_data(build);
    if (*c_train) return cmd_train(train);
    if (*c_gen) return cmd_generate(gen);
    if (*c_eval) return cmd_eval(ev);
    if (*c_abl) return cmd_ablate(abl);
    if (*c_cross) return cmd_cross_domain(cross);
    if (*c_self) return cmd_selftest(self);
    if (*c_replay) return cmd_replay(replay);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const ReplayMismatch& e) {
    std::cerr << e.what() << '\n';
    return kNumericalFailure;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataFailure;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) { return run_cli(std::vector<std::string>(argv + 1, argv + argc)); }
