// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include "gig/manifest.hpp"
#include "gig/selftest.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iostream>
#include <sys/wait.h>

using namespace gig;
using namespace gig::oracles;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr int kEncoderGraphs = 100;
constexpr double kWeightTolerance = 1e-12;
constexpr int kRetrievalFixtures = 100;
constexpr std::size_t kMaxFixtureTerms = 50;
constexpr double kMetricTolerance = 1e-6;
constexpr std::size_t kMetricPairs = 50;
constexpr std::size_t kOverfitPairs = 8;
constexpr std::size_t kOverfitSteps = 2000;
constexpr double kOverfitLoss = 0.1;
constexpr double kOverfitSeconds = 120.0;
constexpr double kAblationMargin = 2.0;
constexpr double kAblationAlpha = 0.05;
constexpr double kAblationSeconds = 30 * 60.0;

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double x, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

std::string sci(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", x);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::vector<std::string> failed;
  for (DecoderKind kind : {DecoderKind::Transformer, DecoderKind::Lstm}) {
    for (Variant v : all_variants()) {
      const auto r = model_gradient_check(kind, v);
      worst = std::max(worst, r.worst);
      if (!r.passed || r.worst > kGradTolerance) {
        failed.push_back(std::string(kind == DecoderKind::Lstm ? "lstm/" : "transformer/") + variant_name(v));
      }
    }
  }
  const double secs = seconds_since(t0);
  std::string detail = "10 models, worst relative error " + sci(worst) + ", " + fmt(secs, 1) + " s";
  for (const auto& f : failed) detail += "; failed " + f;
  return {failed.empty() && secs < kGradSeconds, detail};
}

std::vector<double> values(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Outcome encoder_identities() {
  std::mt19937_64 rng(2024);
  SynthConfig sc;
  sc.terms = 40;
  sc.genes = 60;
  const Ontology o = synthesize_corpus(sc, 3);
  std::vector<Tokens> texts;
  for (const auto& [id, g] : o.genes) texts.push_back(g.text);
  const Vocabulary vocab = build_vocabulary(texts, 1);

  // Zero-edge gene graphs and term graphs of real sizes.
  bool identity = true;
  std::size_t checked = 0;
  const CoverIndex index(o);
  for (const auto& [id, t] : o.terms) {
    if (t.gene_ids.empty()) continue;
    const GeneGraph gg = build_gene_graph(t, o.genes, vocab);
    const TermGraph tg = build_term_graph(o, id);
    for (std::size_t n : {gg.size(), tg.size()}) {
      const std::size_t d = 8;
      const Tensor nodes = random_tensor({n, d}, rng);
      const Tensor out = encode_graph(SparseMatrix{n, n, {}}, nodes, random_tensor({d, d}, rng), 1 + rng() % 3);
      identity = identity && values(out) == values(nodes);
      ++checked;
    }
  }
  bool isolated_seen = false;
  for (const auto& [id, t] : o.terms) {
    const auto rel = index.query(id);
    if (rel.parents.empty() && rel.children.empty()) isolated_seen = build_term_graph(o, id).edges.empty();
    if (isolated_seen) break;
  }

  int equivariant = 0;
  double worst = 0.0;
  for (int trial = 0; trial < kEncoderGraphs; ++trial) {
    const std::size_t n = 2 + rng() % 9, d = 1 + rng() % 6;
    std::vector<double> adj(n * n, 0.0);
    std::uniform_real_distribution<double> u(0.05, 1.5);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (rng() % 2) adj[i * n + j] = adj[j * n + i] = u(rng);
      }
    }
    const Tensor v = random_tensor({n, d}, rng), w = random_tensor({d, d}, rng);
    const std::size_t rounds = 1 + rng() % 3;
    const auto out = values(encode_graph(sparse_of(adj, n), v, w, rounds));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> padj(n * n), pv(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) padj[i * n + j] = adj[perm[i] * n + perm[j]];
      for (std::size_t k = 0; k < d; ++k) pv[i * d + k] = v.values()[perm[i] * d + k];
    }
    const auto pout = values(encode_graph(sparse_of(padj, n), Tensor({n, d}, pv), w, rounds));
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) err = std::max(err, std::abs(pout[i * d + k] - out[perm[i] * d + k]));
    }
    worst = std::max(worst, err);
    equivariant += err <= 1e-12;
  }
  const bool ok = identity && checked > 0 && equivariant == kEncoderGraphs;
  return {ok, std::to_string(checked) + " zero-edge graphs bit-exact: " + (identity ? "yes" : "no") +
                  (isolated_seen ? " (includes an isolated term)" : "") + "; permutation equivariance " +
                  std::to_string(equivariant) + "/" + std::to_string(kEncoderGraphs) + ", worst deviation " + sci(worst)};
}

Outcome construction_oracles() {
  std::mt19937_64 rng(77);
  const std::vector<std::string> pool{"atp", "binding", "kinase", "site", "activity", "dna", "repair", "the", "of",
                                      "transport", "membrane", "ion"};
  const Vocabulary vocab = build_vocabulary({pool}, 1);
  int count_ok = 0, graphs = 0;
  double worst_weight = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::map<GeneId, GeneRecord> genes;
    Term t{"T", {"n"}, {}, std::nullopt};
    std::vector<std::pair<std::string, Tokens>> texts;
    const std::size_t n_genes = 1 + rng() % 12;
    for (std::size_t i = 0; i < n_genes; ++i) {
      const std::string gid = "g" + std::to_string(i);
      Tokens text(1 + rng() % 12);
      for (auto& w : text) w = pool[rng() % pool.size()];
      genes[gid] = GeneRecord{gid, text};
      t.gene_ids.push_back(gid);
      texts.emplace_back(gid, text);
    }
    const GeneGraph g = build_gene_graph(t, genes, vocab);
    std::set<std::string> distinct;
    for (const auto& [gid, text] : texts) distinct.insert(text.begin(), text.end());
    ++graphs;
    count_ok += g.size() == 1 + n_genes + distinct.size() && g.gene_count == n_genes && g.word_count == distinct.size();
    const auto dense = g.dense_adjacency();
    const std::size_t n = g.size();
    for (std::size_t i = 1; i <= g.gene_count; ++i) {
      for (std::size_t j = 1 + g.gene_count; j < n; ++j) {
        const double expected = oracle_weight(texts, g.nodes[i].label, g.nodes[j].label);
        worst_weight = std::max(worst_weight, std::abs(dense[i * n + j] - expected));
      }
    }
  }

  int retrieval_ok = 0;
  std::size_t queries = 0;
  for (int trial = 0; trial < kRetrievalFixtures; ++trial) {
    const Ontology o = random_ontology(rng, 2 + rng() % (kMaxFixtureTerms - 1), 1 + rng() % 8);
    const CoverIndex index(o);
    bool all = true;
    for (const auto& [id, t] : o.terms) {
      const auto fast = index.query(id);
      const auto slow = brute_force_cover(o, id);
      all = all && fast.parents == slow.parents && fast.children == slow.children;
      ++queries;
    }
    retrieval_ok += all;
  }
  const bool ok = count_ok == graphs && worst_weight <= kWeightTolerance && retrieval_ok == kRetrievalFixtures;
  return {ok, "node count identity " + std::to_string(count_ok) + "/" + std::to_string(graphs) +
                  "; worst co-occurrence deviation " + sci(worst_weight) + "; cover retrieval " +
                  std::to_string(retrieval_ok) + "/" + std::to_string(kRetrievalFixtures) + " fixtures (" +
                  std::to_string(queries) + " queries)"};
}

Outcome metric_oracles() {
  const auto pairs = random_pairs(kMetricPairs, 4242);
  double worst_bleu = 0.0, worst_rouge = 0.0, worst_meteor = 0.0;
  std::vector<Tokens> hyps, refs;
  for (const auto& [h, r] : pairs) {
    worst_bleu = std::max(worst_bleu, std::abs(bleu({h}, {r}) - oracle_bleu({h}, {r})));
    worst_rouge = std::max(worst_rouge, std::abs(rouge_l({h}, {r}) - 100.0 * oracle_rouge_pair(h, r)));
    worst_meteor = std::max(worst_meteor, std::abs(meteor_em({h}, {r}) - 100.0 * oracle_meteor_pair(h, r)));
    hyps.push_back(h);
    refs.push_back(r);
  }
  worst_bleu = std::max(worst_bleu, std::abs(bleu(hyps, refs) - oracle_bleu(hyps, refs)));
  const bool identical = bleu(refs, refs) == 100.0 && rouge_l(refs, refs) == 100.0 && meteor_em(refs, refs) == 100.0;
  const bool ok = worst_bleu <= kMetricTolerance && worst_rouge <= kMetricTolerance &&
                  worst_meteor <= kMetricTolerance && identical;
  return {ok, std::to_string(kMetricPairs) + " pairs, worst deviation BLEU " + sci(worst_bleu) + " ROUGE-L " +
                  sci(worst_rouge) + " METEOR " + sci(worst_meteor) + "; identical corpus = 100: " +
                  (identical ? "yes" : "no")};
}

Outcome overfit() {
  SynthConfig sc;
  sc.terms = 40;
  sc.genes = 60;
  const Ontology o = synthesize_corpus(sc, 1);
  DatasetSplit split;
  for (const auto& id : o.described_terms()) {
    if (split.train.size() < kOverfitPairs) split.train.push_back(id);
  }
  std::vector<Tokens> texts;
  for (const auto& id : split.train) texts.push_back(*o.term(id).description);
  for (const auto& [id, t] : o.terms) texts.push_back(t.name);
  for (const auto& [id, g] : o.genes) texts.push_back(g.text);
  const Vocabulary vocab = build_vocabulary(texts, 1);

  ModelConfig mc;
  mc.d = 32;
  mc.heads = 4;
  mc.decoder_layers = 2;
  mc.dropout = 0.0;
  GenerationModel model(mc, vocab, 1);
  TrainConfig tc;
  tc.batch_size = kOverfitPairs;
  tc.epochs = 0;
  tc.max_steps = kOverfitSteps;
  tc.validate_every = kOverfitSteps + 1;
  tc.patience = 0;
  Trainer trainer(model, o, split, tc);
  const auto t0 = std::chrono::steady_clock::now();
  double loss = std::numeric_limits<double>::infinity();
  while (!trainer.run(trainer.optimizer().step + 1)) {
    loss = trainer.history().back().loss;
    if (loss < kOverfitLoss) break;
  }
  const double secs = seconds_since(t0);
  const std::size_t steps = trainer.optimizer().step;
  const auto report = evaluate(model, o, split.train);
  std::size_t exact = 0;
  for (const auto& e : report.examples) exact += e.hypothesis == e.reference;
  const bool ok = loss < kOverfitLoss && steps <= kOverfitSteps && secs < kOverfitSeconds && exact == kOverfitPairs;
  return {ok, "train loss " + fmt(loss, 4) + " at step " + std::to_string(steps) + ", " + fmt(secs, 1) +
                  " s; greedy exact " + std::to_string(exact) + "/" + std::to_string(kOverfitPairs)};
}

// Desk-scale ablation setting shared with samples/ablation.conf.
ModelConfig ablation_model() {
  ModelConfig mc;
  mc.d = 32;
  mc.heads = 4;
  mc.decoder_layers = 2;
  return mc;
}

TrainConfig ablation_training() {
  TrainConfig tc;
  tc.batch_size = 16;
  tc.epochs = 100;
  tc.learning_rate = 3e-3;
  tc.patience = 0;
  return tc;
}

Outcome directional_ablation(std::string& info) {
  DataConfig dc;  // 200-term synthetic corpus
  const DataBundle data = build_data(dc);
  const std::clock_t cpu0 = std::clock();
  const auto t0 = std::chrono::steady_clock::now();
  const AblationReport r = run_ablation(data, ablation_model(), ablation_training(), {1, 2, 3}, all_variants(),
                                        std::nullopt, [](const AblationCell& c) {
                                          std::cout << "  ablation " << variant_name(c.variant) << " seed " << c.seed
                                                    << " BLEU " << fmt(c.report.bleu) << std::endl;
                                        });
  const double wall = seconds_since(t0);
  const double cpu = static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC;
  write_ablation_table(r, std::cout);

  const double full = r.row(Variant::Full).bleu.mean, c = r.row(Variant::Children).bleu.mean,
               a = r.row(Variant::GeneGraph).bleu.mean, base = r.row(Variant::Baseline).bleu.mean,
               b = r.row(Variant::Parents).bleu.mean;
  const TTestResult t = r.compare(Variant::Full, Variant::Baseline);
  const bool order = full >= c && c >= a && a >= base;
  const bool ok = order && full - base >= kAblationMargin && t.p_two_sided < kAblationAlpha && cpu < kAblationSeconds;
  info = std::string("setting (c) >= setting (b): ") + (c >= b ? "holds" : "does not hold") + " (c " + fmt(c) +
         ", b " + fmt(b) + "; non-blocking)";
  return {ok, "mean BLEU full " + fmt(full) + " >= c " + fmt(c) + " >= a " + fmt(a) + " >= baseline " + fmt(base) +
                  (order ? "" : " VIOLATED") + "; full - baseline " + fmt(full - base) + "; paired t p=" +
                  sci(t.p_two_sided) + "; " + fmt(cpu / 60.0, 1) + " CPU min (" + fmt(wall / 60.0, 1) + " wall)"};
}

Outcome cross_domain() {
  std::vector<DataBundle> bundles;
  for (const auto& [prefix, words, seed] : {std::tuple{"SYN", "", 1}, std::tuple{"ALT", "q", 2}}) {
    DataConfig dc;
    dc.synth.terms = 120;
    dc.synth.genes = 180;
    dc.synth.id_prefix = prefix;
    dc.synth.word_prefix = words;
    dc.synth_seed = static_cast<std::uint64_t>(seed);
    dc.split_seed = static_cast<std::uint64_t>(seed);
    bundles.push_back(build_data(dc));
  }
  TrainConfig tc = ablation_training();
  tc.epochs = 40;
  const auto m = run_cross_domain(bundles, ablation_model(), tc);
  write_cross_domain_table(m, std::cout);
  bool populated = m.cells.size() == 2, diagonal = true;
  std::string detail;
  for (std::size_t i = 0; i < m.cells.size(); ++i) {
    populated = populated && m.cells[i].size() == 2;
    for (std::size_t j = 0; j < m.cells[i].size(); ++j) {
      const auto& cell = m.cells[i][j];
      populated = populated && !cell.report.examples.empty();
      if (i != j) {
        diagonal = diagonal && m.cells[j][j].report.bleu >= cell.report.bleu;
        detail += (detail.empty() ? "" : "; ") + cell.trained_on + "->" + cell.evaluated_on + " " +
                  fmt(cell.report.bleu) + " vs in-domain " + fmt(m.cells[j][j].report.bleu) + " (delta " +
                  fmt(cell.bleu_delta) + ")";
      }
    }
  }
  return {populated && diagonal, std::string("2x2 populated: ") + (populated ? "yes" : "no") + "; " + detail};
}

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::string* output = nullptr) {
  std::string cmd = GIG_CLI_PATH;
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return -1;
  char buf[4096];
  std::size_t n;
  std::string text;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) text.append(buf, n);
  const int status = pclose(pipe);
  if (output) *output = text;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    const bool tracked = name == kHistoryFile || e.path().extension() == ".ckpt" || e.path().extension() == ".jsonl";
    if (e.is_regular_file() && tracked) out[fs::relative(e.path(), dir).generic_string()] = read_text_file(e.path());
  }
  return out;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / ("gig_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const std::vector<std::string> tiny = {"--set", "model.d=8", "model.heads=2", "model.decoder_layers=1",
                                         "train.epochs=3", "model.max_decode_len=16"};
  auto with = [](std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  const std::string data = (root / "data").string(), other = (root / "other").string(), model = (root / "model").string();
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"data", {"build-data", "--set", "synth.terms=60", "synth.genes=90", "data.min_count=1", "--output", data}},
      {"other", {"build-data", "--set", "synth.terms=60", "synth.genes=90", "data.min_count=1", "synth.id_prefix=ALT",
                 "synth.word_prefix=q", "--seed", "2", "--output", other}},
      {"model", with({"train", "--data", data, "--checkpoint-every", "4", "--output", model}, tiny)},
      {"generate", {"generate", "--data", data, "--model", model, "--attention", "--output", (root / "generate").string()}},
      {"eval", {"eval", "--data", data, "--model", model, "--output", (root / "eval").string()}},
      {"ablate", with({"ablate", "--data", data, "--seeds", "1,2", "--variants", "baseline,full", "--output",
                       (root / "ablate").string()}, tiny)},
      {"cross", with({"cross-domain", "--data", data, "--data", other, "--output", (root / "cross").string()}, tiny)},
  };
  std::size_t replayed = 0, files = 0;
  std::string failures;
  for (const auto& [name, args] : commands) {
    std::string log;
    if (run(args, &log) != 0) {
      failures += " " + name + " failed to run: " + log.substr(0, 200);
      continue;
    }
    const fs::path first = root / name, again = root / (name + "-replay");
    if (run({"replay", "--manifest", (first / kManifestFile).string(), "--output", again.string()}, &log) != 0) {
      failures += " " + name + " replay: " + log.substr(0, 200);
      continue;
    }
    const auto a = artifacts(first), b = artifacts(again);
    if (a != b) failures += " " + name + " histories/checkpoints differ";
    files += a.size();
    ++replayed;
  }
  fs::remove_all(root);
  return {failures.empty() && replayed == commands.size(),
          std::to_string(replayed) + "/" + std::to_string(commands.size()) + " commands replayed from manifests, " +
              std::to_string(files) + " history/checkpoint/record files byte-identical" + failures};
}

}  // namespace

int main() {
  struct Criterion {
    int number;
    const char* name;
    std::function<Outcome()> check;
  };
  std::string ablation_info;
  const std::vector<Criterion> criteria{
      {1, "gradient oracle", gradient_oracle},
      {2, "encoder identities", encoder_identities},
      {3, "construction oracles", construction_oracles},
      {4, "metric oracles", metric_oracles},
      {5, "overfit", overfit},
      {6, "directional ablation", [&] { return directional_ablation(ablation_info); }},
      {7, "cross-domain harness", cross_domain},
      {8, "determinism", determinism},
  };
  std::vector<std::string> lines;
  bool all = true;
  for (const auto& c : criteria) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.passed;
    const std::string line = std::string(o.passed ? "PASS" : "FAIL") + "  criterion " + std::to_string(c.number) +
                             " " + c.name + ": " + o.detail + " [" + fmt(seconds_since(t0), 1) + " s]";
    std::cout << line << std::endl;
    lines.push_back(line);
  }
  std::cout << "\nsummary\n";
  for (const auto& l : lines) std::cout << l << '\n';
  if (!ablation_info.empty()) std::cout << "INFO  " << ablation_info << '\n';
  std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
