#pragma once

// Ontology corpora: parsing, validation, gene-cover retrieval, vocabularies,
// dataset splits, and a synthetic corpus generator.
//
// Corpus text format, one record per line ('#' starts a comment line):
//
//   TERM  <term-id> NAME <tokens...>
//   ISA   <child-term-id> <parent-term-id>
//   GENE  <gene-id> TEXT <tokens...>
//   ANNOT <term-id> <gene-id>
//   DESC  <term-id> <tokens...>
//
// References may appear before the records that define them.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace gig {

using TermId = std::string;
using GeneId = std::string;
using Tokens = std::vector<std::string>;

struct Term {
  TermId id;
  Tokens name;
  std::vector<GeneId> gene_ids;  // annotation order, no duplicates
  std::optional<Tokens> description;

  friend bool operator==(const Term&, const Term&) = default;
};

struct GeneRecord {
  GeneId id;
  Tokens text;

  friend bool operator==(const GeneRecord&, const GeneRecord&) = default;
};

struct Ontology {
  std::map<TermId, Term> terms;
  std::vector<std::pair<TermId, TermId>> isa_edges;  // (child, parent)
  std::map<GeneId, GeneRecord> genes;

  const Term& term(const TermId& id) const;
  std::vector<TermId> described_terms() const {
    std::vector<TermId> out;
    for (const auto& [id, t] : terms) {
      if (t.description) out.push_back(id);
    }
    return out;
  }

  friend bool operator==(const Ontology&, const Ontology&) = default;
};

// ---------------------------------------------------------------------------
// Errors

class OntologyError : public std::runtime_error {
 public:
  explicit OntologyError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ParseError : public OntologyError {
 public:
  using OntologyError::OntologyError;
};

class DanglingReferenceError : public OntologyError {
 public:
  DanglingReferenceError(std::string id, const std::string& kind, std::size_t line)
      : OntologyError("dangling " + kind + " reference \"" + id + "\"", line), id_(std::move(id)) {}
  const std::string& id() const { return id_; }

 private:
  std::string id_;
};

class DuplicateIdError : public OntologyError {
 public:
  DuplicateIdError(std::string id, const std::string& kind, std::size_t line)
      : OntologyError("duplicate " + kind + " \"" + id + "\"", line), id_(std::move(id)) {}
  const std::string& id() const { return id_; }

 private:
  std::string id_;
};

class CycleError : public OntologyError {
 public:
  explicit CycleError(std::vector<TermId> cycle)
      : OntologyError("is-a edges contain a cycle: " + join(cycle)), cycle_(std::move(cycle)) {}
  const std::vector<TermId>& cycle() const { return cycle_; }

 private:
  static std::string join(const std::vector<TermId>& ids) {
    std::string s;
    for (const auto& id : ids) s += (s.empty() ? "" : " -> ") + id;
    return s;
  }
  std::vector<TermId> cycle_;
};

class UnknownTermError : public std::out_of_range {
 public:
  explicit UnknownTermError(const TermId& id) : std::out_of_range("unknown term \"" + id + "\"") {}
};

inline const Term& Ontology::term(const TermId& id) const {
  auto it = terms.find(id);
  if (it == terms.end()) throw UnknownTermError(id);
  return it->second;
}

// ---------------------------------------------------------------------------
// Tokenisation

/// Lowercases and splits on whitespace and ASCII punctuation; punctuation is
/// dropped. Bytes outside ASCII are kept as word characters.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && (std::isspace(u) || std::ispunct(u))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_tokens(const Tokens& tokens) {
  std::string s;
  for (const auto& t : tokens) {
    if (!s.empty()) s.push_back(' ');
    s += t;
  }
  return s;
}

// ---------------------------------------------------------------------------
// DAG validation

struct DagReport {
  bool ok = true;
  std::vector<TermId> cycle;  // witness when !ok, each id once, in edge order
};

/// Depth-first search over child -> parent edges; reports the first cycle found
/// when visiting terms in id order.
inline DagReport validate_dag(const Ontology& o) {
  std::map<TermId, std::vector<TermId>> up;
  std::set<TermId> nodes;
  for (const auto& [id, t] : o.terms) nodes.insert(id);
  for (const auto& [c, p] : o.isa_edges) {
    up[c].push_back(p);
    nodes.insert(c);
    nodes.insert(p);
  }
  enum class Mark { white, grey, black };
  std::map<TermId, Mark> mark;
  for (const auto& n : nodes) mark[n] = Mark::white;

  for (const auto& start : nodes) {
    if (mark[start] != Mark::white) continue;
    std::vector<std::pair<TermId, std::size_t>> stack{{start, 0}};
    mark[start] = Mark::grey;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      const auto& succ = up[node];
      if (next < succ.size()) {
        const TermId child = succ[next++];
        if (mark[child] == Mark::grey) {
          DagReport r;
          r.ok = false;
          auto it = std::find_if(stack.begin(), stack.end(), [&](const auto& e) { return e.first == child; });
          for (; it != stack.end(); ++it) r.cycle.push_back(it->first);
          return r;
        }
        if (mark[child] == Mark::white) {
          mark[child] = Mark::grey;
          stack.emplace_back(child, 0);
        }
      } else {
        mark[node] = Mark::black;
        stack.pop_back();
      }
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Parsing and serialisation

inline Ontology parse_ontology(std::istream& in) {
  Ontology o;
  struct Ref {
    std::string id;
    std::size_t line;
  };
  std::vector<std::pair<Ref, Ref>> annots;  // (term, gene)
  std::vector<std::pair<Ref, Tokens>> descs;
  std::vector<std::pair<Ref, Ref>> edges;
  std::set<std::pair<TermId, GeneId>> seen_annot;
  std::set<std::pair<TermId, TermId>> seen_edge;

  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    if (!(ls >> kw) || kw.front() == '#') continue;
    std::vector<std::string> f;
    for (std::string w; ls >> w;) f.push_back(std::move(w));
    auto rest_from = [&](std::size_t i) {
      std::string s;
      for (; i < f.size(); ++i) s += f[i] + ' ';
      return tokenize(s);
    };

    if (kw == "TERM") {
      if (f.size() < 2 || f[1] != "NAME") throw ParseError("expected 'TERM <id> NAME <tokens...>'", lineno);
      Term t;
      t.id = f[0];
      t.name = rest_from(2);
      if (t.name.empty()) throw ParseError("term \"" + t.id + "\" has an empty name", lineno);
      if (!o.terms.emplace(t.id, t).second) throw DuplicateIdError(t.id, "term", lineno);
    } else if (kw == "GENE") {
      if (f.size() < 2 || f[1] != "TEXT") throw ParseError("expected 'GENE <id> TEXT <tokens...>'", lineno);
      GeneRecord g{f[0], rest_from(2)};
      if (g.text.empty()) throw ParseError("gene \"" + g.id + "\" has an empty text", lineno);
      if (!o.genes.emplace(g.id, g).second) throw DuplicateIdError(g.id, "gene", lineno);
    } else if (kw == "ISA") {
      if (f.size() != 2) throw ParseError("expected 'ISA <child> <parent>'", lineno);
      if (!seen_edge.emplace(f[0], f[1]).second) throw DuplicateIdError(f[0] + " ISA " + f[1], "is-a edge", lineno);
      edges.push_back({{f[0], lineno}, {f[1], lineno}});
    } else if (kw == "ANNOT") {
      if (f.size() != 2) throw ParseError("expected 'ANNOT <term-id> <gene-id>'", lineno);
      if (!seen_annot.emplace(f[0], f[1]).second) throw DuplicateIdError(f[0] + " " + f[1], "annotation", lineno);
      annots.push_back({{f[0], lineno}, {f[1], lineno}});
    } else if (kw == "DESC") {
      if (f.empty()) throw ParseError("expected 'DESC <term-id> <tokens...>'", lineno);
      Tokens d = rest_from(1);
      if (d.empty()) throw ParseError("term \"" + f[0] + "\" has an empty description", lineno);
      descs.push_back({{f[0], lineno}, std::move(d)});
    } else {
      throw ParseError("unknown record type '" + kw + "'", lineno);
    }
  }

  auto term_ref = [&](const Ref& r) -> Term& {
    auto it = o.terms.find(r.id);
    if (it == o.terms.end()) throw DanglingReferenceError(r.id, "term", r.line);
    return it->second;
  };
  for (const auto& [c, p] : edges) {
    term_ref(c);
    term_ref(p);
    o.isa_edges.emplace_back(c.id, p.id);
  }
  for (const auto& [t, g] : annots) {
    Term& term = term_ref(t);
    if (!o.genes.count(g.id)) throw DanglingReferenceError(g.id, "gene", g.line);
    term.gene_ids.push_back(g.id);
  }
  for (auto& [t, d] : descs) {
    Term& term = term_ref(t);
    if (term.description) throw DuplicateIdError(t.id, "description for term", t.line);
    term.description = std::move(d);
  }
  if (auto report = validate_dag(o); !report.ok) throw CycleError(report.cycle);
  return o;
}

inline Ontology parse_ontology(const std::string& text) {
  std::istringstream in(text);
  return parse_ontology(in);
}

/// Emits terms (with their annotations and description) in id order, then
/// genes in id order, then is-a edges in stored order.
inline void serialize_ontology(const Ontology& o, std::ostream& out) {
  out << "# gig corpus v1\n";
  for (const auto& [id, t] : o.terms) {
    out << "TERM " << id << " NAME " << join_tokens(t.name) << '\n';
    for (const auto& g : t.gene_ids) out << "ANNOT " << id << ' ' << g << '\n';
    if (t.description) out << "DESC " << id << ' ' << join_tokens(*t.description) << '\n';
  }
  for (const auto& [id, g] : o.genes) out << "GENE " << id << " TEXT " << join_tokens(g.text) << '\n';
  for (const auto& [c, p] : o.isa_edges) out << "ISA " << c << ' ' << p << '\n';
}

inline std::string serialize_ontology(const Ontology& o) {
  std::ostringstream out;
  serialize_ontology(o, out);
  return out.str();
}

// ---------------------------------------------------------------------------
// Gene-cover retrieval

struct CoverRelations {
  std::set<TermId> parents;   // genes(u) superset of genes(t)
  std::set<TermId> children;  // genes(u) subset of genes(t)
};

/// Inverted gene -> term index answering gene-cover queries. Terms with an
/// identical gene set are reported as both parent and child.
class CoverIndex {
 public:
  explicit CoverIndex(const Ontology& o, const std::set<TermId>* universe = nullptr) {
    std::unordered_map<GeneId, std::size_t> gene_index;
    for (const auto& [id, t] : o.terms) {
      if (universe && !universe->count(id)) continue;
      const std::size_t ti = ids_.size();
      index_.emplace(id, ti);
      ids_.push_back(id);
      std::vector<std::size_t> gs;
      for (const auto& g : t.gene_ids) {
        auto [it, inserted] = gene_index.emplace(g, gene_index.size());
        if (inserted) terms_by_gene_.emplace_back();
        gs.push_back(it->second);
        terms_by_gene_[it->second].push_back(ti);
      }
      std::sort(gs.begin(), gs.end());
      gs.erase(std::unique(gs.begin(), gs.end()), gs.end());
      if (gs.empty()) empty_.push_back(ti);
      genes_.push_back(std::move(gs));
    }
  }

  bool contains(const TermId& t) const { return index_.count(t) > 0; }
  std::size_t gene_count(const TermId& t) const { return genes_[at(t)].size(); }

  CoverRelations query(const TermId& t) const {
    const std::size_t ti = at(t);
    const auto& g = genes_[ti];
    CoverRelations r;
    if (g.empty()) {
      for (std::size_t u = 0; u < ids_.size(); ++u) {
        if (u != ti) r.parents.insert(ids_[u]);
      }
      for (std::size_t u : empty_) {
        if (u != ti) r.children.insert(ids_[u]);
      }
      return r;
    }
    // Parents must contain the rarest gene of t.
    const auto* rarest = &terms_by_gene_[g.front()];
    for (std::size_t gi : g) {
      if (terms_by_gene_[gi].size() < rarest->size()) rarest = &terms_by_gene_[gi];
    }
    for (std::size_t u : *rarest) {
      if (u != ti && std::includes(genes_[u].begin(), genes_[u].end(), g.begin(), g.end())) {
        r.parents.insert(ids_[u]);
      }
    }
    std::set<std::size_t> candidates(empty_.begin(), empty_.end());
    for (std::size_t gi : g) candidates.insert(terms_by_gene_[gi].begin(), terms_by_gene_[gi].end());
    for (std::size_t u : candidates) {
      if (u != ti && std::includes(g.begin(), g.end(), genes_[u].begin(), genes_[u].end())) {
        r.children.insert(ids_[u]);
      }
    }
    return r;
  }

  /// True when one gene set contains the other.
  bool related(const TermId& a, const TermId& b) const {
    const auto& ga = genes_[at(a)];
    const auto& gb = genes_[at(b)];
    return std::includes(ga.begin(), ga.end(), gb.begin(), gb.end()) ||
           std::includes(gb.begin(), gb.end(), ga.begin(), ga.end());
  }

 private:
  std::size_t at(const TermId& t) const {
    auto it = index_.find(t);
    if (it == index_.end()) throw UnknownTermError(t);
    return it->second;
  }

  std::vector<TermId> ids_;
  std::unordered_map<TermId, std::size_t> index_;
  std::vector<std::vector<std::size_t>> genes_;
  std::vector<std::vector<std::size_t>> terms_by_gene_;
  std::vector<std::size_t> empty_;
};

inline CoverRelations retrieve_parents_children(const Ontology& o, const TermId& t) {
  if (!o.terms.count(t)) throw UnknownTermError(t);
  return CoverIndex(o).query(t);
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Builds from the non-reserved tokens in index order.
  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const char* r : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(r);
    for (const auto& t : tokens) {
      if (index_.count(t)) throw std::invalid_argument("vocabulary: duplicate token \"" + t + "\"");
      add(t);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return index_.count(token) > 0; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(const Tokens& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  Tokens decode(std::span<const int> ids) const {
    Tokens out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  /// Non-reserved tokens in index order.
  std::vector<std::string> entries() const { return {tokens_.begin() + kReserved, tokens_.end()}; }

  void save(std::ostream& out) const {
    for (const auto& t : entries()) out << t << '\n';
  }

  static Vocabulary load(std::istream& in) {
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty()) tokens.push_back(line);
    }
    return Vocabulary(tokens);
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  void add(const std::string& t) {
    index_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Keeps tokens occurring at least `min_count` times, ordered by descending
/// frequency then lexicographically.
inline Vocabulary build_vocabulary(const std::vector<Tokens>& corpus, std::size_t min_count = 3) {
  if (min_count < 1) throw std::invalid_argument("build_vocabulary: min_count must be >= 1");
  if (corpus.empty()) throw std::invalid_argument("build_vocabulary: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& seq : corpus) {
    for (const auto& t : seq) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  const Vocabulary reserved;
  for (const auto& [t, c] : counts) {
    if (c >= min_count && !reserved.contains(t)) kept.emplace_back(t, c);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  tokens.reserve(kept.size());
  for (auto& [t, c] : kept) tokens.push_back(t);
  return Vocabulary(tokens);
}

// ---------------------------------------------------------------------------
// Splits

struct SplitRatios {
  double train = 0.7;
  double validation = 0.1;
  double test = 0.2;
};

struct DatasetSplit {
  std::vector<TermId> train;
  std::vector<TermId> validation;
  std::vector<TermId> test;
  std::uint64_t seed = 0;

  friend bool operator==(const DatasetSplit&, const DatasetSplit&) = default;

  void save(std::ostream& out) const {
    out << "# seed " << seed << '\n';
    for (const auto& t : train) out << "train " << t << '\n';
    for (const auto& t : validation) out << "validation " << t << '\n';
    for (const auto& t : test) out << "test " << t << '\n';
  }

  static DatasetSplit load(std::istream& in) {
    DatasetSplit s;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::istringstream ls(line);
      std::string part, id;
      if (!(ls >> part)) continue;
      if (part == "#") {
        std::string key;
        if (ls >> key && key == "seed") ls >> s.seed;
        continue;
      }
      if (!(ls >> id)) throw ParseError("expected '<split> <term-id>'", lineno);
      if (part == "train") {
        s.train.push_back(id);
      } else if (part == "validation") {
        s.validation.push_back(id);
      } else if (part == "test") {
        s.test.push_back(id);
      } else {
        throw ParseError("unknown split '" + part + "'", lineno);
      }
    }
    return s;
  }
};

/// Seeded shuffle, then floor(n * train) and floor(n * validation) terms to
/// the first two parts and the remainder to test.
inline DatasetSplit split_dataset(std::vector<TermId> terms, SplitRatios ratios, std::uint64_t seed) {
  if (terms.size() < 3) throw std::invalid_argument("split_dataset: need at least 3 terms");
  if (ratios.train < 0 || ratios.validation < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split_dataset: ratios must be non-negative and sum to 1");
  }
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  std::mt19937_64 rng(seed);
  std::shuffle(terms.begin(), terms.end(), rng);
  const double n = static_cast<double>(terms.size());
  const auto n_train = static_cast<std::size_t>(std::floor(n * ratios.train + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(n * ratios.validation + 1e-9));
  DatasetSplit s;
  s.seed = seed;
  s.train.assign(terms.begin(), terms.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation.assign(terms.begin() + static_cast<std::ptrdiff_t>(n_train),
                      terms.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(terms.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), terms.end());
  return s;
}

// ---------------------------------------------------------------------------
// Corpus statistics

struct CorpusStats {
  std::size_t terms = 0;
  std::size_t genes = 0;
  std::size_t described = 0;
  std::size_t isa_edges = 0;
  double mean_description_length = 0.0;
};

inline CorpusStats corpus_stats(const Ontology& o) {
  CorpusStats s;
  s.terms = o.terms.size();
  s.genes = o.genes.size();
  s.isa_edges = o.isa_edges.size();
  std::size_t total = 0;
  for (const auto& [id, t] : o.terms) {
    if (!t.description) continue;
    ++s.described;
    total += t.description->size();
  }
  s.mean_description_length = s.described ? static_cast<double>(total) / static_cast<double>(s.described) : 0.0;
  return s;
}

/// Fraction of description tokens that occur in the union of the term's
/// gene texts.
inline double description_gene_recall(const Ontology& o, const Term& t) {
  if (!t.description || t.description->empty()) return 0.0;
  std::unordered_set<std::string> words;
  for (const auto& g : t.gene_ids) {
    for (const auto& w : o.genes.at(g).text) words.insert(w);
  }
  std::size_t hit = 0;
  for (const auto& w : *t.description) hit += words.count(w);
  return static_cast<double>(hit) / static_cast<double>(t.description->size());
}

// ---------------------------------------------------------------------------
// Synthetic corpora

/// Shape of a synthetic corpus. Terms form a forest of `branching`-ary trees
/// of `depth` levels; leaves partition the genes and every inner term holds
/// the union of its children's genes, so gene-cover retrieval recovers the
/// tree's ancestor and descendant relations.
struct SynthConfig {
  std::size_t terms = 200;
  std::size_t genes = 300;
  std::size_t branching = 2;
  std::size_t depth = 3;
  std::size_t concepts_per_level = 10;
  std::size_t keywords_per_level = 10;
  std::size_t noise_words = 60;
  std::size_t noise_per_gene = 4;
  double min_overlap = 0.3;
  std::string id_prefix = "SYN";
  std::string word_prefix;
};

namespace detail {

class PseudoWords {
 public:
  PseudoWords(std::mt19937_64& rng, std::string prefix) : rng_(rng), prefix_(std::move(prefix)) {}

  std::string next() {
    static constexpr std::string_view onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                  "s", "t", "v", "z", "br", "kr", "st", "tr"};
    static constexpr std::string_view vowels[] = {"a", "e", "i", "o", "u", "ia", "eo"};
    for (;;) {
      std::string w = prefix_;
      const int syllables = 2 + static_cast<int>(rng_() % 2);
      for (int s = 0; s < syllables; ++s) {
        w += onsets[rng_() % std::size(onsets)];
        w += vowels[rng_() % std::size(vowels)];
      }
      w += onsets[rng_() % 13];
      if (used_.insert(w).second) return w;
    }
  }

  std::vector<std::string> pool(std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

 private:
  std::mt19937_64& rng_;
  std::string prefix_;
  std::unordered_set<std::string> used_;
};

}  // namespace detail

/// Generates a described corpus whose descriptions reuse the term's own name
/// word, its ancestors' and children's name words, and a keyword phrase
/// present in the term's gene texts. Deterministic per (cfg, seed).
inline Ontology synthesize_corpus(const SynthConfig& cfg, std::uint64_t seed) {
  if (cfg.terms == 0 || cfg.genes == 0 || cfg.branching == 0 || cfg.depth == 0 || cfg.concepts_per_level == 0 ||
      cfg.keywords_per_level == 0 || cfg.noise_words == 0) {
    throw std::invalid_argument("synthesize_corpus: configuration values must be positive");
  }
  std::mt19937_64 rng(seed);
  detail::PseudoWords words(rng, cfg.word_prefix);

  struct Node {
    std::size_t level = 0;
    std::optional<std::size_t> parent;
    std::vector<std::size_t> children;
    std::vector<std::size_t> genes;
    std::string concept_word;
    std::string keyword;
  };
  std::vector<Node> nodes;
  // Breadth-first tree growth until the term budget is spent.
  while (nodes.size() < cfg.terms) {
    std::vector<std::size_t> frontier{nodes.size()};
    nodes.push_back({});
    for (std::size_t level = 1; level < cfg.depth && nodes.size() < cfg.terms; ++level) {
      std::vector<std::size_t> next;
      for (std::size_t p : frontier) {
        for (std::size_t b = 0; b < cfg.branching && nodes.size() < cfg.terms; ++b) {
          Node n;
          n.level = level;
          n.parent = p;
          nodes[p].children.push_back(nodes.size());
          next.push_back(nodes.size());
          nodes.push_back(n);
        }
      }
      frontier = std::move(next);
    }
  }

  std::vector<std::vector<std::string>> concepts, keywords;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    concepts.push_back(words.pool(cfg.concepts_per_level));
    keywords.push_back(words.pool(cfg.keywords_per_level));
  }
  const auto noise = words.pool(cfg.noise_words);
  auto pick = [&](const std::vector<std::string>& pool) { return pool[rng() % pool.size()]; };

  // Siblings share one name word drawn per sibling group.
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!nodes[i].parent) nodes[i].concept_word = pick(concepts[0]);
    if (!nodes[i].children.empty()) {
      const std::string group = pick(concepts[nodes[i].level + 1]);
      for (std::size_t c : nodes[i].children) nodes[c].concept_word = group;
    }
    nodes[i].keyword = pick(keywords[nodes[i].level]);
  }

  std::vector<std::size_t> leaves;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].children.empty()) leaves.push_back(i);
  }
  std::vector<std::size_t> gene_leaf(cfg.genes, leaves.front());
  if (cfg.genes >= leaves.size()) {
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      const std::size_t begin = k * cfg.genes / leaves.size();
      const std::size_t end = (k + 1) * cfg.genes / leaves.size();
      for (std::size_t g = begin; g < end; ++g) {
        nodes[leaves[k]].genes.push_back(g);
        gene_leaf[g] = leaves[k];
      }
    }
  } else {
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      const std::size_t g = k % cfg.genes;
      nodes[leaves[k]].genes.push_back(g);
      if (k < cfg.genes) gene_leaf[g] = leaves[k];
    }
  }
  // Children always have larger indices than their parent.
  for (std::size_t i = nodes.size(); i-- > 0;) {
    if (!nodes[i].parent) continue;
    auto& pg = nodes[*nodes[i].parent].genes;
    for (std::size_t g : nodes[i].genes) {
      if (std::find(pg.begin(), pg.end(), g) == pg.end()) pg.push_back(g);
    }
  }
  for (auto& n : nodes) std::sort(n.genes.begin(), n.genes.end());

  auto lineage = [&](std::size_t i) {
    std::vector<std::size_t> chain{i};
    while (nodes[chain.back()].parent) chain.push_back(*nodes[chain.back()].parent);
    std::reverse(chain.begin(), chain.end());
    return chain;
  };
  auto term_id = [&](std::size_t i) {
    std::ostringstream s;
    s << cfg.id_prefix << ':' << std::setw(7) << std::setfill('0') << i + 1;
    return s.str();
  };
  auto gene_id = [&](std::size_t g) {
    std::ostringstream s;
    s << cfg.id_prefix << "G" << std::setw(5) << std::setfill('0') << g + 1;
    return s.str();
  };

  Ontology o;
  for (std::size_t g = 0; g < cfg.genes; ++g) {
    GeneRecord rec;
    rec.id = gene_id(g);
    const std::size_t half = cfg.noise_per_gene / 2;
    for (std::size_t k = 0; k < half; ++k) rec.text.push_back(pick(noise));
    rec.text.push_back("the");
    for (std::size_t a : lineage(gene_leaf[g])) rec.text.push_back(nodes[a].keyword);
    for (const char* w : {"activity", "driven", "by"}) rec.text.push_back(w);
    for (std::size_t k = half; k < cfg.noise_per_gene; ++k) rec.text.push_back(pick(noise));
    o.genes.emplace(rec.id, rec);
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const Node& n = nodes[i];
    Term t;
    t.id = term_id(i);
    t.name = {n.concept_word, "activity"};
    for (std::size_t g : n.genes) t.gene_ids.push_back(gene_id(g));
    Tokens d{"the"};
    for (std::size_t a : lineage(i)) d.push_back(nodes[a].concept_word);
    d.push_back("activity");
    if (!n.children.empty()) {
      for (const std::string w : {"that", "includes"}) d.push_back(w);
      d.push_back(nodes[n.children.front()].concept_word);
      d.push_back("processes");
    }
    for (const std::string w : {"driven", "by"}) d.push_back(w);
    d.push_back(n.keyword);
    t.description = std::move(d);
    // Top up with gene-text words if the template alone undershoots.
    const auto& first_text = o.genes.at(t.gene_ids.front()).text;
    for (std::size_t k = 0; description_gene_recall(o, t) < cfg.min_overlap; ++k) {
      t.description->push_back(first_text[k % first_text.size()]);
    }
    if (n.parent) o.isa_edges.emplace_back(t.id, term_id(*n.parent));
    o.terms.emplace(t.id, std::move(t));
  }
  return o;
}

}  // namespace gig
