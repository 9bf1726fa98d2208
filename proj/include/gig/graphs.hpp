#pragma once

// Per-term gene graphs (term, gene and word nodes) and per-example term graphs
// (current term plus gene-cover parents and children).

#include "gig/go_data.hpp"
#include "gig/tensor.hpp"

#include <cmath>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace gig {

struct WeightedEdge {
  std::size_t a = 0;  // a < b
  std::size_t b = 0;
  double weight = 1.0;

  friend bool operator==(const WeightedEdge&, const WeightedEdge&) = default;
};

namespace detail {

inline SparseMatrix symmetric_adjacency(std::size_t n, const std::vector<WeightedEdge>& edges) {
  SparseMatrix m{n, n, {}};
  m.entries.reserve(2 * edges.size());
  for (const auto& e : edges) {
    m.entries.push_back({e.a, e.b, e.weight});
    m.entries.push_back({e.b, e.a, e.weight});
  }
  return m;
}

inline std::vector<double> dense_from_edges(std::size_t n, const std::vector<WeightedEdge>& edges) {
  std::vector<double> out(n * n, 0.0);
  for (const auto& e : edges) {
    out[e.a * n + e.b] = e.weight;
    out[e.b * n + e.a] = e.weight;
  }
  return out;
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Co-occurrence weights

/// weight(g, w) = c(g, w) / sqrt(d(g) * d(w)) with c the count of token w in
/// text(g), d(g) the length of text(g) and d(w) the total count of w over all
/// given texts. Pairs with zero count are absent.
template <typename Key>
std::map<std::pair<Key, std::string>, double> cooccurrence_weights(const std::map<Key, Tokens>& texts) {
  std::map<std::pair<Key, std::string>, double> counts;
  std::unordered_map<std::string, double> word_degree;
  std::map<Key, double> gene_degree;
  for (const auto& [g, tokens] : texts) {
    if (tokens.empty()) throw std::invalid_argument("cooccurrence_weights: empty text");
    for (const auto& w : tokens) {
      counts[{g, w}] += 1.0;
      word_degree[w] += 1.0;
    }
    gene_degree[g] = static_cast<double>(tokens.size());
  }
  for (auto& [key, c] : counts) c /= std::sqrt(gene_degree[key.first] * word_degree[key.second]);
  return counts;
}

// ---------------------------------------------------------------------------
// Gene graph

enum class NodeKind { Term, Gene, Word };

inline const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Term: return "TERM";
    case NodeKind::Gene: return "GENE";
    case NodeKind::Word: return "WORD";
  }
  return "?";
}

struct NodeDescriptor {
  NodeKind kind = NodeKind::Term;
  std::string label;  // term id, gene id or word surface form
  int token_id = -1;  // vocabulary id for word nodes

  friend bool operator==(const NodeDescriptor&, const NodeDescriptor&) = default;
};

struct GeneGraphOptions {
  std::size_t max_genes = 32;
  std::size_t max_gene_tokens = 64;
  std::uint64_t seed = 0;
};

class GeneGraphError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Node order: [term, genes in annotation order, distinct words in order of
/// first occurrence]. Term-gene edges have weight 1; gene-word edges carry
/// co-occurrence weights.
struct GeneGraph {
  static constexpr std::size_t term_node_index = 0;

  std::vector<NodeDescriptor> nodes;
  std::vector<WeightedEdge> edges;
  std::vector<Tokens> gene_texts;  // truncated text of each gene node
  std::size_t gene_count = 0;
  std::size_t word_count = 0;

  std::size_t size() const { return nodes.size(); }
  SparseMatrix adjacency() const { return detail::symmetric_adjacency(size(), edges); }
  std::vector<double> dense_adjacency() const { return detail::dense_from_edges(size(), edges); }
};

/// Genes kept for a term: all of them, or a seeded subsample of `max_genes`
/// that preserves annotation order.
inline std::vector<GeneId> select_genes(const Term& term, const GeneGraphOptions& opts) {
  if (opts.max_genes == 0 || term.gene_ids.size() <= opts.max_genes) return term.gene_ids;
  std::vector<std::size_t> idx(term.gene_ids.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(opts.seed ^ detail::fnv1a(term.id));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opts.max_genes);
  std::sort(idx.begin(), idx.end());
  std::vector<GeneId> out;
  for (std::size_t i : idx) out.push_back(term.gene_ids[i]);
  return out;
}

inline Tokens gene_tokens(const GeneRecord& g, std::size_t max_tokens) {
  Tokens t = tokenize(join_tokens(g.text));
  if (t.empty()) throw GeneGraphError("gene \"" + g.id + "\" has an empty text after tokenization");
  if (max_tokens > 0 && t.size() > max_tokens) t.resize(max_tokens);
  return t;
}

inline GeneGraph build_gene_graph(const Term& term, const std::map<GeneId, GeneRecord>& genes,
                                  const Vocabulary& vocab, const GeneGraphOptions& opts = {}) {
  if (term.gene_ids.empty()) throw GeneGraphError("term \"" + term.id + "\" has no genes");
  GeneGraph g;
  g.nodes.push_back({NodeKind::Term, term.id, -1});
  std::map<GeneId, Tokens> texts;
  for (const auto& gid : select_genes(term, opts)) {
    auto it = genes.find(gid);
    if (it == genes.end()) throw GeneGraphError("term \"" + term.id + "\" references unknown gene \"" + gid + "\"");
    g.nodes.push_back({NodeKind::Gene, gid, -1});
    g.gene_texts.push_back(gene_tokens(it->second, opts.max_gene_tokens));
    texts[gid] = g.gene_texts.back();
  }
  g.gene_count = g.gene_texts.size();
  std::unordered_map<std::string, std::size_t> word_node;
  for (const auto& text : g.gene_texts) {
    for (const auto& w : text) {
      if (word_node.emplace(w, g.nodes.size()).second) g.nodes.push_back({NodeKind::Word, w, vocab.id(w)});
    }
  }
  g.word_count = g.nodes.size() - 1 - g.gene_count;

  for (std::size_t i = 0; i < g.gene_count; ++i) g.edges.push_back({0, 1 + i, 1.0});
  const auto weights = cooccurrence_weights(texts);
  for (std::size_t i = 0; i < g.gene_count; ++i) {
    const GeneId& gid = g.nodes[1 + i].label;
    std::set<std::size_t> seen;
    for (const auto& w : g.gene_texts[i]) {
      const std::size_t wn = word_node.at(w);
      if (seen.insert(wn).second) g.edges.push_back({1 + i, wn, weights.at({gid, w})});
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Term graph

enum class TermRole { Current, Parent, Child };

inline const char* to_string(TermRole r) {
  switch (r) {
    case TermRole::Current: return "CURRENT";
    case TermRole::Parent: return "PARENT";
    case TermRole::Child: return "CHILD";
  }
  return "?";
}

/// How neighbour-to-neighbour edges are chosen; the current term is always
/// linked to every neighbour.
enum class NeighbourEdges {
  IsA,        // a direct is-a edge between the two terms
  GeneCover,  // one gene set contains the other
};

struct TermGraphOptions {
  std::size_t max_parents = 8;
  std::size_t max_children = 8;
  bool include_parents = true;
  bool include_children = true;
  NeighbourEdges neighbour_edges = NeighbourEdges::IsA;
};

struct TermGraph {
  std::vector<TermId> nodes;  // current term first, then parents, then children
  std::vector<TermRole> roles;
  std::vector<WeightedEdge> edges;  // all weights 1

  std::size_t size() const { return nodes.size(); }
  std::size_t count(TermRole r) const { return static_cast<std::size_t>(std::count(roles.begin(), roles.end(), r)); }
  SparseMatrix adjacency() const { return detail::symmetric_adjacency(size(), edges); }
  std::vector<double> dense_adjacency() const { return detail::dense_from_edges(size(), edges); }
};

/// Neighbourhood lookups shared across many term-graph builds.
class TermGraphBuilder {
 public:
  explicit TermGraphBuilder(const Ontology& o, const std::set<TermId>* universe = nullptr)
      : index_(o, universe) {
    for (const auto& [c, p] : o.isa_edges) {
      isa_.insert({c, p});
      isa_.insert({p, c});
    }
  }

  const CoverIndex& index() const { return index_; }

  TermGraph build(const TermId& t, const TermGraphOptions& opts = {}) const {
    const auto rel = index_.query(t);
    const std::size_t own = index_.gene_count(t);
    auto ranked = [&](const std::set<TermId>& ids, std::size_t cap) {
      std::vector<TermId> v(ids.begin(), ids.end());
      std::stable_sort(v.begin(), v.end(), [&](const TermId& a, const TermId& b) {
        const auto da = diff(index_.gene_count(a), own), db = diff(index_.gene_count(b), own);
        return da != db ? da < db : a < b;
      });
      if (v.size() > cap) v.resize(cap);
      return v;
    };
    TermGraph g;
    g.nodes.push_back(t);
    g.roles.push_back(TermRole::Current);
    if (opts.include_parents) {
      for (auto& p : ranked(rel.parents, opts.max_parents)) {
        g.nodes.push_back(p);
        g.roles.push_back(TermRole::Parent);
      }
    }
    if (opts.include_children) {
      for (auto& c : ranked(rel.children, opts.max_children)) {
        g.nodes.push_back(c);
        g.roles.push_back(TermRole::Child);
      }
    }
    for (std::size_t i = 1; i < g.size(); ++i) g.edges.push_back({0, i, 1.0});
    for (std::size_t i = 1; i < g.size(); ++i) {
      for (std::size_t j = i + 1; j < g.size(); ++j) {
        const bool linked = opts.neighbour_edges == NeighbourEdges::IsA
                                ? isa_.count({g.nodes[i], g.nodes[j]}) > 0
                                : index_.related(g.nodes[i], g.nodes[j]);
        if (linked) g.edges.push_back({i, j, 1.0});
      }
    }
    return g;
  }

 private:
  static std::size_t diff(std::size_t a, std::size_t b) { return a > b ? a - b : b - a; }

  CoverIndex index_;
  std::set<std::pair<TermId, TermId>> isa_;
};

inline TermGraph build_term_graph(const Ontology& o, const TermId& t, const TermGraphOptions& opts = {}) {
  if (!o.terms.count(t)) throw UnknownTermError(t);
  return TermGraphBuilder(o).build(t, opts);
}

// ---------------------------------------------------------------------------
// Debug export

inline void export_edge_list(const GeneGraph& g, std::ostream& out) {
  out << "# nodes " << g.size() << '\n';
  for (std::size_t i = 0; i < g.size(); ++i) {
    out << i << ' ' << to_string(g.nodes[i].kind) << ' ' << g.nodes[i].label << '\n';
  }
  out << "# edges " << g.edges.size() << '\n';
  for (const auto& e : g.edges) out << e.a << ' ' << e.b << ' ' << e.weight << '\n';
}

inline void export_edge_list(const TermGraph& g, std::ostream& out) {
  out << "# nodes " << g.size() << '\n';
  for (std::size_t i = 0; i < g.size(); ++i) out << i << ' ' << to_string(g.roles[i]) << ' ' << g.nodes[i] << '\n';
  out << "# edges " << g.edges.size() << '\n';
  for (const auto& e : g.edges) out << e.a << ' ' << e.b << ' ' << e.weight << '\n';
}

}  // namespace gig
