#pragma once

// Gene-text embedder, gene-graph and term-graph encoders, memory assembly and
// the description decoder (Transformer or LSTM), plus greedy and beam search.

#include "gig/checkpoint.hpp"
#include "gig/config.hpp"
#include "gig/graphs.hpp"
#include "gig/init.hpp"
#include "gig/ops.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace gig {

enum class DecoderKind { Transformer, Lstm };

/// The five supported encoder settings.
enum class Variant { Baseline, GeneGraph, Parents, Children, Full };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::Baseline, Variant::GeneGraph, Variant::Parents, Variant::Children,
                                      Variant::Full};
  return v;
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::GeneGraph: return "a";
    case Variant::Parents: return "b";
    case Variant::Children: return "c";
    case Variant::Full: return "full";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : all_variants()) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s + "' (expected baseline, a, b, c or full)");
}

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t decoder_layers = 2;
  DecoderKind decoder = DecoderKind::Transformer;
  double dropout = 0.1;
  std::size_t max_decode_len = 32;
  std::size_t encoder_rounds = 1;
  bool use_gene_graph = true;
  bool use_parent_nodes = true;
  bool use_child_nodes = true;
  std::size_t max_parents = 8;
  std::size_t max_children = 8;
  std::size_t max_genes = 32;
  std::size_t max_gene_tokens = 64;
  NeighbourEdges neighbour_edges = NeighbourEdges::IsA;

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.d = 512;
    c.heads = 8;
    return c;
  }

  bool uses_term_graph() const { return use_gene_graph && (use_parent_nodes || use_child_nodes); }

  Variant variant() const {
    if (!use_gene_graph) return Variant::Baseline;
    if (use_parent_nodes && use_child_nodes) return Variant::Full;
    if (use_parent_nodes) return Variant::Parents;
    if (use_child_nodes) return Variant::Children;
    return Variant::GeneGraph;
  }

  ModelConfig& set_variant(Variant v) {
    use_gene_graph = v != Variant::Baseline;
    use_parent_nodes = v == Variant::Parents || v == Variant::Full;
    use_child_nodes = v == Variant::Children || v == Variant::Full;
    return *this;
  }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
      throw ConfigError("model: d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                        std::to_string(heads));
    }
    if (d % 2 != 0) throw ConfigError("model: d must be even (two LSTM directions of width d/2)");
    if (decoder_layers == 0) throw ConfigError("model: decoder_layers must be >= 1");
    if (max_decode_len == 0) throw ConfigError("model: max_decode_len must be >= 1");
    if (encoder_rounds == 0) throw ConfigError("model: encoder_rounds must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must lie in [0, 1)");
    if (!use_gene_graph && (use_parent_nodes || use_child_nodes)) {
      throw ConfigError("model: parent/child nodes require the gene graph (valid settings: baseline, a, b, c, full)");
    }
  }

  static std::set<std::string> keys() {
    return {"model.d",           "model.heads",          "model.decoder_layers",  "model.decoder",
            "model.dropout",     "model.max_decode_len", "model.encoder_rounds",  "model.use_gene_graph",
            "model.use_parent_nodes", "model.use_child_nodes", "model.max_parents", "model.max_children",
            "model.max_genes",   "model.max_gene_tokens", "model.neighbour_edges"};
  }

  void write(KvDocument& doc) const {
    doc.set("model.d", std::to_string(d));
    doc.set("model.heads", std::to_string(heads));
    doc.set("model.decoder_layers", std::to_string(decoder_layers));
    doc.set("model.decoder", decoder == DecoderKind::Transformer ? "transformer" : "lstm");
    doc.set("model.dropout", format_double(dropout));
    doc.set("model.max_decode_len", std::to_string(max_decode_len));
    doc.set("model.encoder_rounds", std::to_string(encoder_rounds));
    doc.set("model.use_gene_graph", use_gene_graph ? "true" : "false");
    doc.set("model.use_parent_nodes", use_parent_nodes ? "true" : "false");
    doc.set("model.use_child_nodes", use_child_nodes ? "true" : "false");
    doc.set("model.max_parents", std::to_string(max_parents));
    doc.set("model.max_children", std::to_string(max_children));
    doc.set("model.max_genes", std::to_string(max_genes));
    doc.set("model.max_gene_tokens", std::to_string(max_gene_tokens));
    doc.set("model.neighbour_edges", neighbour_edges == NeighbourEdges::IsA ? "isa" : "gene_cover");
  }

  static ModelConfig read(const KvDocument& doc) { return read(doc, ModelConfig{}); }

  static ModelConfig read(const KvDocument& doc, ModelConfig c) {
    c.d = doc.get("model.d", c.d);
    c.heads = doc.get("model.heads", c.heads);
    c.decoder_layers = doc.get("model.decoder_layers", c.decoder_layers);
    const std::string kind = doc.get_string("model.decoder", c.decoder == DecoderKind::Transformer ? "transformer" : "lstm");
    if (kind == "transformer") {
      c.decoder = DecoderKind::Transformer;
    } else if (kind == "lstm") {
      c.decoder = DecoderKind::Lstm;
    } else {
      throw ConfigError("model.decoder: expected transformer or lstm, got '" + kind + "'");
    }
    c.dropout = doc.get("model.dropout", c.dropout);
    c.max_decode_len = doc.get("model.max_decode_len", c.max_decode_len);
    c.encoder_rounds = doc.get("model.encoder_rounds", c.encoder_rounds);
    c.use_gene_graph = doc.get("model.use_gene_graph", c.use_gene_graph);
    c.use_parent_nodes = doc.get("model.use_parent_nodes", c.use_parent_nodes);
    c.use_child_nodes = doc.get("model.use_child_nodes", c.use_child_nodes);
    c.max_parents = doc.get("model.max_parents", c.max_parents);
    c.max_children = doc.get("model.max_children", c.max_children);
    c.max_genes = doc.get("model.max_genes", c.max_genes);
    c.max_gene_tokens = doc.get("model.max_gene_tokens", c.max_gene_tokens);
    const std::string edges = doc.get_string("model.neighbour_edges", c.neighbour_edges == NeighbourEdges::IsA ? "isa" : "gene_cover");
    if (edges == "isa") {
      c.neighbour_edges = NeighbourEdges::IsA;
    } else if (edges == "gene_cover") {
      c.neighbour_edges = NeighbourEdges::GeneCover;
    } else {
      throw ConfigError("model.neighbour_edges: expected isa or gene_cover, got '" + edges + "'");
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Building blocks

/// One simultaneous propagation round per `rounds`:
/// out_i = v_i + relu(sum_j adj_ij * W v_j).
inline Tensor encode_graph(const SparseMatrix& adjacency, const Tensor& nodes, const Tensor& weight,
                           std::size_t rounds = 1) {
  if (adjacency.rows != nodes.rows() || adjacency.cols != nodes.rows()) {
    throw ShapeError("encode_graph: adjacency " + std::to_string(adjacency.rows) + "x" +
                     std::to_string(adjacency.cols) + " for nodes " + to_string(nodes.shape()));
  }
  if (weight.shape() != Shape{nodes.cols(), nodes.cols()}) {
    throw ShapeError("encode_graph: weight " + to_string(weight.shape()) + " for nodes " + to_string(nodes.shape()));
  }
  Tensor v = nodes;
  for (std::size_t r = 0; r < rounds; ++r) v = add(v, relu(matmul_bt(spmm(adjacency, v), weight)));
  return v;
}

inline Tensor encode_gene_graph(const GeneGraph& g, const Tensor& nodes, const Tensor& weight, std::size_t rounds = 1) {
  return encode_graph(g.adjacency(), nodes, weight, rounds);
}

inline Tensor encode_term_graph(const TermGraph& g, const Tensor& nodes, const Tensor& weight, std::size_t rounds = 1) {
  return encode_graph(g.adjacency(), nodes, weight, rounds);
}

/// Decoder memory: gene-graph rows followed by term-graph rows.
inline Tensor build_memory(const Tensor& gene_rows, const std::optional<Tensor>& term_rows) {
  if (!term_rows) return gene_rows;
  if (term_rows->cols() != gene_rows.cols()) {
    throw ShapeError("build_memory: widths " + to_string(gene_rows.shape()) + " and " + to_string(term_rows->shape()));
  }
  return concat_rows({gene_rows, *term_rows});
}

struct AttentionWeights {
  Parameter query, key, value, output;
};

/// Projects queries, keys and values, attends per head and projects the
/// concatenated heads.
inline Tensor multi_head_attention(const Tensor& queries, const Tensor& keys_values, const AttentionWeights& w,
                                   std::size_t heads, bool causal, std::vector<double>* weights = nullptr) {
  const Tensor q = matmul(queries, w.query.tensor);
  const Tensor k = matmul(keys_values, w.key.tensor);
  const Tensor v = matmul(keys_values, w.value.tensor);
  return matmul(attention(q, k, v, heads, causal, weights), w.output.tensor);
}

inline Tensor sinusoidal_positions(std::size_t length, std::size_t d) {
  std::vector<double> v(length * d);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      v[t * d + i] = std::sin(angle);
      if (i + 1 < d) v[t * d + i + 1] = std::cos(angle);
    }
  }
  return Tensor({length, d}, std::move(v));
}

struct LstmWeights {
  Parameter input;      // d_in x 4H
  Parameter recurrent;  // H x 4H
  Parameter bias;       // 1 x 4H
};

/// Runs an LSTM over a batch of id sequences (step-major, start-aligned);
/// rows stop updating after their sequence ends. Returns each row's final [h|c].
inline Tensor run_lstm_batch(const Tensor& embedding, const std::vector<std::vector<int>>& sequences,
                             const LstmWeights& w, std::size_t hidden) {
  std::size_t longest = 0;
  for (const auto& s : sequences) longest = std::max(longest, s.size());
  Tensor state({sequences.size(), 2 * hidden}, 0.0);
  std::vector<int> ids(sequences.size());
  std::vector<bool> active(sequences.size());
  for (std::size_t t = 0; t < longest; ++t) {
    for (std::size_t r = 0; r < sequences.size(); ++r) {
      active[r] = t < sequences[r].size();
      ids[r] = active[r] ? sequences[r][t] : 0;
    }
    const Tensor x = gather_rows(embedding, ids);
    const Tensor gates =
        add(add(matmul(x, w.input.tensor), matmul(slice_cols(state, 0, hidden), w.recurrent.tensor)), w.bias.tensor);
    state = select_rows(lstm_cell(gates, state), state, active);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Prepared examples

struct DecoderLayer {
  AttentionWeights self_attention;  // Transformer only
  LstmWeights lstm;                 // LSTM only
  AttentionWeights memory_attention;
  Parameter ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;  // Transformer only
  Parameter norm1_gain, norm1_bias, norm2_gain, norm2_bias, norm3_gain, norm3_bias;
};

/// Static, parameter-free inputs of one example.
struct PreparedTerm {
  struct GraphInput {
    std::vector<int> name_ids;
    GeneGraph graph;                   // word nodes dropped when only the term row is needed
    std::vector<int> word_ids;         // vocabulary ids of word nodes
  };

  TermId id;
  GraphInput own;
  TermGraph term_graph;                // empty unless the term graph is used
  std::vector<GraphInput> neighbours;  // term-graph nodes 1..n
  std::vector<std::string> memory_labels;
  std::vector<int> target_ids;         // description ids followed by EOS; empty if undescribed
};

/// Distinct gene texts of a batch embedded once.
struct GeneTable {
  Tensor embeddings;
  std::unordered_map<GeneId, std::size_t> row;
};

enum class SearchKind { Greedy, Beam };

struct DecodeStrategy {
  SearchKind kind = SearchKind::Greedy;
  std::size_t beam_size = 1;

  static DecodeStrategy greedy() { return {}; }
  static DecodeStrategy beam(std::size_t k) {
    if (k == 0) throw std::invalid_argument("beam size must be >= 1");
    return {SearchKind::Beam, k};
  }
};

struct Generation {
  std::vector<int> ids;  // without BOS/EOS
  Tokens tokens;
  std::vector<std::vector<double>> attention;  // per emitted token, over memory rows
  std::vector<std::string> memory_labels;
  double score = 0.0;  // length-normalised log-probability
};

// ---------------------------------------------------------------------------
// Model

class GenerationModel {
 public:
  GenerationModel(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed)
      : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    const std::size_t d = cfg_.d, h = d / 2, n = vocab_.size();
    std::mt19937_64 rng(seed);
    embedding_ = normal_init("embedding", {n, d}, 0.02, rng);
    for (const char* dir : {"forward", "backward"}) {
      LstmWeights w{xavier_uniform(std::string("gene_lstm.") + dir + ".input", {d, 4 * h}, rng),
                    xavier_uniform(std::string("gene_lstm.") + dir + ".recurrent", {h, 4 * h}, rng),
                    constant_init(std::string("gene_lstm.") + dir + ".bias", {1, 4 * h})};
      (std::string(dir) == "forward" ? gene_lstm_fwd_ : gene_lstm_bwd_) = std::move(w);
    }
    gene_graph_weight_ = xavier_uniform("gene_graph.weight", {d, d}, rng);
    term_graph_weight_ = xavier_uniform("term_graph.weight", {d, d}, rng);
    auto attn = [&](const std::string& prefix) {
      return AttentionWeights{xavier_uniform(prefix + ".query", {d, d}, rng), xavier_uniform(prefix + ".key", {d, d}, rng),
                              xavier_uniform(prefix + ".value", {d, d}, rng),
                              xavier_uniform(prefix + ".output", {d, d}, rng)};
    };
    for (std::size_t l = 0; l < cfg_.decoder_layers; ++l) {
      const std::string p = "decoder." + std::to_string(l);
      DecoderLayer layer;
      if (cfg_.decoder == DecoderKind::Transformer) {
        layer.self_attention = attn(p + ".self_attention");
      } else {
        layer.lstm = {xavier_uniform(p + ".lstm.input", {d, 4 * d}, rng), xavier_uniform(p + ".lstm.recurrent", {d, 4 * d}, rng),
                      constant_init(p + ".lstm.bias", {1, 4 * d})};
      }
      layer.memory_attention = attn(p + ".memory_attention");
      if (cfg_.decoder == DecoderKind::Transformer) {
        layer.ffn_in = xavier_uniform(p + ".ffn.in", {d, 4 * d}, rng);
        layer.ffn_in_bias = constant_init(p + ".ffn.in_bias", {1, 4 * d});
        layer.ffn_out = xavier_uniform(p + ".ffn.out", {4 * d, d}, rng);
        layer.ffn_out_bias = constant_init(p + ".ffn.out_bias", {1, d});
      }
      const std::size_t norms = cfg_.decoder == DecoderKind::Transformer ? 3 : 2;
      Parameter* gains[] = {&layer.norm1_gain, &layer.norm2_gain, &layer.norm3_gain};
      Parameter* biases[] = {&layer.norm1_bias, &layer.norm2_bias, &layer.norm3_bias};
      for (std::size_t k = 0; k < norms; ++k) {
        *gains[k] = constant_init(p + ".norm" + std::to_string(k + 1) + ".gain", {1, d}, 1.0);
        *biases[k] = constant_init(p + ".norm" + std::to_string(k + 1) + ".bias", {1, d});
      }
      layers_.push_back(std::move(layer));
    }
    output_ = xavier_uniform("output.weight", {d, n}, rng);
    output_bias_ = constant_init("output.bias", {1, n});
  }

  GenerationModel(const GenerationModel&) = delete;
  GenerationModel& operator=(const GenerationModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }

  /// Every trainable parameter in a fixed order. Parameters that a setting
  /// never reads (e.g. the term-graph weight for the baseline) are included.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embedding_};
    for (auto* w : {&gene_lstm_fwd_, &gene_lstm_bwd_}) {
      out.insert(out.end(), {&w->input, &w->recurrent, &w->bias});
    }
    out.push_back(&gene_graph_weight_);
    out.push_back(&term_graph_weight_);
    for (auto& l : layers_) {
      if (cfg_.decoder == DecoderKind::Transformer) {
        auto& a = l.self_attention;
        out.insert(out.end(), {&a.query, &a.key, &a.value, &a.output});
      } else {
        out.insert(out.end(), {&l.lstm.input, &l.lstm.recurrent, &l.lstm.bias});
      }
      auto& m = l.memory_attention;
      out.insert(out.end(), {&m.query, &m.key, &m.value, &m.output});
      if (cfg_.decoder == DecoderKind::Transformer) {
        out.insert(out.end(), {&l.ffn_in, &l.ffn_in_bias, &l.ffn_out, &l.ffn_out_bias});
      }
      out.insert(out.end(), {&l.norm1_gain, &l.norm1_bias, &l.norm2_gain, &l.norm2_bias});
      if (cfg_.decoder == DecoderKind::Transformer) out.insert(out.end(), {&l.norm3_gain, &l.norm3_bias});
    }
    out.push_back(&output_);
    out.push_back(&output_bias_);
    return out;
  }

  /// Parameters whose gradient the configured setting actually reaches.
  std::vector<Parameter*> active_parameters() {
    auto all = parameters();
    std::vector<Parameter*> out;
    for (Parameter* p : all) {
      if (p == &gene_graph_weight_ && !cfg_.use_gene_graph) continue;
      if (p == &term_graph_weight_ && !cfg_.uses_term_graph()) continue;
      out.push_back(p);
    }
    return out;
  }

  std::vector<NamedArray> state() {
    std::vector<NamedArray> out;
    for (Parameter* p : parameters()) {
      const auto& t = p->tensor;
      out.push_back({p->name, {t.rows(), t.cols()}, {t.values().begin(), t.values().end()}});
    }
    return out;
  }

  void load_state(const std::vector<NamedArray>& arrays) {
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (Parameter* p : parameters()) {
      auto it = by_name.find(p->name);
      if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter '" + p->name + "'");
      const auto& a = *it->second;
      if (a.shape != std::vector<std::uint64_t>{p->tensor.rows(), p->tensor.cols()}) {
        throw CheckpointError("checkpoint shape mismatch for '" + p->name + "'");
      }
      std::copy(a.values.begin(), a.values.end(), p->tensor.mutable_values().begin());
    }
  }

  // -- Example preparation ---------------------------------------------------

  PreparedTerm prepare(const Ontology& o, const TermGraphBuilder& neighbourhood, const TermId& id) const {
    const Term& term = o.term(id);
    PreparedTerm p;
    p.id = id;
    p.own = graph_input(term, o, cfg_.use_gene_graph);
    if (cfg_.uses_term_graph()) {
      TermGraphOptions opts;
      opts.max_parents = cfg_.max_parents;
      opts.max_children = cfg_.max_children;
      opts.include_parents = cfg_.use_parent_nodes;
      opts.include_children = cfg_.use_child_nodes;
      opts.neighbour_edges = cfg_.neighbour_edges;
      p.term_graph = neighbourhood.build(id, opts);
      for (std::size_t i = 1; i < p.term_graph.size(); ++i) {
        p.neighbours.push_back(graph_input(o.term(p.term_graph.nodes[i]), o, cfg_.encoder_rounds > 1));
      }
    }
    if (!cfg_.use_gene_graph) {
      for (std::size_t i = 1; i <= p.own.graph.gene_count; ++i) p.memory_labels.push_back("GENE " + p.own.graph.nodes[i].label);
    } else {
      for (const auto& n : p.own.graph.nodes) p.memory_labels.push_back(std::string(to_string(n.kind)) + " " + n.label);
      if (cfg_.uses_term_graph()) {
        for (std::size_t i = 0; i < p.term_graph.size(); ++i) {
          p.memory_labels.push_back(std::string(to_string(p.term_graph.roles[i])) + " " + p.term_graph.nodes[i]);
        }
      }
    }
    if (term.description) {
      Tokens desc = *term.description;
      if (desc.size() + 1 > cfg_.max_decode_len) desc.resize(cfg_.max_decode_len - 1);
      p.target_ids = vocab_.encode(desc);
      p.target_ids.push_back(Vocabulary::kEos);
    }
    return p;
  }

  PreparedTerm prepare(const Ontology& o, const TermId& id) const {
    if (!o.terms.count(id)) throw UnknownTermError(id);
    return prepare(o, TermGraphBuilder(o), id);
  }

  // -- Encoding --------------------------------------------------------------

  GeneTable embed_genes(std::span<const PreparedTerm* const> batch) const {
    std::map<GeneId, std::vector<int>> texts;
    auto collect = [&](const PreparedTerm::GraphInput& in) {
      for (std::size_t i = 1; i <= in.graph.gene_count; ++i) {
        const GeneId& g = in.graph.nodes[i].label;
        if (!texts.count(g)) texts[g] = vocab_.encode(in.graph.gene_texts[i - 1]);
      }
    };
    for (const PreparedTerm* p : batch) {
      collect(p->own);
      for (const auto& n : p->neighbours) collect(n);
    }
    GeneTable table;
    std::vector<std::vector<int>> forward, backward;
    for (auto& [g, ids] : texts) {
      table.row[g] = forward.size();
      forward.push_back(ids);
      backward.emplace_back(ids.rbegin(), ids.rend());
    }
    const std::size_t h = cfg_.d / 2;
    const Tensor f = slice_cols(run_lstm_batch(embedding_.tensor, forward, gene_lstm_fwd_, h), 0, h);
    const Tensor b = slice_cols(run_lstm_batch(embedding_.tensor, backward, gene_lstm_bwd_, h), 0, h);
    table.embeddings = concat_cols({f, b});
    return table;
  }

  GeneTable embed_genes(const PreparedTerm& p) const {
    const PreparedTerm* one[] = {&p};
    return embed_genes(one);
  }

  /// BiLSTM embedding of a single token sequence (1 x d).
  Tensor embed_gene_text(const Tokens& tokens) const {
    if (tokens.empty()) throw std::invalid_argument("embed_gene_text: empty sequence");
    const std::size_t h = cfg_.d / 2;
    auto ids = vocab_.encode(tokens);
    std::vector<int> rev(ids.rbegin(), ids.rend());
    const Tensor f = slice_cols(run_lstm_batch(embedding_.tensor, {ids}, gene_lstm_fwd_, h), 0, h);
    const Tensor b = slice_cols(run_lstm_batch(embedding_.tensor, {rev}, gene_lstm_bwd_, h), 0, h);
    return concat_cols({f, b});
  }

  /// Decoder memory for one example.
  Tensor encode(const PreparedTerm& p, const GeneTable& table) const {
    const Tensor own_genes = gene_rows(p.own, table);
    if (!cfg_.use_gene_graph) return own_genes;
    const Tensor encoded = encode_gene_graph(p.own.graph, node_embeddings(p.own, own_genes), gene_graph_weight_.tensor,
                                             cfg_.encoder_rounds);
    if (!cfg_.uses_term_graph()) return encoded;
    std::vector<Tensor> term_nodes{slice_rows(encoded, GeneGraph::term_node_index, 1)};
    for (const auto& n : p.neighbours) {
      const Tensor v = encode_gene_graph(n.graph, node_embeddings(n, gene_rows(n, table)), gene_graph_weight_.tensor,
                                         cfg_.encoder_rounds);
      term_nodes.push_back(slice_rows(v, GeneGraph::term_node_index, 1));
    }
    const Tensor term_encoded =
        encode_term_graph(p.term_graph, concat_rows(term_nodes), term_graph_weight_.tensor, cfg_.encoder_rounds);
    return build_memory(encoded, term_encoded);
  }

  // -- Decoding --------------------------------------------------------------

  /// Logits (T x |D|) for every position of `inputs` (BOS first). When
  /// `attention_out` is set it receives the final layer's memory attention
  /// (T x memory rows), averaged over heads.
  Tensor decode_logits(const std::vector<int>& inputs, const Tensor& memory, DropoutContext& ctx,
                       std::vector<double>* attention_out = nullptr) const {
    const std::size_t t_len = inputs.size();
    if (t_len == 0) throw std::invalid_argument("decode_logits: empty input");
    if (t_len > cfg_.max_decode_len) {
      throw std::length_error("decode_logits: " + std::to_string(t_len) + " positions exceed max_decode_len " +
                              std::to_string(cfg_.max_decode_len));
    }
    if (memory.cols() != cfg_.d) throw ShapeError("decode_logits: memory " + to_string(memory.shape()));
    Tensor x = add(gather_rows(embedding_.tensor, inputs), sinusoidal_positions(t_len, cfg_.d));
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      const bool last = l + 1 == layers_.size();
      Tensor first;
      if (cfg_.decoder == DecoderKind::Transformer) {
        first = multi_head_attention(x, x, layer.self_attention, cfg_.heads, true);
      } else {
        first = run_lstm_sequence(x, layer.lstm);
      }
      x = layer_norm(add(x, dropout(first, cfg_.dropout, ctx)), layer.norm1_gain.tensor, layer.norm1_bias.tensor);
      const Tensor attended = multi_head_attention(x, memory, layer.memory_attention, cfg_.heads, false,
                                                   last ? attention_out : nullptr);
      x = layer_norm(add(x, dropout(attended, cfg_.dropout, ctx)), layer.norm2_gain.tensor, layer.norm2_bias.tensor);
      if (cfg_.decoder == DecoderKind::Transformer) {
        const Tensor hidden = relu(add(matmul(x, layer.ffn_in.tensor), layer.ffn_in_bias.tensor));
        const Tensor ffn = add(matmul(hidden, layer.ffn_out.tensor), layer.ffn_out_bias.tensor);
        x = layer_norm(add(x, dropout(ffn, cfg_.dropout, ctx)), layer.norm3_gain.tensor, layer.norm3_bias.tensor);
      }
    }
    return add(matmul(x, output_.tensor), output_bias_.tensor);
  }

  /// Next-token distribution after `prefix` (BOS first).
  std::vector<double> decode_step(const std::vector<int>& prefix, const Tensor& memory,
                                  std::vector<double>* attention_out = nullptr) const {
    NoGradGuard guard;
    DropoutContext eval;
    std::vector<double> attn;
    const Tensor logits = decode_logits(prefix, memory, eval, attention_out ? &attn : nullptr);
    const Tensor probs = softmax(slice_rows(logits, prefix.size() - 1, 1));
    if (attention_out) {
      const std::size_t m = memory.rows();
      attention_out->assign(attn.end() - static_cast<std::ptrdiff_t>(m), attn.end());
    }
    return {probs.values().begin(), probs.values().end()};
  }

  /// Teacher-forced negative log-likelihood summed over the target (EOS included).
  Tensor sequence_loss(const PreparedTerm& p, const GeneTable& table, DropoutContext& ctx) const {
    if (p.target_ids.empty()) throw std::invalid_argument("sequence_loss: term " + p.id + " has no target");
    std::vector<int> inputs{Vocabulary::kBos};
    inputs.insert(inputs.end(), p.target_ids.begin(), p.target_ids.end() - 1);
    const Tensor memory = encode(p, table);
    return cross_entropy(decode_logits(inputs, memory, ctx), p.target_ids, Vocabulary::kPad);
  }

  Tensor sequence_loss(const PreparedTerm& p, DropoutContext& ctx) const { return sequence_loss(p, embed_genes(p), ctx); }

  /// Mean over examples of the per-sequence summed loss.
  Tensor batch_loss(std::span<const PreparedTerm* const> batch, DropoutContext& ctx) const {
    if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
    const GeneTable table = embed_genes(batch);
    Tensor total;
    for (const PreparedTerm* p : batch) {
      const Tensor l = sequence_loss(*p, table, ctx);
      total = total.defined() ? add(total, l) : l;
    }
    return scale(total, 1.0 / static_cast<double>(batch.size()));
  }

  // -- Generation ------------------------------------------------------------

  Generation generate(const PreparedTerm& p, const DecodeStrategy& strategy = {}) const {
    NoGradGuard guard;
    const Tensor memory = encode(p, embed_genes(p));
    Generation g = strategy.kind == SearchKind::Greedy ? greedy(memory) : beam(memory, strategy.beam_size);
    g.tokens = vocab_.decode(g.ids);
    g.memory_labels = p.memory_labels;
    return g;
  }

  Generation generate(const Ontology& o, const TermId& id, const DecodeStrategy& strategy = {}) const {
    return generate(prepare(o, id), strategy);
  }

 private:
  PreparedTerm::GraphInput graph_input(const Term& term, const Ontology& o, bool keep_words) const {
    PreparedTerm::GraphInput in;
    in.name_ids = vocab_.encode(term.name);
    GeneGraphOptions opts;
    opts.max_genes = cfg_.max_genes;
    opts.max_gene_tokens = cfg_.max_gene_tokens;
    in.graph = build_gene_graph(term, o.genes, vocab_, opts);
    if (!keep_words) {
      // Only the term row is read: after one round it depends on gene rows alone.
      const std::size_t keep = 1 + in.graph.gene_count;
      in.graph.nodes.resize(keep);
      std::erase_if(in.graph.edges, [&](const WeightedEdge& e) { return e.b >= keep; });
      in.graph.word_count = 0;
    }
    for (std::size_t i = 1 + in.graph.gene_count; i < in.graph.size(); ++i) in.word_ids.push_back(in.graph.nodes[i].token_id);
    return in;
  }

  Tensor gene_rows(const PreparedTerm::GraphInput& in, const GeneTable& table) const {
    std::vector<int> rows;
    for (std::size_t i = 1; i <= in.graph.gene_count; ++i) rows.push_back(static_cast<int>(table.row.at(in.graph.nodes[i].label)));
    return gather_rows(table.embeddings, rows);
  }

  Tensor node_embeddings(const PreparedTerm::GraphInput& in, const Tensor& genes) const {
    const Tensor name = in.name_ids.empty() ? Tensor({1, cfg_.d}, 0.0)
                                            : mean_rows(gather_rows(embedding_.tensor, in.name_ids));
    if (in.word_ids.empty()) return concat_rows({name, genes});
    return concat_rows({name, genes, gather_rows(embedding_.tensor, in.word_ids)});
  }

  Tensor run_lstm_sequence(const Tensor& x, const LstmWeights& w) const {
    const std::size_t d = cfg_.d;
    Tensor state({1, 2 * d}, 0.0);
    std::vector<Tensor> outputs;
    for (std::size_t t = 0; t < x.rows(); ++t) {
      const Tensor gates = add(add(matmul(slice_rows(x, t, 1), w.input.tensor),
                                   matmul(slice_cols(state, 0, d), w.recurrent.tensor)),
                               w.bias.tensor);
      state = lstm_cell(gates, state);
      outputs.push_back(slice_cols(state, 0, d));
    }
    return concat_rows(outputs);
  }

  Generation greedy(const Tensor& memory) const {
    Generation g;
    std::vector<int> prefix{Vocabulary::kBos};
    double logp = 0.0;
    std::size_t steps = 0;
    while (prefix.size() <= cfg_.max_decode_len) {
      std::vector<double> attn;
      const auto probs = decode_step(prefix, memory, &attn);
      const auto best = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      logp += std::log(probs[static_cast<std::size_t>(best)]);
      ++steps;
      if (best == Vocabulary::kEos) break;
      g.ids.push_back(best);
      g.attention.push_back(std::move(attn));
      if (prefix.size() == cfg_.max_decode_len) break;
      prefix.push_back(best);
    }
    g.score = logp / static_cast<double>(steps);
    return g;
  }

  Generation beam(const Tensor& memory, std::size_t k) const {
    struct Hyp {
      std::vector<int> ids;
      std::vector<std::vector<double>> attention;
      double logp = 0.0;
      std::size_t length = 0;  // scored tokens, EOS included
    };
    std::vector<Hyp> alive{Hyp{}};
    std::vector<Hyp> finished;
    while (!alive.empty() && finished.size() < k) {
      struct Cand {
        std::size_t hyp;
        int token;
        double logp;
      };
      std::vector<Cand> cands;
      std::vector<std::vector<double>> attns(alive.size());
      for (std::size_t h = 0; h < alive.size(); ++h) {
        std::vector<int> prefix{Vocabulary::kBos};
        prefix.insert(prefix.end(), alive[h].ids.begin(), alive[h].ids.end());
        const auto probs = decode_step(prefix, memory, &attns[h]);
        for (std::size_t v = 0; v < probs.size(); ++v) {
          cands.push_back({h, static_cast<int>(v), alive[h].logp + std::log(probs[v])});
        }
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
      std::vector<Hyp> next;
      for (const Cand& c : cands) {
        if (next.size() + finished.size() >= k) break;
        Hyp h = alive[c.hyp];
        h.logp = c.logp;
        h.length += 1;
        if (c.token == Vocabulary::kEos) {
          finished.push_back(std::move(h));
          continue;
        }
        h.ids.push_back(c.token);
        h.attention.push_back(attns[c.hyp]);
        // The prefix cannot grow past the decoder's position budget.
        if (h.ids.size() + 1 > cfg_.max_decode_len) {
          finished.push_back(std::move(h));
        } else {
          next.push_back(std::move(h));
        }
      }
      alive = std::move(next);
    }
    for (auto& h : alive) finished.push_back(std::move(h));
    const Hyp* best = nullptr;
    for (const auto& h : finished) {
      if (!best || h.logp / static_cast<double>(h.length) > best->logp / static_cast<double>(best->length)) best = &h;
    }
    Generation g;
    g.ids = best->ids;
    g.attention = best->attention;
    g.score = best->logp / static_cast<double>(best->length);
    return g;
  }

  ModelConfig cfg_;
  Vocabulary vocab_;
  Parameter embedding_;
  LstmWeights gene_lstm_fwd_, gene_lstm_bwd_;
  Parameter gene_graph_weight_, term_graph_weight_;
  std::vector<DecoderLayer> layers_;
  Parameter output_, output_bias_;
};

}  // namespace gig
