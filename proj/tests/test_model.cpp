#include "gig/model.hpp"
#include "gig/selftest.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <sstream>
#include <random>

using namespace gig;
using namespace gig::oracles;

namespace {

std::vector<double> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

struct Toy {
  Ontology corpus;
  Vocabulary vocab;
  TermId described;  // a term with parents and children
};

const Toy& toy() {
  static const Toy t = [] {
    SynthConfig cfg;
    cfg.terms = 24;
    cfg.genes = 40;
    cfg.noise_words = 12;
    cfg.noise_per_gene = 2;
    Toy out;
    out.corpus = synthesize_corpus(cfg, 11);
    std::vector<Tokens> texts;
    for (const auto& [id, term] : out.corpus.terms) {
      texts.push_back(term.name);
      if (term.description) texts.push_back(*term.description);
    }
    for (const auto& [id, g] : out.corpus.genes) texts.push_back(g.text);
    out.vocab = build_vocabulary(texts, 1);
    const CoverIndex index(out.corpus);
    for (const auto& id : out.corpus.described_terms()) {
      const auto rel = index.query(id);
      if (!rel.parents.empty() && !rel.children.empty()) {
        out.described = id;
        break;
      }
    }
    return out;
  }();
  return t;
}

ModelConfig tiny(DecoderKind kind, Variant v) {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.decoder_layers = 1;
  c.decoder = kind;
  c.dropout = 0.0;
  c.max_decode_len = 12;
  c.max_genes = 4;
  c.max_gene_tokens = 6;
  c.max_parents = 2;
  c.max_children = 2;
  c.set_variant(v);
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(ModelConfig, VariantsMapToFlags) {
  ModelConfig c;
  for (Variant v : all_variants()) {
    c.set_variant(v);
    EXPECT_EQ(c.variant(), v);
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  c.set_variant(Variant::Baseline);
  EXPECT_FALSE(c.use_gene_graph || c.use_parent_nodes || c.use_child_nodes);
  c.set_variant(Variant::Parents);
  EXPECT_TRUE(c.use_gene_graph && c.use_parent_nodes && !c.use_child_nodes);
  EXPECT_THROW(parse_variant("d"), ConfigError);
}

TEST(ModelConfig, RejectsInvalidSettings) {
  ModelConfig c;
  c.use_gene_graph = false;
  c.use_parent_nodes = true;
  c.use_child_nodes = false;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.max_decode_len = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, KeyValueRoundTrip) {
  ModelConfig c = ModelConfig::paper_scale();
  c.decoder = DecoderKind::Lstm;
  c.dropout = 0.25;
  c.neighbour_edges = NeighbourEdges::GeneCover;
  c.set_variant(Variant::Children);
  KvDocument doc;
  c.write(doc);
  const auto back = ModelConfig::read(KvDocument::parse(doc.str()));
  KvDocument again;
  back.write(again);
  EXPECT_EQ(doc.str(), again.str());
  EXPECT_EQ(back.d, 512u);
  EXPECT_EQ(back.variant(), Variant::Children);
  EXPECT_THROW(ModelConfig::read(KvDocument::parse("model.decoder = gru")), ConfigError);
}

// ---------------------------------------------------------------------------
// Graph encoder

TEST(GraphEncoder, OutputWidthEqualsInputWidth) {
  std::mt19937_64 rng(1);
  for (std::size_t d : {1u, 3u, 8u}) {
    const auto out = encode_graph(SparseMatrix{5, 5, {{0, 1, 1.0}, {1, 0, 1.0}}}, random_tensor({5, d}, rng),
                                  random_tensor({d, d}, rng));
    EXPECT_EQ(out.shape(), (Shape{5, d}));
  }
}

TEST(GraphEncoder, NoEdgesIsIdentity) {
  std::mt19937_64 rng(2);
  const Tensor v = random_tensor({4, 6}, rng);
  const Tensor out = encode_graph(SparseMatrix{4, 4, {}}, v, random_tensor({6, 6}, rng), 3);
  EXPECT_EQ(vec(out), vec(v));
}

TEST(GraphEncoder, PathAndStarHandCases) {
  // Path 0-1-2 with unit weights, W = I, V = [[1,-2],[3,0],[-1,1]].
  const Tensor v = Tensor::from_rows({{1, -2}, {3, 0}, {-1, 1}});
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  const SparseMatrix path{3, 3, {{0, 1, 1}, {1, 0, 1}, {1, 2, 1}, {2, 1, 1}}};
  const auto out = vec(encode_graph(path, v, eye));
  // row0: v0 + relu(v1) = [4,-2]; row1: v1 + relu(v0+v2) = [3,0]; row2: v2 + relu(v1) = [2,1]
  const std::vector<double> expected{4, -2, 3, 0, 2, 1};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out[i], expected[i], 1e-12);

  // Star centred on 0 with weights 0.5 and 2, W = [[0,1],[1,0]].
  const Tensor swap = Tensor::from_rows({{0, 1}, {1, 0}});
  const SparseMatrix star{3, 3, {{0, 1, 0.5}, {1, 0, 0.5}, {0, 2, 2.0}, {2, 0, 2.0}}};
  const auto s = vec(encode_graph(star, v, swap));
  // W v1 = [0,3], W v2 = [1,-1], W v0 = [-2,1]
  // row0: [1,-2] + relu(0.5*[0,3] + 2*[1,-1]) = [1,-2] + [2,0]
  // row1: [3,0] + relu(0.5*[-2,1]) = [3,0.5]
  // row2: [-1,1] + relu(2*[-2,1]) = [-1,3]
  const std::vector<double> star_expected{3, -2, 3, 0.5, -1, 3};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(s[i], star_expected[i], 1e-12);
}

TEST(GraphEncoderProperty, MatchesLoopOracleAndIsPermutationEquivariant) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng() % 7, d = 1 + rng() % 5;
    std::vector<double> adj(n * n, 0.0);
    std::uniform_real_distribution<double> u(0.05, 1.5);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (rng() % 2) adj[i * n + j] = adj[j * n + i] = u(rng);
      }
    }
    const Tensor v = random_tensor({n, d}, rng);
    const Tensor w = random_tensor({d, d}, rng);
    const std::size_t rounds = 1 + rng() % 3;
    const auto out = vec(encode_graph(sparse_of(adj, n), v, w, rounds));
    auto expected = vec(v);
    for (std::size_t r = 0; r < rounds; ++r) expected = oracle_round(adj, expected, vec(w), n, d);
    for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out[i], expected[i], 1e-10);

    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> padj(n * n), pv(n * d);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) padj[i * n + j] = adj[perm[i] * n + perm[j]];
      for (std::size_t k = 0; k < d; ++k) pv[i * d + k] = v.values()[perm[i] * d + k];
    }
    const auto pout = vec(encode_graph(sparse_of(padj, n), Tensor({n, d}, pv), w, rounds));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) ASSERT_NEAR(pout[i * d + k], out[perm[i] * d + k], 1e-10);
    }
  }
}

TEST(GraphEncoder, ShapeErrors) {
  std::mt19937_64 rng(4);
  EXPECT_THROW(encode_graph(SparseMatrix{3, 3, {}}, random_tensor({4, 2}, rng), random_tensor({2, 2}, rng)),
               ShapeError);
  EXPECT_THROW(encode_graph(SparseMatrix{4, 4, {}}, random_tensor({4, 2}, rng), random_tensor({3, 2}, rng)),
               ShapeError);
  EXPECT_THROW(build_memory(random_tensor({2, 3}, rng), random_tensor({2, 4}, rng)), ShapeError);
}

// ---------------------------------------------------------------------------
// Attention

TEST(MultiHeadAttention, SingleKeyPassesValueThrough) {
  std::mt19937_64 rng(5);
  const std::size_t d = 4;
  AttentionWeights w{Parameter("q", random_tensor({d, d}, rng)), Parameter("k", random_tensor({d, d}, rng)),
                     Parameter("v", random_tensor({d, d}, rng)), Parameter("o", random_tensor({d, d}, rng))};
  const Tensor q = random_tensor({3, d}, rng);
  const Tensor kv = random_tensor({1, d}, rng);
  std::vector<double> weights;
  const auto out = vec(multi_head_attention(q, kv, w, 2, false, &weights));
  const auto expected = vec(matmul(matmul(kv, w.value.tensor), w.output.tensor));
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(weights[i], 1.0, 1e-15);
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(out[i * d + k], expected[k], 1e-12);
  }
}

TEST(MultiHeadAttention, TwoHeadHandCase) {
  // Identity projections; head 0 sees columns 0-1, head 1 sees columns 2-3.
  const Tensor eye = Tensor::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  AttentionWeights w{Parameter("q", eye), Parameter("k", eye), Parameter("v", eye), Parameter("o", eye)};
  const Tensor q = Tensor::from_rows({{1, 0, 0, 2}});
  const Tensor kv = Tensor::from_rows({{1, 1, 0, 0}, {0, 0, 1, 1}});
  std::vector<double> weights;
  const auto out = vec(multi_head_attention(q, kv, w, 2, false, &weights));
  // head 0 scores [1, 0]/sqrt2; head 1 scores [0, 2]/sqrt2.
  const double s = std::sqrt(2.0);
  const double a0 = std::exp(1 / s) / (std::exp(1 / s) + 1.0);
  const double b1 = std::exp(2 / s) / (1.0 + std::exp(2 / s));
  EXPECT_NEAR(out[0], a0, 1e-12);
  EXPECT_NEAR(out[1], a0, 1e-12);
  EXPECT_NEAR(out[2], b1, 1e-12);
  EXPECT_NEAR(out[3], b1, 1e-12);
  EXPECT_NEAR(weights[0], (a0 + (1 - b1)) / 2, 1e-12);
  EXPECT_NEAR(weights[1], ((1 - a0) + b1) / 2, 1e-12);
}

TEST(MultiHeadAttentionProperty, WeightRowsSumToOne) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t heads = 1 + rng() % 3, d = heads * (1 + rng() % 3), tq = 1 + rng() % 5, tk = 1 + rng() % 6;
    AttentionWeights w{Parameter("q", random_tensor({d, d}, rng)), Parameter("k", random_tensor({d, d}, rng)),
                       Parameter("v", random_tensor({d, d}, rng)), Parameter("o", random_tensor({d, d}, rng))};
    std::vector<double> weights;
    multi_head_attention(random_tensor({tq, d}, rng), random_tensor({tk, d}, rng), w, heads, false, &weights);
    ASSERT_EQ(weights.size(), tq * tk);
    for (std::size_t i = 0; i < tq; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        ASSERT_GE(weights[i * tk + j], 0.0);
        total += weights[i * tk + j];
      }
      ASSERT_NEAR(total, 1.0, 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Full model

TEST(Model, ToyCorpusHasNeighbourhood) { ASSERT_FALSE(toy().described.empty()); }

TEST(Model, MemoryRowsFollowTheSetting) {
  const auto& t = toy();
  const TermGraphBuilder nb(t.corpus);
  for (Variant v : all_variants()) {
    GenerationModel m(tiny(DecoderKind::Transformer, v), t.vocab, 7);
    const PreparedTerm p = m.prepare(t.corpus, nb, t.described);
    const Tensor memory = m.encode(p, m.embed_genes(p));
    EXPECT_EQ(memory.cols(), 8u);
    EXPECT_EQ(memory.rows(), p.memory_labels.size()) << variant_name(v);
    const std::size_t genes = p.own.graph.gene_count;
    switch (v) {
      case Variant::Baseline: EXPECT_EQ(memory.rows(), genes); break;
      case Variant::GeneGraph: EXPECT_EQ(memory.rows(), p.own.graph.size()); break;
      default:
        EXPECT_EQ(memory.rows(), p.own.graph.size() + p.term_graph.size()) << variant_name(v);
        EXPECT_GT(p.term_graph.size(), 1u);
    }
    if (v == Variant::Parents) {
      EXPECT_EQ(p.term_graph.count(TermRole::Child), 0u);
    }
    if (v == Variant::Children) {
      EXPECT_EQ(p.term_graph.count(TermRole::Parent), 0u);
    }
  }
}

TEST(Model, BaselineMemoryIsTheGeneEmbeddings) {
  const auto& t = toy();
  GenerationModel m(tiny(DecoderKind::Transformer, Variant::Baseline), t.vocab, 7);
  const PreparedTerm p = m.prepare(t.corpus, t.described);
  const Tensor memory = m.encode(p, m.embed_genes(p));
  for (std::size_t i = 0; i < p.own.graph.gene_count; ++i) {
    const auto row = m.embed_gene_text(p.own.graph.gene_texts[i]);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(memory.at(i, k), row.values()[k], 1e-12);
  }
}

TEST(Model, BatchedGeneTableMatchesSingleSequences) {
  const auto& t = toy();
  GenerationModel m(tiny(DecoderKind::Transformer, Variant::Full), t.vocab, 8);
  const TermGraphBuilder nb(t.corpus);
  const PreparedTerm p = m.prepare(t.corpus, nb, t.described);
  const GeneTable table = m.embed_genes(p);
  for (std::size_t i = 0; i < p.own.graph.gene_count; ++i) {
    const auto& gid = p.own.graph.nodes[1 + i].label;
    const auto row = m.embed_gene_text(p.own.graph.gene_texts[i]);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(table.embeddings.at(table.row.at(gid), k), row.values()[k], 1e-12);
  }
}

TEST(Model, NextTokenDistributionSumsToOne) {
  const auto& t = toy();
  for (DecoderKind kind : {DecoderKind::Transformer, DecoderKind::Lstm}) {
    GenerationModel m(tiny(kind, Variant::Full), t.vocab, 9);
    const PreparedTerm p = m.prepare(t.corpus, t.described);
    const Tensor memory = m.encode(p, m.embed_genes(p));
    std::vector<int> prefix{Vocabulary::kBos};
    for (int step = 0; step < 5; ++step) {
      std::vector<double> attn;
      const auto probs = m.decode_step(prefix, memory, &attn);
      ASSERT_EQ(probs.size(), t.vocab.size());
      double total = 0.0;
      for (double x : probs) total += x;
      EXPECT_NEAR(total, 1.0, 1e-9);
      double attn_total = 0.0;
      for (double x : attn) attn_total += x;
      EXPECT_EQ(attn.size(), memory.rows());
      EXPECT_NEAR(attn_total, 1.0, 1e-9);
      prefix.push_back(4 + step);
    }
  }
}

TEST(Model, DecoderIsCausal) {
  const auto& t = toy();
  for (DecoderKind kind : {DecoderKind::Transformer, DecoderKind::Lstm}) {
    GenerationModel m(tiny(kind, Variant::Full), t.vocab, 10);
    const PreparedTerm p = m.prepare(t.corpus, t.described);
    NoGradGuard guard;
    const Tensor memory = m.encode(p, m.embed_genes(p));
    DropoutContext eval;
    std::vector<int> a{Vocabulary::kBos, 5, 6, 7, 8};
    std::vector<int> b = a;
    b[3] = 9;
    b[4] = 10;
    const Tensor la = m.decode_logits(a, memory, eval), lb = m.decode_logits(b, memory, eval);
    for (std::size_t r = 0; r < 5; ++r) {
      double diff = 0.0;
      for (std::size_t c = 0; c < la.cols(); ++c) diff = std::max(diff, std::abs(la.at(r, c) - lb.at(r, c)));
      if (r < 3) {
        EXPECT_EQ(diff, 0.0) << "row " << r;
      } else {
        EXPECT_GT(diff, 0.0) << "row " << r;
      }
    }
  }
}

TEST(Model, GradientsMatchFiniteDifferencesForEverySetting) {
  const auto start = std::chrono::steady_clock::now();
  for (DecoderKind kind : {DecoderKind::Transformer, DecoderKind::Lstm}) {
    for (Variant v : all_variants()) {
      const auto report = model_gradient_check(kind, v);
      EXPECT_TRUE(report.passed) << (kind == DecoderKind::Lstm ? "lstm " : "transformer ") << variant_name(v) << ": "
                                 << report.summary();
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(seconds, 30.0);
}

TEST(Model, InactiveParametersReceiveNoGradient) {
  const auto& t = toy();
  GenerationModel m(tiny(DecoderKind::Transformer, Variant::Baseline), t.vocab, 13);
  const PreparedTerm p = m.prepare(t.corpus, t.described);
  DropoutContext eval;
  for (Parameter* q : m.parameters()) q->tensor.zero_grad();
  m.sequence_loss(p, eval).backward();
  for (Parameter* q : m.parameters()) {
    if (q->name != "gene_graph.weight" && q->name != "term_graph.weight") continue;
    for (double g : q->tensor.grad()) EXPECT_EQ(g, 0.0) << q->name;
  }
  EXPECT_EQ(m.parameters().size(), m.active_parameters().size() + 2);
}

TEST(Model, BeamOfOneEqualsGreedy) {
  const auto& t = toy();
  for (DecoderKind kind : {DecoderKind::Transformer, DecoderKind::Lstm}) {
    GenerationModel m(tiny(kind, Variant::Full), t.vocab, 14);
    for (const auto& id : t.corpus.described_terms()) {
      const PreparedTerm p = m.prepare(t.corpus, id);
      const auto g = m.generate(p, DecodeStrategy::greedy());
      const auto b = m.generate(p, DecodeStrategy::beam(1));
      EXPECT_EQ(g.ids, b.ids) << id;
      EXPECT_NEAR(g.score, b.score, 1e-12);
    }
  }
}

TEST(Model, GenerationRespectsLengthAndReportsAttention) {
  const auto& t = toy();
  for (std::size_t k : {1u, 3u}) {
    GenerationModel m(tiny(DecoderKind::Transformer, Variant::Full), t.vocab, 15);
    const PreparedTerm p = m.prepare(t.corpus, t.described);
    const auto g = m.generate(p, DecodeStrategy::beam(k));
    EXPECT_LE(g.ids.size(), m.config().max_decode_len);
    EXPECT_EQ(g.tokens.size(), g.ids.size());
    EXPECT_EQ(g.attention.size(), g.ids.size());
    for (const auto& row : g.attention) EXPECT_EQ(row.size(), p.memory_labels.size());
    EXPECT_TRUE(std::isfinite(g.score));
    EXPECT_LE(g.score, 0.0);
  }
  EXPECT_THROW(DecodeStrategy::beam(0), std::invalid_argument);
}

TEST(Model, StateRoundTripReproducesGenerations) {
  const auto& t = toy();
  const auto cfg = tiny(DecoderKind::Lstm, Variant::Full);
  GenerationModel a(cfg, t.vocab, 17), b(cfg, t.vocab, 18);
  std::stringstream buf;
  write_checkpoint(buf, a.state());
  b.load_state(read_checkpoint(buf));
  EXPECT_EQ(a.state(), b.state());
  const PreparedTerm p = a.prepare(t.corpus, t.described);
  EXPECT_EQ(a.generate(p, DecodeStrategy::beam(2)).ids, b.generate(p, DecodeStrategy::beam(2)).ids);

  GenerationModel other(tiny(DecoderKind::Transformer, Variant::Full), t.vocab, 1);
  EXPECT_THROW(other.load_state(a.state()), CheckpointError);
}

TEST(Model, SameSeedSameParameters) {
  const auto& t = toy();
  const auto cfg = tiny(DecoderKind::Transformer, Variant::Full);
  GenerationModel a(cfg, t.vocab, 21), b(cfg, t.vocab, 21), c(cfg, t.vocab, 22);
  EXPECT_EQ(a.state(), b.state());
  EXPECT_NE(a.state(), c.state());
}

TEST(Model, TargetsEndWithEosAndFitTheBudget) {
  const auto& t = toy();
  GenerationModel m(tiny(DecoderKind::Transformer, Variant::Full), t.vocab, 23);
  for (const auto& id : t.corpus.described_terms()) {
    const auto p = m.prepare(t.corpus, id);
    ASSERT_FALSE(p.target_ids.empty());
    EXPECT_EQ(p.target_ids.back(), Vocabulary::kEos);
    EXPECT_LE(p.target_ids.size(), m.config().max_decode_len);
  }
  EXPECT_THROW(m.prepare(t.corpus, "SYN:missing"), UnknownTermError);
}
