#pragma once

// Built-in self checks: finite-difference gradients of the full loss on a
// d=8 toy instance for every decoder and setting, plus hand-evaluated metric,
// encoder and optimiser cases.

#include "gig/grad_check.hpp"
#include "gig/training.hpp"

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

namespace gig {

struct ToyInstance {
  Ontology corpus;
  Vocabulary vocab;
  TermId described;  // has both gene-cover parents and children
};

inline const ToyInstance& toy_instance() {
  static const ToyInstance t = [] {
    SynthConfig cfg;
    cfg.terms = 24;
    cfg.genes = 40;
    cfg.noise_words = 12;
    cfg.noise_per_gene = 2;
    ToyInstance out;
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

inline ModelConfig toy_model_config(DecoderKind kind, Variant v) {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.decoder_layers = 1;
  c.decoder = kind;
  c.dropout = 0.1;
  c.max_decode_len = 12;
  c.max_genes = 4;
  c.max_gene_tokens = 6;
  c.max_parents = 2;
  c.max_children = 2;
  c.set_variant(v);
  return c;
}

/// Central differences of the mean loss over a batch of three toy terms,
/// dropout active with a fixed mask stream.
inline GradCheckReport model_gradient_check(DecoderKind kind, Variant v) {
  const auto& t = toy_instance();
  GenerationModel m(toy_model_config(kind, v), t.vocab, 12);
  const TermGraphBuilder nb(t.corpus);
  std::vector<PreparedTerm> batch;
  for (const auto& id : t.corpus.described_terms()) {
    if (batch.size() == 2) break;
    batch.push_back(m.prepare(t.corpus, nb, id));
  }
  batch.push_back(m.prepare(t.corpus, nb, t.described));
  std::vector<const PreparedTerm*> ptrs;
  for (const auto& p : batch) ptrs.push_back(&p);
  auto f = [&] {
    DropoutContext ctx{true, 99, 3, 0};
    return m.batch_loss(ptrs, ctx);
  };
  GradCheckOptions opts;
  // A shared bias moves every gene row at once, so a 1e-4 step straddles relu kinks.
  opts.step = 1e-6;
  opts.max_entries_per_param = 6;
  opts.sample_seed = 5;
  return grad_check(f, m.active_parameters(), opts);
}

struct SelfCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::vector<SelfCheck> run_selftest() {
  std::vector<SelfCheck> out;
  auto check = [&](std::string name, bool ok, std::string detail = "") {
    out.push_back({std::move(name), ok, std::move(detail)});
  };

  const auto start = std::chrono::steady_clock::now();
  for (DecoderKind kind : {DecoderKind::Transformer, DecoderKind::Lstm}) {
    for (Variant v : all_variants()) {
      const auto r = model_gradient_check(kind, v);
      check(std::string("gradients ") + (kind == DecoderKind::Lstm ? "lstm " : "transformer ") + variant_name(v),
            r.passed, "worst relative error " + std::to_string(r.worst));
    }
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  check("gradient checks under 30 s", seconds < 30.0, std::to_string(seconds) + " s");

  // Zero-edge graphs leave node embeddings untouched.
  {
    const Tensor nodes({3, 4}, {0.5, -1, 2, 0, 1, 1, -3, 0.25, 0, 0, 7, -2});
    const Tensor w({4, 4}, std::vector<double>(16, 0.3));
    const Tensor enc = encode_graph(SparseMatrix{3, 3, {}}, nodes, w, 1);
    check("zero-edge encoder identity",
          std::equal(enc.values().begin(), enc.values().end(), nodes.values().begin()));
  }

  const Tokens cat{"the", "cat", "sat"}, cat_down{"the", "cat", "sat", "down"};
  check("identical corpora score 100",
        bleu({cat}, {cat}) == 100.0 && rouge_l({cat}, {cat}) == 100.0 && meteor_em({cat}, {cat}) == 100.0);
  // Precisions 3/3, 2/2, 1/1, 0 matches at order 4 -> add-one for orders 2-4.
  const double p = 1.0 * (3.0 / 3.0) * (2.0 / 2.0) * (1.0 / 1.0);
  const double hand_bleu = 100.0 * std::exp(1.0 - 4.0 / 3.0) * std::pow(p, 0.25);
  check("BLEU hand case", std::abs(bleu({cat}, {cat_down}) - hand_bleu) < 1e-6);
  const double beta2 = 1.44;
  const double hand_rouge = 100.0 * (1 + beta2) * 0.75 * 0.75 / (0.75 + beta2 * 0.75);
  check("ROUGE-L hand case",
        std::abs(rouge_l({{"a", "b", "c", "d"}}, {{"a", "c", "b", "d"}}) - hand_rouge) < 1e-6);
  check("METEOR stem stage", std::abs(meteor_pair({"binding"}, {"bind"}) - 0.5) < 1e-12);

  {
    TrainConfig cfg;
    cfg.learning_rate = 0.01;
    Parameter x("x", Tensor({1, 1}, {0.5}));
    Parameter* params[] = {&x};
    AdamState state;
    x.tensor.mutable_grad()[0] = 0.2;
    adam_step(params, state, cfg);
    check("Adam first step", std::abs(x.tensor.item() - (0.5 - 0.01 * 0.2 / (0.2 + 1e-8))) < 1e-12);
  }
  return out;
}

}  // namespace gig
