#include "gig/training.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

using namespace gig;

namespace {

struct Toy {
  Ontology corpus;
  Vocabulary vocab;
  DatasetSplit split;
};

const Toy& toy() {
  static const Toy t = [] {
    SynthConfig cfg;
    cfg.terms = 30;
    cfg.genes = 40;
    cfg.noise_words = 12;
    cfg.noise_per_gene = 2;
    Toy out;
    out.corpus = synthesize_corpus(cfg, 5);
    out.split = split_dataset(out.corpus.described_terms(), {}, 3);
    std::vector<Tokens> texts;
    for (const auto& [id, term] : out.corpus.terms) {
      texts.push_back(term.name);
      if (term.description) texts.push_back(*term.description);
    }
    for (const auto& [id, g] : out.corpus.genes) texts.push_back(g.text);
    out.vocab = build_vocabulary(texts, 1);
    return out;
  }();
  return t;
}

ModelConfig tiny() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.decoder_layers = 1;
  c.max_decode_len = 12;
  c.max_genes = 4;
  c.max_gene_tokens = 6;
  c.max_parents = 2;
  c.max_children = 2;
  return c;
}

TrainConfig quick() {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = 2;
  c.seed = 9;
  c.validation_limit = 3;
  return c;
}

Parameter scalar_param(double x) { return Parameter("x", Tensor({1, 1}, {x})); }

void set_grad(Parameter& p, std::vector<double> g) {
  auto dst = p.tensor.mutable_grad();
  ASSERT_EQ(dst.size(), g.size());
  std::copy(g.begin(), g.end(), dst.begin());
}

std::vector<double> values_of(const Parameter& p) { return {p.tensor.values().begin(), p.tensor.values().end()}; }

std::vector<double> losses(const std::vector<HistoryRecord>& h) {
  std::vector<double> out;
  for (const auto& r : h) out.push_back(r.loss);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss

TEST(SequenceLoss, UniformOutputOverFourTokensGivesLogFour) {
  const Tensor zeros({1, 4}, std::vector<double>(4, 0.0));
  EXPECT_NEAR(cross_entropy(zeros, 2).item(), std::log(4.0), 1e-15);

  // An empty vocabulary holds exactly the four reserved tokens; with the
  // output layer zeroed every step predicts uniformly.
  ModelConfig cfg = tiny();
  cfg.max_decode_len = 1;
  const Vocabulary specials;
  ASSERT_EQ(specials.size(), 4u);
  GenerationModel model(cfg, specials, 1);
  auto state = model.state();
  for (auto& a : state) {
    if (a.name == "output.weight" || a.name == "output.bias") std::fill(a.values.begin(), a.values.end(), 0.0);
  }
  model.load_state(state);
  const auto p = model.prepare(toy().corpus, toy().split.train.front());
  ASSERT_EQ(p.target_ids.size(), 1u);
  DropoutContext eval;
  EXPECT_NEAR(model.sequence_loss(p, eval).item(), std::log(4.0), 1e-12);
}

TEST(SequenceLoss, NonNegativeForRandomModels) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelConfig cfg = tiny();
    cfg.set_variant(all_variants()[seed % all_variants().size()]);
    const GenerationModel model(cfg, toy().vocab, seed);
    DropoutContext eval;
    for (const auto& id : toy().split.train) {
      EXPECT_GE(model.sequence_loss(model.prepare(toy().corpus, id), eval).item(), 0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, TwoHandComputedStepsOnAScalar) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  Parameter x = scalar_param(0.5);
  Parameter* params[] = {&x};
  AdamState state;

  // Step 1, g = 0.2: m = 0.02, v = 4e-5, m_hat = 0.2, v_hat = 0.04.
  set_grad(x, {0.2});
  adam_step(params, state, cfg);
  const double x1 = 0.5 - 0.01 * 0.2 / (0.2 + 1e-8);
  EXPECT_NEAR(x.tensor.item(), x1, 1e-12);
  EXPECT_NEAR(state.m[0][0], 0.02, 1e-15);
  EXPECT_NEAR(state.v[0][0], 4e-5, 1e-18);

  // Step 2, g = -0.1: m = 0.018 - 0.01 = 0.008, v = 3.996e-5 + 1e-5 = 4.996e-5.
  set_grad(x, {-0.1});
  adam_step(params, state, cfg);
  const double m_hat = 0.008 / (1.0 - 0.81);
  const double v_hat = 4.996e-5 / (1.0 - 0.998001);
  EXPECT_NEAR(state.m[0][0], 0.008, 1e-15);
  EXPECT_NEAR(state.v[0][0], 4.996e-5, 1e-18);
  EXPECT_NEAR(x.tensor.item(), x1 - 0.01 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-12);
  EXPECT_EQ(state.step, 2u);
}

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
  TrainConfig cfg;
  Parameter w("w", Tensor({2, 2}, {1.0, -2.0, 3.0, 0.25}));
  Parameter* params[] = {&w};
  AdamState state;
  set_grad(w, {0.0, 0.0, 0.0, 0.0});
  const auto before = values_of(w);
  adam_step(params, state, cfg);
  EXPECT_EQ(values_of(w), before);

  set_grad(w, {0.5, -1.0, 0.0, 2.0});
  adam_step(params, state, cfg);
  const auto m = state.m[0], v = state.v[0];
  const auto moved = values_of(w);
  set_grad(w, {0.0, 0.0, 0.0, 0.0});
  adam_step(params, state, cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_DOUBLE_EQ(state.m[0][i], cfg.beta1 * m[i]);
    EXPECT_DOUBLE_EQ(state.v[0][i], cfg.beta2 * v[i]);
  }
  // Entries that never saw a gradient stay put.
  EXPECT_EQ(w.tensor.values()[2], moved[2]);
}

TEST(Adam, FirstStepMagnitudeIsBoundedByLearningRate) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 10.0);
  TrainConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    Parameter w("w", Tensor({3, 5}, std::vector<double>(15, 0.0)));
    Parameter* params[] = {&w};
    std::vector<double> g(15);
    for (auto& x : g) x = n(rng);
    set_grad(w, g);
    AdamState state;
    adam_step(params, state, cfg);
    for (double x : w.tensor.values()) {
      EXPECT_LE(std::abs(x), cfg.learning_rate * (1.0 + 1e-9));
      EXPECT_LE(std::abs(x), cfg.learning_rate / (1.0 - cfg.beta1));
    }
  }
}

TEST(Adam, NonFiniteGradientNamesTheParameter) {
  TrainConfig cfg;
  Parameter a("decoder.0.ffn.in", Tensor({1, 2}, {0.0, 0.0}));
  Parameter b("output.bias", Tensor({1, 2}, {0.0, 0.0}));
  Parameter* params[] = {&a, &b};
  set_grad(a, {1.0, 1.0});
  set_grad(b, {std::nan(""), 0.0});
  AdamState state;
  try {
    adam_step(params, state, cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("output.bias"), std::string::npos);
  }
  EXPECT_EQ(values_of(a), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(state.step, 0u);
}

// ---------------------------------------------------------------------------
// Clipping

TEST(Clip, NeverIncreasesNormAndSparesSmallGradients) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.05, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    Parameter a("a", Tensor({2, 3}, std::vector<double>(6, 0.0)));
    Parameter b("b", Tensor({1, 4}, std::vector<double>(4, 0.0)));
    Parameter* params[] = {&a, &b};
    const double sc = u(rng);
    std::vector<double> ga(6), gb(4);
    for (auto& x : ga) x = sc * n(rng);
    for (auto& x : gb) x = sc * n(rng);
    set_grad(a, ga);
    set_grad(b, gb);
    double ss = 0.0;
    for (double x : ga) ss += x * x;
    for (double x : gb) ss += x * x;
    const double max_norm = u(rng);
    const double before = clip_gradients(params, max_norm);
    EXPECT_NEAR(before, std::sqrt(ss), 1e-12);
    const double after = gradient_norm(params);
    EXPECT_LE(after, before + 1e-12);
    if (before <= max_norm) {
      EXPECT_TRUE(std::equal(ga.begin(), ga.end(), a.tensor.grad().begin()));
      EXPECT_TRUE(std::equal(gb.begin(), gb.end(), b.tensor.grad().begin()));
    } else {
      EXPECT_NEAR(after, max_norm, 1e-12);
      // Direction is preserved.
      for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.tensor.grad()[i] * before, ga[i] * max_norm, 1e-12);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

TEST(Train, FixedBatchLossStrictlyDecreasesOverTenSteps) {
  for (Variant v : {Variant::Baseline, Variant::Full}) {
    ModelConfig mc = tiny();
    mc.set_variant(v);
    mc.dropout = 0.0;
    GenerationModel model(mc, toy().vocab, 2);
    std::vector<PreparedTerm> prepared;
    for (std::size_t i = 0; i < 4; ++i) prepared.push_back(model.prepare(toy().corpus, toy().split.train[i]));
    std::vector<const PreparedTerm*> batch;
    for (const auto& p : prepared) batch.push_back(&p);
    auto params = model.parameters();
    TrainConfig cfg;
    AdamState state;
    double previous = std::numeric_limits<double>::infinity();
    for (int s = 0; s < 10; ++s) {
      for (Parameter* p : params) p->tensor.zero_grad();
      DropoutContext ctx{true, 1, state.step, 0};
      const Tensor loss = model.batch_loss(batch, ctx);
      EXPECT_LT(loss.item(), previous) << variant_name(v) << " step " << s;
      previous = loss.item();
      loss.backward();
      clip_gradients(params, cfg.clip_norm);
      adam_step(params, state, cfg);
    }
  }
}

TEST(Train, SameSeedGivesIdenticalHistory) {
  auto run = [](std::uint64_t seed) {
    GenerationModel model(tiny(), toy().vocab, 4);
    TrainConfig cfg = quick();
    cfg.seed = seed;
    Trainer t(model, toy().corpus, toy().split, cfg);
    t.run();
    return t.history();
  };
  const auto a = run(9), b = run(9), c = run(10);
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_NE(losses(a), losses(c));
}

TEST(Train, HistoryHasTrainAndValidationRecords) {
  GenerationModel model(tiny(), toy().vocab, 4);
  std::ostringstream lines;
  Trainer t(model, toy().corpus, toy().split, quick());
  t.on_record = [&](const HistoryRecord& r) { write_history_line(lines, r); };
  t.run();
  std::size_t train = 0, validation = 0;
  for (const auto& r : t.history()) {
    if (r.split == "train") {
      ++train;
      EXPECT_FALSE(r.bleu.has_value());
    } else {
      ++validation;
      ASSERT_TRUE(r.bleu && r.rouge_l && r.meteor);
    }
  }
  EXPECT_EQ(train, 2 * t.steps_per_epoch());
  EXPECT_EQ(validation, 2u);
  std::istringstream in(lines.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("step") && j.contains("split") && j.contains("loss"));
    ++n;
  }
  EXPECT_EQ(n, t.history().size());
}

TEST(Train, ResumeFromCheckpointIsBitExact) {
  TrainConfig cfg = quick();
  cfg.epochs = 3;
  cfg.validate_every = 2;
  GenerationModel full(tiny(), toy().vocab, 6);
  Trainer uninterrupted(full, toy().corpus, toy().split, cfg);
  uninterrupted.run();

  const auto path = std::filesystem::temp_directory_path() / "gig_resume_test.ckpt";
  {
    GenerationModel first(tiny(), toy().vocab, 6);
    Trainer t(first, toy().corpus, toy().split, cfg);
    EXPECT_FALSE(t.run(5));
    save_checkpoint(path.string(), t.save_state());
  }
  GenerationModel second(tiny(), toy().vocab, 123);
  Trainer resumed(second, toy().corpus, toy().split, cfg);
  resumed.load_state(load_checkpoint(path.string()));
  std::filesystem::remove(path);
  EXPECT_EQ(resumed.optimizer().step, 5u);
  resumed.run();

  std::vector<HistoryRecord> tail;
  for (const auto& r : uninterrupted.history()) {
    if (r.step > 5) tail.push_back(r);
  }
  EXPECT_EQ(resumed.history(), tail);
  EXPECT_EQ(second.state(), full.state());
}

TEST(Train, EarlyStopAfterPatienceNonImprovingValidations) {
  TrainConfig cfg = quick();
  cfg.epochs = 0;
  cfg.max_steps = 300;
  cfg.validate_every = 1;
  cfg.patience = 3;
  cfg.learning_rate = 0.05;
  GenerationModel model(tiny(), toy().vocab, 3);
  Trainer t(model, toy().corpus, toy().split, cfg);
  t.run();
  ASSERT_TRUE(t.progress().stopped_early);

  // Replay the selection rule over the recorded validations.
  double best_bleu = -1.0, best_loss = std::numeric_limits<double>::infinity();
  std::uint64_t bad = 0, best_step = 0, stop_step = 0;
  for (const auto& r : t.history()) {
    if (r.split != "validation") continue;
    EXPECT_EQ(stop_step, 0u) << "validation recorded after the stop point";
    if (*r.bleu > best_bleu || (*r.bleu == best_bleu && r.loss < best_loss)) {
      best_bleu = *r.bleu;
      best_loss = r.loss;
      best_step = r.step;
      bad = 0;
    } else if (++bad == cfg.patience) {
      stop_step = r.step;
    }
  }
  EXPECT_EQ(stop_step, t.optimizer().step);
  EXPECT_EQ(t.progress().best_step, best_step);
  EXPECT_EQ(t.progress().bad_validations, cfg.patience);
  // The best snapshot is restored on finish.
  EXPECT_EQ(model.state(), t.best_parameters());
}

TEST(Train, NonFiniteLossReportsTheStep) {
  GenerationModel model(tiny(), toy().vocab, 4);
  auto state = model.state();
  for (auto& a : state) {
    if (a.name == "output.bias") a.values[0] = std::numeric_limits<double>::infinity();
  }
  model.load_state(state);
  Trainer t(model, toy().corpus, toy().split, quick());
  try {
    t.run();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Train, EmptyTrainSplitIsRejected) {
  GenerationModel model(tiny(), toy().vocab, 4);
  DatasetSplit empty;
  EXPECT_THROW(Trainer(model, toy().corpus, empty, quick()), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(TrainConfigTest, DefaultsAndRoundTrip) {
  const TrainConfig d;
  EXPECT_EQ(d.batch_size, 16u);
  EXPECT_DOUBLE_EQ(d.learning_rate, 1e-3);
  EXPECT_DOUBLE_EQ(d.beta1, 0.9);
  EXPECT_DOUBLE_EQ(d.beta2, 0.999);
  EXPECT_DOUBLE_EQ(d.epsilon, 1e-8);
  EXPECT_DOUBLE_EQ(d.clip_norm, 1.0);

  TrainConfig c;
  c.batch_size = 3;
  c.learning_rate = 0.0123;
  c.epochs = 7;
  c.seed = 42;
  c.patience = 0;
  c.restore_best = false;
  KvDocument doc;
  c.write(doc);
  const auto back = TrainConfig::read(KvDocument::parse(doc.str()));
  EXPECT_EQ(back.batch_size, 3u);
  EXPECT_EQ(back.learning_rate, 0.0123);
  EXPECT_EQ(back.epochs, 7u);
  EXPECT_EQ(back.seed, 42u);
  EXPECT_EQ(back.patience, 0u);
  EXPECT_FALSE(back.restore_best);
}

TEST(TrainConfigTest, InvalidValuesAreRejected) {
  auto bad = [](const std::string& text) { return TrainConfig::read(KvDocument::parse(text)); };
  EXPECT_THROW(bad("train.batch_size = 0\n"), ConfigError);
  EXPECT_THROW(bad("train.learning_rate = 0\n"), ConfigError);
  EXPECT_THROW(bad("train.learning_rate = -1e-3\n"), ConfigError);
  EXPECT_THROW(bad("train.clip_norm = 0\n"), ConfigError);
  EXPECT_THROW(bad("train.beta1 = 1\n"), ConfigError);
  EXPECT_THROW(bad("train.epsilon = 0\n"), ConfigError);
  EXPECT_THROW(bad("train.epochs = 0\ntrain.max_steps = 0\n"), ConfigError);
  EXPECT_NO_THROW(bad("train.epochs = 0\ntrain.max_steps = 10\n"));
}
