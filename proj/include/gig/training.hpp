#pragma once

// Teacher-forced training with Adam, gradient clipping, validation-driven
// model selection, early stopping and resumable state.

#include "gig/eval.hpp"
#include "gig/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace gig {

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;       // 0: bounded by epochs only
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  std::size_t validate_every = 0;  // steps; 0: once per epoch
  std::size_t patience = 5;        // 0: never stop early
  std::size_t validation_limit = 0;  // 0: whole validation split
  bool restore_best = true;

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) throw ConfigError("train.epsilon must be > 0");
    if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
    if (epochs == 0 && max_steps == 0) throw ConfigError("train.epochs or train.max_steps must be positive");
  }

  static std::set<std::string> keys() {
    return {"train.batch_size", "train.learning_rate", "train.beta1",          "train.beta2",
            "train.epsilon",    "train.epochs",        "train.max_steps",      "train.seed",
            "train.clip_norm",  "train.validate_every", "train.patience",      "train.validation_limit",
            "train.restore_best"};
  }

  void write(KvDocument& doc) const {
    doc.set("train.batch_size", std::to_string(batch_size));
    doc.set("train.learning_rate", format_double(learning_rate));
    doc.set("train.beta1", format_double(beta1));
    doc.set("train.beta2", format_double(beta2));
    doc.set("train.epsilon", format_double(epsilon));
    doc.set("train.epochs", std::to_string(epochs));
    doc.set("train.max_steps", std::to_string(max_steps));
    doc.set("train.seed", std::to_string(seed));
    doc.set("train.clip_norm", format_double(clip_norm));
    doc.set("train.validate_every", std::to_string(validate_every));
    doc.set("train.patience", std::to_string(patience));
    doc.set("train.validation_limit", std::to_string(validation_limit));
    doc.set("train.restore_best", restore_best ? "true" : "false");
  }

  static TrainConfig read(const KvDocument& doc) { return read(doc, TrainConfig{}); }

  static TrainConfig read(const KvDocument& doc, TrainConfig c) {
    c.batch_size = doc.get("train.batch_size", c.batch_size);
    c.learning_rate = doc.get("train.learning_rate", c.learning_rate);
    c.beta1 = doc.get("train.beta1", c.beta1);
    c.beta2 = doc.get("train.beta2", c.beta2);
    c.epsilon = doc.get("train.epsilon", c.epsilon);
    c.epochs = doc.get("train.epochs", c.epochs);
    c.max_steps = doc.get("train.max_steps", c.max_steps);
    c.seed = doc.get("train.seed", c.seed);
    c.clip_norm = doc.get("train.clip_norm", c.clip_norm);
    c.validate_every = doc.get("train.validate_every", c.validate_every);
    c.patience = doc.get("train.patience", c.patience);
    c.validation_limit = doc.get("train.validation_limit", c.validation_limit);
    c.restore_best = doc.get("train.restore_best", c.restore_best);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Optimiser

struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

inline double gradient_norm(std::span<Parameter* const> params) {
  double ss = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->tensor.grad()) ss += g * g;
  }
  return std::sqrt(ss);
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_gradients(std::span<Parameter* const> params, double max_norm) {
  const double norm = gradient_norm(params);
  if (norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->tensor.mutable_grad()) g *= s;
    }
  }
  return norm;
}

/// One bias-corrected Adam update of every parameter from its gradient.
inline void adam_step(std::span<Parameter* const> params, AdamState& state, const TrainConfig& cfg) {
  for (const Parameter* p : params) {
    for (double g : p->tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p->name + "'");
    }
  }
  if (state.m.empty()) {
    for (const Parameter* p : params) {
      state.m.emplace_back(p->tensor.size(), 0.0);
      state.v.emplace_back(p->tensor.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: parameter count changed");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k]->tensor.mutable_values();
    const auto grad = params[k]->tensor.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      values[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// History

struct HistoryRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::string split;  // "train" or "validation"
  double loss = 0.0;
  std::optional<double> bleu, rouge_l, meteor;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["epoch"] = epoch;
    j["split"] = split;
    j["loss"] = loss;
    if (bleu) j["bleu"] = *bleu;
    if (rouge_l) j["rouge_l"] = *rouge_l;
    if (meteor) j["meteor"] = *meteor;
    return j;
  }

  friend bool operator==(const HistoryRecord&, const HistoryRecord&) = default;
};

inline void write_history_line(std::ostream& out, const HistoryRecord& r) { out << r.to_json().dump() << '\n'; }

// ---------------------------------------------------------------------------
// Trainer

struct TrainProgress {
  std::uint64_t epoch = 0;
  std::uint64_t batch_in_epoch = 0;
  double best_bleu = -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::uint64_t best_step = 0;
  std::uint64_t bad_validations = 0;
  bool finished = false;
  bool stopped_early = false;
};

/// Owns the optimiser for one model. Examples without genes or descriptions
/// are skipped.
class Trainer {
 public:
  Trainer(GenerationModel& model, const Ontology& o, const DatasetSplit& split, TrainConfig cfg)
      : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    const TermGraphBuilder neighbourhood(o);
    auto usable = [&](const TermId& id) {
      const Term& t = o.term(id);
      return !t.gene_ids.empty() && t.description.has_value();
    };
    for (const auto& id : split.train) {
      if (usable(id)) train_.push_back(model_.prepare(o, neighbourhood, id));
    }
    std::size_t kept = 0;
    for (const auto& id : split.validation) {
      if (cfg_.validation_limit > 0 && kept == cfg_.validation_limit) break;
      if (!usable(id)) continue;
      validation_.push_back(model_.prepare(o, neighbourhood, id));
      validation_refs_.push_back(*o.term(id).description);
      ++kept;
    }
    if (train_.empty()) throw std::invalid_argument("train: no usable training examples");
    params_ = model_.parameters();
  }

  std::function<void(const HistoryRecord&)> on_record;

  const TrainConfig& config() const { return cfg_; }
  const AdamState& optimizer() const { return adam_; }
  const TrainProgress& progress() const { return progress_; }
  const std::vector<HistoryRecord>& history() const { return history_; }
  const std::vector<PreparedTerm>& train_examples() const { return train_; }
  std::size_t steps_per_epoch() const { return (train_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }

  /// Trains until finished or until `step_limit` total optimiser steps have
  /// been taken (0: no limit). Returns true once training is finished.
  bool run(std::size_t step_limit = 0) {
    while (!progress_.finished) {
      if (step_limit > 0 && adam_.step >= step_limit) return false;
      if ((cfg_.epochs > 0 && progress_.epoch >= cfg_.epochs) || (cfg_.max_steps > 0 && adam_.step >= cfg_.max_steps)) {
        finish();
        break;
      }
      const auto order = epoch_order(progress_.epoch);
      const std::size_t begin = progress_.batch_in_epoch * cfg_.batch_size;
      const std::size_t end = std::min(begin + cfg_.batch_size, order.size());
      std::vector<const PreparedTerm*> batch;
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&train_[order[i]]);
      const double loss = step(batch);
      ++progress_.batch_in_epoch;
      const bool epoch_done = progress_.batch_in_epoch * cfg_.batch_size >= order.size();
      if (epoch_done) {
        ++progress_.epoch;
        progress_.batch_in_epoch = 0;
      }
      record({adam_.step, progress_.epoch - (epoch_done ? 1 : 0), "train", loss, {}, {}, {}});
      const bool due = cfg_.validate_every > 0 ? adam_.step % cfg_.validate_every == 0 : epoch_done;
      if (due && validate_now(epoch_done ? progress_.epoch - 1 : progress_.epoch)) finish();
    }
    return true;
  }

  /// Mean teacher-forced loss over a set of examples, without dropout.
  double mean_loss(const std::vector<PreparedTerm>& examples) const {
    NoGradGuard guard;
    DropoutContext eval;
    double total = 0.0;
    for (const auto& p : examples) total += model_.sequence_loss(p, eval).item();
    return total / static_cast<double>(examples.size());
  }

  double train_loss() const { return mean_loss(train_); }

  std::vector<NamedArray> best_parameters() const { return best_; }

  /// Everything needed to continue bit-exactly: parameters, optimiser
  /// moments, counters and the best snapshot so far.
  std::vector<NamedArray> save_state() const {
    auto out = model_.state();
    for (std::size_t k = 0; k < params_.size() && k < adam_.m.size(); ++k) {
      const Shape s = params_[k]->tensor.shape();
      out.push_back({"adam.m/" + params_[k]->name, {s.rows, s.cols}, adam_.m[k]});
      out.push_back({"adam.v/" + params_[k]->name, {s.rows, s.cols}, adam_.v[k]});
    }
    for (const auto& b : best_) out.push_back({"best/" + b.name, b.shape, b.values});
    const std::vector<std::pair<std::string, double>> scalars{
        {"state.step", static_cast<double>(adam_.step)},
        {"state.epoch", static_cast<double>(progress_.epoch)},
        {"state.batch_in_epoch", static_cast<double>(progress_.batch_in_epoch)},
        {"state.best_bleu", progress_.best_bleu},
        {"state.best_loss", progress_.best_loss},
        {"state.best_step", static_cast<double>(progress_.best_step)},
        {"state.bad_validations", static_cast<double>(progress_.bad_validations)},
        {"state.finished", progress_.finished ? 1.0 : 0.0},
        {"state.stopped_early", progress_.stopped_early ? 1.0 : 0.0},
    };
    for (const auto& [name, v] : scalars) out.push_back({name, {1, 1}, {v}});
    return out;
  }

  void load_state(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    std::vector<NamedArray> params, best;
    for (const auto& a : arrays) {
      by_name[a.name] = &a;
      if (a.name.rfind("best/", 0) == 0) {
        best.push_back({a.name.substr(5), a.shape, a.values});
      } else if (a.name.find('/') == std::string::npos && a.name.rfind("state.", 0) != 0) {
        params.push_back(a);
      }
    }
    model_.load_state(params);
    auto scalar = [&](const std::string& name) {
      auto it = by_name.find(name);
      if (it == by_name.end() || it->second->values.size() != 1) throw CheckpointError("training state lacks " + name);
      return it->second->values[0];
    };
    adam_ = AdamState{};
    adam_.step = static_cast<std::uint64_t>(scalar("state.step"));
    if (by_name.count("adam.m/" + params_.front()->name)) {
      for (const Parameter* p : params_) {
        auto m = by_name.find("adam.m/" + p->name), v = by_name.find("adam.v/" + p->name);
        if (m == by_name.end() || v == by_name.end()) throw CheckpointError("training state lacks moments of " + p->name);
        if (m->second->values.size() != p->tensor.size() || v->second->values.size() != p->tensor.size()) {
          throw CheckpointError("moment shape mismatch for " + p->name);
        }
        adam_.m.push_back(m->second->values);
        adam_.v.push_back(v->second->values);
      }
    }
    progress_.epoch = static_cast<std::uint64_t>(scalar("state.epoch"));
    progress_.batch_in_epoch = static_cast<std::uint64_t>(scalar("state.batch_in_epoch"));
    progress_.best_bleu = scalar("state.best_bleu");
    progress_.best_loss = scalar("state.best_loss");
    progress_.best_step = static_cast<std::uint64_t>(scalar("state.best_step"));
    progress_.bad_validations = static_cast<std::uint64_t>(scalar("state.bad_validations"));
    progress_.finished = scalar("state.finished") != 0.0;
    progress_.stopped_early = scalar("state.stopped_early") != 0.0;
    best_ = std::move(best);
  }

 private:
  std::vector<std::size_t> epoch_order(std::uint64_t epoch) const {
    std::vector<std::size_t> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(detail::splitmix64(cfg_.seed ^ detail::splitmix64(epoch + 1)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  double step(const std::vector<const PreparedTerm*>& batch) {
    for (Parameter* p : params_) p->tensor.zero_grad();
    DropoutContext ctx{true, cfg_.seed, adam_.step, 0};
    const Tensor loss = model_.batch_loss(batch, ctx);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericalError("non-finite training loss at step " + std::to_string(adam_.step + 1));
    }
    loss.backward();
    clip_gradients(params_, cfg_.clip_norm);
    adam_step(params_, adam_, cfg_);
    return value;
  }

  // Returns true when early stopping triggers.
  bool validate_now(std::uint64_t epoch) {
    if (validation_.empty()) return false;
    const double loss = mean_loss(validation_);
    std::vector<Tokens> hyps;
    std::vector<TermId> ids;
    for (const auto& p : validation_) {
      hyps.push_back(model_.generate(p).tokens);
      ids.push_back(p.id);
    }
    const ScoreReport r = score_corpus(ids, hyps, validation_refs_);
    record({adam_.step, epoch, "validation", loss, r.bleu, r.rouge_l, r.meteor});
    const bool improved = r.bleu > progress_.best_bleu || (r.bleu == progress_.best_bleu && loss < progress_.best_loss);
    if (improved) {
      progress_.best_bleu = r.bleu;
      progress_.best_loss = loss;
      progress_.best_step = adam_.step;
      progress_.bad_validations = 0;
      best_ = model_.state();
      return false;
    }
    ++progress_.bad_validations;
    if (cfg_.patience > 0 && progress_.bad_validations >= cfg_.patience) {
      progress_.stopped_early = true;
      return true;
    }
    return false;
  }

  void finish() {
    progress_.finished = true;
    if (cfg_.restore_best && !best_.empty()) model_.load_state(best_);
  }

  void record(HistoryRecord r) {
    history_.push_back(r);
    if (on_record) on_record(history_.back());
  }

  GenerationModel& model_;
  TrainConfig cfg_;
  std::vector<PreparedTerm> train_, validation_;
  std::vector<Tokens> validation_refs_;
  std::vector<Parameter*> params_;
  AdamState adam_;
  TrainProgress progress_;
  std::vector<HistoryRecord> history_;
  std::vector<NamedArray> best_;
};

}  // namespace gig
