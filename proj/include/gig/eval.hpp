#pragma once

// Corpus scoring (BLEU-4, ROUGE-L, METEOR with exact and stem matching),
// memory-attention export, cross-domain matrices and a paired t-test.

#include "gig/model.hpp"
#include "gig/porter.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

namespace gig {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void check_corpus(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs, const char* metric) {
  if (hyps.empty()) throw EvalError(std::string(metric) + ": empty corpus");
  if (hyps.size() != refs.size()) {
    throw EvalError(std::string(metric) + ": " + std::to_string(hyps.size()) + " hypotheses for " +
                    std::to_string(refs.size()) + " references");
  }
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                                t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLEU

struct BleuStats {
  std::size_t matches[4] = {0, 0, 0, 0};
  std::size_t totals[4] = {0, 0, 0, 0};
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

inline BleuStats bleu_stats(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  detail::check_corpus(hyps, refs, "bleu");
  BleuStats s;
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    s.hyp_length += hyps[k].size();
    s.ref_length += refs[k].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto h = detail::ngram_counts(hyps[k], n);
      const auto r = detail::ngram_counts(refs[k], n);
      for (const auto& [gram, c] : h) {
        auto it = r.find(gram);
        s.matches[n - 1] += it == r.end() ? 0 : std::min(c, it->second);
        s.totals[n - 1] += c;
      }
    }
  }
  return s;
}

/// Corpus BLEU-4 in [0, 100]: uniform weights, clipped n-gram precision and
/// brevity penalty. When any order has zero matches, orders 2-4 get one added
/// to both numerator and denominator.
inline double bleu_from_stats(const BleuStats& s) {
  if (s.hyp_length == 0 || s.matches[0] == 0) return 0.0;
  const bool smooth = std::any_of(std::begin(s.matches), std::end(s.matches), [](std::size_t m) { return m == 0; });
  double log_precision = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double num = static_cast<double>(s.matches[n]), den = static_cast<double>(s.totals[n]);
    if (smooth && n >= 1) {
      num += 1.0;
      den += 1.0;
    }
    log_precision += std::log(num / den) / 4.0;
  }
  const double c = static_cast<double>(s.hyp_length), r = static_cast<double>(s.ref_length);
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_precision);
}

inline double bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  return bleu_from_stats(bleu_stats(hyps, refs));
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline constexpr double kRougeBeta = 1.2;

/// LCS F-measure of one pair in [0, 1]; recall weighted by beta^2.
inline double rouge_l_pair(const Tokens& hyp, const Tokens& ref) {
  if (hyp.empty() && ref.empty()) return 1.0;
  const std::size_t lcs = detail::lcs_length(hyp, ref);
  if (lcs == 0) return 0.0;
  const double p = static_cast<double>(lcs) / static_cast<double>(hyp.size());
  const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

/// Mean pairwise ROUGE-L in [0, 100].
inline double rouge_l(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  detail::check_corpus(hyps, refs, "rouge_l");
  double total = 0.0;
  for (std::size_t k = 0; k < hyps.size(); ++k) total += rouge_l_pair(hyps[k], refs[k]);
  return 100.0 * total / static_cast<double>(hyps.size());
}

// ---------------------------------------------------------------------------
// METEOR (exact and stem stages, no synonym lexicon)

struct MeteorAlignment {
  std::vector<int> ref_of_hyp;  // -1 when unmatched
  std::size_t exact = 0;
  std::size_t matches = 0;
  std::size_t chunks = 0;
  bool exhaustive = true;  // false when the memo budget ran out
};

inline std::size_t count_chunks(const std::vector<int>& ref_of_hyp) {
  std::size_t chunks = 0;
  int prev_ref = -2;
  bool prev_matched = false;
  for (int j : ref_of_hyp) {
    if (j < 0) {
      prev_matched = false;
      continue;
    }
    if (!(prev_matched && j == prev_ref + 1)) ++chunks;
    prev_ref = j;
    prev_matched = true;
  }
  return chunks;
}

namespace detail {

class MeteorAligner {
 public:
  MeteorAligner(const Tokens& hyp, const Tokens& ref, std::size_t budget) : hyp_(hyp), ref_(ref), budget_(budget) {
    for (const auto& t : hyp) hyp_stem_.push_back(porter_stem(t));
    for (const auto& t : ref) ref_stem_.push_back(porter_stem(t));
  }

  MeteorAlignment run() {
    MeteorAlignment a;
    std::string used(ref_.size(), '0');
    best(0, -1, used);
    if (memo_.size() > budget_) {
      a.exhaustive = false;
      a.ref_of_hyp = greedy();
    } else {
      a.ref_of_hyp.assign(hyp_.size(), -1);
      int prev = -1;
      for (std::size_t i = 0; i < hyp_.size(); ++i) {
        const int j = memo_.at(key(i, prev, used)).choice;
        a.ref_of_hyp[i] = j;
        if (j >= 0) used[static_cast<std::size_t>(j)] = '1';
        prev = j;
      }
    }
    for (std::size_t i = 0; i < hyp_.size(); ++i) {
      const int j = a.ref_of_hyp[i];
      if (j < 0) continue;
      ++a.matches;
      if (hyp_[i] == ref_[static_cast<std::size_t>(j)]) ++a.exact;
    }
    a.chunks = count_chunks(a.ref_of_hyp);
    return a;
  }

 private:
  // (exact matches, matches, adjacent continuations), compared lexicographically.
  using Score = std::tuple<int, int, int>;

  struct Entry {
    Score score;
    int choice = -1;
  };

  static std::string key(std::size_t i, int prev, const std::string& used) {
    return std::to_string(i) + ':' + std::to_string(prev) + ':' + used;
  }

  // Best completion from hyp position i. Maximising continuations at a fixed
  // match count minimises chunks. Ties keep skipping, then the lowest
  // reference position.
  Score best(std::size_t i, int prev, std::string& used) {
    if (i == hyp_.size()) return {0, 0, 0};
    if (memo_.size() > budget_) return {0, 0, 0};
    const std::string k = key(i, prev, used);
    if (auto it = memo_.find(k); it != memo_.end()) return it->second.score;
    Entry e{best(i + 1, -1, used), -1};
    for (std::size_t j = 0; j < ref_.size(); ++j) {
      if (used[j] == '1' || hyp_stem_[i] != ref_stem_[j]) continue;
      used[j] = '1';
      Score s = best(i + 1, static_cast<int>(j), used);
      used[j] = '0';
      std::get<0>(s) += hyp_[i] == ref_[j] ? 1 : 0;
      std::get<1>(s) += 1;
      std::get<2>(s) += prev >= 0 && static_cast<int>(j) == prev + 1 ? 1 : 0;
      if (s > e.score) e = {s, static_cast<int>(j)};
    }
    memo_[k] = e;
    return e.score;
  }

  // Fallback for pathological inputs: exact stage then stem stage, each
  // preferring the reference position right after the previous match.
  std::vector<int> greedy() const {
    std::vector<int> out(hyp_.size(), -1);
    std::vector<bool> used(ref_.size(), false);
    for (int stage = 0; stage < 2; ++stage) {
      for (std::size_t i = 0; i < hyp_.size(); ++i) {
        if (out[i] >= 0) continue;
        auto ok = [&](std::size_t j) {
          return !used[j] && (stage == 0 ? hyp_[i] == ref_[j] : hyp_stem_[i] == ref_stem_[j]);
        };
        int pick = -1;
        if (i > 0 && out[i - 1] >= 0 && static_cast<std::size_t>(out[i - 1] + 1) < ref_.size() &&
            ok(static_cast<std::size_t>(out[i - 1] + 1))) {
          pick = out[i - 1] + 1;
        }
        for (std::size_t j = 0; pick < 0 && j < ref_.size(); ++j) {
          if (ok(j)) pick = static_cast<int>(j);
        }
        if (pick >= 0) {
          out[i] = pick;
          used[static_cast<std::size_t>(pick)] = true;
        }
      }
    }
    return out;
  }

  const Tokens& hyp_;
  const Tokens& ref_;
  std::vector<std::string> hyp_stem_, ref_stem_;
  std::unordered_map<std::string, Entry> memo_;
  std::size_t budget_;
};

}  // namespace detail

inline MeteorAlignment meteor_align(const Tokens& hyp, const Tokens& ref, std::size_t budget = 100000) {
  return detail::MeteorAligner(hyp, ref, budget).run();
}

inline constexpr double kMeteorRecallWeight = 9.0;
inline constexpr double kMeteorPenaltyGamma = 0.5;
inline constexpr double kMeteorPenaltyBeta = 3.0;

/// Score of one aligned pair in [0, 1]. An identical pair carries no
/// fragmentation penalty.
inline double meteor_from_counts(std::size_t matches, std::size_t chunks, std::size_t hyp_len, std::size_t ref_len,
                                 bool identical) {
  if (identical) return 1.0;
  if (matches == 0) return 0.0;
  const double m = static_cast<double>(matches);
  const double p = m / static_cast<double>(hyp_len), r = m / static_cast<double>(ref_len);
  const double fmean = (1.0 + kMeteorRecallWeight) * p * r / (r + kMeteorRecallWeight * p);
  const double penalty = kMeteorPenaltyGamma * std::pow(static_cast<double>(chunks) / m, kMeteorPenaltyBeta);
  return fmean * (1.0 - penalty);
}

inline double meteor_pair(const Tokens& hyp, const Tokens& ref) {
  if (hyp == ref) return 1.0;
  const auto a = meteor_align(hyp, ref);
  return meteor_from_counts(a.matches, a.chunks, hyp.size(), ref.size(), false);
}

/// Mean pairwise METEOR (exact + stem stages) in [0, 100].
inline double meteor_em(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs) {
  detail::check_corpus(hyps, refs, "meteor");
  double total = 0.0;
  for (std::size_t k = 0; k < hyps.size(); ++k) total += meteor_pair(hyps[k], refs[k]);
  return 100.0 * total / static_cast<double>(hyps.size());
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr const char* kMetricNote =
    "BLEU-4 corpus-level, add-one smoothing for orders 2-4 when any order has zero matches; "
    "ROUGE-L mean pairwise F with beta 1.2; METEOR exact+stem stages only (no synonyms), mean pairwise";

struct ExampleScore {
  TermId id;
  Tokens hypothesis;
  Tokens reference;
  double rouge_l = 0.0;
  double meteor = 0.0;
};

struct ScoreReport {
  double bleu = 0.0;
  double rouge_l = 0.0;
  double meteor = 0.0;
  std::vector<ExampleScore> examples;
  std::map<std::string, std::string> metadata;
};

inline ScoreReport score_corpus(const std::vector<TermId>& ids, const std::vector<Tokens>& hyps,
                                const std::vector<Tokens>& refs) {
  detail::check_corpus(hyps, refs, "score");
  if (ids.size() != hyps.size()) throw EvalError("score: id count mismatch");
  ScoreReport r;
  r.bleu = bleu(hyps, refs);
  r.rouge_l = rouge_l(hyps, refs);
  r.meteor = meteor_em(hyps, refs);
  for (std::size_t k = 0; k < hyps.size(); ++k) {
    r.examples.push_back({ids[k], hyps[k], refs[k], 100.0 * rouge_l_pair(hyps[k], refs[k]),
                          100.0 * meteor_pair(hyps[k], refs[k])});
  }
  r.metadata["metrics"] = kMetricNote;
  return r;
}

/// Generates for every term in `ids` and scores against the stored
/// descriptions. Tokens unknown to the model's vocabulary become UNK on input
/// only; references keep their surface forms.
inline ScoreReport evaluate(const GenerationModel& model, const Ontology& o, const std::vector<TermId>& ids,
                            const DecodeStrategy& strategy = {}) {
  if (ids.empty()) throw EvalError("evaluate: no terms");
  const TermGraphBuilder neighbourhood(o);
  std::vector<Tokens> hyps, refs;
  for (const auto& id : ids) {
    const Term& t = o.term(id);
    if (!t.description) throw EvalError("evaluate: term " + id + " has no description");
    hyps.push_back(model.generate(model.prepare(o, neighbourhood, id), strategy).tokens);
    refs.push_back(*t.description);
  }
  return score_corpus(ids, hyps, refs);
}

// ---------------------------------------------------------------------------
// Attention export

struct AttendedNode {
  std::size_t row = 0;
  std::string label;
  double weight = 0.0;
};

struct AttentionStep {
  std::string token;
  std::vector<AttendedNode> top;
  double row_sum = 0.0;
};

/// Top-k memory rows per generated token; ties go to the lower row index.
inline std::vector<AttentionStep> top_attention(const Generation& g, std::size_t k = 2) {
  if (k == 0) throw EvalError("top_attention: k must be >= 1");
  std::vector<AttentionStep> out;
  for (std::size_t s = 0; s < g.tokens.size(); ++s) {
    const auto& w = g.attention[s];
    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
    AttentionStep step;
    step.token = g.tokens[s];
    step.row_sum = std::accumulate(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
      step.top.push_back({order[i], g.memory_labels[order[i]], w[order[i]]});
    }
    out.push_back(std::move(step));
  }
  return out;
}

inline std::vector<AttentionStep> export_attention(const GenerationModel& model, const Ontology& o, const TermId& id,
                                                   std::size_t k = 2, const DecodeStrategy& strategy = {}) {
  return top_attention(model.generate(o, id, strategy), k);
}

// ---------------------------------------------------------------------------
// Cross-domain matrix

struct DomainModel {
  std::string name;
  const GenerationModel* model = nullptr;
};

struct DomainCorpus {
  std::string name;
  const Ontology* ontology = nullptr;
  std::vector<TermId> test_ids;
};

struct CrossDomainCell {
  std::string trained_on;
  std::string evaluated_on;
  bool in_domain = false;
  ScoreReport report;
  // In-domain score of the evaluated corpus minus this cell's score.
  double bleu_delta = 0.0;
  double rouge_l_delta = 0.0;
  double meteor_delta = 0.0;
};

struct CrossDomainMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<CrossDomainCell>> cells;  // [trained][evaluated]
};

/// Model i was trained on corpus i; each is evaluated on every corpus.
inline CrossDomainMatrix cross_domain_matrix(const std::vector<DomainModel>& models,
                                             const std::vector<DomainCorpus>& corpora,
                                             const DecodeStrategy& strategy = {}) {
  if (models.empty() || models.size() != corpora.size()) {
    throw EvalError("cross_domain_matrix: need one model per corpus");
  }
  CrossDomainMatrix m;
  const std::size_t n = models.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!models[i].model) throw EvalError("cross_domain_matrix: missing model '" + models[i].name + "'");
    if (!corpora[i].ontology) throw EvalError("cross_domain_matrix: missing corpus '" + corpora[i].name + "'");
    if (models[i].name != corpora[i].name) {
      throw EvalError("cross_domain_matrix: model '" + models[i].name + "' paired with corpus '" + corpora[i].name + "'");
    }
    m.names.push_back(models[i].name);
  }
  m.cells.assign(n, std::vector<CrossDomainCell>(n));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      auto& c = m.cells[i][j];
      c.trained_on = m.names[i];
      c.evaluated_on = m.names[j];
      c.in_domain = i == j;
      c.report = evaluate(*models[i].model, *corpora[j].ontology, corpora[j].test_ids, strategy);
      c.report.metadata["trained_on"] = c.trained_on;
      c.report.metadata["evaluated_on"] = c.evaluated_on;
      c.report.metadata["domain"] = c.in_domain ? "in" : "out";
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto& diag = m.cells[j][j].report;
      auto& c = m.cells[i][j];
      c.bleu_delta = diag.bleu - c.report.bleu;
      c.rouge_l_delta = diag.rouge_l - c.report.rouge_l;
      c.meteor_delta = diag.meteor - c.report.meteor;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Statistics

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single value
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

struct TTestResult {
  double mean_difference = 0.0;
  double t = 0.0;
  double degrees_of_freedom = 0.0;
  double p_two_sided = 1.0;
  double p_greater = 0.5;  // one-sided, alternative mean(a - b) > 0
};

/// Paired Student t-test on a[i] - b[i].
inline TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw EvalError("paired_t_test: sample sizes differ");
  if (a.size() < 2) throw EvalError("paired_t_test: need at least two pairs");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const Summary s = summarize(diff);
  TTestResult r;
  r.mean_difference = s.mean;
  r.degrees_of_freedom = static_cast<double>(a.size() - 1);
  if (s.sd == 0.0) {
    if (s.mean == 0.0) return r;
    r.t = s.mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p_two_sided = 0.0;
    r.p_greater = s.mean > 0 ? 0.0 : 1.0;
    return r;
  }
  r.t = s.mean / (s.sd / std::sqrt(static_cast<double>(a.size())));
  const boost::math::students_t dist(r.degrees_of_freedom);
  r.p_two_sided = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  r.p_greater = boost::math::cdf(boost::math::complement(dist, r.t));
  return r;
}

}  // namespace gig
