#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cotprobe/corpus.hpp"
#include "cotprobe/error.hpp"

namespace cotprobe {

enum class ScoreKind { raw_logit, log_probability };
enum class MjdMode { raw_normalize, probability_renormalize };
enum class AliasAggregation { sum, max };

inline std::string_view to_string(ScoreKind k) noexcept {
  return k == ScoreKind::raw_logit ? "raw_logit" : "log_probability";
}
inline std::string_view to_string(MjdMode m) noexcept {
  return m == MjdMode::raw_normalize ? "raw_normalize" : "probability_renormalize";
}
inline std::string_view to_string(AliasAggregation a) noexcept {
  return a == AliasAggregation::sum ? "sum" : "max";
}

inline MjdMode parse_mjd_mode(std::string_view s) {
  if (s == "raw_normalize") return MjdMode::raw_normalize;
  if (s == "probability_renormalize") return MjdMode::probability_renormalize;
  throw ArgumentError("unknown mjd mode '" + std::string(s) + "'");
}
inline ScoreKind parse_score_kind(std::string_view s) {
  if (s == "raw_logit") return ScoreKind::raw_logit;
  if (s == "log_probability") return ScoreKind::log_probability;
  throw ArgumentError("unknown score kind '" + std::string(s) + "'");
}
inline AliasAggregation parse_alias_aggregation(std::string_view s) {
  if (s == "sum") return AliasAggregation::sum;
  if (s == "max") return AliasAggregation::max;
  throw ArgumentError("unknown alias aggregation '" + std::string(s) + "'");
}

using AliasTable = std::map<std::string, std::vector<std::string>>;

// Bare letter plus the space-prefixed form most BPE vocabularies emit.
inline AliasTable default_aliases(const std::vector<std::string>& letters) {
  AliasTable t;
  for (const auto& l : letters) t[l] = {l, " " + l};
  return t;
}

inline void validate_aliases(const AliasTable& table) {
  std::set<std::string> seen;
  for (const auto& [letter, forms] : table) {
    if (forms.empty()) throw ArgumentError("alias list for option " + letter + " is empty");
    for (const auto& f : forms)
      if (!seen.insert(f).second)
        throw ArgumentError("surface form '" + f + "' is aliased to more than one option");
  }
}

struct BackendDescriptor {
  std::string model_id;
  std::string endpoint;  // URL or "synthetic:<name>"
  std::string think_open_marker = "<think>";
  std::string think_close_marker = "</think>";
  AliasTable alias_table = default_aliases({"A", "B", "C"});

  bool is_synthetic() const { return endpoint.rfind("synthetic:", 0) == 0; }
};

struct OptionScores {
  std::vector<double> per_option;
  ScoreKind score_kind = ScoreKind::log_probability;
};

struct ModelJudgmentDistribution {
  std::vector<double> probs;
};

// Candidate scores for the first generated position, keyed by surface form.
struct FirstTokenCandidates {
  std::map<std::string, double> scores;
  ScoreKind kind = ScoreKind::log_probability;
};

// A logprob-capable model endpoint. Implementations must tolerate concurrent
// calls.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual const BackendDescriptor& descriptor() const = 0;
  virtual FirstTokenCandidates first_token_candidates(const std::string& probe) = 0;
  // Free-form continuation of the prompt (reasoning plus answer).
  virtual std::string generate(const std::string& prompt) = 0;
};

inline constexpr std::string_view kEarlyStopCue = "Based on the reasoning so far, the Answer is:";

// Probe text for one step: the prompt, the reasoning prefix wrapped in the
// backend's think markers, then the early-stop cue. Markers stay even when
// the prefix is empty so step 0 differs from later steps only in the body.
inline std::string assemble_probe(const PromptSpec& prompt, std::string_view cot_prefix,
                                  const BackendDescriptor& backend) {
  std::string out;
  out.reserve(prompt.full_text.size() + cot_prefix.size() + 96);
  out += prompt.full_text;
  out += backend.think_open_marker;
  out += cot_prefix;
  out += '\n';
  out += backend.think_close_marker;
  out += "\n\n";
  out += kEarlyStopCue;
  return out;
}

// Collapses candidate scores onto the options through the alias table.
// Log-probabilities are summed in probability space (or maxed); raw logits
// always take the max.
inline OptionScores aggregate_option_scores(const FirstTokenCandidates& cands,
                                            const std::vector<std::string>& options,
                                            const AliasTable& aliases,
                                            AliasAggregation agg = AliasAggregation::sum) {
  OptionScores out;
  out.score_kind = cands.kind;
  for (const auto& opt : options) {
    auto it = aliases.find(opt);
    if (it == aliases.end())
      throw ArgumentError("option " + opt + " has no entry in the alias table");
    std::vector<double> hits;
    for (const auto& form : it->second) {
      auto c = cands.scores.find(form);
      if (c == cands.scores.end()) continue;
      if (!std::isfinite(c->second))
        throw ProtocolError("non-finite score for candidate '" + form + "'");
      hits.push_back(c->second);
    }
    if (hits.empty())
      throw CoverageError(opt, "no alias of option " + opt + " among first-token candidates");
    const double top = *std::max_element(hits.begin(), hits.end());
    if (agg == AliasAggregation::max || cands.kind == ScoreKind::raw_logit) {
      out.per_option.push_back(top);
    } else {
      double acc = 0.0;
      for (double h : hits) acc += std::exp(h - top);
      out.per_option.push_back(top + std::log(acc));
    }
  }
  return out;
}

inline OptionScores score_first_token(Backend& backend, const std::string& probe,
                                      const std::vector<std::string>& options,
                                      AliasAggregation agg = AliasAggregation::sum) {
  return aggregate_option_scores(backend.first_token_candidates(probe), options,
                                 backend.descriptor().alias_table, agg);
}

// raw_shift, when set, maps s -> s - min(s) + raw_shift before raw division.
inline ModelJudgmentDistribution scores_to_mjd(const OptionScores& scores, MjdMode mode,
                                               std::optional<double> raw_shift = std::nullopt) {
  const auto& s = scores.per_option;
  if (s.empty()) throw ArgumentError("scores_to_mjd: no scores");
  for (double v : s)
    if (!std::isfinite(v)) throw ArgumentError("scores_to_mjd: scores must be finite");

  ModelJudgmentDistribution out;
  out.probs.resize(s.size());
  if (mode == MjdMode::raw_normalize) {
    std::vector<double> v = s;
    if (raw_shift) {
      if (!(*raw_shift > 0.0)) throw ArgumentError("scores_to_mjd: raw shift must be positive");
      const double lo = *std::min_element(v.begin(), v.end());
      for (double& x : v) x = x - lo + *raw_shift;
    }
    double sum = 0.0;
    for (double x : v) {
      if (!(x > 0.0))
        throw DomainError("scores_to_mjd: raw normalization needs strictly positive scores");
      sum += x;
    }
    if (!std::isfinite(sum)) throw NumericError("scores_to_mjd: score sum overflowed");
    for (std::size_t i = 0; i < v.size(); ++i) out.probs[i] = v[i] / sum;
    return out;
  }

  if (scores.score_kind != ScoreKind::log_probability)
    throw DomainError("scores_to_mjd: probability renormalization needs log-probabilities");
  const double top = *std::max_element(s.begin(), s.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out.probs[i] = std::exp(s[i] - top);
    sum += out.probs[i];
  }
  if (!(sum > 0.0) || !std::isfinite(sum)) throw NumericError("scores_to_mjd: sum underflow");
  for (double& p : out.probs) p /= sum;
  return out;
}

// Reorders an option-ordered distribution into label order.
inline std::vector<double> to_label_order(const std::vector<double>& option_probs,
                                          const OptionMapping& mapping) {
  if (option_probs.size() != mapping.size()) throw ArgumentError("to_label_order: arity mismatch");
  std::vector<double> out(option_probs.size());
  for (std::size_t p = 0; p < option_probs.size(); ++p)
    out[mapping.label_assignment()[p]] = option_probs[p];
  return out;
}

}  // namespace cotprobe
