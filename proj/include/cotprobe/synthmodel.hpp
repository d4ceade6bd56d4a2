#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cotprobe/corpus.hpp"
#include "cotprobe/detail/hash.hpp"
#include "cotprobe/error.hpp"
#include "cotprobe/inference.hpp"

// Deterministic stand-in models. A synthetic model has a per-instance prior
// over labels and follows the answer named in whatever reasoning it is shown,
// with a strength w(t) that grows with the fraction t of reasoning revealed.

namespace cotprobe {

// Piecewise-linear w(t) through the given (t, w) points.
class FollowCurve {
 public:
  FollowCurve() : points_{{0.0, 0.0}, {1.0, 1.0}} {}

  explicit FollowCurve(std::vector<std::pair<double, double>> points)
      : points_(std::move(points)) {
    if (points_.size() < 2) throw ArgumentError("follow curve needs at least two points");
    if (points_.front().first != 0.0 || points_.front().second != 0.0)
      throw ArgumentError("follow curve must start at (0, 0)");
    if (points_.back().first != 1.0) throw ArgumentError("follow curve must end at t = 1");
    for (std::size_t i = 1; i < points_.size(); ++i) {
      if (!(points_[i].first > points_[i - 1].first))
        throw ArgumentError("follow curve t values must increase");
      if (points_[i].second < points_[i - 1].second)
        throw ArgumentError("follow curve weights must be non-decreasing");
    }
    for (const auto& [t, w] : points_)
      if (w < 0.0 || w > 1.0) throw ArgumentError("follow curve weights must lie in [0, 1]");
  }

  double at(double t) const {
    t = std::clamp(t, 0.0, 1.0);
    for (std::size_t i = 1; i < points_.size(); ++i) {
      const auto [t0, w0] = points_[i - 1];
      const auto [t1, w1] = points_[i];
      if (t <= t1) return w0 + (w1 - w0) * (t - t0) / (t1 - t0);
    }
    return points_.back().second;
  }

  const std::vector<std::pair<double, double>>& points() const noexcept { return points_; }

 private:
  std::vector<std::pair<double, double>> points_;
};

// onehot: full follow puts all mass on the named answer.
// argmax_transfer: full follow swaps the prior's top mass onto the named
// answer, leaving the rest of the prior's shape in place.
enum class FollowTarget { onehot, argmax_transfer };

inline FollowTarget parse_follow_target(std::string_view s) {
  if (s == "onehot") return FollowTarget::onehot;
  if (s == "argmax_transfer") return FollowTarget::argmax_transfer;
  throw ArgumentError("unknown follow target '" + std::string(s) + "'");
}

struct SynthSpec {
  std::string name;
  std::uint64_t seed = 0;
  double temperature = 1.0;    // prior sharpness; lower is sharper
  double hjd_agreement = 0.8;  // chance the planted answer is the majority label
  std::map<std::string, std::vector<double>> prior_overrides;  // uid -> label-order prior
  std::map<std::string, std::size_t> answer_overrides;         // uid -> label
  FollowCurve follow;
  FollowTarget target = FollowTarget::onehot;
  std::size_t sentences = 10;
};

namespace detail {

inline std::mt19937_64 synth_rng(const SynthSpec& spec, std::string_view uid,
                                 std::string_view purpose) {
  Fnv1a h;
  h.field(std::to_string(spec.seed)).field(uid).field(purpose);
  return std::mt19937_64(h.value());
}

// Uniform in (0, 1], built from raw engine bits so it is identical on every
// standard library.
inline double unit_open(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 1.0) * (1.0 / 9007199254740992.0);
}

}  // namespace detail

inline std::vector<double> synth_prior(const SynthSpec& spec, const Instance& inst) {
  if (auto it = spec.prior_overrides.find(inst.uid); it != spec.prior_overrides.end())
    return it->second;
  auto rng = detail::synth_rng(spec, inst.uid, "prior");
  const std::size_t n = option_count(inst.task);
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& v : p) {
    v = std::pow(-std::log(detail::unit_open(rng)), 1.0 / spec.temperature);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

inline std::size_t synth_answer(const SynthSpec& spec, const Instance& inst) {
  if (auto it = spec.answer_overrides.find(inst.uid); it != spec.answer_overrides.end())
    return it->second;
  auto rng = detail::synth_rng(spec, inst.uid, "answer");
  const std::size_t n = option_count(inst.task);
  if (detail::unit_open(rng) <= spec.hjd_agreement) return inst.majority_label;
  const auto shift = 1 + static_cast<std::size_t>(detail::unit_open(rng) * (n - 1)) % (n - 1);
  return (inst.majority_label + shift) % n;
}

// p(t) = (1 - w(t)) * prior + w(t) * target, all in option order.
inline std::vector<double> synth_mixture(const SynthSpec& spec, const std::vector<double>& prior,
                                         double t, std::optional<std::size_t> answer) {
  const double w = spec.follow.at(t);
  if (!answer || w == 0.0) return prior;
  std::vector<double> target(prior.size(), 0.0);
  if (spec.target == FollowTarget::onehot) {
    target.at(*answer) = 1.0;
  } else {
    target = prior;
    const auto top = static_cast<std::size_t>(std::max_element(prior.begin(), prior.end()) -
                                              prior.begin());
    std::swap(target[top], target.at(*answer));
  }
  std::vector<double> out(prior.size());
  for (std::size_t i = 0; i < prior.size(); ++i) out[i] = (1.0 - w) * prior[i] + w * target[i];
  return out;
}

struct SynthSentinel {
  std::string uid;
  std::size_t index = 0;
  std::size_t total = 0;
  std::string answer;
};

inline std::string format_sentinel(const SynthSentinel& s) {
  return "<!--syn uid=" + s.uid + " " + std::to_string(s.index) + "/" +
         std::to_string(s.total) + " ans=" + s.answer + "-->";
}

// Every complete sentinel in the text, in order of appearance.
inline std::vector<SynthSentinel> parse_sentinels(std::string_view text) {
  std::vector<SynthSentinel> out;
  constexpr std::string_view open = "<!--syn uid=";
  std::size_t pos = 0;
  while ((pos = text.find(open, pos)) != std::string_view::npos) {
    const std::size_t body = pos + open.size();
    const std::size_t close = text.find("-->", body);
    if (close == std::string_view::npos) break;
    const std::string_view inner = text.substr(body, close - body);
    pos = close + 3;
    const auto sp1 = inner.find(' ');
    const auto slash = inner.find('/', sp1 == std::string_view::npos ? 0 : sp1);
    const auto sp2 = inner.find(" ans=", slash == std::string_view::npos ? 0 : slash);
    if (sp1 == std::string_view::npos || slash == std::string_view::npos ||
        sp2 == std::string_view::npos)
      throw ProtocolError("malformed synthetic sentinel");
    SynthSentinel s;
    s.uid = std::string(inner.substr(0, sp1));
    try {
      s.index = std::stoul(std::string(inner.substr(sp1 + 1, slash - sp1 - 1)));
      s.total = std::stoul(std::string(inner.substr(slash + 1, sp2 - slash - 1)));
    } catch (const std::exception&) {
      throw ProtocolError("malformed synthetic sentinel step");
    }
    s.answer = std::string(inner.substr(sp2 + 5));
    if (s.total == 0 || s.index > s.total) throw ProtocolError("synthetic sentinel out of range");
    out.push_back(std::move(s));
  }
  return out;
}

// Reasoning script: `spec.sentences` sentences, each tagged with a sentinel,
// the last one stating the planted answer's option letter.
inline std::string synth_cot_text(const SynthSpec& spec, const Instance& inst,
                                  const PromptSpec& prompt) {
  static const std::vector<std::string> bank{
      "First, restate what the question is asking about the two texts",
      "The key facts in the given text are checked one at a time",
      "Each listed option is compared against those facts",
      "Some wording could be read in more than one way here",
      "A careful reader might weigh the implicit assumptions differently",
      "The strongest competing option is examined again",
      "Nothing in the text rules that reading out completely",
      "The remaining doubt is small compared with the main evidence",
      "Putting the pieces together narrows the choice considerably",
      "A final check confirms the reading is consistent"};
  const std::size_t n = std::max<std::size_t>(1, spec.sentences);
  const std::size_t answer = synth_answer(spec, inst);
  const std::string& letter = prompt.mapping.option_letters()[prompt.mapping.position_of_label(answer)];
  std::string out;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i > 1) out += ' ';
    const SynthSentinel s{inst.uid, i, n, letter};
    if (i == n)
      out += "Therefore, the answer is " + letter + " " + format_sentinel(s) + ".";
    else
      out += bank[(i - 1) % bank.size()] + " " + format_sentinel(s) + ".";
  }
  return out;
}

// Scores a probe: prior at t = 0, moving toward the answer named by the
// last visible sentinel as more reasoning is shown.
inline OptionScores synth_score_first_token(const SynthSpec& spec,
                                            const std::vector<double>& prior_in_option_order,
                                            const std::vector<std::string>& option_letters,
                                            std::string_view probe) {
  const auto sentinels = parse_sentinels(probe);
  double t = 0.0;
  std::optional<std::size_t> answer;
  if (!sentinels.empty()) {
    const auto& last = sentinels.back();
    t = static_cast<double>(last.index) / static_cast<double>(last.total);
    auto it = std::find(option_letters.begin(), option_letters.end(), last.answer);
    if (it == option_letters.end())
      throw ProtocolError("synthetic sentinel names unknown option '" + last.answer + "'");
    answer = static_cast<std::size_t>(it - option_letters.begin());
  }
  const auto p = synth_mixture(spec, prior_in_option_order, t, answer);
  OptionScores out;
  out.score_kind = ScoreKind::log_probability;
  for (double v : p) out.per_option.push_back(std::log(std::max(v, 1e-300)));
  return out;
}

// Backend wrapper. bind() registers the corpus so prompts can be traced back
// to their instance and option order.
class SyntheticBackend final : public Backend {
 public:
  SyntheticBackend(BackendDescriptor desc, SynthSpec spec)
      : desc_(std::move(desc)), spec_(std::move(spec)) {}

  const BackendDescriptor& descriptor() const override { return desc_; }
  const SynthSpec& spec() const noexcept { return spec_; }

  void bind(const std::vector<Instance>& corpus, const std::vector<OptionMapping>& mappings) {
    std::lock_guard lock(mu_);
    for (const auto& inst : corpus) {
      instances_[inst.uid] = inst;
      for (const auto& m : mappings) {
        if (m.size() != option_count(inst.task)) continue;
        index_.insert_or_assign(build_prompt(inst, m).full_text, std::make_pair(inst.uid, m));
      }
    }
  }

  // Binds under every ordering of the default option letters.
  void bind(const std::vector<Instance>& corpus) {
    std::vector<OptionMapping> maps;
    for (std::size_t n : {std::size_t{2}, std::size_t{3}}) {
      std::vector<std::size_t> perm(n);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      do {
        maps.push_back(permute_mapping(OptionMapping::identity(n), perm));
      } while (std::next_permutation(perm.begin(), perm.end()));
    }
    bind(corpus, maps);
  }

  FirstTokenCandidates first_token_candidates(const std::string& probe) override {
    const auto& [inst, mapping] = lookup(prompt_part(probe));
    std::vector<double> prior_label = synth_prior(spec_, inst);
    std::vector<double> prior_opt(prior_label.size());
    for (std::size_t p = 0; p < prior_opt.size(); ++p)
      prior_opt[p] = prior_label.at(mapping.label_assignment()[p]);
    const auto scores =
        synth_score_first_token(spec_, prior_opt, mapping.option_letters(), probe);
    FirstTokenCandidates out;
    out.kind = ScoreKind::log_probability;
    for (std::size_t p = 0; p < scores.per_option.size(); ++p)
      out.scores[mapping.option_letters()[p]] = scores.per_option[p];
    return out;
  }

  std::string generate(const std::string& prompt) override {
    const auto& [inst, mapping] = lookup(prompt);
    PromptSpec ps{prompt, mapping.option_letters(), mapping, inst.task};
    const std::string cot = synth_cot_text(spec_, inst, ps);
    const std::string letter =
        mapping.option_letters()[mapping.position_of_label(synth_answer(spec_, inst))];
    return desc_.think_open_marker + "\n" + cot + "\n" + desc_.think_close_marker + "\n\n" +
           letter;
  }

 private:
  std::string prompt_part(const std::string& probe) const {
    const std::string cue = "\nAnswer:" + desc_.think_open_marker;
    const auto pos = probe.find(cue);
    if (pos == std::string::npos) throw ProtocolError("synthetic probe has no answer cue");
    return probe.substr(0, pos + 8);
  }

  std::pair<const Instance&, const OptionMapping&> lookup(const std::string& prompt) const {
    std::lock_guard lock(mu_);
    auto it = index_.find(prompt);
    if (it == index_.end())
      throw ProtocolError("synthetic backend " + desc_.model_id + ": unknown prompt");
    return {instances_.at(it->second.first), it->second.second};
  }

  BackendDescriptor desc_;
  SynthSpec spec_;
  mutable std::mutex mu_;
  std::map<std::string, Instance> instances_;
  std::map<std::string, std::pair<std::string, OptionMapping>> index_;
};

// Random corpus with 100-annotator label counts, for offline runs.
inline std::vector<Instance> synthetic_corpus(std::size_t count, TaskKind task,
                                              std::uint64_t seed) {
  std::vector<Instance> out;
  const std::size_t n = option_count(task);
  for (std::size_t i = 0; i < count; ++i) {
    Instance inst;
    inst.uid = "syn" + std::to_string(seed) + "-" + std::to_string(i);
    inst.task = task;
    SynthSpec s;
    s.seed = seed;
    auto rng = detail::synth_rng(s, inst.uid, "hjd");
    std::vector<double> w(n);
    double total = 0.0;
    for (double& v : w) {
      v = std::pow(-std::log(detail::unit_open(rng)), 1.5);
      total += v;
    }
    std::vector<int> counts(n, 0);
    for (int a = 0; a < 100; ++a) {
      double u = detail::unit_open(rng) * total;
      std::size_t k = 0;
      while (k + 1 < n && u > w[k]) u -= w[k++];
      ++counts[k];
    }
    for (int c : counts) inst.hjd.probs.push_back(c / 100.0);
    inst.hjd.annotator_count = 100;
    inst.majority_label = static_cast<std::size_t>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
    const std::string tag = std::to_string(i);
    if (task == TaskKind::three_way_nli) {
      inst.text_fields["premise"] = "Synthetic context number " + tag + " describes a scene.";
      inst.text_fields["hypothesis"] = "Synthetic statement number " + tag + " makes a claim.";
    } else {
      inst.text_fields["beginning"] = "Synthetic beginning " + tag + ".";
      inst.text_fields["ending"] = "Synthetic ending " + tag + ".";
      inst.text_fields["hypothesis1"] = "First synthetic explanation " + tag + ".";
      inst.text_fields["hypothesis2"] = "Second synthetic explanation " + tag + ".";
    }
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace cotprobe
