#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cotprobe/error.hpp"

namespace cotprobe {

enum class TaskKind { three_way_nli, binary_abductive };

constexpr std::size_t option_count(TaskKind k) noexcept {
  return k == TaskKind::three_way_nli ? 3 : 2;
}

inline std::string_view to_string(TaskKind k) noexcept {
  return k == TaskKind::three_way_nli ? "three_way_nli" : "binary_abductive";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "three_way_nli" || s == "mnli" || s == "snli") return TaskKind::three_way_nli;
  if (s == "binary_abductive" || s == "anli" || s == "alphanli") return TaskKind::binary_abductive;
  throw ArgumentError("unknown task kind '" + std::string(s) + "'");
}

// Text roles each task kind requires, in template order.
inline const std::vector<std::string>& required_roles(TaskKind k) {
  static const std::vector<std::string> nli{"premise", "hypothesis"};
  static const std::vector<std::string> abductive{"beginning", "ending", "hypothesis1",
                                                  "hypothesis2"};
  return k == TaskKind::three_way_nli ? nli : abductive;
}

struct HumanJudgmentDistribution {
  std::vector<double> probs;
  int annotator_count = 0;
};

struct Instance {
  std::string uid;
  TaskKind task = TaskKind::three_way_nli;
  std::map<std::string, std::string> text_fields;
  std::size_t majority_label = 0;
  HumanJudgmentDistribution hjd;
};

// Option position -> semantic label position. Construct through make() or
// identity(); both guarantee the assignment is a bijection.
class OptionMapping {
 public:
  static OptionMapping identity(std::size_t n) {
    std::vector<std::string> letters;
    std::vector<std::size_t> assign(n);
    for (std::size_t i = 0; i < n; ++i) letters.emplace_back(1, static_cast<char>('A' + i));
    std::iota(assign.begin(), assign.end(), std::size_t{0});
    return OptionMapping(std::move(letters), std::move(assign));
  }

  static OptionMapping make(std::vector<std::string> letters,
                            std::vector<std::size_t> label_assignment) {
    if (letters.size() != label_assignment.size())
      throw ArgumentError("option letters and label assignment differ in length");
    check_bijection(label_assignment);
    for (std::size_t i = 0; i < letters.size(); ++i) {
      if (letters[i].empty()) throw ArgumentError("empty option letter");
      for (std::size_t j = 0; j < i; ++j)
        if (letters[i] == letters[j]) throw ArgumentError("duplicate option letter " + letters[i]);
    }
    return OptionMapping(std::move(letters), std::move(label_assignment));
  }

  const std::vector<std::string>& option_letters() const noexcept { return letters_; }
  const std::vector<std::size_t>& label_assignment() const noexcept { return assign_; }
  std::size_t size() const noexcept { return assign_.size(); }

  // Option position showing the given label.
  std::size_t position_of_label(std::size_t label) const {
    for (std::size_t p = 0; p < assign_.size(); ++p)
      if (assign_[p] == label) return p;
    throw ArgumentError("label index out of range");
  }

  bool is_identity() const {
    for (std::size_t p = 0; p < assign_.size(); ++p)
      if (assign_[p] != p) return false;
    return true;
  }

  // Compact textual form, e.g. "A=0,B=1,C=2".
  std::string describe() const {
    std::string out;
    for (std::size_t p = 0; p < assign_.size(); ++p) {
      if (p) out += ',';
      out += letters_[p] + "=" + std::to_string(assign_[p]);
    }
    return out;
  }

  friend bool operator==(const OptionMapping&, const OptionMapping&) = default;

  static void check_bijection(const std::vector<std::size_t>& perm) {
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t v : perm) {
      if (v >= perm.size() || seen[v]) throw ArgumentError("permutation is not a bijection");
      seen[v] = true;
    }
  }

 private:
  OptionMapping(std::vector<std::string> letters, std::vector<std::size_t> assign)
      : letters_(std::move(letters)), assign_(std::move(assign)) {}

  std::vector<std::string> letters_;
  std::vector<std::size_t> assign_;
};

// Reorders which label each option position shows: the option at position p
// takes the label previously shown at position permutation[p].
inline OptionMapping permute_mapping(const OptionMapping& mapping,
                                     const std::vector<std::size_t>& permutation) {
  if (permutation.size() != mapping.size())
    throw ArgumentError("permutation arity does not match mapping");
  OptionMapping::check_bijection(permutation);
  std::vector<std::size_t> assign(permutation.size());
  for (std::size_t p = 0; p < permutation.size(); ++p)
    assign[p] = mapping.label_assignment()[permutation[p]];
  return OptionMapping::make(mapping.option_letters(), std::move(assign));
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  OptionMapping::check_bijection(perm);
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

struct PromptSpec {
  std::string full_text;
  std::vector<std::string> option_letters;
  OptionMapping mapping = OptionMapping::identity(3);
  TaskKind task = TaskKind::three_way_nli;
};

namespace detail {

inline const std::string& require_field(const Instance& inst, const std::string& role) {
  auto it = inst.text_fields.find(role);
  if (it == inst.text_fields.end() || it->second.empty())
    throw ConstructionError("instance " + inst.uid + " lacks text field '" + role + "'");
  return it->second;
}

}  // namespace detail

// Multiple-choice prompt in the fixed MCQA template of the task kind, option
// lines ordered by the mapping. Ends with "Answer:" and nothing after it.
inline PromptSpec build_prompt(const Instance& inst, const OptionMapping& mapping) {
  const std::size_t n = option_count(inst.task);
  if (mapping.size() != n) throw ArgumentError("mapping arity does not match task option count");

  std::string text;
  std::vector<std::string> label_text;
  if (inst.task == TaskKind::three_way_nli) {
    const auto& premise = detail::require_field(inst, "premise");
    const auto& hypothesis = detail::require_field(inst, "hypothesis");
    text =
        "Please determine whether the following statement is true (entailment), "
        "undetermined (neutral), or false (contradiction) given the context below and "
        "select ONE of the listed options and start your answer with a single letter.\n";
    text += "Context: " + premise + "\n";
    text += "Statement: " + hypothesis + "\n";
    label_text = {"Entailment", "Neutral", "Contradiction"};
  } else {
    const auto& beginning = detail::require_field(inst, "beginning");
    const auto& ending = detail::require_field(inst, "ending");
    label_text = {detail::require_field(inst, "hypothesis1"),
                  detail::require_field(inst, "hypothesis2")};
    text =
        "Please determine which of the two hypotheses (A or B) is more likely to explain "
        "the transition from the beginning observation to the ending observation and "
        "select ONE of the listed options and start your answer with a single letter.\n";
    text += "Beginning: " + beginning + "\n";
    text += "Ending: " + ending + "\n";
  }
  for (std::size_t p = 0; p < n; ++p)
    text += mapping.option_letters()[p] + ". " + label_text[mapping.label_assignment()[p]] + "\n";
  text += "Answer:";
  return PromptSpec{std::move(text), mapping.option_letters(), mapping, inst.task};
}

// Field names of the newline-delimited corpus format. Defaults follow the
// ChaosNLI release.
struct CorpusSchema {
  std::string uid_field = "uid";
  std::string example_field = "example";  // empty: text fields at top level
  std::string counts_field = "label_counter";
  std::string dist_field = "label_dist";
  std::string majority_field = "majority_label";
  std::string annotator_field = "annotator_count";  // optional in records
  int default_annotators = 100;                     // used for dist-only records
  std::vector<std::string> label_keys;               // label position -> key
  std::map<std::string, std::string> text_fields;    // role -> record field

  static CorpusSchema chaosnli(TaskKind k) {
    CorpusSchema s;
    if (k == TaskKind::three_way_nli) {
      s.label_keys = {"e", "n", "c"};
      s.text_fields = {{"premise", "premise"}, {"hypothesis", "hypothesis"}};
    } else {
      s.label_keys = {"1", "2"};
      s.text_fields = {{"beginning", "obs1"},
                       {"ending", "obs2"},
                       {"hypothesis1", "hyp1"},
                       {"hypothesis2", "hyp2"}};
    }
    return s;
  }
};

namespace detail {

inline std::string scalar_key(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  throw SchemaError("label must be a string or integer");
}

inline Instance parse_record(const nlohmann::json& rec, TaskKind task,
                             const CorpusSchema& schema, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": ";
  const std::size_t n = option_count(task);
  if (schema.label_keys.size() != n)
    throw SchemaError("schema label_keys arity does not match task option count");
  if (!rec.is_object()) throw ParseError(where + "record is not an object");

  Instance inst;
  inst.task = task;
  auto uid = rec.find(schema.uid_field);
  if (uid == rec.end()) throw SchemaError(where + "missing '" + schema.uid_field + "'");
  inst.uid = scalar_key(*uid);

  const nlohmann::json* example = &rec;
  if (!schema.example_field.empty()) {
    auto it = rec.find(schema.example_field);
    if (it == rec.end() || !it->is_object())
      throw SchemaError(where + "missing object '" + schema.example_field + "'");
    example = &*it;
  }
  for (const auto& role : required_roles(task)) {
    auto m = schema.text_fields.find(role);
    if (m == schema.text_fields.end())
      throw SchemaError(where + "schema has no field for role '" + role + "'");
    auto it = example->find(m->second);
    if (it == example->end() || !it->is_string() || it->get<std::string>().empty())
      throw SchemaError(where + "missing or empty text field '" + m->second + "'");
    inst.text_fields[role] = it->get<std::string>();
  }

  auto label_index = [&](const std::string& key) -> std::size_t {
    for (std::size_t i = 0; i < n; ++i)
      if (schema.label_keys[i] == key) return i;
    throw SchemaError(where + "unknown label '" + key + "'");
  };

  std::optional<int> declared;
  if (!schema.annotator_field.empty()) {
    auto it = rec.find(schema.annotator_field);
    if (it != rec.end()) {
      if (!it->is_number_integer() || it->get<long long>() <= 0)
        throw ValidationError(where + "annotator count must be a positive integer");
      declared = it->get<int>();
    }
  }

  auto counts_it = rec.find(schema.counts_field);
  if (counts_it != rec.end() && !counts_it->is_null()) {
    if (!counts_it->is_object()) throw ParseError(where + "label counts must be an object");
    std::vector<long long> counts(n, 0);
    for (auto it = counts_it->begin(); it != counts_it->end(); ++it) {
      if (!it.value().is_number_integer() || it.value().get<long long>() < 0)
        throw ValidationError(where + "label count must be a non-negative integer");
      counts[label_index(it.key())] += it.value().get<long long>();
    }
    const long long total = std::accumulate(counts.begin(), counts.end(), 0LL);
    if (total <= 0) throw ValidationError(where + "label counts sum to zero");
    if (declared && *declared != total)
      throw ValidationError(where + "label counts sum to " + std::to_string(total) +
                            ", annotator count is " + std::to_string(*declared));
    inst.hjd.annotator_count = static_cast<int>(total);
    for (long long c : counts)
      inst.hjd.probs.push_back(static_cast<double>(c) / static_cast<double>(total));
  } else {
    auto dist_it = rec.find(schema.dist_field);
    if (dist_it == rec.end() || !dist_it->is_array())
      throw SchemaError(where + "record has neither label counts nor a label distribution");
    if (dist_it->size() != n) throw ValidationError(where + "label distribution arity mismatch");
    double sum = 0.0;
    for (const auto& v : *dist_it) {
      if (!v.is_number() || v.get<double>() < 0.0)
        throw ValidationError(where + "label distribution entries must be non-negative numbers");
      inst.hjd.probs.push_back(v.get<double>());
      sum += v.get<double>();
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw ValidationError(where + "label distribution does not sum to 1");
    for (double& p : inst.hjd.probs) p /= sum;
    inst.hjd.annotator_count = declared.value_or(schema.default_annotators);
  }

  const double top = *std::max_element(inst.hjd.probs.begin(), inst.hjd.probs.end());
  auto maj_it = rec.find(schema.majority_field);
  if (maj_it != rec.end() && !maj_it->is_null()) {
    inst.majority_label = label_index(scalar_key(*maj_it));
    if (inst.hjd.probs[inst.majority_label] < top - 1e-12)
      throw ValidationError(where + "majority label is not a maximum of the label distribution");
  } else {
    inst.majority_label = static_cast<std::size_t>(
        std::find_if(inst.hjd.probs.begin(), inst.hjd.probs.end(),
                     [&](double p) { return p >= top - 1e-12; }) -
        inst.hjd.probs.begin());
  }
  return inst;
}

}  // namespace detail

// One Instance per non-blank line, in stream order.
inline std::vector<Instance> load_corpus(std::istream& in, TaskKind task,
                                         const CorpusSchema& schema) {
  std::vector<Instance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(detail::parse_record(rec, task, schema, line_no));
  }
  return out;
}

inline std::vector<Instance> load_corpus(const std::string& path, TaskKind task,
                                         const CorpusSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open corpus file " + path);
  return load_corpus(in, task, schema);
}

inline std::vector<Instance> load_corpus(const std::string& path, TaskKind task) {
  return load_corpus(path, task, CorpusSchema::chaosnli(task));
}

}  // namespace cotprobe
