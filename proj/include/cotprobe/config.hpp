#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotprobe/corpus.hpp"
#include "cotprobe/detail/hash.hpp"
#include "cotprobe/error.hpp"
#include "cotprobe/http_backend.hpp"
#include "cotprobe/inference.hpp"
#include "cotprobe/orchestrator.hpp"
#include "cotprobe/segmenter.hpp"
#include "cotprobe/synthmodel.hpp"

// Declarative run configuration (JSON). Relative paths resolve against the
// directory holding the config file.

namespace cotprobe {

struct CorpusConfig {
  std::string id;
  TaskKind task = TaskKind::three_way_nli;
  std::filesystem::path path;  // empty for generated corpora
  CorpusSchema schema;
  std::optional<std::size_t> synthetic_count;
  std::uint64_t synthetic_seed = 0;
};

struct BackendConfig {
  BackendDescriptor descriptor;
  HttpSettings http;
  std::size_t max_inflight = 4;
};

struct RunConfig {
  std::map<std::string, CorpusConfig> corpora;
  std::vector<BackendConfig> backends;
  std::map<std::string, SynthSpec> synthetic_specs;
  std::vector<std::string> inference_models;
  std::vector<std::string> cot_sources;
  std::size_t steps = 10;
  MjdMode mjd_mode = MjdMode::probability_renormalize;
  std::optional<double> raw_shift;
  AliasAggregation aggregation = AliasAggregation::sum;
  MappingPolicy mapping_policy = MappingPolicy::identity;
  std::size_t global_concurrency = 4;
  RetryPolicy retry;
  SegmenterOptions segmenter;
  std::filesystem::path cot_cache;
  std::filesystem::path store_dir;
  bool fixed_clock = false;
  std::string hash;  // of the canonical config JSON

  const BackendConfig& backend(const std::string& id) const {
    for (const auto& b : backends)
      if (b.descriptor.model_id == id) return b;
    throw ConfigError("no backend named '" + id + "'");
  }

  const CorpusConfig& corpus(const std::string& id) const {
    auto it = corpora.find(id);
    if (it == corpora.end()) throw ConfigError("no corpus named '" + id + "' in config");
    return it->second;
  }

  std::filesystem::path store_path(const std::string& corpus_id) const {
    return store_dir / (corpus_id + ".jsonl");
  }

  RunSettings run_settings() const {
    RunSettings s;
    s.global_concurrency = global_concurrency;
    for (const auto& b : backends) s.per_backend_limit[b.descriptor.model_id] = b.max_inflight;
    s.retry = retry;
    if (fixed_clock) s.clock = cotprobe::fixed_clock();
    return s;
  }
};

namespace detail {

template <typename T>
T value_or(const nlohmann::json& j, const char* key, T fallback) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? fallback : it->get<T>();
}

inline SynthSpec parse_synth_spec(const std::string& name, const nlohmann::json& j) {
  SynthSpec s;
  s.name = name;
  s.seed = value_or<std::uint64_t>(j, "seed", 0);
  s.temperature = value_or(j, "temperature", 1.0);
  s.hjd_agreement = value_or(j, "hjd_agreement", 0.8);
  s.sentences = value_or<std::size_t>(j, "sentences", 10);
  s.target = parse_follow_target(value_or<std::string>(j, "follow_target", "onehot"));
  if (auto it = j.find("follow_curve"); it != j.end())
    s.follow = FollowCurve(it->get<std::vector<std::pair<double, double>>>());
  if (auto it = j.find("priors"); it != j.end())
    s.prior_overrides = it->get<std::map<std::string, std::vector<double>>>();
  if (auto it = j.find("answers"); it != j.end())
    s.answer_overrides = it->get<std::map<std::string, std::size_t>>();
  if (!(s.temperature > 0.0)) throw ConfigError("synthetic temperature must be positive");
  return s;
}

inline CorpusSchema parse_schema(TaskKind task, const nlohmann::json& j) {
  CorpusSchema s = CorpusSchema::chaosnli(task);
  s.uid_field = value_or(j, "uid", s.uid_field);
  s.example_field = value_or(j, "example", s.example_field);
  s.counts_field = value_or(j, "label_counts", s.counts_field);
  s.dist_field = value_or(j, "label_dist", s.dist_field);
  s.majority_field = value_or(j, "majority_label", s.majority_field);
  s.annotator_field = value_or(j, "annotator_count", s.annotator_field);
  s.default_annotators = value_or(j, "default_annotators", s.default_annotators);
  if (auto it = j.find("label_keys"); it != j.end())
    s.label_keys = it->get<std::vector<std::string>>();
  if (auto it = j.find("text_fields"); it != j.end())
    for (const auto& [role, field] : it->items()) s.text_fields[role] = field.get<std::string>();
  return s;
}

}  // namespace detail

inline RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  RunConfig c;
  try {
    c.hash = detail::Fnv1a{}.add(j.dump()).hex();
    const auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() ? path : base_dir / path;
    };

    for (const auto& [id, cj] : j.at("corpora").items()) {
      CorpusConfig cc;
      cc.id = id;
      cc.task = parse_task_kind(detail::value_or<std::string>(cj, "task", id));
      if (auto syn = cj.find("synthetic"); syn != cj.end()) {
        cc.synthetic_count = syn->at("count").get<std::size_t>();
        cc.synthetic_seed = detail::value_or<std::uint64_t>(*syn, "seed", 0);
      } else {
        cc.path = resolve(cj.at("path").get<std::string>());
      }
      cc.schema = detail::parse_schema(cc.task, cj.value("schema", nlohmann::json::object()));
      c.corpora[id] = std::move(cc);
    }

    if (auto it = j.find("synthetic_specs"); it != j.end())
      for (const auto& [name, sj] : it->items())
        c.synthetic_specs[name] = detail::parse_synth_spec(name, sj);

    for (const auto& bj : j.at("backends")) {
      BackendConfig b;
      auto& d = b.descriptor;
      d.model_id = bj.at("model_id").get<std::string>();
      d.endpoint = bj.at("endpoint").get<std::string>();
      d.think_open_marker = detail::value_or<std::string>(bj, "think_open", "<think>");
      d.think_close_marker = detail::value_or<std::string>(bj, "think_close", "</think>");
      if (auto al = bj.find("aliases"); al != bj.end())
        d.alias_table = al->get<AliasTable>();
      validate_aliases(d.alias_table);
      b.http.api_key_env = detail::value_or<std::string>(bj, "api_key_env", "");
      b.http.top_logprobs = detail::value_or(bj, "top_logprobs", 20);
      b.http.max_gen_tokens = detail::value_or(bj, "max_gen_tokens", 8192);
      b.http.timeout = std::chrono::seconds(detail::value_or(bj, "timeout_s", 120));
      b.max_inflight = detail::value_or<std::size_t>(bj, "max_inflight", 4);
      if (d.is_synthetic() && !c.synthetic_specs.count(d.endpoint.substr(10)))
        throw ConfigError("backend " + d.model_id + " names unknown synthetic spec " + d.endpoint);
      c.backends.push_back(std::move(b));
    }
    if (c.backends.empty()) throw ConfigError("config declares no backends");

    std::vector<std::string> all;
    for (const auto& b : c.backends) all.push_back(b.descriptor.model_id);
    c.inference_models = detail::value_or(j, "inference_models", all);
    c.cot_sources = detail::value_or(j, "cot_sources", all);
    for (const auto& id : c.inference_models) (void)c.backend(id);
    for (const auto& id : c.cot_sources) (void)c.backend(id);

    c.steps = detail::value_or<std::size_t>(j, "steps", 10);
    if (c.steps < 1) throw ConfigError("steps must be >= 1");
    c.mjd_mode = parse_mjd_mode(detail::value_or<std::string>(j, "mjd_mode", "probability_renormalize"));
    if (auto it = j.find("raw_shift"); it != j.end() && !it->is_null()) c.raw_shift = it->get<double>();
    c.aggregation = parse_alias_aggregation(detail::value_or<std::string>(j, "alias_aggregation", "sum"));
    c.mapping_policy = parse_mapping_policy(detail::value_or<std::string>(j, "mapping_policy", "identity"));
    if (auto it = j.find("concurrency"); it != j.end())
      c.global_concurrency = detail::value_or<std::size_t>(*it, "global", 4);
    if (auto it = j.find("retry"); it != j.end()) {
      c.retry.max_attempts = detail::value_or(*it, "max_attempts", 3);
      c.retry.initial_backoff = std::chrono::milliseconds(detail::value_or(*it, "initial_backoff_ms", 200));
      c.retry.multiplier = detail::value_or(*it, "multiplier", 2.0);
    }
    if (auto it = j.find("abbreviations"); it != j.end())
      c.segmenter.abbreviations = it->get<std::vector<std::string>>();
    const auto& paths = j.at("paths");
    c.cot_cache = resolve(paths.at("cot_cache").get<std::string>());
    c.store_dir = resolve(paths.at("store_dir").get<std::string>());
    const auto clock = detail::value_or<std::string>(j, "clock", "wall");
    if (clock != "wall" && clock != "fixed") throw ConfigError("clock must be 'wall' or 'fixed'");
    c.fixed_clock = clock == "fixed";
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("invalid run config: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(j, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

inline std::vector<Instance> load_corpus(const CorpusConfig& cc) {
  if (cc.synthetic_count) return synthetic_corpus(*cc.synthetic_count, cc.task, cc.synthetic_seed);
  return load_corpus(cc.path.string(), cc.task, cc.schema);
}

// Live backends for the configured models; synthetic ones are bound to the
// corpus so they can resolve prompts.
inline std::map<std::string, std::unique_ptr<Backend>> make_backends(
    const RunConfig& config, const std::vector<Instance>& corpus) {
  std::map<std::string, std::unique_ptr<Backend>> out;
  for (const auto& b : config.backends) {
    const auto& d = b.descriptor;
    if (d.is_synthetic()) {
      auto syn = std::make_unique<SyntheticBackend>(d, config.synthetic_specs.at(d.endpoint.substr(10)));
      syn->bind(corpus);
      out[d.model_id] = std::move(syn);
    } else {
      out[d.model_id] = std::make_unique<HttpBackend>(d, b.http);
    }
  }
  return out;
}

}  // namespace cotprobe
