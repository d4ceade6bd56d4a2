#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstddef>
#include <ctime>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "cotprobe/corpus.hpp"
#include "cotprobe/detail/hash.hpp"
#include "cotprobe/detail/utf8.hpp"
#include "cotprobe/error.hpp"
#include "cotprobe/inference.hpp"
#include "cotprobe/metrics.hpp"
#include "cotprobe/retry.hpp"
#include "cotprobe/segmenter.hpp"
#include "cotprobe/store.hpp"
#include "cotprobe/variance.hpp"

namespace cotprobe {

// identity: one probe per key in the default option order.
// cyclic_average: one probe per cyclic rotation of the option order, label
// distributions averaged.
enum class MappingPolicy { identity, cyclic_average };

inline std::string_view to_string(MappingPolicy p) noexcept {
  return p == MappingPolicy::identity ? "identity" : "cyclic_average";
}
inline MappingPolicy parse_mapping_policy(std::string_view s) {
  if (s == "identity") return MappingPolicy::identity;
  if (s == "cyclic_average") return MappingPolicy::cyclic_average;
  throw ArgumentError("unknown mapping policy '" + std::string(s) + "'");
}

inline std::vector<OptionMapping> policy_mappings(MappingPolicy policy, std::size_t n) {
  const auto id = OptionMapping::identity(n);
  if (policy == MappingPolicy::identity) return {id};
  std::vector<OptionMapping> out;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<std::size_t> perm(n);
    for (std::size_t p = 0; p < n; ++p) perm[p] = (p + r) % n;
    out.push_back(permute_mapping(id, perm));
  }
  return out;
}

using Clock = std::function<std::string()>;

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline Clock fixed_clock(std::string stamp = "1970-01-01T00:00:00Z") {
  return [stamp = std::move(stamp)] { return stamp; };
}

struct RunPlan {
  std::string corpus_id;
  std::vector<BackendDescriptor> inference_models;
  std::vector<std::string> cot_sources;
  std::size_t steps = 10;
  MjdMode mjd_mode = MjdMode::probability_renormalize;
  std::optional<double> raw_shift;
  AliasAggregation aggregation = AliasAggregation::sum;
  MappingPolicy mapping_policy = MappingPolicy::identity;
  std::vector<Instance> corpus;
  std::map<std::pair<std::string, std::string>, CoTTrace> traces;  // (source, uid)

  std::size_t key_count() const {
    return inference_models.size() * cot_sources.size() * corpus.size() * (steps + 1);
  }
};

inline std::size_t plan_key_count(std::size_t models, std::size_t sources, std::size_t instances,
                                  std::size_t steps) {
  return models * sources * instances * (steps + 1);
}

// Pulls reasoning for every (source, uid) from the cache. Cut points are
// recomputed when the cached trace was segmented for a different k.
inline RunPlan cross_cot_plan(std::vector<BackendDescriptor> models,
                              std::vector<std::string> cot_sources, std::vector<Instance> corpus,
                              std::size_t steps, const CotCache& cache,
                              const std::string& corpus_id,
                              const SegmenterOptions& seg = {}) {
  if (steps < 1) throw PlanError("plan needs at least one step");
  RunPlan plan;
  plan.corpus_id = corpus_id;
  plan.steps = steps;
  std::vector<std::string> gaps;
  for (const auto& src : cot_sources) {
    for (const auto& inst : corpus) {
      auto trace = cache.find({corpus_id, src, inst.uid});
      if (!trace) {
        gaps.push_back(src + "/" + inst.uid);
        continue;
      }
      if (trace->cut_points.size() != steps) {
        try {
          trace->cut_points = cut_points(trace->text, steps, seg);
        } catch (const DegenerateInputError&) {
          gaps.push_back(src + "/" + inst.uid + " (too short)");
          continue;
        }
      }
      plan.traces[{src, inst.uid}] = std::move(*trace);
    }
  }
  if (!gaps.empty()) {
    std::string msg = "missing reasoning traces for " + std::to_string(gaps.size()) + " pair(s):";
    for (std::size_t i = 0; i < gaps.size() && i < 20; ++i) msg += " " + gaps[i];
    if (gaps.size() > 20) msg += " ...";
    throw PlanError(msg);
  }
  plan.inference_models = std::move(models);
  plan.cot_sources = std::move(cot_sources);
  plan.corpus = std::move(corpus);
  return plan;
}

// Text between the think markers of a raw generation. Without a close marker
// the whole remainder is the reasoning and the trace is flagged.
inline CoTTrace extract_reasoning(const std::string& raw, const BackendDescriptor& desc) {
  CoTTrace t;
  t.source_model = desc.model_id;
  std::size_t start = 0;
  if (!desc.think_open_marker.empty()) {
    const auto open = raw.find(desc.think_open_marker);
    if (open != std::string::npos) start = open + desc.think_open_marker.size();
  }
  std::size_t end = raw.find(desc.think_close_marker, start);
  if (desc.think_close_marker.empty() || end == std::string::npos) {
    end = raw.size();
    t.unterminated = true;
  }
  std::string body = raw.substr(start, end - start);
  const auto first = body.find_first_not_of(" \t\r\n");
  const auto last = body.find_last_not_of(" \t\r\n");
  t.text = first == std::string::npos ? std::string() : body.substr(first, last - first + 1);
  return t;
}

// Cached trace for (task, model, uid), or a fresh generation persisted to the
// cache.
inline CoTTrace generate_cot(Backend& backend, const PromptSpec& prompt, const std::string& task,
                             const std::string& uid, CotCache& cache, std::size_t steps = 10,
                             const SegmenterOptions& seg = {}, const RetryPolicy& retry = {},
                             const Sleeper& sleep = real_sleep) {
  const CotKey key{task, backend.descriptor().model_id, uid};
  if (auto hit = cache.find(key)) {
    if (hit->cut_points.size() != steps) hit->cut_points = cut_points(hit->text, steps, seg);
    return *hit;
  }
  const std::string raw =
      with_retries(retry, [&] { return backend.generate(prompt.full_text); }, sleep);
  CoTTrace t = extract_reasoning(raw, backend.descriptor());
  t.cut_points = cut_points(t.text, steps, seg);
  cache.put(key, t);
  return t;
}

struct RunSettings {
  std::size_t global_concurrency = 4;
  std::map<std::string, std::size_t> per_backend_limit;  // model_id -> in-flight cap
  std::size_t default_backend_limit = 4;
  RetryPolicy retry;
  Sleeper sleep = real_sleep;
  Clock clock = utc_now;
};

struct CompletionSummary {
  std::size_t total = 0;
  std::size_t completed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
  std::size_t superseded = 0;  // stale records recomputed
  std::vector<std::string> failures;

  bool ok() const noexcept { return failed == 0; }
};

namespace detail {

inline std::string content_hash(const std::vector<std::string>& probes, const RunPlan& plan,
                                const BackendDescriptor& desc) {
  Fnv1a h;
  for (const auto& p : probes) h.field(p);
  h.field(desc.model_id).field(desc.endpoint);
  h.field(to_string(plan.mjd_mode));
  h.field(plan.raw_shift ? std::to_string(*plan.raw_shift) : "-");
  h.field(to_string(plan.aggregation));
  h.field(to_string(plan.mapping_policy));
  return h.hex();
}

}  // namespace detail

// Evaluates every key of the plan that the store does not already hold with
// a matching content hash. Failed keys are reported, never stored.
inline CompletionSummary execute_plan(const RunPlan& plan,
                                      const std::map<std::string, Backend*>& backends,
                                      ResultStore& store, const RunSettings& settings = {}) {
  struct Unit {
    std::size_t model;
    std::size_t source;
    std::size_t instance;
  };
  std::vector<Unit> units;
  for (std::size_t m = 0; m < plan.inference_models.size(); ++m) {
    if (!backends.count(plan.inference_models[m].model_id))
      throw PlanError("no backend registered for " + plan.inference_models[m].model_id);
    for (std::size_t s = 0; s < plan.cot_sources.size(); ++s)
      for (std::size_t u = 0; u < plan.corpus.size(); ++u) units.push_back({m, s, u});
  }

  std::map<std::string, std::unique_ptr<std::counting_semaphore<>>> gates;
  for (const auto& d : plan.inference_models) {
    auto it = settings.per_backend_limit.find(d.model_id);
    const auto limit = std::max<std::size_t>(
        1, it == settings.per_backend_limit.end() ? settings.default_backend_limit : it->second);
    gates.emplace(d.model_id,
                  std::make_unique<std::counting_semaphore<>>(static_cast<std::ptrdiff_t>(limit)));
  }

  CompletionSummary summary;
  summary.total = plan.key_count();
  std::mutex summary_mu;
  std::atomic<std::size_t> next{0};

  auto run_unit = [&](const Unit& unit) {
    const BackendDescriptor& desc = plan.inference_models[unit.model];
    const std::string& source = plan.cot_sources[unit.source];
    const Instance& inst = plan.corpus[unit.instance];
    Backend& backend = *backends.at(desc.model_id);
    std::vector<std::string> steps;
    std::vector<PromptSpec> prompts;
    try {
      auto it = plan.traces.find({source, inst.uid});
      if (it == plan.traces.end()) throw PlanError("no reasoning trace");
      steps = prefixes(it->second);
      for (const auto& m : policy_mappings(plan.mapping_policy, option_count(inst.task)))
        prompts.push_back(build_prompt(inst, m));
    } catch (const std::exception& e) {
      std::lock_guard lock(summary_mu);
      summary.failed += plan.steps + 1;
      summary.failures.push_back(plan.corpus_id + "/" + inst.uid + "/" + desc.model_id + "/" +
                                 source + ": " + e.what());
      return;
    }

    for (std::size_t step = 0; step <= plan.steps; ++step) {
      const RecordKey key{plan.corpus_id, inst.uid, desc.model_id, source, static_cast<int>(step)};
      std::vector<std::string> probes;
      for (const auto& p : prompts) probes.push_back(assemble_probe(p, steps[step], desc));
      const std::string hash = detail::content_hash(probes, plan, desc);
      const auto existing = store.find(key);
      if (existing && existing->content_hash == hash) {
        std::lock_guard lock(summary_mu);
        ++summary.skipped;
        continue;
      }
      try {
        std::vector<double> label_mjd(option_count(inst.task), 0.0);
        for (std::size_t i = 0; i < probes.size(); ++i) {
          auto& gate = *gates.at(desc.model_id);
          gate.acquire();
          OptionScores scores;
          try {
            scores = with_retries(
                settings.retry,
                [&] {
                  return score_first_token(backend, probes[i], prompts[i].option_letters,
                                           plan.aggregation);
                },
                settings.sleep);
          } catch (...) {
            gate.release();
            throw;
          }
          gate.release();
          const auto mjd = scores_to_mjd(scores, plan.mjd_mode, plan.raw_shift);
          const auto ordered = to_label_order(mjd.probs, prompts[i].mapping);
          for (std::size_t l = 0; l < ordered.size(); ++l) label_mjd[l] += ordered[l];
        }
        double sum = 0.0;
        for (double& v : label_mjd) v /= static_cast<double>(probes.size());
        for (double v : label_mjd) sum += v;
        for (double& v : label_mjd) v /= sum;

        EvalRecord rec;
        rec.key = key;
        rec.steps = static_cast<int>(plan.steps);
        rec.mjd = label_mjd;
        rec.metrics = evaluate(label_mjd, inst.hjd.probs, inst.majority_label);
        rec.mjd_mode = std::string(to_string(plan.mjd_mode));
        rec.mapping = plan.mapping_policy == MappingPolicy::identity
                          ? prompts.front().mapping.describe()
                          : std::string(to_string(plan.mapping_policy));
        rec.content_hash = hash;
        rec.timestamp = settings.clock();
        store.append(rec);
        std::lock_guard lock(summary_mu);
        ++summary.completed;
        if (existing) ++summary.superseded;
      } catch (const std::exception& e) {
        std::lock_guard lock(summary_mu);
        ++summary.failed;
        summary.failures.push_back(plan.corpus_id + "/" + inst.uid + "/" + desc.model_id + "/" +
                                   source + "/step" + std::to_string(step) + ": " + e.what());
      }
    }
  };

  auto worker = [&] {
    for (std::size_t i = next++; i < units.size(); i = next++) run_unit(units[i]);
  };
  const std::size_t threads =
      std::min<std::size_t>(std::max<std::size_t>(1, settings.global_concurrency), units.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  std::sort(summary.failures.begin(), summary.failures.end());
  return summary;
}

enum class Metric { accuracy, jsd, rho };

inline std::string_view to_string(Metric m) noexcept {
  switch (m) {
    case Metric::accuracy: return "acc";
    case Metric::jsd: return "jsd";
    case Metric::rho: return "rho";
  }
  return "?";
}
inline Metric parse_metric(std::string_view s) {
  if (s == "acc" || s == "accuracy") return Metric::accuracy;
  if (s == "jsd") return Metric::jsd;
  if (s == "rho" || s == "spearman") return Metric::rho;
  throw ArgumentError("unknown metric '" + std::string(s) + "'");
}

inline std::optional<double> metric_value(const EvalRecord& r, Metric m) {
  switch (m) {
    case Metric::accuracy: return static_cast<double>(r.metrics.accuracy_hit);
    case Metric::jsd: return r.metrics.jsd;
    case Metric::rho: return r.metrics.spearman_rho;
  }
  return std::nullopt;
}

struct Aggregate {
  CellTable table;
  std::size_t excluded = 0;  // records without a defined value (undefined rho)
};

// Cell (i, j): mean metric over the task's uids for model i under source j.
inline Aggregate aggregate(const std::vector<EvalRecord>& records, const std::string& task,
                           Metric metric, int step, const std::vector<std::string>& row_ids,
                           const std::vector<std::string>& col_ids) {
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> sums;
  std::size_t excluded = 0;
  for (const auto& r : records) {
    if (r.key.task != task || r.key.step != step) continue;
    const auto v = metric_value(r, metric);
    if (!v) {
      ++excluded;
      continue;
    }
    auto& [sum, count] = sums[{r.key.inference_model, r.key.cot_source}];
    sum += *v;
    ++count;
  }
  Aggregate out{CellTable(row_ids, col_ids), excluded};
  for (std::size_t i = 0; i < row_ids.size(); ++i)
    for (std::size_t j = 0; j < col_ids.size(); ++j) {
      auto it = sums.find({row_ids[i], col_ids[j]});
      if (it == sums.end() || it->second.second == 0)
        throw AggregationError("no " + std::string(to_string(metric)) + " records for cell (" +
                               row_ids[i] + ", " + col_ids[j] + ") at step " +
                               std::to_string(step));
      out.table.set(i, j, it->second.first / static_cast<double>(it->second.second));
    }
  return out;
}

// Row/column ids present in the records of a task, sorted.
inline std::pair<std::vector<std::string>, std::vector<std::string>> store_axes(
    const std::vector<EvalRecord>& records, const std::string& task) {
  std::vector<std::string> rows;
  std::vector<std::string> cols;
  for (const auto& r : records) {
    if (r.key.task != task) continue;
    rows.push_back(r.key.inference_model);
    cols.push_back(r.key.cot_source);
  }
  for (auto* v : {&rows, &cols}) {
    std::sort(v->begin(), v->end());
    v->erase(std::unique(v->begin(), v->end()), v->end());
  }
  return {rows, cols};
}

}  // namespace cotprobe
