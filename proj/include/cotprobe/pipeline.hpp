#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "cotprobe/config.hpp"
#include "cotprobe/metrics.hpp"
#include "cotprobe/orchestrator.hpp"
#include "cotprobe/store.hpp"

// End-to-end steps shared by the command line and the tests: reasoning
// generation for every source, the cross-CoT run, and store validation.

namespace cotprobe {

using BackendMap = std::map<std::string, Backend*>;

inline BackendMap borrow(const std::map<std::string, std::unique_ptr<Backend>>& owned) {
  BackendMap out;
  for (const auto& [id, b] : owned) out[id] = b.get();
  return out;
}

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` workers.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  threads = std::min(std::max<std::size_t>(1, threads), n);
  if (threads <= 1) {
    worker();
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
}

}  // namespace detail

struct CotSummary {
  std::size_t generated = 0;
  std::size_t cached = 0;
  std::size_t failed = 0;
  std::vector<std::string> unterminated;  // "source/uid"
  std::vector<std::string> failures;

  bool ok() const noexcept { return failed == 0; }
};

// Reasoning for every (source, instance) pair, generated under the identity
// option order and persisted to the cache.
inline CotSummary generate_cots(const RunConfig& config, const std::string& corpus_id,
                                const std::vector<Instance>& corpus, const BackendMap& backends,
                                CotCache& cache, std::size_t steps) {
  struct Unit {
    std::string source;
    const Instance* inst;
  };
  std::vector<Unit> units;
  for (const auto& src : config.cot_sources) {
    if (!backends.count(src)) throw PlanError("no backend registered for " + src);
    for (const auto& inst : corpus) units.push_back({src, &inst});
  }
  std::map<std::string, std::unique_ptr<std::counting_semaphore<>>> gates;
  for (const auto& src : config.cot_sources)
    gates.emplace(src, std::make_unique<std::counting_semaphore<>>(static_cast<std::ptrdiff_t>(
                           std::max<std::size_t>(1, config.backend(src).max_inflight))));

  CotSummary summary;
  std::mutex mu;
  detail::parallel_for(units.size(), config.global_concurrency, [&](std::size_t i) {
    const auto& u = units[i];
    const std::string id = u.source + "/" + u.inst->uid;
    const bool hit = cache.find({corpus_id, u.source, u.inst->uid}).has_value();
    try {
      Backend& backend = *backends.at(u.source);
      const auto prompt = build_prompt(*u.inst, OptionMapping::identity(option_count(u.inst->task)));
      auto& gate = *gates.at(u.source);
      gate.acquire();
      CoTTrace t;
      try {
        t = generate_cot(backend, prompt, corpus_id, u.inst->uid, cache, steps, config.segmenter,
                         config.retry);
      } catch (...) {
        gate.release();
        throw;
      }
      gate.release();
      std::lock_guard lock(mu);
      ++(hit ? summary.cached : summary.generated);
      if (t.unterminated) summary.unterminated.push_back(id);
    } catch (const std::exception& e) {
      std::lock_guard lock(mu);
      ++summary.failed;
      summary.failures.push_back(id + ": " + e.what());
    }
  });
  std::sort(summary.unterminated.begin(), summary.unterminated.end());
  std::sort(summary.failures.begin(), summary.failures.end());
  return summary;
}

inline RunPlan plan_from_config(const RunConfig& config, const std::string& corpus_id,
                                std::vector<Instance> corpus, const CotCache& cache,
                                std::size_t steps) {
  std::vector<BackendDescriptor> models;
  for (const auto& id : config.inference_models) models.push_back(config.backend(id).descriptor);
  RunPlan plan = cross_cot_plan(std::move(models), config.cot_sources, std::move(corpus), steps,
                                cache, corpus_id, config.segmenter);
  plan.mjd_mode = config.mjd_mode;
  plan.raw_shift = config.raw_shift;
  plan.aggregation = config.aggregation;
  plan.mapping_policy = config.mapping_policy;
  return plan;
}

struct Violation {
  std::string where;
  std::string what;
};

// Checks every stored record against the corpus and the structural
// invariants of the protocol. Expected keys come from the plan.
inline std::vector<Violation> validate_records(const std::vector<EvalRecord>& records,
                                               const RunPlan& plan) {
  std::vector<Violation> out;
  std::map<std::string, const Instance*> by_uid;
  for (const auto& inst : plan.corpus) by_uid[inst.uid] = &inst;
  auto where = [](const RecordKey& k) {
    return k.task + "/" + k.uid + "/" + k.inference_model + "/" + k.cot_source + "/step" +
           std::to_string(k.step);
  };

  std::map<RecordKey, const EvalRecord*> present;
  std::map<std::pair<std::string, std::string>, const EvalRecord*> step0;  // (model, uid)
  for (const auto& r : records) {
    if (r.key.task != plan.corpus_id) continue;
    present[r.key] = &r;
    const auto w = where(r.key);
    auto it = by_uid.find(r.key.uid);
    if (it == by_uid.end()) {
      out.push_back({w, "uid not in corpus"});
      continue;
    }
    const Instance& inst = *it->second;
    if (r.key.step < 0 || r.key.step > r.steps) out.push_back({w, "step outside [0, k]"});
    if (r.mjd.size() != option_count(inst.task)) {
      out.push_back({w, "MJD arity does not match the task"});
      continue;
    }
    double sum = 0.0;
    bool in_range = true;
    for (double v : r.mjd) {
      sum += v;
      in_range = in_range && std::isfinite(v) && v >= 0.0 && v <= 1.0;
    }
    if (!in_range || std::abs(sum - 1.0) > 1e-9) {
      out.push_back({w, "MJD is not a probability distribution"});
      continue;
    }
    const auto m = evaluate(r.mjd, inst.hjd.probs, inst.majority_label);
    const bool rho_ok = m.spearman_rho.has_value() == r.metrics.spearman_rho.has_value() &&
                        (!m.spearman_rho || std::abs(*m.spearman_rho - *r.metrics.spearman_rho) <= 1e-12);
    if (m.accuracy_hit != r.metrics.accuracy_hit || std::abs(m.jsd - r.metrics.jsd) > 1e-12 || !rho_ok)
      out.push_back({w, "stored metrics differ from recomputation"});
    if (r.key.step == 0) {
      auto [s0, fresh] = step0.try_emplace({r.key.inference_model, r.key.uid}, &r);
      if (!fresh) {
        for (std::size_t l = 0; l < r.mjd.size(); ++l)
          if (std::abs(s0->second->mjd[l] - r.mjd[l]) > 1e-9) {
            out.push_back({w, "step-0 MJD depends on the reasoning source"});
            break;
          }
      }
    }
  }

  std::size_t missing = 0;
  std::string first_missing;
  for (const auto& d : plan.inference_models)
    for (const auto& src : plan.cot_sources)
      for (const auto& inst : plan.corpus)
        for (std::size_t s = 0; s <= plan.steps; ++s) {
          const RecordKey k{plan.corpus_id, inst.uid, d.model_id, src, static_cast<int>(s)};
          if (!present.count(k)) {
            if (missing++ == 0) first_missing = where(k);
          }
        }
  if (missing)
    out.push_back({plan.corpus_id, std::to_string(missing) + " planned key(s) missing, first " +
                                       first_missing});
  return out;
}

}  // namespace cotprobe
