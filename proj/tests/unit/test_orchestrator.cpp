#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "support/fleet.hpp"

using namespace cotprobe;
using namespace cotprobe::testing;
namespace fs = std::filesystem;

namespace {

constexpr std::size_t kSteps = 10;

// Passes calls through until the budget is spent, then fails every call with
// a transport error, as if the network dropped.
class FlakyBackend final : public Backend {
 public:
  FlakyBackend(Backend& inner, std::size_t budget) : inner_(inner), budget_(budget) {}
  const BackendDescriptor& descriptor() const override { return inner_.descriptor(); }
  FirstTokenCandidates first_token_candidates(const std::string& probe) override {
    if (calls_++ >= budget_) throw TransportError("connection reset");
    return inner_.first_token_candidates(probe);
  }
  std::string generate(const std::string& prompt) override { return inner_.generate(prompt); }

 private:
  Backend& inner_;
  std::size_t budget_;
  std::atomic<std::size_t> calls_{0};
};

class ScriptedGenerator final : public Backend {
 public:
  explicit ScriptedGenerator(std::string reply) : reply_(std::move(reply)) {
    desc_.model_id = "scripted";
  }
  const BackendDescriptor& descriptor() const override { return desc_; }
  FirstTokenCandidates first_token_candidates(const std::string&) override {
    throw ProtocolError("not a scorer");
  }
  std::string generate(const std::string&) override {
    ++calls;
    return reply_;
  }
  std::atomic<int> calls{0};

 private:
  BackendDescriptor desc_;
  std::string reply_;
};

struct FleetRun {
  Fleet fleet;
  CotCache cache;
  RunPlan plan;
};

std::unique_ptr<FleetRun> fleet_run(std::size_t models, std::size_t instances,
                                    MappingPolicy policy = MappingPolicy::identity) {
  std::vector<double> temps{0.5, 2.0, 1.0};
  temps.resize(models);
  auto r = std::make_unique<FleetRun>();
  r->fleet = make_fleet(split_influence_specs(temps, 3),
                        synthetic_corpus(instances, TaskKind::three_way_nli, 7));
  generate_fleet_cots(r->fleet, r->cache, kSteps);
  r->plan = fleet_plan(r->fleet, r->cache, kSteps, policy);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() /
                 ("cotprobe_orch_" + name + "_" + std::to_string(::getpid()) + ".jsonl");
  fs::remove(p);
  return p;
}

EvalRecord metric_record(const std::string& uid, const std::string& model,
                         const std::string& source, int step, double jsd,
                         std::optional<double> rho = 1.0) {
  EvalRecord r;
  r.key = {"t", uid, model, source, step};
  r.metrics.jsd = jsd;
  r.metrics.accuracy_hit = 1;
  r.metrics.spearman_rho = rho;
  return r;
}

}  // namespace

TEST(CrossCotPlan, KeyCounts) {
  EXPECT_EQ(plan_key_count(7, 7, 1599, 10), 861861u);
  EXPECT_EQ(plan_key_count(2, 2, 1, 1), 8u);
  Fleet f = make_fleet(split_influence_specs({0.5, 2.0}, 1),
                       synthetic_corpus(1, TaskKind::three_way_nli, 1));
  CotCache cache;
  generate_fleet_cots(f, cache, 1);
  EXPECT_EQ(fleet_plan(f, cache, 1).key_count(), 8u);
  // Single-model step-wise study: the model is its own and only source.
  const auto solo = cross_cot_plan({f.descriptors[0]}, {f.ids[0]}, f.corpus, 1, cache, kFleetTask);
  EXPECT_EQ(solo.key_count(), 2u);
}

TEST(CrossCotPlan, MissingTracesAreListed) {
  Fleet f = make_fleet(split_influence_specs({0.5, 2.0}, 1),
                       synthetic_corpus(2, TaskKind::three_way_nli, 1));
  CotCache cache;
  generate_cot(*f.owned[0], build_prompt(f.corpus[0], OptionMapping::identity(3)), kFleetTask,
               f.corpus[0].uid, cache);
  try {
    fleet_plan(f, cache, kSteps);
    FAIL() << "expected PlanError";
  } catch (const PlanError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3 pair(s)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("syn-m1/" + f.corpus[0].uid), std::string::npos) << msg;
    EXPECT_NE(msg.find("syn-m0/" + f.corpus[1].uid), std::string::npos) << msg;
  }
  EXPECT_THROW(cross_cot_plan(f.descriptors, f.ids, f.corpus, 0, cache, kFleetTask), PlanError);
}

TEST(CrossCotPlan, ResegmentsCachedTracesForOtherK) {
  auto r = fleet_run(1, 2);
  const auto plan = fleet_plan(r->fleet, r->cache, 5);
  for (const auto& [key, trace] : plan.traces) EXPECT_EQ(trace.cut_points.size(), 5u);
}

TEST(GenerateCot, UnterminatedGenerationIsUsedWholeAndFlagged) {
  ScriptedGenerator gen("Some thinking. More thinking. And the answer is B");
  CotCache cache;
  const auto inst = synthetic_corpus(1, TaskKind::three_way_nli, 1)[0];
  const auto t = generate_cot(gen, build_prompt(inst, OptionMapping::identity(3)), "mnli", inst.uid,
                              cache, 3);
  EXPECT_TRUE(t.unterminated);
  EXPECT_EQ(t.text, "Some thinking. More thinking. And the answer is B");
  EXPECT_EQ(t.cut_points.size(), 3u);
  EXPECT_TRUE(cache.find({"mnli", "scripted", inst.uid})->unterminated);
}

TEST(GenerateCot, CachedPairMakesNoCall) {
  ScriptedGenerator gen("<think>\nOne. Two. Three.\n</think>\n\nA");
  CotCache cache;
  const auto inst = synthetic_corpus(1, TaskKind::three_way_nli, 1)[0];
  const auto prompt = build_prompt(inst, OptionMapping::identity(3));
  const auto a = generate_cot(gen, prompt, "mnli", inst.uid, cache, 3);
  EXPECT_EQ(gen.calls, 1);
  EXPECT_FALSE(a.unterminated);
  EXPECT_EQ(a.text, "One. Two. Three.");
  const auto b = generate_cot(gen, prompt, "mnli", inst.uid, cache, 3);
  EXPECT_EQ(gen.calls, 1);
  EXPECT_EQ(b.text, a.text);
  EXPECT_EQ(b.cut_points, a.cut_points);
}

TEST(GenerateCot, SyntheticTraceIsDeterministic) {
  auto r1 = fleet_run(2, 3);
  auto r2 = fleet_run(2, 3);
  const auto e1 = r1->cache.entries();
  const auto e2 = r2->cache.entries();
  ASSERT_EQ(e1.size(), 6u);
  for (std::size_t i = 0; i < e1.size(); ++i) {
    EXPECT_EQ(e1[i].second.text, e2[i].second.text);
    EXPECT_EQ(e1[i].second.cut_points, e2[i].second.cut_points);
    EXPECT_FALSE(e1[i].second.unterminated);
  }
}

TEST(ExecutePlan, FourHundredFortyRecordsDeterministicBytes) {
  auto r = fleet_run(2, 10);
  ResultStore a;
  const auto s = execute_plan(r->plan, r->fleet.backends, a, deterministic_settings(4));
  EXPECT_TRUE(s.ok()) << (s.failures.empty() ? "" : s.failures.front());
  EXPECT_EQ(s.total, 440u);
  EXPECT_EQ(s.completed, 440u);
  EXPECT_EQ(a.size(), 440u);

  auto r2 = fleet_run(2, 10);
  ResultStore b;
  execute_plan(r2->plan, r2->fleet.backends, b, deterministic_settings(4));
  EXPECT_EQ(a.canonical(), b.canonical());
}

TEST(ExecutePlan, RerunIsANoOp) {
  auto r = fleet_run(2, 5);
  ResultStore store;
  execute_plan(r->plan, r->fleet.backends, store, deterministic_settings());
  const auto before = store.canonical();
  const auto s = execute_plan(r->plan, r->fleet.backends, store, deterministic_settings());
  EXPECT_EQ(s.completed, 0u);
  EXPECT_EQ(s.skipped, 220u);
  EXPECT_EQ(store.canonical(), before);
}

TEST(ExecutePlan, OrderIndependentAcrossSchedules) {
  auto r = fleet_run(3, 6);
  ResultStore serial, parallel, reversed;
  execute_plan(r->plan, r->fleet.backends, serial, deterministic_settings(1));
  execute_plan(r->plan, r->fleet.backends, parallel, deterministic_settings(8));
  RunPlan rev = r->plan;
  std::reverse(rev.corpus.begin(), rev.corpus.end());
  std::reverse(rev.inference_models.begin(), rev.inference_models.end());
  std::reverse(rev.cot_sources.begin(), rev.cot_sources.end());
  execute_plan(rev, r->fleet.backends, reversed, deterministic_settings(3));
  EXPECT_EQ(serial.canonical(), parallel.canonical());
  EXPECT_EQ(serial.canonical(), reversed.canonical());
}

TEST(ExecutePlan, NetworkCutThenResumeConverges) {
  auto r = fleet_run(2, 8);
  const auto reference_path = scratch("ref");
  const auto crash_path = scratch("crash");
  {
    ResultStore ref(reference_path);
    execute_plan(r->plan, r->fleet.backends, ref, deterministic_settings(4));
  }

  auto settings = deterministic_settings(4);
  settings.retry.max_attempts = 2;
  {
    FlakyBackend f0(*r->fleet.owned[0], 50);
    FlakyBackend f1(*r->fleet.owned[1], 120);
    const BackendMap flaky{{r->fleet.ids[0], &f0}, {r->fleet.ids[1], &f1}};
    ResultStore store(crash_path);
    const auto s = execute_plan(r->plan, flaky, store, settings);
    EXPECT_FALSE(s.ok());
    EXPECT_EQ(s.completed, 170u);
    EXPECT_EQ(s.failed, s.total - 170u);
    EXPECT_EQ(store.size(), 170u);
    for (const auto& msg : s.failures) EXPECT_NE(msg.find("connection reset"), std::string::npos);
  }
  // Simulate a torn final write from the killed process.
  {
    std::ofstream out(crash_path, std::ios::binary | std::ios::app);
    out << R"({"schema":1,"task":"syn","ui)";
  }
  ResultStore resumed(crash_path);
  EXPECT_EQ(resumed.size(), 170u);
  const auto s = execute_plan(r->plan, r->fleet.backends, resumed, settings);
  EXPECT_TRUE(s.ok());
  EXPECT_EQ(s.skipped, 170u);
  EXPECT_EQ(s.completed, s.total - 170u);
  ResultStore ref(reference_path);
  EXPECT_EQ(resumed.canonical(), ref.canonical());
  resumed.compact();
  ref.compact();
  EXPECT_EQ(slurp(crash_path), slurp(reference_path));
  fs::remove(reference_path);
  fs::remove(crash_path);
}

TEST(ExecutePlan, TransientErrorsAreRetried) {
  auto r = fleet_run(1, 2);
  class OnceFlaky final : public Backend {
   public:
    explicit OnceFlaky(Backend& b) : b_(b) {}
    const BackendDescriptor& descriptor() const override { return b_.descriptor(); }
    FirstTokenCandidates first_token_candidates(const std::string& p) override {
      if (calls++ % 2 == 0) throw TransportError("429");
      return b_.first_token_candidates(p);
    }
    std::string generate(const std::string& p) override { return b_.generate(p); }
    std::atomic<int> calls{0};

   private:
    Backend& b_;
  } flaky(*r->fleet.owned[0]);
  std::vector<std::chrono::milliseconds> sleeps;
  auto settings = deterministic_settings(1);
  settings.sleep = [&](std::chrono::milliseconds d) { sleeps.push_back(d); };
  ResultStore store;
  const auto s = execute_plan(r->plan, {{r->fleet.ids[0], &flaky}}, store, settings);
  EXPECT_TRUE(s.ok());
  EXPECT_EQ(store.size(), 22u);
  EXPECT_EQ(flaky.calls, 44);
  ASSERT_EQ(sleeps.size(), 22u);
  EXPECT_EQ(sleeps.front(), settings.retry.initial_backoff);
}

TEST(ExecutePlan, ChangedSettingsSupersedeStaleRecords) {
  auto r = fleet_run(2, 3);
  ResultStore store;
  execute_plan(r->plan, r->fleet.backends, store, deterministic_settings());
  RunPlan changed = r->plan;
  changed.aggregation = AliasAggregation::max;
  const auto s = execute_plan(changed, r->fleet.backends, store, deterministic_settings());
  EXPECT_EQ(s.completed, 132u);
  EXPECT_EQ(s.superseded, 132u);
  EXPECT_EQ(store.size(), 132u);
}

TEST(ExecutePlan, UnknownBackendIsAPlanError) {
  auto r = fleet_run(2, 1);
  ResultStore store;
  EXPECT_THROW(execute_plan(r->plan, {{r->fleet.ids[0], r->fleet.backends.at(r->fleet.ids[0])}},
                            store, deterministic_settings()),
               PlanError);
}

TEST(ExecutePlan, CyclicAverageMatchesIdentityForOrderFreeModel) {
  // Synthetic priors live in label space, so every rotation agrees before any
  // reasoning is shown. Later steps legitimately differ: the reasoning names a
  // letter from the default order.
  auto id = fleet_run(2, 3);
  auto cyc = fleet_run(2, 3, MappingPolicy::cyclic_average);
  ResultStore a, b;
  execute_plan(id->plan, id->fleet.backends, a, deterministic_settings());
  execute_plan(cyc->plan, cyc->fleet.backends, b, deterministic_settings());
  const auto ra = a.records();
  const auto rb = b.records();
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    if (ra[i].key.step == 0)
      for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(ra[i].mjd[l], rb[i].mjd[l], 1e-12);
    EXPECT_EQ(rb[i].mapping, "cyclic_average");
    EXPECT_EQ(ra[i].mapping, "A=0,B=1,C=2");
  }
  EXPECT_EQ(policy_mappings(MappingPolicy::cyclic_average, 3).size(), 3u);
  EXPECT_EQ(policy_mappings(MappingPolicy::identity, 2).size(), 1u);
}

TEST(ExecutePlan, StepZeroColumnsAreConstant) {
  auto r = fleet_run(3, 12);
  ResultStore store;
  ASSERT_TRUE(execute_plan(r->plan, r->fleet.backends, store, deterministic_settings()).ok());
  const auto recs = store.records();
  for (Metric m : {Metric::accuracy, Metric::jsd, Metric::rho}) {
    const auto agg = aggregate(recs, kFleetTask, m, 0, r->fleet.ids, r->fleet.ids);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 1; j < 3; ++j)
        EXPECT_NEAR(agg.table.value(i, j), agg.table.value(i, 0), 1e-12);
    const auto c = contributions(fit_additive(agg.table));
    ASSERT_TRUE(c);
    EXPECT_EQ(c->model, 100.0);
    EXPECT_EQ(c->cot, 0.0);
    EXPECT_EQ(c->residual, 0.0);
  }
}

TEST(ExecutePlan, SelfConsistencyWithSingleModelRun) {
  auto r = fleet_run(2, 4);
  ResultStore cross, solo;
  execute_plan(r->plan, r->fleet.backends, cross, deterministic_settings());
  const auto plan = cross_cot_plan({r->fleet.descriptors[1]}, {r->fleet.ids[1]}, r->fleet.corpus,
                                   kSteps, r->cache, kFleetTask);
  execute_plan(plan, r->fleet.backends, solo, deterministic_settings());
  for (const auto& rec : solo.records()) {
    const auto c = cross.find(rec.key);
    ASSERT_TRUE(c);
    EXPECT_EQ(c->mjd, rec.mjd);
    EXPECT_EQ(c->content_hash, rec.content_hash);
  }
}

TEST(ValidateRecords, CleanRunAndTampering) {
  auto r = fleet_run(2, 4);
  ResultStore store;
  execute_plan(r->plan, r->fleet.backends, store, deterministic_settings());
  auto recs = store.records();
  EXPECT_TRUE(validate_records(recs, r->plan).empty());

  recs[0].metrics.jsd += 0.01;
  recs[1].mjd = {0.5, 0.5};
  recs.pop_back();
  const auto v = validate_records(recs, r->plan);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v[0].what, "stored metrics differ from recomputation");
  EXPECT_EQ(v[1].what, "MJD arity does not match the task");
  EXPECT_NE(v[2].what.find("1 planned key(s) missing"), std::string::npos);
}

TEST(Aggregate, MeansExclusionsAndErrors) {
  std::vector<EvalRecord> recs{metric_record("u1", "a", "x", 3, 0.1),
                               metric_record("u2", "a", "x", 3, 0.2),
                               metric_record("u3", "a", "x", 3, 0.3, std::nullopt),
                               metric_record("u1", "a", "x", 2, 9.0)};
  auto agg = aggregate(recs, "t", Metric::jsd, 3, {"a"}, {"x"});
  EXPECT_NEAR(agg.table.value(0, 0), 0.2, 1e-15);
  EXPECT_EQ(agg.excluded, 0u);
  agg = aggregate(recs, "t", Metric::rho, 3, {"a"}, {"x"});
  EXPECT_EQ(agg.table.value(0, 0), 1.0);
  EXPECT_EQ(agg.excluded, 1u);
  agg = aggregate(recs, "t", Metric::jsd, 2, {"a"}, {"x"});
  EXPECT_EQ(agg.table.value(0, 0), 9.0);
  try {
    aggregate(recs, "t", Metric::jsd, 3, {"a"}, {"x", "y"});
    FAIL() << "expected AggregationError";
  } catch (const AggregationError& e) {
    EXPECT_NE(std::string(e.what()).find("(a, y)"), std::string::npos);
  }
  const auto [rows, cols] = store_axes(recs, "t");
  EXPECT_EQ(rows, (std::vector<std::string>{"a"}));
  EXPECT_EQ(cols, (std::vector<std::string>{"x"}));
}

TEST(ExtractReasoning, MarkersAndTrimming) {
  BackendDescriptor d;
  auto t = extract_reasoning("preamble <think>\n  body text.  \n</think>\n\nB", d);
  EXPECT_EQ(t.text, "body text.");
  EXPECT_FALSE(t.unterminated);
  t = extract_reasoning("no open marker here.</think>A", d);
  EXPECT_EQ(t.text, "no open marker here.");
  t = extract_reasoning("<think>never closed", d);
  EXPECT_TRUE(t.unterminated);
  EXPECT_EQ(t.text, "never closed");
}
