// Command-line driver: ingest, gen-cot, run, anova, report, validate.
// Exit codes: 0 success, 1 failed cells or invariant violations, 2 usage or
// configuration errors.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cotprobe/config.hpp"
#include "cotprobe/pipeline.hpp"
#include "cotprobe/report.hpp"

namespace {

using namespace cotprobe;

struct Args {
  std::string config;
  std::string task;
  std::size_t steps = 0;  // 0: take k from the config
  std::string metric = "acc";
  int step = -1;
  std::string out;
  bool resume = false;
};

std::size_t steps_of(const Args& a, const RunConfig& c) { return a.steps ? a.steps : c.steps; }

int cmd_ingest(const Args& a) {
  const auto cfg = load_config(a.config);
  const auto& cc = cfg.corpus(a.task);
  const auto corpus = load_corpus(cc);
  std::vector<std::size_t> majority(option_count(cc.task), 0);
  double annotators = 0.0;
  for (const auto& inst : corpus) {
    ++majority.at(inst.majority_label);
    annotators += inst.hjd.annotator_count;
  }
  nlohmann::json j{{"task", a.task},
                   {"kind", std::string(to_string(cc.task))},
                   {"instances", corpus.size()},
                   {"majority_label_counts", majority},
                   {"mean_annotators", corpus.empty() ? 0.0 : annotators / corpus.size()}};
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_gen_cot(const Args& a) {
  const auto cfg = load_config(a.config);
  const auto corpus = load_corpus(cfg.corpus(a.task));
  const auto owned = make_backends(cfg, corpus);
  CotCache cache(cfg.cot_cache);
  const auto s = generate_cots(cfg, a.task, corpus, borrow(owned), cache, steps_of(a, cfg));
  for (const auto& u : s.unterminated) std::cerr << "unterminated: " << u << "\n";
  for (const auto& f : s.failures) std::cerr << "failed: " << f << "\n";
  std::cout << nlohmann::json{{"generated", s.generated},
                              {"cached", s.cached},
                              {"unterminated", s.unterminated.size()},
                              {"failed", s.failed}}
                   .dump()
            << "\n";
  return s.ok() ? 0 : 1;
}

int cmd_run(const Args& a) {
  const auto cfg = load_config(a.config);
  const auto corpus = load_corpus(cfg.corpus(a.task));
  const auto owned = make_backends(cfg, corpus);
  const CotCache cache(cfg.cot_cache);
  const auto plan = plan_from_config(cfg, a.task, corpus, cache, steps_of(a, cfg));
  std::filesystem::create_directories(cfg.store_dir);
  ResultStore store(cfg.store_path(a.task));
  if (store.size() > 0 && !a.resume) {
    std::cerr << "store " << cfg.store_path(a.task).string() << " already holds " << store.size()
              << " records; pass --resume to continue it\n";
    return 2;
  }
  const auto s = execute_plan(plan, borrow(owned), store, cfg.run_settings());
  store.compact();
  for (const auto& f : s.failures) std::cerr << "failed: " << f << "\n";
  std::cout << nlohmann::json{{"total", s.total},
                              {"completed", s.completed},
                              {"skipped", s.skipped},
                              {"superseded", s.superseded},
                              {"failed", s.failed}}
                   .dump()
            << "\n";
  return s.ok() ? 0 : 1;
}

std::vector<EvalRecord> stored_records(const RunConfig& cfg, const std::string& task) {
  const auto path = cfg.store_path(task);
  if (!std::filesystem::exists(path)) throw ConfigError("no result store at " + path.string());
  return ResultStore(path).records();
}

int cmd_anova(const Args& a) {
  const auto cfg = load_config(a.config);
  const auto records = stored_records(cfg, a.task);
  const int step = a.step >= 0 ? a.step : static_cast<int>(steps_of(a, cfg));
  const auto agg =
      aggregate(records, a.task, parse_metric(a.metric), step, cfg.inference_models, cfg.cot_sources);
  const auto r = fit_additive(agg.table);
  const auto pct = contributions(r);
  auto pct_str = [&](double Contributions::*f) {
    return pct ? detail::fixed((*pct).*f, 1) : std::string("undefined");
  };
  std::printf("%-9s %14s %4s %12s %12s %8s\n", "source", "SS", "df", "F", "p", "pct");
  std::printf("%-9s %14.6g %4d %12s %12s %8s\n", "LLM", r.ss_model, r.df_model,
              detail::shortest(r.f_model).c_str(), detail::shortest(r.p_model).c_str(),
              pct_str(&Contributions::model).c_str());
  std::printf("%-9s %14.6g %4d %12s %12s %8s\n", "CoT", r.ss_cot, r.df_cot,
              detail::shortest(r.f_cot).c_str(), detail::shortest(r.p_cot).c_str(),
              pct_str(&Contributions::cot).c_str());
  std::printf("%-9s %14.6g %4d %12s %12s %8s\n", "Residual", r.ss_residual, r.df_residual, "", "",
              pct_str(&Contributions::residual).c_str());
  std::printf("%-9s %14.6g\n", "Total", r.ss_total);
  if (agg.excluded) std::printf("excluded records (undefined value): %zu\n", agg.excluded);
  return 0;
}

int cmd_report(const Args& a) {
  const auto cfg = load_config(a.config);
  const auto records = stored_records(cfg, a.task);
  ReportOptions opts;
  opts.config_hash = cfg.hash;
  opts.row_order = cfg.inference_models;
  opts.col_order = cfg.cot_sources;
  opts.notes = {{"step0_probe", "prompt + empty think markers + early-stop cue"},
                {"mjd_mode", std::string(to_string(cfg.mjd_mode))},
                {"mapping_policy", std::string(to_string(cfg.mapping_policy))},
                {"alias_aggregation", std::string(to_string(cfg.aggregation))}};
  const std::filesystem::path out = a.out.empty() ? cfg.store_dir / "report" : std::filesystem::path(a.out);
  write_report(records, a.task, out, opts);
  std::cout << "report written to " << out.string() << "\n";
  return 0;
}

int cmd_validate(const Args& a) {
  const auto cfg = load_config(a.config);
  const auto records = stored_records(cfg, a.task);
  RunPlan plan;
  plan.corpus_id = a.task;
  plan.corpus = load_corpus(cfg.corpus(a.task));
  plan.steps = steps_of(a, cfg);
  for (const auto& id : cfg.inference_models) plan.inference_models.push_back(cfg.backend(id).descriptor);
  plan.cot_sources = cfg.cot_sources;
  const auto violations = validate_records(records, plan);
  for (const auto& v : violations) std::cerr << v.where << ": " << v.what << "\n";
  std::cout << nlohmann::json{{"records", records.size()}, {"violations", violations.size()}}.dump()
            << "\n";
  return violations.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-wise cross-CoT probing of model judgment distributions"};
  app.require_subcommand(1);
  Args args;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--task", args.task, "Corpus id from the config (mnli, snli, anli, ...)")->required();
  };
  auto with_steps = [&](CLI::App* sub) {
    sub->add_option("--steps", args.steps, "Number of reasoning steps k (overrides the config)")
        ->check(CLI::PositiveNumber);
  };

  std::map<CLI::App*, int (*)(const Args&)> handlers;
  auto* ingest = app.add_subcommand("ingest", "Load and summarize a corpus");
  common(ingest);
  handlers[ingest] = cmd_ingest;

  auto* gen = app.add_subcommand("gen-cot", "Generate and cache reasoning for every CoT source");
  common(gen);
  with_steps(gen);
  handlers[gen] = cmd_gen_cot;

  auto* run = app.add_subcommand("run", "Evaluate every (model, source, instance, step) key");
  common(run);
  with_steps(run);
  run->add_flag("--resume", args.resume, "Continue an existing result store");
  handlers[run] = cmd_run;

  auto* anova = app.add_subcommand("anova", "Two-way ANOVA of one metric at one step");
  common(anova);
  with_steps(anova);
  anova->add_option("--metric", args.metric, "acc, jsd or rho")
      ->check(CLI::IsMember({"acc", "jsd", "rho"}));
  anova->add_option("--step", args.step, "Step index (default: k)")->check(CLI::NonNegativeNumber);
  handlers[anova] = cmd_anova;

  auto* report = app.add_subcommand("report", "Write tables, heatmaps and curves as CSV");
  common(report);
  report->add_option("--out", args.out, "Output directory");
  handlers[report] = cmd_report;

  auto* validate = app.add_subcommand("validate", "Check stored records against their invariants");
  common(validate);
  with_steps(validate);
  handlers[validate] = cmd_validate;

  CLI11_PARSE(app, argc, argv);
  try {
    for (const auto& [sub, fn] : handlers)
      if (sub->parsed()) return fn(args);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const PlanError& e) {
    std::cerr << "plan error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
