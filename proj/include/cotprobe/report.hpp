#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotprobe/error.hpp"
#include "cotprobe/metrics.hpp"
#include "cotprobe/orchestrator.hpp"
#include "cotprobe/store.hpp"
#include "cotprobe/variance.hpp"

// Result surfaces as plain CSV. Every number is recomputed from the
// evaluation records; the same records always give the same bytes.

namespace cotprobe {

namespace detail {

// Shortest representation that round-trips.
inline std::string shortest(double v) {
  if (std::isnan(v)) return "undefined";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s == "-0.0" || s == "-0.000") s.erase(0, 1);
  return s;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

struct DeltaRow {
  std::string model;
  std::string task;
  double acc_start = 0.0;
  double acc_last = 0.0;
  double jsd_start = 0.0;
  double jsd_last = 0.0;
};

// Self-CoT diagonal (model == cot_source): step 0 against step k, per model
// per task. Rows sorted by task, then model.
inline std::vector<DeltaRow> delta_rows(const std::vector<EvalRecord>& records) {
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0;
  };
  std::map<std::pair<std::string, std::string>, int> last_step;  // (task, model) -> k
  for (const auto& r : records)
    if (r.key.inference_model == r.key.cot_source)
      last_step[{r.key.task, r.key.inference_model}] = r.steps;

  std::map<std::pair<std::string, std::string>, std::array<Acc, 4>> acc;
  for (const auto& r : records) {
    if (r.key.inference_model != r.key.cot_source) continue;
    const auto tm = std::make_pair(r.key.task, r.key.inference_model);
    const int k = last_step.at(tm);
    const int slot = r.key.step == 0 ? 0 : (r.key.step == k ? 1 : -1);
    if (slot < 0) continue;
    auto& a = acc[tm];
    a[slot].sum += r.metrics.accuracy_hit;
    a[slot].n += 1;
    a[2 + slot].sum += r.metrics.jsd;
    a[2 + slot].n += 1;
  }
  std::vector<DeltaRow> out;
  for (const auto& [tm, k] : last_step) {
    auto it = acc.find(tm);
    if (it == acc.end() || it->second[0].n == 0 || it->second[1].n == 0)
      throw ReportError("missing step 0 or step " + std::to_string(k) +
                        " self-CoT records for " + tm.second + " on " + tm.first);
    const auto& a = it->second;
    out.push_back({tm.second, tm.first, a[0].sum / a[0].n, a[1].sum / a[1].n, a[2].sum / a[2].n,
                   a[3].sum / a[3].n});
  }
  return out;
}

inline std::string emit_delta_table(const std::vector<EvalRecord>& records) {
  const auto rows = delta_rows(records);
  if (rows.empty()) throw ReportError("no self-CoT records to tabulate");
  std::string out = "model,task,ACC_start,ACC_last,JSD_start,JSD_last\n";
  for (const auto& r : rows)
    out += detail::csv_field(r.model) + "," + detail::csv_field(r.task) + "," +
           detail::fixed(r.acc_start, 3) + "," + detail::fixed(r.acc_last, 3) + "," +
           detail::fixed(r.jsd_start, 3) + "," + detail::fixed(r.jsd_last, 3) + "\n";
  return out;
}

struct StepwiseRow {
  int step = 0;
  Metric metric = Metric::accuracy;
  AnovaResult anova;
  std::size_t excluded = 0;
};

inline std::vector<StepwiseRow> stepwise_anova(const std::vector<EvalRecord>& records,
                                               const std::string& task,
                                               const std::vector<std::string>& rows,
                                               const std::vector<std::string>& cols, int steps) {
  std::vector<StepwiseRow> out;
  for (int step = 0; step <= steps; ++step) {
    for (Metric m : {Metric::accuracy, Metric::jsd, Metric::rho}) {
      try {
        auto agg = aggregate(records, task, m, step, rows, cols);
        out.push_back({step, m, fit_additive(agg.table), agg.excluded});
      } catch (const AggregationError& e) {
        throw ReportError("step " + std::to_string(step) + " is incomplete: " + e.what());
      } catch (const IncompleteTableError& e) {
        throw ReportError("step " + std::to_string(step) + " is incomplete: " + e.what());
      }
    }
  }
  return out;
}

inline std::string emit_stepwise_anova(const std::vector<StepwiseRow>& rows) {
  std::string out =
      "step,metric,LLM,CoT,Residual,ss_model,ss_cot,ss_residual,ss_total,f_model,p_model,f_cot,"
      "p_cot,excluded\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::string(to_string(r.metric)) + ",";
    if (auto c = contributions(r.anova))
      out += detail::fixed(c->model, 1) + "," + detail::fixed(c->cot, 1) + "," +
             detail::fixed(c->residual, 1);
    else
      out += "undefined,undefined,undefined";
    const auto& a = r.anova;
    for (double v : {a.ss_model, a.ss_cot, a.ss_residual, a.ss_total, a.f_model, a.p_model,
                     a.f_cot, a.p_cot})
      out += "," + detail::shortest(v);
    out += "," + std::to_string(r.excluded) + "\n";
  }
  return out;
}

inline std::string emit_heatmap(const CellTable& table) {
  std::string out = "model";
  for (const auto& c : table.col_ids()) out += "," + detail::csv_field(c);
  out += "\n";
  for (std::size_t i = 0; i < table.rows(); ++i) {
    out += detail::csv_field(table.row_ids()[i]);
    for (std::size_t j = 0; j < table.cols(); ++j) out += "," + detail::shortest(table.value(i, j));
    out += "\n";
  }
  return out;
}

inline std::string emit_heatmap(const std::vector<EvalRecord>& records, const std::string& task,
                                Metric metric, int step, const std::vector<std::string>& rows,
                                const std::vector<std::string>& cols) {
  return emit_heatmap(aggregate(records, task, metric, step, rows, cols).table);
}

// One line per (model, source): the metric mean at steps 0..k.
inline std::string emit_curves(const std::vector<EvalRecord>& records, const std::string& task,
                               Metric metric, const std::vector<std::string>& rows,
                               const std::vector<std::string>& cols, int steps) {
  std::vector<CellTable> per_step;
  for (int s = 0; s <= steps; ++s)
    per_step.push_back(aggregate(records, task, metric, s, rows, cols).table);
  std::string out = "model,cot_source";
  for (int s = 0; s <= steps; ++s) out += ",step_" + std::to_string(s);
  out += "\n";
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) {
      out += detail::csv_field(rows[i]) + "," + detail::csv_field(cols[j]);
      for (const auto& t : per_step) out += "," + detail::shortest(t.value(i, j));
      out += "\n";
    }
  return out;
}

struct InstanceDeltas {
  std::string csv;
  std::size_t skipped = 0;  // (uid, model, source) lacking an endpoint step
};

inline InstanceDeltas emit_instance_deltas(const std::vector<EvalRecord>& records,
                                           const std::string& task) {
  std::map<std::tuple<std::string, std::string, std::string>,
           std::pair<std::optional<EvalRecord>, std::optional<EvalRecord>>>
      ends;
  for (const auto& r : records) {
    if (r.key.task != task) continue;
    auto& e = ends[{r.key.uid, r.key.inference_model, r.key.cot_source}];
    if (r.key.step == 0) e.first = r;
    if (r.key.step == r.steps) e.second = r;
  }
  InstanceDeltas out;
  out.csv = "uid,model,cot_source,delta_jsd,delta_acc,delta_rho\n";
  for (const auto& [k, e] : ends) {
    if (!e.first || !e.second) {
      ++out.skipped;
      continue;
    }
    const auto& [uid, model, src] = k;
    const auto& a = e.first->metrics;
    const auto& b = e.second->metrics;
    out.csv += detail::csv_field(uid) + "," + detail::csv_field(model) + "," +
               detail::csv_field(src) + "," + detail::shortest(delta(a.jsd, b.jsd)) + "," +
               std::to_string(b.accuracy_hit - a.accuracy_hit) + ",";
    if (a.spearman_rho && b.spearman_rho)
      out.csv += detail::shortest(delta(*a.spearman_rho, *b.spearman_rho));
    out.csv += "\n";
  }
  return out;
}

struct ReportOptions {
  std::string config_hash;
  std::vector<std::string> row_order;  // empty: sorted ids from the store
  std::vector<std::string> col_order;
  nlohmann::json notes = nlohmann::json::object();
};

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ReportError("cannot write " + path.string());
  out << content;
}

// Writes every surface for one task under out_dir and returns the metadata
// sidecar that was written alongside them.
inline nlohmann::json write_report(const std::vector<EvalRecord>& records, const std::string& task,
                                   const std::filesystem::path& out_dir,
                                   const ReportOptions& opts) {
  std::filesystem::create_directories(out_dir);
  auto [rows, cols] = store_axes(records, task);
  if (!opts.row_order.empty()) rows = opts.row_order;
  if (!opts.col_order.empty()) cols = opts.col_order;
  int steps = -1;
  for (const auto& r : records)
    if (r.key.task == task) steps = std::max(steps, r.steps);
  if (steps < 0) throw ReportError("no records for task " + task);

  nlohmann::json meta;
  meta["schema_version"] = kStoreSchemaVersion;
  meta["config_hash"] = opts.config_hash;
  meta["task"] = task;
  meta["steps"] = steps;
  meta["models"] = rows;
  meta["cot_sources"] = cols;
  meta["notes"] = opts.notes;

  std::vector<EvalRecord> task_records;
  for (const auto& r : records)
    if (r.key.task == task) task_records.push_back(r);
  write_text(out_dir / (task + "_delta_table.csv"), emit_delta_table(task_records));

  const auto anova = stepwise_anova(records, task, rows, cols, steps);
  write_text(out_dir / (task + "_stepwise_anova.csv"), emit_stepwise_anova(anova));
  nlohmann::json excl = nlohmann::json::object();
  for (const auto& r : anova)
    if (r.metric == Metric::rho) excl[std::to_string(r.step)] = r.excluded;
  meta["rho_exclusions_by_step"] = excl;

  for (Metric m : {Metric::accuracy, Metric::jsd, Metric::rho}) {
    const std::string name(to_string(m));
    for (int s = 0; s <= steps; ++s)
      write_text(out_dir / (task + "_heatmap_" + name + "_step" + std::to_string(s) + ".csv"),
                 emit_heatmap(records, task, m, s, rows, cols));
    write_text(out_dir / (task + "_curves_" + name + ".csv"),
               emit_curves(records, task, m, rows, cols, steps));
  }
  const auto deltas = emit_instance_deltas(records, task);
  write_text(out_dir / (task + "_instance_deltas.csv"), deltas.csv);
  meta["instance_deltas_skipped"] = deltas.skipped;
  write_text(out_dir / (task + "_metadata.json"), meta.dump(2) + "\n");
  return meta;
}

}  // namespace cotprobe
