#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "cotprobe/error.hpp"
#include "cotprobe/metrics.hpp"
#include "cotprobe/segmenter.hpp"

// Append-only newline-delimited stores for evaluation records and generated
// reasoning. A crash can leave at most one torn line at the tail; opening a
// store drops it. Later lines for the same key supersede earlier ones.

namespace cotprobe {

inline constexpr int kStoreSchemaVersion = 1;

struct RecordKey {
  std::string task;
  std::string uid;
  std::string inference_model;
  std::string cot_source;
  int step = 0;

  friend bool operator<(const RecordKey& a, const RecordKey& b) {
    return std::tie(a.task, a.uid, a.inference_model, a.cot_source, a.step) <
           std::tie(b.task, b.uid, b.inference_model, b.cot_source, b.step);
  }
  friend bool operator==(const RecordKey&, const RecordKey&) = default;
};

struct EvalRecord {
  RecordKey key;
  int steps = 10;                 // k of the run
  std::vector<double> mjd;        // label order
  MetricTriple metrics;
  std::string mjd_mode;
  std::string mapping;            // mapping policy / option order used
  std::string content_hash;
  std::string timestamp;
};

namespace detail {

inline nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

// Reads every complete line. A final line without a trailing newline that
// does not parse is a torn write: it is dropped and the file truncated.
inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();
  in.close();
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < data.size()) {
    const std::size_t nl = data.find('\n', pos);
    const bool complete = nl != std::string::npos;
    const std::string line = data.substr(pos, complete ? nl - pos : std::string::npos);
    ++line_no;
    if (!line.empty()) {
      try {
        out.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::parse_error& e) {
        if (complete)
          throw ParseError(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
        std::filesystem::resize_file(path, pos);
        break;
      }
    }
    if (!complete) {
      if (!line.empty()) {
        // Parsed but unterminated: make the file newline-terminated again.
        std::ofstream fix(path, std::ios::binary | std::ios::app);
        fix << '\n';
      }
      break;
    }
    pos = nl + 1;
  }
  return out;
}

inline void write_atomically(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out << content;
    out.flush();
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline nlohmann::json to_json(const EvalRecord& r) {
  nlohmann::json j;
  j["schema"] = kStoreSchemaVersion;
  j["task"] = r.key.task;
  j["uid"] = r.key.uid;
  j["model"] = r.key.inference_model;
  j["cot_source"] = r.key.cot_source;
  j["step"] = r.key.step;
  j["k"] = r.steps;
  j["mjd"] = r.mjd;
  j["acc"] = r.metrics.accuracy_hit;
  j["jsd"] = r.metrics.jsd;
  j["rho"] = detail::optional_number(r.metrics.spearman_rho);
  j["mjd_mode"] = r.mjd_mode;
  j["mapping"] = r.mapping;
  j["content_hash"] = r.content_hash;
  j["timestamp"] = r.timestamp;
  return j;
}

inline EvalRecord record_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<int>() != kStoreSchemaVersion)
      throw ParseError("unsupported record schema version");
    EvalRecord r;
    r.key = {j.at("task").get<std::string>(), j.at("uid").get<std::string>(),
             j.at("model").get<std::string>(), j.at("cot_source").get<std::string>(),
             j.at("step").get<int>()};
    r.steps = j.at("k").get<int>();
    r.mjd = j.at("mjd").get<std::vector<double>>();
    r.metrics.accuracy_hit = j.at("acc").get<int>();
    r.metrics.jsd = j.at("jsd").get<double>();
    if (!j.at("rho").is_null()) r.metrics.spearman_rho = j.at("rho").get<double>();
    r.mjd_mode = j.at("mjd_mode").get<std::string>();
    r.mapping = j.at("mapping").get<std::string>();
    r.content_hash = j.at("content_hash").get<std::string>();
    r.timestamp = j.at("timestamp").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed evaluation record: ") + e.what());
  }
}

// At most one record per key. Thread-safe appends; with a backing file each
// append is written and flushed before it becomes visible.
class ResultStore {
 public:
  ResultStore() = default;

  explicit ResultStore(std::filesystem::path path) : path_(std::move(path)) {
    for (const auto& j : detail::read_jsonl(*path_)) {
      EvalRecord r = record_from_json(j);
      records_[r.key] = std::move(r);
    }
  }

  ResultStore(const ResultStore&) = delete;
  ResultStore& operator=(const ResultStore&) = delete;

  std::optional<EvalRecord> find(const RecordKey& key) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(key);
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(const RecordKey& key) const { return find(key).has_value(); }

  void append(const EvalRecord& r) {
    std::lock_guard lock(mu_);
    if (path_) {
      std::ofstream out(*path_, std::ios::binary | std::ios::app);
      out << to_json(r).dump() << '\n';
      out.flush();
      if (!out) throw Error("append failed for " + path_->string());
    }
    records_[r.key] = r;
  }

  std::vector<EvalRecord> records() const {
    std::lock_guard lock(mu_);
    std::vector<EvalRecord> out;
    out.reserve(records_.size());
    for (const auto& [k, r] : records_) out.push_back(r);
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  // Key-sorted serialization; identical record sets give identical bytes.
  std::string canonical() const {
    std::lock_guard lock(mu_);
    std::string out;
    for (const auto& [k, r] : records_) out += to_json(r).dump() + "\n";
    return out;
  }

  // Rewrites the backing file in canonical form, dropping superseded lines.
  void compact() {
    if (!path_) return;
    const std::string content = canonical();
    std::lock_guard lock(mu_);
    detail::write_atomically(*path_, content);
  }

  const std::optional<std::filesystem::path>& path() const noexcept { return path_; }

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mu_;
  std::map<RecordKey, EvalRecord> records_;
};

struct CotKey {
  std::string task;
  std::string model;
  std::string uid;
  friend bool operator<(const CotKey& a, const CotKey& b) {
    return std::tie(a.task, a.model, a.uid) < std::tie(b.task, b.model, b.uid);
  }
};

inline nlohmann::json to_json(const CotKey& key, const CoTTrace& t) {
  nlohmann::json j;
  j["schema"] = kStoreSchemaVersion;
  j["task"] = key.task;
  j["model"] = key.model;
  j["uid"] = key.uid;
  j["text"] = t.text;
  j["cut_points"] = t.cut_points;
  j["unterminated"] = t.unterminated;
  return j;
}

// Generated reasoning keyed by (task, model, uid).
class CotCache {
 public:
  CotCache() = default;

  explicit CotCache(std::filesystem::path path) : path_(std::move(path)) {
    for (const auto& j : detail::read_jsonl(*path_)) {
      try {
        CotKey key{j.at("task").get<std::string>(), j.at("model").get<std::string>(),
                   j.at("uid").get<std::string>()};
        CoTTrace t;
        t.text = j.at("text").get<std::string>();
        t.source_model = key.model;
        t.cut_points = j.at("cut_points").get<std::vector<std::size_t>>();
        t.unterminated = j.at("unterminated").get<bool>();
        traces_[key] = std::move(t);
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed CoT cache record: ") + e.what());
      }
    }
  }

  CotCache(const CotCache&) = delete;
  CotCache& operator=(const CotCache&) = delete;

  std::optional<CoTTrace> find(const CotKey& key) const {
    std::lock_guard lock(mu_);
    auto it = traces_.find(key);
    if (it == traces_.end()) return std::nullopt;
    return it->second;
  }

  void put(const CotKey& key, const CoTTrace& trace) {
    std::lock_guard lock(mu_);
    if (path_) {
      std::ofstream out(*path_, std::ios::binary | std::ios::app);
      out << to_json(key, trace).dump() << '\n';
      out.flush();
      if (!out) throw Error("append failed for " + path_->string());
    }
    traces_[key] = trace;
  }

  std::vector<std::pair<CotKey, CoTTrace>> entries() const {
    std::lock_guard lock(mu_);
    return {traces_.begin(), traces_.end()};
  }

  void compact() {
    if (!path_) return;
    std::string content;
    {
      std::lock_guard lock(mu_);
      for (const auto& [k, t] : traces_) content += to_json(k, t).dump() + "\n";
    }
    detail::write_atomically(*path_, content);
  }

 private:
  std::optional<std::filesystem::path> path_;
  mutable std::mutex mu_;
  std::map<CotKey, CoTTrace> traces_;
};

}  // namespace cotprobe
