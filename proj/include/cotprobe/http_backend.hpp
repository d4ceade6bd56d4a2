#pragma once

#include <chrono>
#include <cstdlib>
#include <string>
#include <utility>

#include <httplib.h>
#include <json.hpp>

#include "cotprobe/error.hpp"
#include "cotprobe/inference.hpp"

// OpenAI-compatible completions endpoint. Scoring asks for one token at
// temperature 0 with the top candidate log-probabilities of that position.

namespace cotprobe {

struct HttpSettings {
  std::string api_key_env;  // name of the variable holding the bearer token
  int top_logprobs = 20;
  int max_gen_tokens = 8192;
  std::chrono::seconds timeout{120};
};

struct Endpoint {
  std::string origin;     // scheme://host[:port]
  std::string base_path;  // e.g. "/v1", no trailing slash
};

inline Endpoint parse_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ArgumentError("endpoint must be an absolute URL: " + url);
  const auto slash = url.find('/', scheme + 3);
  Endpoint e;
  e.origin = url.substr(0, slash);
  e.base_path = slash == std::string::npos ? "" : url.substr(slash);
  while (!e.base_path.empty() && e.base_path.back() == '/') e.base_path.pop_back();
  return e;
}

// Candidate map from a completions response: choices[0].logprobs.top_logprobs[0]
// either as {token: logprob} or as [{token, logprob}, ...].
inline FirstTokenCandidates parse_completion_logprobs(const std::string& body) {
  FirstTokenCandidates out;
  out.kind = ScoreKind::log_probability;
  try {
    const auto j = nlohmann::json::parse(body);
    const auto& first = j.at("choices").at(0).at("logprobs").at("top_logprobs").at(0);
    if (first.is_object()) {
      for (auto it = first.begin(); it != first.end(); ++it)
        out.scores[it.key()] = it.value().get<double>();
    } else if (first.is_array()) {
      for (const auto& c : first)
        out.scores[c.at("token").get<std::string>()] = c.at("logprob").get<double>();
    } else {
      throw ProtocolError("top_logprobs entry is neither an object nor an array");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed completion response: ") + e.what());
  }
  if (out.scores.empty()) throw ProtocolError("completion response carries no candidates");
  return out;
}

inline std::string parse_completion_text(const std::string& body) {
  try {
    return nlohmann::json::parse(body).at("choices").at(0).at("text").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed completion response: ") + e.what());
  }
}

class HttpBackend final : public Backend {
 public:
  HttpBackend(BackendDescriptor desc, HttpSettings settings)
      : desc_(std::move(desc)), settings_(std::move(settings)), endpoint_(parse_endpoint(desc_.endpoint)) {}

  const BackendDescriptor& descriptor() const override { return desc_; }

  FirstTokenCandidates first_token_candidates(const std::string& probe) override {
    nlohmann::json req{{"model", desc_.model_id},
                       {"prompt", probe},
                       {"max_tokens", 1},
                       {"temperature", 0},
                       {"logprobs", settings_.top_logprobs}};
    return parse_completion_logprobs(post(req.dump()));
  }

  std::string generate(const std::string& prompt) override {
    nlohmann::json req{{"model", desc_.model_id},
                       {"prompt", prompt},
                       {"max_tokens", settings_.max_gen_tokens},
                       {"temperature", 0}};
    return parse_completion_text(post(req.dump()));
  }

 private:
  // One client per call; httplib clients are not safe to share across threads.
  std::string post(const std::string& body) const {
    httplib::Client client(endpoint_.origin);
    client.set_connection_timeout(settings_.timeout);
    client.set_read_timeout(settings_.timeout);
    client.set_write_timeout(settings_.timeout);
    httplib::Headers headers;
    if (!settings_.api_key_env.empty()) {
      if (const char* key = std::getenv(settings_.api_key_env.c_str()))
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = client.Post(endpoint_.base_path + "/completions", headers, body, "application/json");
    if (!res) throw TransportError(desc_.model_id + ": " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
      throw TransportError(desc_.model_id + ": HTTP " + std::to_string(res->status));
    if (res->status != 200)
      throw ProtocolError(desc_.model_id + ": HTTP " + std::to_string(res->status) + ": " +
                          res->body.substr(0, 200));
    return res->body;
  }

  BackendDescriptor desc_;
  HttpSettings settings_;
  Endpoint endpoint_;
};

}  // namespace cotprobe
