#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <thread>
#include <utility>

#include "cotprobe/error.hpp"

namespace cotprobe {

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{5000};

  // Delay before attempt `attempt` (1-based; the first attempt has none).
  std::chrono::milliseconds backoff_before(int attempt) const {
    if (attempt <= 1) return std::chrono::milliseconds{0};
    double ms = static_cast<double>(initial_backoff.count());
    for (int i = 2; i < attempt; ++i) ms *= multiplier;
    return std::min(max_backoff, std::chrono::milliseconds{static_cast<long long>(ms)});
  }
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

// Runs fn, retrying on TransportError with exponential backoff. Every other
// exception propagates on the first throw. The last TransportError is
// rethrown once attempts are exhausted.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, Fn&& fn, const Sleeper& sleep = real_sleep)
    -> decltype(fn()) {
  const int attempts = std::max(1, policy.max_attempts);
  for (int attempt = 1;; ++attempt) {
    if (attempt > 1) sleep(policy.backoff_before(attempt));
    try {
      return fn();
    } catch (const TransportError&) {
      if (attempt >= attempts) throw;
    }
  }
}

}  // namespace cotprobe
