#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace saep {

/// Worker cap: min(hardware_concurrency, SAEP_THREADS). Values < 1 or
/// non-numeric are ignored.
inline int max_threads() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (n < 1) n = 1;
  if (const char* env = std::getenv("SAEP_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) n = std::min<long>(n, v);
  }
  return n;
}

/// Runs fn(i) for i in [0, n). Each index must touch only its own outputs;
/// under that contract results are identical for any worker count. Jobs with
/// n below `grain` run inline — thread spawn costs more than the work.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t grain = 4096) {
  if (n <= 0) return;
  std::int64_t workers = n < grain ? 1 : std::min<std::int64_t>(max_threads(), n);
  if (workers <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::exception_ptr first_error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (std::int64_t w = 0; w < workers; ++w) {
    std::int64_t lo = n * w / workers;
    std::int64_t hi = n * (w + 1) / workers;
    pool.emplace_back([&, lo, hi] {
      try {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace saep
