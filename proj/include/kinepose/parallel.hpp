#pragma once

// Minimal fork-join loop for embarrassingly parallel work. The worker count
// comes from the KINEPOSE_THREADS environment variable (default 1, so runs
// are single-threaded unless asked otherwise). Callers write results into
// per-index slots and merge them afterwards in index order, which keeps
// outputs identical for any thread count.

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace kinepose {

inline std::size_t thread_count() {
  const char* env = std::getenv("KINEPOSE_THREADS");
  if (env == nullptr) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<std::size_t>(v < 64 ? v : 64);
}

template <typename Fn>
inline void parallel_for(std::size_t n, Fn&& fn) {
  std::size_t workers = thread_count();
  if (workers > n) workers = n;
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    try {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
      next.store(n);  // stop handing out work
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace kinepose
