#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dynclust {

namespace detail {
inline int& max_threads_slot() {
  static int value = 1;
  return value;
}
}  // namespace detail

// Caps the worker count used by parallel_for. Defaults to 1 (serial);
// the CLI raises it from --threads. Results never depend on this value:
// every parallel task owns its output slot and its own RNG substream.
inline void set_max_threads(int n) { detail::max_threads_slot() = std::max(1, n); }

inline int max_threads() { return detail::max_threads_slot(); }

template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(max_threads(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto body = [&] {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers) - 1);
  for (int w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace dynclust
