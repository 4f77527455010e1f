#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace entroad {

namespace detail {
inline int& thread_setting() {
  static int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  return n;
}
} // namespace detail

inline int num_threads() { return detail::thread_setting(); }
inline void set_num_threads(int n) { detail::thread_setting() = std::max(1, n); }

// Runs fn(i) for i in [0, n). Each index must write only to its own output
// slot; callers reduce afterwards in index order so results do not depend on
// the thread count.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < n; i += workers) {
            fn(i);
          }
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

} // namespace entroad
