#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace twinsys {

// Domain error: invalid input, contract violation, malformed file.
// The CLI maps these to exit code 1; usage errors are handled before any
// computation starts and map to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

// Thread cap from TWINSYS_THREADS. 0 or unset means sequential.
inline unsigned thread_cap() {
  const char* env = std::getenv("TWINSYS_THREADS");
  if (!env || !*env) return 1;
  long n = std::strtol(env, nullptr, 10);
  if (n <= 1) return 1;
  return static_cast<unsigned>(n);
}

// Runs f(i) for i in [0, n). With TWINSYS_THREADS > 1 the range is split into
// contiguous chunks, one thread each. Results must be written to per-index
// slots so the outcome is independent of the interleaving.
template <typename F>
void parallel_for(std::size_t n, F&& f) {
  unsigned threads = thread_cap();
  if (threads <= 1 || n < 2 * threads) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  if (threads > n) threads = static_cast<unsigned>(n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &f]() {
      for (std::size_t i = lo; i < hi; ++i) f(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace twinsys
