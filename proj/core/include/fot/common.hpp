#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fot {

// Every recoverable failure in the library is reported as a fot::Error.
// The CLI maps these to a single-line "error: <what>" on stderr and a
// nonzero exit code.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

void log_warn(const std::string& msg);
void log_info(const std::string& msg);

// FNV-1a over raw bytes. Used for parameter checksums and config hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t seed = 1469598103934665603ull) {
  return fnv1a(s.data(), s.size(), seed);
}

// Seedable RNG with explicit bounded draws so results do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // uniform in [0, n)
  std::uint64_t next_u64(std::uint64_t n) {
    if (n == 0) fail("Rng::next_u64: n must be positive");
    const std::uint64_t threshold = (~std::uint64_t{0} - n + 1) % n;
    for (;;) {
      std::uint64_t r = gen_();
      if (r >= threshold) return r % n;
    }
  }

  int next_int(int n) { return static_cast<int>(next_u64(static_cast<std::uint64_t>(n))); }

  // uniform in [0, 1)
  double next_double() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    // Box-Muller, one value per call; cached pair deliberately not kept so
    // draw order is easy to reason about.
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = next_double();
    double u2 = next_double();
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    return mean + stddev * z;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_u64(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

// Runs fn(i) for i in [begin, end) across worker threads. Iterations must be
// independent; each index is handled by exactly one thread.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& fn);

int hardware_threads();

}  // namespace fot
