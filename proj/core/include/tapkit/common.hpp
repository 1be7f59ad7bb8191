#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace tapkit {

// Violation of an internal contract (caller bug), as opposed to bad user
// input or I/O failure. The CLI maps these to exit code 2.
class contract_error : public std::logic_error {
 public:
  explicit contract_error(const std::string& what) : std::logic_error(what) {}
};

#define TAPKIT_REQUIRE(cond, msg)                               \
  do {                                                          \
    if (!(cond)) throw ::tapkit::contract_error(msg);           \
  } while (0)

#define TAPKIT_CHECK_ARG(cond, msg)                             \
  do {                                                          \
    if (!(cond)) throw ::std::invalid_argument(msg);            \
  } while (0)

// Deterministic RNG. std:: distributions are implementation defined, so all
// sampling goes through these helpers to keep datasets and training traces
// reproducible for a given binary.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    return n == 0 ? 0 : engine_() % n;
  }

  // standard normal via Box-Muller (always consumes two draws)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace tapkit
