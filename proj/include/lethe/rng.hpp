#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace lethe {

// Mixes a list of words into one seed (splitmix64 finalizer chained over the inputs).
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

/// Seeded generator with platform-independent draws.
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the
/// standard. The std::*_distribution adaptors are implementation-defined,
/// so every distribution used by the simulator is implemented here on top
/// of the raw 64-bit stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);      // [lo, hi)
  std::size_t uniform_index(std::size_t n);  // [0, n), unbiased
  double normal();                           // standard normal
  double log_gamma_variate(double shape);    // log of a Gamma(shape, 1) draw

  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = uniform_index(i);
      std::swap(items[i - 1], items[j]);
    }
  }
  template <class T>
  void shuffle(std::vector<T>& items) {
    shuffle(std::span<T>(items));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

// Dirichlet(alpha, ..., alpha) draw of dimension k. Computed in log space so tiny
// concentrations (alpha ~ 0.1) do not underflow to an all-zero vector.
std::vector<double> sample_dirichlet(Rng& rng, std::size_t k, double alpha);

}  // namespace lethe
