#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace calora {

/// splitmix64 finalizer; used to derive independent child seeds.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag);
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  double uniform();                          // [0,1)
  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t n);      // [0,n)
  double normal();
  std::vector<double> normal_vector(std::size_t n, double sigma = 1.0);
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace calora
