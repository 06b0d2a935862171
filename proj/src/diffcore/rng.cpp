#include "fadelab/rng.hpp"

#include <cmath>

#include "fadelab/error.hpp"

namespace fadelab {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t RngState::below(std::uint64_t n) {
  require(n > 0, ErrorCode::kInvalidArgument, "RngState::below: n must be positive");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = std::uint64_t(0) - (std::uint64_t(0) - n) % n;
  for (;;) {
    const std::uint64_t v = next_u64();
    if (limit == 0 || v < limit) return v % n;
  }
}

double RngState::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform01() - 1.0;
    v = 2.0 * uniform01() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double f = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * f;
  has_spare_ = true;
  return u * f;
}

RngState RngState::fork(std::uint64_t stream) const {
  return RngState(splitmix64(seed_ ^ splitmix64(stream + 0x5851f42d4c957f2dULL)));
}

}  // namespace fadelab
