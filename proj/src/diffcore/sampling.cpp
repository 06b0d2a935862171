#include "fadelab/sampling.hpp"

#include <cmath>

#include "fadelab/error.hpp"

namespace fadelab {

Tensor sample_uniform(RngState& rng, const Shape& shape, float lo, float hi) {
  require(lo <= hi, ErrorCode::kInvalidArgument, "sample_uniform: lo > hi");
  std::vector<float> out(shape_numel(shape));
  const double width = static_cast<double>(hi) - lo;
  const float top = lo < hi ? std::nextafter(hi, lo) : hi;
  for (auto& v : out) {
    float s = static_cast<float>(lo + width * rng.uniform01());
    if (s > top) s = top;
    v = s;
  }
  return Tensor::from_data(shape, std::move(out));
}

Tensor sample_rademacher(RngState& rng, const Shape& shape) {
  std::vector<float> out(shape_numel(shape));
  // One raw draw feeds 64 signs.
  std::uint64_t bits = 0;
  int left = 0;
  for (auto& v : out) {
    if (left == 0) {
      bits = rng.next_u64();
      left = 64;
    }
    v = (bits & 1ULL) ? 1.0f : -1.0f;
    bits >>= 1;
    --left;
  }
  return Tensor::from_data(shape, std::move(out));
}

Tensor sample_normal(RngState& rng, const Shape& shape, float mean, float stddev) {
  std::vector<float> out(shape_numel(shape));
  for (auto& v : out) v = static_cast<float>(mean + stddev * rng.normal());
  return Tensor::from_data(shape, std::move(out));
}

}  // namespace fadelab
