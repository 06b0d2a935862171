#include "fadelab/filter.hpp"

#include <cmath>

#include "fadelab/error.hpp"

namespace fadelab {

std::vector<float> gaussian_kernel(std::size_t size, double sigma) {
  require(size % 2 == 1, ErrorCode::kInvalidArgument, "gaussian kernel size must be odd, got " + std::to_string(size));
  require(sigma > 0.0, ErrorCode::kInvalidArgument, "gaussian kernel sigma must be > 0");
  const double c = static_cast<double>(size / 2);
  std::vector<double> w(size * size);
  double total = 0.0;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double dy = static_cast<double>(i) - c, dx = static_cast<double>(j) - c;
      w[i * size + j] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      total += w[i * size + j];
    }
  std::vector<float> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<float>(w[i] / total);
  return out;
}

Tensor filter_planes(const Tensor& x, const std::vector<float>& kernel, std::size_t size) {
  require(x.rank() == 4, ErrorCode::kShapeMismatch, "filter_planes expects [B,C,H,W], got " + shape_str(x.shape()));
  require(size % 2 == 1 && kernel.size() == size * size, ErrorCode::kInvalidArgument,
          "filter_planes: kernel must be an odd square");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const long r = static_cast<long>(size / 2);
  std::vector<float> out(x.numel(), 0.0f);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = xd.data() + p * h * w;
    float* dst = out.data() + p * h * w;
    for (long y = 0; y < static_cast<long>(h); ++y)
      for (long xx = 0; xx < static_cast<long>(w); ++xx) {
        double acc = 0.0;
        for (long ky = -r; ky <= r; ++ky) {
          const long iy = y + ky;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (long kx = -r; kx <= r; ++kx) {
            const long ix = xx + kx;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            acc += static_cast<double>(kernel[(ky + r) * static_cast<long>(size) + kx + r]) * src[iy * w + ix];
          }
        }
        dst[y * w + xx] = static_cast<float>(acc);
      }
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

}  // namespace fadelab
