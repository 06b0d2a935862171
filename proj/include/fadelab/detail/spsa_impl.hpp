#pragma once

#include "fadelab/sampling.hpp"

namespace fadelab {

template <class F>
std::vector<float> spsa_gradient(F&& f, const Tensor& x, float sigma, std::size_t samples, RngState& rng) {
  const std::size_t b = x.dim(0), d = x.numel() / b;
  Shape probe_shape = x.shape();
  probe_shape[0] = b * 2 * samples;
  std::vector<float> probes(b * 2 * samples * d);
  std::vector<float> dirs(b * samples * d);
  const auto xd = x.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < samples; ++s) {
      const Tensor u = sample_rademacher(rng, {d});
      float* dir = dirs.data() + (i * samples + s) * d;
      float* plus = probes.data() + ((i * samples + s) * 2) * d;
      float* minus = plus + d;
      for (std::size_t j = 0; j < d; ++j) {
        dir[j] = u[j];
        plus[j] = xd[i * d + j] + sigma * u[j];
        minus[j] = xd[i * d + j] - sigma * u[j];
      }
    }
  const std::vector<double> values = f(Tensor::from_data(probe_shape, std::move(probes)));
  std::vector<float> grad(b * d, 0.0f);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t s = 0; s < samples; ++s) {
      const std::size_t p = (i * samples + s) * 2;
      const double coeff = (values[p] - values[p + 1]) / (2.0 * sigma) / static_cast<double>(samples);
      const float* dir = dirs.data() + (i * samples + s) * d;
      for (std::size_t j = 0; j < d; ++j) grad[i * d + j] += static_cast<float>(coeff * dir[j]);
    }
  return grad;
}

}  // namespace fadelab
