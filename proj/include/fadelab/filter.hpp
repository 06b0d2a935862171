#pragma once

#include <cstddef>
#include <vector>

#include "fadelab/tensor.hpp"

namespace fadelab {

// size x size Gaussian, normalised to sum 1, row-major. size must be odd.
std::vector<float> gaussian_kernel(std::size_t size, double sigma);

// Plain (non-recording) 'same' 2-D correlation of every [H,W] plane of a
// [B,C,H,W] tensor with a square kernel, zero padded at the borders.
Tensor filter_planes(const Tensor& x, const std::vector<float>& kernel, std::size_t size);

}  // namespace fadelab
