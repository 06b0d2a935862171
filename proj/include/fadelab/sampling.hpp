#pragma once

#include "fadelab/rng.hpp"
#include "fadelab/tensor.hpp"

namespace fadelab {

// Elements i.i.d. uniform on [lo, hi); lo == hi yields a constant tensor.
Tensor sample_uniform(RngState& rng, const Shape& shape, float lo, float hi);
// Elements i.i.d. uniform on {-1, +1}.
Tensor sample_rademacher(RngState& rng, const Shape& shape);
Tensor sample_normal(RngState& rng, const Shape& shape, float mean, float stddev);

}  // namespace fadelab
