#include "fadelab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "fadelab/error.hpp"

namespace fadelab::ops {

using detail::grad_of;
using detail::Node;
using detail::record;

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstStrided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  fail(ErrorCode::kShapeMismatch, std::string(op) + ": " + detail);
}

void check_inputs(const char* op, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (!t->defined()) fail(ErrorCode::kInvalidArgument, std::string(op) + ": undefined input");
    detail::check_finite(op, *t);
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_error(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// b broadcasts onto a when it matches a trailing run of a's dims or is a
// single element; b index = i % numel(b) in both cases.
void check_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (b.numel() == 1 || is_suffix(b.shape(), a.shape())) return;
  shape_error(op, "cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
}

bool broadcastable(const Tensor& a, const Tensor& b) {
  return b.numel() == 1 || is_suffix(b.shape(), a.shape());
}

template <class Fwd, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  check_inputs(op, {&a, &b});
  check_broadcast(op, a, b);
  const std::size_t n = a.numel(), nb = b.numel();
  std::vector<float> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[i % nb]);
  return record(op, a.shape(), std::move(out), {a, b}, [n, nb, da, db](Node& self) {
    Node& na = *self.parents[0];
    Node& nbn = *self.parents[1];
    const auto& g = self.grad;
    if (na.requires_grad) {
      auto ga = grad_of(na);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(na.data[i], nbn.data[i % nb]);
    }
    if (nbn.requires_grad) {
      auto gb = grad_of(nbn);
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * db(na.data[i], nbn.data[i % nb]);
    }
  });
}

Tensor reduce_extreme(const char* op, const Tensor& x, std::size_t axis, bool want_max) {
  check_inputs(op, {&x});
  check_axis(op, x, axis);
  const auto s = split_at(x.shape(), axis);
  if (s.n == 0) shape_error(op, "empty reduction axis");
  std::vector<float> out(s.outer * s.inner);
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = o * s.n * s.inner + in;
      for (std::size_t k = 1; k < s.n; ++k) {
        const std::size_t idx = (o * s.n + k) * s.inner + in;
        if (want_max ? xd[idx] > xd[best] : xd[idx] < xd[best]) best = idx;
      }
      out[o * s.inner + in] = xd[best];
      (*arg)[o * s.inner + in] = best;
    }
  }
  return record(op, drop_axis(x.shape(), axis), std::move(out), {x}, [arg](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += self.grad[i];
  });
}

// out[i, :] = a[i, :] * b for i < m, accumulating over k in ascending order for every element. The bits of a
// row do not depend on how many other rows share the call.
void gemm_rows(const float* a, std::size_t lda, const float* b, std::size_t m, std::size_t k, std::size_t n,
               float* out, std::size_t ldo) {
  constexpr std::size_t kTile = 4, kCols = 512;
  for (std::size_t j0 = 0; j0 < n; j0 += kCols) {
    const std::size_t nj = std::min(kCols, n - j0);
    std::size_t i = 0;
    for (; i + kTile <= m; i += kTile) {
      float* o0 = out + i * ldo + j0;
      float* o1 = o0 + ldo;
      float* o2 = o1 + ldo;
      float* o3 = o2 + ldo;
      std::fill_n(o0, nj, 0.0f), std::fill_n(o1, nj, 0.0f), std::fill_n(o2, nj, 0.0f), std::fill_n(o3, nj, 0.0f);
      const float* ar = a + i * lda;
      for (std::size_t p = 0; p < k; ++p) {
        const float a0 = ar[p], a1 = ar[lda + p], a2 = ar[2 * lda + p], a3 = ar[3 * lda + p];
        const float* br = b + p * n + j0;
        for (std::size_t j = 0; j < nj; ++j) {
          o0[j] += a0 * br[j];
          o1[j] += a1 * br[j];
          o2[j] += a2 * br[j];
          o3[j] += a3 * br[j];
        }
      }
    }
    for (; i < m; ++i) {
      float* o = out + i * ldo + j0;
      std::fill_n(o, nj, 0.0f);
      for (std::size_t p = 0; p < k; ++p) {
        const float av = a[i * lda + p];
        const float* br = b + p * n + j0;
        for (std::size_t j = 0; j < nj; ++j) o[j] += av * br[j];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_inputs("matmul", {&a, &b});
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  gemm_rows(a.data().data(), k, b.data().data(), m, k, n, out.data(), n);
  return record("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    ConstMap g(self.grad.data(), m, n);
    if (na.requires_grad) {
      MutMap(grad_of(na).data(), m, k).noalias() += g * ConstMap(nb.data.data(), k, n).transpose();
    }
    if (nb.requires_grad) {
      MutMap(grad_of(nb).data(), k, n).noalias() += ConstMap(na.data.data(), m, k).transpose() * g;
    }
  });
}

Tensor grouped_matmul(const Tensor& x, const Tensor& w) {
  check_inputs("grouped_matmul", {&x, &w});
  if (w.rank() != 3 || x.rank() != 2) shape_error("grouped_matmul", shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const auto groups = w.dim(0), in = w.dim(1), outd = w.dim(2), batch = x.dim(0);
  bool shared;
  if (x.dim(1) == in) {
    shared = true;
  } else if (x.dim(1) == groups * in) {
    shared = false;
  } else {
    shape_error("grouped_matmul", shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t xstride = x.dim(1);
  std::vector<float> out(batch * groups * outd);
  for (std::size_t g = 0; g < groups; ++g) {
    gemm_rows(x.data().data() + (shared ? 0 : g * in), xstride, w.data().data() + g * in * outd, batch, in, outd,
              out.data() + g * outd, groups * outd);
  }
  return record("grouped_matmul", {batch, groups * outd}, std::move(out), {x, w},
                [=](Node& self) {
                  Node& nx = *self.parents[0];
                  Node& nw = *self.parents[1];
                  for (std::size_t g = 0; g < groups; ++g) {
                    ConstStrided gg(self.grad.data() + g * outd, batch, outd, Eigen::OuterStride<>(groups * outd));
                    ConstMap wg(nw.data.data() + g * in * outd, in, outd);
                    if (nx.requires_grad) {
                      MutStrided gx(grad_of(nx).data() + (shared ? 0 : g * in), batch, in,
                                    Eigen::OuterStride<>(xstride));
                      gx.noalias() += gg * wg.transpose();
                    }
                    if (nw.requires_grad) {
                      ConstStrided xg(nx.data.data() + (shared ? 0 : g * in), batch, in,
                                      Eigen::OuterStride<>(xstride));
                      MutMap(grad_of(nw).data() + g * in * outd, in, outd).noalias() += xg.transpose() * gg;
                    }
                  }
                });
}

Tensor grouped_conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad,
                      std::size_t groups) {
  check_inputs("grouped_conv2d", {&x, &w});
  if (bias.defined()) check_inputs("grouped_conv2d", {&bias});
  if (x.rank() != 4 || w.rank() != 4 || groups == 0 || stride == 0)
    shape_error("grouped_conv2d", shape_str(x.shape()) + " * " + shape_str(w.shape()));
  const auto batch = x.dim(0), cin_total = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const auto cout_total = w.dim(0), ci = w.dim(1), k = w.dim(2);
  if (w.dim(3) != k || cin_total != groups * ci || cout_total % groups != 0)
    shape_error("grouped_conv2d", shape_str(x.shape()) + " * " + shape_str(w.shape()) + " groups=" +
                                      std::to_string(groups));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout_total))
    shape_error("grouped_conv2d", "bias " + shape_str(bias.shape()) + " for " + std::to_string(cout_total) +
                                      " output channels");
  if (h + 2 * pad < k || wd + 2 * pad < k) shape_error("grouped_conv2d", "kernel larger than padded input");
  const auto co = cout_total / groups;
  const auto ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  const auto pix = ho * wo, rows = ci * k * k, cols = batch * pix;
  const bool keep = grad_enabled() && (x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad()));

  auto im2col = [=](const float* xd, std::size_t g, std::vector<float>& col) {
    col.assign(rows * cols, 0.0f);
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          float* dst = col.data() + ((c * k + ky) * k + kx) * cols;
          for (std::size_t b = 0; b < batch; ++b) {
            const float* src = xd + ((b * cin_total) + g * ci + c) * h * wd;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                dst[b * pix + oy * wo + ox] = src[iy * wd + ix];
              }
            }
          }
        }
  };

  std::vector<float> out(batch * cout_total * pix);
  auto saved = std::make_shared<std::vector<std::vector<float>>>(keep ? groups : 0);
  std::vector<float> col, res(co * cols);
  for (std::size_t g = 0; g < groups; ++g) {
    im2col(x.data().data(), g, col);
    gemm_rows(w.data().data() + g * co * rows, rows, col.data(), co, rows, cols, res.data(), cols);
    for (std::size_t c = 0; c < co; ++c) {
      const float bv = bias.defined() ? bias[g * co + c] : 0.0f;
      for (std::size_t b = 0; b < batch; ++b) {
        float* dst = out.data() + (b * cout_total + g * co + c) * pix;
        const float* src = res.data() + c * cols + b * pix;
        for (std::size_t p = 0; p < pix; ++p) dst[p] = src[p] + bv;
      }
    }
    if (keep) (*saved)[g] = col;
  }

  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return record("grouped_conv2d", {batch, cout_total, ho, wo}, std::move(out), std::move(inputs), [=](Node& self) {
    Node& nx = *self.parents[0];
    Node& nw = *self.parents[1];
    std::vector<float> gmat(co * cols), dcol;
    for (std::size_t g = 0; g < groups; ++g) {
      for (std::size_t c = 0; c < co; ++c)
        for (std::size_t b = 0; b < batch; ++b) {
          const float* src = self.grad.data() + (b * cout_total + g * co + c) * pix;
          std::copy(src, src + pix, gmat.data() + c * cols + b * pix);
        }
      ConstMap gm(gmat.data(), co, cols);
      const auto& colg = (*saved)[g];
      if (nw.requires_grad) {
        MutMap(grad_of(nw).data() + g * co * rows, co, rows).noalias() +=
            gm * ConstMap(colg.data(), rows, cols).transpose();
      }
      if (has_bias && self.parents[2]->requires_grad) {
        auto gb = grad_of(*self.parents[2]);
        for (std::size_t c = 0; c < co; ++c) gb[g * co + c] += gm.row(c).sum();
      }
      if (nx.requires_grad) {
        dcol.resize(rows * cols);
        MutMap(dcol.data(), rows, cols).noalias() =
            ConstMap(nw.data.data() + g * co * rows, co, rows).transpose() * gm;
        auto gx = grad_of(nx);
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const float* src = dcol.data() + ((c * k + ky) * k + kx) * cols;
              for (std::size_t b = 0; b < batch; ++b) {
                float* dst = gx.data() + ((b * cin_total) + g * ci + c) * h * wd;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                    dst[iy * wd + ix] += src[b * pix + oy * wo + ox];
                  }
                }
              }
            }
      }
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  return grouped_conv2d(x, w, bias, stride, pad, 1);
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (!broadcastable(a, b) && a.defined() && b.defined() && broadcastable(b, a)) return add(b, a);
  return binary(
      "add", a, b, [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (!broadcastable(a, b) && a.defined() && b.defined() && broadcastable(b, a)) return mul(b, a);
  return binary(
      "mul", a, b, [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}

Tensor scale(const Tensor& x, float factor) {
  check_inputs("scale", {&x});
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return record("scale", x.shape(), std::move(out), {x}, [factor](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[i];
  });
}

Tensor add_scalar(const Tensor& x, float value) {
  check_inputs("add_scalar", {&x});
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += value;
  return record("add_scalar", x.shape(), std::move(out), {x}, [](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  check_inputs("relu", {&x});
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  return record("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    Node& nx = *self.parents[0];
    auto gx = grad_of(nx);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (nx.data[i] > 0.0f) gx[i] += self.grad[i];
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  check_inputs("reshape", {&x});
  if (shape_numel(shape) != x.numel()) shape_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return record("reshape", shape, std::move(out), {x}, [](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  check_inputs("sum", {&x});
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return record("sum", {}, {static_cast<float>(acc)}, {x}, [](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (auto& v : gx) v += self.grad[0];
  });
}

Tensor sum(const Tensor& x, std::size_t axis) {
  check_inputs("sum", {&x});
  check_axis("sum", x, axis);
  const auto s = split_at(x.shape(), axis);
  std::vector<double> acc(s.outer * s.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t in = 0; in < s.inner; ++in) acc[o * s.inner + in] += xd[(o * s.n + k) * s.inner + in];
  std::vector<float> out(acc.begin(), acc.end());
  return record("sum", drop_axis(x.shape(), axis), std::move(out), {x}, [s](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t in = 0; in < s.inner; ++in) gx[(o * s.n + k) * s.inner + in] += self.grad[o * s.inner + in];
  });
}

Tensor mean(const Tensor& x) {
  check_inputs("mean", {&x});
  if (x.numel() == 0) shape_error("mean", "empty tensor");
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return record("mean", {}, {static_cast<float>(acc / n)}, {x}, [n](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    const float g = static_cast<float>(self.grad[0] / n);
    for (auto& v : gx) v += g;
  });
}

// Divides the double accumulator before rounding, so a mean of equal values
// returns that value exactly.
Tensor mean(const Tensor& x, std::size_t axis) {
  check_inputs("mean", {&x});
  check_axis("mean", x, axis);
  if (x.dim(axis) == 0) shape_error("mean", "empty reduction axis");
  const auto s = split_at(x.shape(), axis);
  const double n = static_cast<double>(s.n);
  std::vector<double> acc(s.outer * s.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t k = 0; k < s.n; ++k)
      for (std::size_t in = 0; in < s.inner; ++in) acc[o * s.inner + in] += xd[(o * s.n + k) * s.inner + in];
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i] / n);
  return record("mean", drop_axis(x.shape(), axis), std::move(out), {x}, [s, n](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t k = 0; k < s.n; ++k)
        for (std::size_t in = 0; in < s.inner; ++in)
          gx[(o * s.n + k) * s.inner + in] += static_cast<float>(self.grad[o * s.inner + in] / n);
  });
}

Tensor max(const Tensor& x, std::size_t axis) { return reduce_extreme("max", x, axis, true); }
Tensor min(const Tensor& x, std::size_t axis) { return reduce_extreme("min", x, axis, false); }

namespace {

std::size_t last_dim(const char* op, const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) shape_error(op, "needs a non-empty last axis, got " + shape_str(x.shape()));
  return x.shape().back();
}

void softmax_rows(std::span<const float> in, std::span<float> out, std::size_t k) {
  for (std::size_t r = 0; r * k < in.size(); ++r) {
    const float* src = in.data() + r * k;
    float* dst = out.data() + r * k;
    const float mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(src[j]) - mx);
    for (std::size_t j = 0; j < k; ++j) dst[j] = static_cast<float>(std::exp(static_cast<double>(src[j]) - mx) / z);
  }
}

}  // namespace

Tensor softmax(const Tensor& x) {
  check_inputs("softmax", {&x});
  const auto k = last_dim("softmax", x);
  std::vector<float> out(x.numel());
  softmax_rows(x.data(), out, k);
  auto y = std::make_shared<std::vector<float>>(out);
  return record("softmax", x.shape(), std::move(out), {x}, [k, y](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t r = 0; r * k < y->size(); ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += self.grad[r * k + j] * (*y)[r * k + j];
      for (std::size_t j = 0; j < k; ++j)
        gx[r * k + j] += (*y)[r * k + j] * static_cast<float>(self.grad[r * k + j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  check_inputs("log_softmax", {&x});
  const auto k = last_dim("log_softmax", x);
  std::vector<float> out(x.numel());
  auto p = std::make_shared<std::vector<float>>(x.numel());
  const auto xd = x.data();
  for (std::size_t r = 0; r * k < out.size(); ++r) {
    const float* src = xd.data() + r * k;
    const float mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(src[j]) - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = static_cast<float>(src[j] - lz);
      (*p)[r * k + j] = static_cast<float>(std::exp(src[j] - lz));
    }
  }
  return record("log_softmax", x.shape(), std::move(out), {x}, [k, p](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t r = 0; r * k < p->size(); ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += self.grad[r * k + j];
      for (std::size_t j = 0; j < k; ++j)
        gx[r * k + j] += self.grad[r * k + j] - (*p)[r * k + j] * static_cast<float>(gs);
    }
  });
}

Tensor logsumexp(const Tensor& x) {
  check_inputs("logsumexp", {&x});
  const auto k = last_dim("logsumexp", x);
  const auto rows = x.numel() / k;
  std::vector<float> out(rows);
  auto p = std::make_shared<std::vector<float>>(x.numel());
  softmax_rows(x.data(), *p, k);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* src = xd.data() + r * k;
    const float mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(src[j]) - mx);
    out[r] = static_cast<float>(std::log(z) + mx);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return record("logsumexp", shape, std::move(out), {x}, [k, p](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i / k] * (*p)[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  check_inputs("cross_entropy", {&logits});
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || logits.dim(0) == 0)
    shape_error("cross_entropy", "logits " + shape_str(logits.shape()) + " with " + std::to_string(labels.size()) +
                                     " labels");
  const auto b = logits.dim(0), k = logits.dim(1);
  auto p = std::make_shared<std::vector<float>>(logits.numel());
  softmax_rows(logits.data(), *p, k);
  auto y = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  double acc = 0.0;
  const auto xd = logits.data();
  for (std::size_t r = 0; r < b; ++r) {
    const auto label = (*y)[r];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      fail(ErrorCode::kInvalidArgument, "cross_entropy: label " + std::to_string(label) + " out of range");
    const float* src = xd.data() + r * k;
    const float mx = *std::max_element(src, src + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(src[j]) - mx);
    acc += std::log(z) + mx - src[label];
  }
  return record("cross_entropy", {}, {static_cast<float>(acc / b)}, {logits}, [b, k, p, y](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    const float g = self.grad[0] / static_cast<float>(b);
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t j = 0; j < k; ++j)
        gx[r * k + j] += g * ((*p)[r * k + j] - (static_cast<std::int32_t>(j) == (*y)[r] ? 1.0f : 0.0f));
  });
}

Tensor l2_norm_sq(const Tensor& x) {
  check_inputs("l2_norm_sq", {&x});
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  return record("l2_norm_sq", {}, {static_cast<float>(acc)}, {x}, [](Node& self) {
    Node& nx = *self.parents[0];
    auto gx = grad_of(nx);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0f * nx.data[i] * self.grad[0];
  });
}

Tensor clip(const Tensor& x, float lo, float hi) {
  check_inputs("clip", {&x});
  if (lo > hi) fail(ErrorCode::kInvalidArgument, "clip: lo > hi");
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(xd[i], lo, hi);
  return record("clip", x.shape(), std::move(out), {x}, [lo, hi](Node& self) {
    Node& nx = *self.parents[0];
    auto gx = grad_of(nx);
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (nx.data[i] >= lo && nx.data[i] <= hi) gx[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorCode::kInvalidArgument, "concat: no inputs");
  for (const auto& p : parts) check_inputs("concat", {&p});
  const Shape& ref = parts[0].shape();
  check_axis("concat", parts[0], axis);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) shape_error("concat", shape_str(ref) + " vs " + shape_str(p.shape()));
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (i != axis && p.dim(i) != ref[i]) shape_error("concat", shape_str(ref) + " vs " + shape_str(p.shape()));
    widths.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  const auto s = split_at(ref, axis);
  Shape shape = ref;
  shape[axis] = total;
  std::vector<float> out(shape_numel(shape));
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const auto pd = parts[j].data();
    const std::size_t span = widths[j] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy(pd.begin() + o * span, pd.begin() + (o + 1) * span, out.begin() + o * total * s.inner + offset);
    offset += span;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return record("concat", shape, std::move(out), std::move(inputs), [widths, s, total](Node& self) {
    std::size_t offset = 0;
    for (std::size_t j = 0; j < widths.size(); ++j) {
      const std::size_t span = widths[j] * s.inner;
      Node& np = *self.parents[j];
      if (np.requires_grad) {
        auto gp = grad_of(np);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < span; ++i) gp[o * span + i] += self.grad[o * total * s.inner + offset + i];
      }
      offset += span;
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t end) {
  check_inputs("slice", {&x});
  check_axis("slice", x, axis);
  if (start > end || end > x.dim(axis))
    shape_error("slice", "range [" + std::to_string(start) + "," + std::to_string(end) + ") on " + shape_str(x.shape()));
  const auto s = split_at(x.shape(), axis);
  const std::size_t width = end - start;
  Shape shape = x.shape();
  shape[axis] = width;
  std::vector<float> out(shape_numel(shape));
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy(xd.begin() + (o * s.n + start) * s.inner, xd.begin() + (o * s.n + end) * s.inner,
              out.begin() + o * width * s.inner);
  return record("slice", shape, std::move(out), {x}, [s, start, width](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < width * s.inner; ++i)
        gx[(o * s.n + start) * s.inner + i] += self.grad[o * width * s.inner + i];
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  check_inputs("gather_rows", {&x});
  if (x.rank() == 0) shape_error("gather_rows", "scalar input");
  const auto n = x.dim(0);
  const auto row = n ? x.numel() / n : 0;
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (auto r : *idx)
    if (r >= n) shape_error("gather_rows", "row " + std::to_string(r) + " out of range for " + shape_str(x.shape()));
  Shape shape = x.shape();
  shape[0] = idx->size();
  std::vector<float> out(idx->size() * row);
  const auto xd = x.data();
  for (std::size_t i = 0; i < idx->size(); ++i)
    std::copy(xd.begin() + (*idx)[i] * row, xd.begin() + ((*idx)[i] + 1) * row, out.begin() + i * row);
  return record("gather_rows", shape, std::move(out), {x}, [idx, row](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (std::size_t j = 0; j < row; ++j) gx[(*idx)[i] * row + j] += self.grad[i * row + j];
  });
}

Tensor select_class(const Tensor& x, std::span<const std::int32_t> labels) {
  check_inputs("select_class", {&x});
  if (x.rank() < 2 || x.dim(0) != labels.size())
    shape_error("select_class", shape_str(x.shape()) + " with " + std::to_string(labels.size()) + " labels");
  const auto b = x.dim(0), k = x.shape().back();
  const auto mid = x.numel() / (b * k);
  auto idx = std::make_shared<std::vector<std::size_t>>(b * mid);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
      fail(ErrorCode::kInvalidArgument, "select_class: label " + std::to_string(labels[i]) + " out of range");
    for (std::size_t m = 0; m < mid; ++m) (*idx)[i * mid + m] = (i * mid + m) * k + labels[i];
  }
  std::vector<float> out(idx->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*idx)[i]];
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  return record("select_class", shape, std::move(out), {x}, [idx](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t i = 0; i < idx->size(); ++i) gx[(*idx)[i]] += self.grad[i];
  });
}

Tensor swap_last_axes(const Tensor& x) {
  check_inputs("swap_last_axes", {&x});
  if (x.rank() < 2) shape_error("swap_last_axes", "needs rank >= 2, got " + shape_str(x.shape()));
  const auto r = x.rank();
  const auto m = x.dim(r - 2), n = x.dim(r - 1);
  const auto outer = x.numel() / (m * n);
  Shape shape = x.shape();
  std::swap(shape[r - 2], shape[r - 1]);
  std::vector<float> out(x.numel());
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[o * m * n + j * m + i] = xd[o * m * n + i * n + j];
  return record("swap_last_axes", shape, std::move(out), {x}, [outer, m, n](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[o * m * n + i * n + j] += self.grad[o * m * n + j * m + i];
  });
}

Tensor resize_pad(const Tensor& x, std::size_t out_h, std::size_t out_w, std::size_t top, std::size_t left) {
  check_inputs("resize_pad", {&x});
  if (x.rank() != 4) shape_error("resize_pad", "expects [B,C,H,W], got " + shape_str(x.shape()));
  const auto planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == 0 || out_w == 0 || top + out_h > h || left + out_w > w)
    shape_error("resize_pad", "placement does not fit " + shape_str(x.shape()));
  // src[i] is the input offset within a plane for output offset i, or -1.
  auto src = std::make_shared<std::vector<long>>(h * w, -1);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t xx = 0; xx < out_w; ++xx)
      (*src)[(y + top) * w + xx + left] = static_cast<long>((y * h / out_h) * w + (xx * w / out_w));
  std::vector<float> out(x.numel(), 0.0f);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h * w; ++i)
      if ((*src)[i] >= 0) out[p * h * w + i] = xd[p * h * w + (*src)[i]];
  return record("resize_pad", x.shape(), std::move(out), {x}, [src, planes, h, w](Node& self) {
    auto gx = grad_of(*self.parents[0]);
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t i = 0; i < h * w; ++i)
        if ((*src)[i] >= 0) gx[p * h * w + (*src)[i]] += self.grad[p * h * w + i];
  });
}

Tensor forward_op(std::string_view op, std::span<const Tensor> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      fail(ErrorCode::kInvalidArgument, std::string(op) + ": expected " + std::to_string(n) + " inputs, got " +
                                            std::to_string(in.size()));
  };
  auto axis = [&]() {
    if (!attrs.axis) fail(ErrorCode::kInvalidArgument, std::string(op) + ": axis attribute required");
    return *attrs.axis;
  };
  if (op == "matmul") return need(2), matmul(in[0], in[1]);
  if (op == "conv2d" || op == "grouped_conv2d") {
    if (in.size() != 2 && in.size() != 3) need(3);
    const Tensor bias = in.size() == 3 ? in[2] : Tensor();
    return grouped_conv2d(in[0], in[1], bias, attrs.stride, attrs.pad, op == "conv2d" ? 1 : attrs.groups);
  }
  if (op == "add") return need(2), add(in[0], in[1]);
  if (op == "mul") return need(2), mul(in[0], in[1]);
  if (op == "relu") return need(1), relu(in[0]);
  if (op == "reshape") return need(1), reshape(in[0], attrs.shape);
  if (op == "mean") return need(1), attrs.axis ? mean(in[0], *attrs.axis) : mean(in[0]);
  if (op == "sum") return need(1), attrs.axis ? sum(in[0], *attrs.axis) : sum(in[0]);
  if (op == "softmax") return need(1), softmax(in[0]);
  if (op == "log_softmax") return need(1), log_softmax(in[0]);
  if (op == "cross_entropy") return need(1), cross_entropy(in[0], attrs.labels);
  if (op == "l2_norm_sq") return need(1), l2_norm_sq(in[0]);
  if (op == "max") return need(1), max(in[0], axis());
  if (op == "min") return need(1), min(in[0], axis());
  if (op == "clip") return need(1), clip(in[0], attrs.lo, attrs.hi);
  if (op == "concat") return concat(in, axis());
  if (op == "slice") return need(1), slice(in[0], axis(), attrs.start, attrs.end);
  fail(ErrorCode::kInvalidArgument, "forward_op: unknown op '" + std::string(op) + "'");
}

}  // namespace fadelab::ops
