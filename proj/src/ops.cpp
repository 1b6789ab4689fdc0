#include "deepcaps/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gemm.hpp"

namespace deepcaps {

using detail::accumulate;
using detail::finish;
using detail::grad_of;
using detail::should_record;
using detail::wants;

namespace {

void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                     s.str());
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  return {outer, s[axis], s.stride(axis)};
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
DTensor<T> add(const DTensor<T>& a, const DTensor<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return finish(std::move(out), should_record({&a, &b}), [a, b](const Tensor<T>& g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

template <typename T>
DTensor<T> sub(const DTensor<T>& a, const DTensor<T>& b) {
  require_same_shape("sub", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return finish(std::move(out), should_record({&a, &b}), [a, b](const Tensor<T>& g) {
    accumulate(a, g);
    if (wants(b)) {
      Tensor<T>& gb = grad_of(b);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
DTensor<T> mul(const DTensor<T>& a, const DTensor<T>& b) {
  require_same_shape("mul", a.shape(), b.shape());
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return finish(std::move(out), should_record({&a, &b}), [a, b](const Tensor<T>& g) {
    if (wants(a)) {
      Tensor<T>& ga = grad_of(a);
      const Tensor<T>& bv = b.value();
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (wants(b)) {
      Tensor<T>& gb = grad_of(b);
      const Tensor<T>& av = a.value();
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
DTensor<T> scale(const DTensor<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return finish(std::move(out), should_record({&a}), [a, factor](const Tensor<T>& g) {
    Tensor<T>& ga = grad_of(a);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
DTensor<T> relu(const DTensor<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return finish(std::move(out), should_record({&x}), [x](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    const Tensor<T>& xv = x.value();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (xv[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
DTensor<T> sigmoid(const DTensor<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) {
    // Split on sign so exp never overflows.
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  const bool record = should_record({&x});
  Tensor<T> y = record ? out : Tensor<T>();
  return finish(std::move(out), record, [x, y = std::move(y)](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
DTensor<T> add_bias(const DTensor<T>& x, const DTensor<T>& bias) {
  if (bias.shape().rank() != 1 || x.shape().rank() == 0 ||
      bias.dim(0) != x.dim(x.shape().rank() - 1)) {
    throw ShapeError("add_bias: bias " + bias.shape().str() + " does not match last axis of " +
                     x.shape().str());
  }
  const std::size_t c = bias.dim(0);
  Tensor<T> out = x.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % c];
  return finish(std::move(out), should_record({&x, &bias}), [x, bias, c](const Tensor<T>& g) {
    accumulate(x, g);
    if (wants(bias)) {
      Tensor<T>& gb = grad_of(bias);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % c] += g[i];
    }
  });
}

template <typename T>
DTensor<T> detach(const DTensor<T>& x) {
  return DTensor<T>(x.value(), false);
}

// ---- shape -----------------------------------------------------------------

template <typename T>
DTensor<T> reshape(const DTensor<T>& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    throw ShapeError("reshape: cannot view " + x.shape().str() + " as " + shape.str());
  }
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return finish(std::move(out), should_record({&x}), [x](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
  });
}

namespace {

// Calls fn(src_offset, dst_offset) for every element of a permuted copy.
template <typename Fn>
void for_each_permuted(const Shape& in, const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t rank = in.rank();
  std::vector<std::size_t> out_dims(rank), src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_dims[i] = in[perm[i]];
    src_stride[i] = in.stride(perm[i]);
  }
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  const std::size_t n = in.numel();
  for (std::size_t dst = 0; dst < n; ++dst) {
    fn(src, dst);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < out_dims[ax]) break;
      src -= src_stride[ax] * out_dims[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

template <typename T>
DTensor<T> transpose(const DTensor<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.rank()) {
    throw ShapeError("transpose: permutation rank " + std::to_string(perm.size()) +
                     " for shape " + in.str());
  }
  std::vector<bool> seen(perm.size(), false);
  std::vector<std::size_t> out_dims(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= perm.size() || seen[perm[i]]) throw ShapeError("transpose: invalid permutation");
    seen[perm[i]] = true;
    out_dims[i] = in[perm[i]];
  }
  Tensor<T> out{Shape(out_dims)};
  const Tensor<T>& xv = x.value();
  for_each_permuted(in, perm, [&](std::size_t s, std::size_t d) { out[d] = xv[s]; });
  return finish(std::move(out), should_record({&x}), [x, perm](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for_each_permuted(x.shape(), perm, [&](std::size_t s, std::size_t d) { gx[s] += g[d]; });
  });
}

template <typename T>
DTensor<T> slice(const DTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit sp = split_at(x.shape(), axis, "slice");
  if (begin >= end || end > sp.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + x.shape().str());
  }
  std::vector<std::size_t> dims = x.shape().dims();
  dims[axis] = end - begin;
  Tensor<T> out{Shape(dims)};
  const std::size_t w = (end - begin) * sp.inner;
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xv.ptr() + (o * sp.len + begin) * sp.inner, w, out.ptr() + o * w);
  }
  return finish(std::move(out), should_record({&x}), [x, sp, begin, w](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      T* dst = gx.ptr() + (o * sp.len + begin) * sp.inner;
      const T* src = g.ptr() + o * w;
      for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
DTensor<T> concat(const std::vector<DTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  split_at(first, axis, "concat");
  std::vector<std::size_t> dims = first.dims();
  dims[axis] = 0;
  for (const auto& p : parts) {
    if (p.shape().rank() != first.rank()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < first.rank(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw ShapeError("concat: axis " + std::to_string(i) + " mismatch " + p.shape().str() +
                         " vs " + first.str());
      }
    }
    dims[axis] += p.dim(axis);
  }
  Tensor<T> out{Shape(dims)};
  const AxisSplit osp = split_at(out.shape(), axis, "concat");
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t w = p.dim(axis) * osp.inner;
    for (std::size_t o = 0; o < osp.outer; ++o) {
      std::copy_n(p.value().ptr() + o * w, w, out.ptr() + o * osp.len * osp.inner + offset * osp.inner);
    }
    offset += p.dim(axis);
  }
  bool record = false;
  if (Tape<T>::active()) {
    for (const auto& p : parts) record = record || wants(p);
  }
  return finish(std::move(out), record, [parts, axis, osp, offsets](const Tensor<T>& g) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!wants(parts[k])) continue;
      Tensor<T>& gp = grad_of(parts[k]);
      const std::size_t w = parts[k].dim(axis) * osp.inner;
      for (std::size_t o = 0; o < osp.outer; ++o) {
        const T* src = g.ptr() + o * osp.len * osp.inner + offsets[k] * osp.inner;
        T* dst = gp.ptr() + o * w;
        for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
DTensor<T> expand(const DTensor<T>& x, std::size_t axis, std::size_t count) {
  const Shape& in = x.shape();
  if (axis > in.rank()) throw ShapeError("expand: axis out of range for " + in.str());
  std::vector<std::size_t> dims = in.dims();
  dims.insert(dims.begin() + static_cast<std::ptrdiff_t>(axis), count);
  Tensor<T> out{Shape(dims)};
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
  const std::size_t inner = in.numel() / outer;
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < count; ++r) {
      std::copy_n(xv.ptr() + o * inner, inner, out.ptr() + (o * count + r) * inner);
    }
  }
  return finish(std::move(out), should_record({&x}), [x, outer, inner, count](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t r = 0; r < count; ++r) {
        const T* src = g.ptr() + (o * count + r) * inner;
        T* dst = gx.ptr() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
DTensor<T> sum(const DTensor<T>& x) {
  T total = 0;
  for (T v : x.value().data()) total += v;
  return finish(Tensor<T>(Shape{1}, total), should_record({&x}), [x](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (auto& v : gx.data()) v += g[0];
  });
}

template <typename T>
DTensor<T> mean(const DTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
DTensor<T> sum_axis(const DTensor<T>& x, std::size_t axis) {
  const AxisSplit sp = split_at(x.shape(), axis, "sum_axis");
  std::vector<std::size_t> dims = x.shape().dims();
  dims.erase(dims.begin() + static_cast<std::ptrdiff_t>(axis));
  if (dims.empty()) dims.push_back(1);
  Tensor<T> out{Shape(dims)};
  const Tensor<T>& xv = x.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    T* dst = out.ptr() + o * sp.inner;
    for (std::size_t l = 0; l < sp.len; ++l) {
      const T* src = xv.ptr() + (o * sp.len + l) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  return finish(std::move(out), should_record({&x}), [x, sp](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const T* src = g.ptr() + o * sp.inner;
      for (std::size_t l = 0; l < sp.len; ++l) {
        T* dst = gx.ptr() + (o * sp.len + l) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
DTensor<T> norm_last(const DTensor<T>& x) {
  const Shape& in = x.shape();
  if (in.rank() < 2) throw ShapeError("norm_last: need rank >= 2, got " + in.str());
  const std::size_t d = in[in.rank() - 1];
  const std::size_t rows = in.numel() / d;
  std::vector<std::size_t> dims(in.dims().begin(), in.dims().end() - 1);
  Tensor<T> out{Shape(dims)};
  const Tensor<T>& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t k = 0; k < d; ++k) acc += xv[r * d + k] * xv[r * d + k];
    out[r] = std::sqrt(acc);
  }
  const bool record = should_record({&x});
  Tensor<T> norms = record ? out : Tensor<T>();
  return finish(std::move(out), record, [x, d, rows, norms = std::move(norms)](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    const Tensor<T>& xv = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
      if (norms[r] <= T(0)) continue;
      const T f = g[r] / norms[r];
      for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += f * xv[r * d + k];
    }
  });
}

// ---- linear algebra / nn ---------------------------------------------------

template <typename T>
DTensor<T> matmul(const DTensor<T>& a, const DTensor<T>& b) {
  if (a.shape().rank() != 2 || b.shape().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + a.shape().str() + " x " + b.shape().str());
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out(Shape{m, n});
  detail::gemm_row_stable<T>(m, n, k, a.value().ptr(), b.value().ptr(), out.ptr());
  return finish(std::move(out), should_record({&a, &b}), [a, b, m, n, k](const Tensor<T>& g) {
    if (wants(a)) detail::gemm<T>(false, true, m, k, n, g.ptr(), b.value().ptr(), grad_of(a).ptr(), true);
    if (wants(b)) detail::gemm<T>(true, false, k, n, m, a.value().ptr(), g.ptr(), grad_of(b).ptr(), true);
  });
}

template <typename T>
Tensor<T> softmax_values(const Tensor<T>& x, std::size_t axis) {
  const AxisSplit sp = split_at(x.shape(), axis, "softmax_axis");
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.len * sp.inner + i;
      T mx = x[base];
      for (std::size_t l = 1; l < sp.len; ++l) mx = std::max(mx, x[base + l * sp.inner]);
      double total = 0;
      for (std::size_t l = 0; l < sp.len; ++l) {
        const T e = std::exp(x[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < sp.len; ++l) {
        out[base + l * sp.inner] = static_cast<T>(out[base + l * sp.inner] / total);
      }
    }
  }
  return out;
}

template <typename T>
DTensor<T> softmax_axis(const DTensor<T>& x, std::size_t axis) {
  Tensor<T> out = softmax_values(x.value(), axis);
  const AxisSplit sp = split_at(x.shape(), axis, "softmax_axis");
  const bool record = should_record({&x});
  Tensor<T> y = record ? out : Tensor<T>();
  return finish(std::move(out), record, [x, sp, y = std::move(y)](const Tensor<T>& g) {
    Tensor<T>& gx = grad_of(x);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.len * sp.inner + i;
        T dot = 0;
        for (std::size_t l = 0; l < sp.len; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
        for (std::size_t l = 0; l < sp.len; ++l) {
          const std::size_t at = base + l * sp.inner;
          gx[at] += y[at] * (g[at] - dot);
        }
      }
    }
  });
}

template <typename T>
DTensor<T> batchnorm(const DTensor<T>& x, const DTensor<T>& gamma, const DTensor<T>& beta,
                     BatchNormStats<T>& stats, Mode mode) {
  const Shape& in = x.shape();
  if (in.rank() < 2) throw ShapeError("batchnorm: need rank >= 2, got " + in.str());
  const std::size_t c = in[in.rank() - 1];
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batchnorm: gamma/beta length must equal channel extent " + std::to_string(c));
  }
  if (stats.running_mean.numel() != c || stats.running_var.numel() != c) {
    throw ShapeError("batchnorm: running statistics length must equal channel extent " +
                     std::to_string(c));
  }
  const std::size_t count = in.numel() / c;
  if (count == 0) throw ValueError("batchnorm: empty batch");
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();

  Tensor<T> mu(Shape{c}), inv_std(Shape{c});
  if (mode == Mode::Train) {
    Tensor<T> var(Shape{c});
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) mu[ch] += xv[r * c + ch];
    for (auto& m : mu.data()) m /= static_cast<T>(count);
    for (std::size_t r = 0; r < count; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T dv = xv[r * c + ch] - mu[ch];
        var[ch] += dv * dv;
      }
    for (auto& v : var.data()) v /= static_cast<T>(count);
    const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
    for (std::size_t ch = 0; ch < c; ++ch) {
      inv_std[ch] = T(1) / std::sqrt(var[ch] + stats.eps);
      stats.running_mean[ch] = stats.momentum * stats.running_mean[ch] + (T(1) - stats.momentum) * mu[ch];
      stats.running_var[ch] =
          stats.momentum * stats.running_var[ch] + (T(1) - stats.momentum) * var[ch] * unbias;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(stats.running_var[ch] + stats.eps);
    }
  }

  Tensor<T> xhat(in);
  Tensor<T> out(in);
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = r * c + ch;
      xhat[i] = (xv[i] - mu[ch]) * inv_std[ch];
      out[i] = gv[ch] * xhat[i] + bv[ch];
    }
  }
  const bool train = mode == Mode::Train;
  return finish(std::move(out), should_record({&x, &gamma, &beta}),
                [x, gamma, beta, xhat = std::move(xhat), inv_std, c, count, train](const Tensor<T>& g) {
                  Tensor<T> sum_g(Shape{c}), sum_gx(Shape{c});
                  for (std::size_t r = 0; r < count; ++r) {
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      sum_g[ch] += g[r * c + ch];
                      sum_gx[ch] += g[r * c + ch] * xhat[r * c + ch];
                    }
                  }
                  if (wants(beta)) {
                    Tensor<T>& gb = grad_of(beta);
                    for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
                  }
                  if (wants(gamma)) {
                    Tensor<T>& gg = grad_of(gamma);
                    for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
                  }
                  if (wants(x)) {
                    Tensor<T>& gx = grad_of(x);
                    const Tensor<T>& gv = gamma.value();
                    const T m = static_cast<T>(count);
                    for (std::size_t r = 0; r < count; ++r) {
                      for (std::size_t ch = 0; ch < c; ++ch) {
                        const std::size_t i = r * c + ch;
                        if (train) {
                          gx[i] += gv[ch] * inv_std[ch] / m *
                                   (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                        } else {
                          gx[i] += gv[ch] * inv_std[ch] * g[i];
                        }
                      }
                    }
                  }
                });
}

#define DEEPCAPS_INSTANTIATE_OPS(T)                                                             \
  template DTensor<T> add(const DTensor<T>&, const DTensor<T>&);                                \
  template DTensor<T> sub(const DTensor<T>&, const DTensor<T>&);                                \
  template DTensor<T> mul(const DTensor<T>&, const DTensor<T>&);                                \
  template DTensor<T> scale(const DTensor<T>&, T);                                              \
  template DTensor<T> relu(const DTensor<T>&);                                                  \
  template DTensor<T> sigmoid(const DTensor<T>&);                                               \
  template DTensor<T> add_bias(const DTensor<T>&, const DTensor<T>&);                           \
  template DTensor<T> detach(const DTensor<T>&);                                                \
  template DTensor<T> reshape(const DTensor<T>&, Shape);                                        \
  template DTensor<T> transpose(const DTensor<T>&, const std::vector<std::size_t>&);            \
  template DTensor<T> slice(const DTensor<T>&, std::size_t, std::size_t, std::size_t);          \
  template DTensor<T> concat(const std::vector<DTensor<T>>&, std::size_t);                      \
  template DTensor<T> expand(const DTensor<T>&, std::size_t, std::size_t);                      \
  template DTensor<T> sum(const DTensor<T>&);                                                   \
  template DTensor<T> mean(const DTensor<T>&);                                                  \
  template DTensor<T> sum_axis(const DTensor<T>&, std::size_t);                                 \
  template DTensor<T> norm_last(const DTensor<T>&);                                             \
  template DTensor<T> matmul(const DTensor<T>&, const DTensor<T>&);                             \
  template Tensor<T> softmax_values(const Tensor<T>&, std::size_t);                             \
  template DTensor<T> softmax_axis(const DTensor<T>&, std::size_t);                             \
  template DTensor<T> batchnorm(const DTensor<T>&, const DTensor<T>&, const DTensor<T>&,        \
                                BatchNormStats<T>&, Mode);

DEEPCAPS_INSTANTIATE_OPS(float)
DEEPCAPS_INSTANTIATE_OPS(double)

}  // namespace deepcaps
