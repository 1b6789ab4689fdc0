#include <algorithm>
#include <array>
#include <string>

#include "deepcaps/ops.hpp"
#include "gemm.hpp"

namespace deepcaps {

using detail::finish;
using detail::grad_of;
using detail::should_record;
using detail::wants;

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding, std::size_t axis) {
  if (stride == 0) throw ShapeError("convolution: stride on axis " + std::to_string(axis) + " must be >= 1");
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  if (kernel > in) {
    throw ShapeError("convolution: kernel extent " + std::to_string(kernel) + " exceeds input extent " +
                     std::to_string(in) + " on spatial axis " + std::to_string(axis));
  }
  return (in - kernel) / stride + 1;
}

namespace {

// Geometry of a convolution over three spatial axes (depth, height, width),
// channels-last. 2-D convolutions use depth 1.
struct ConvGeometry {
  std::size_t batch = 1;
  std::array<std::size_t, 3> in{}, kernel{}, stride{}, pad{}, out{};
  std::size_t cin = 1, cout = 1;

  std::size_t out_positions() const { return out[0] * out[1] * out[2]; }
  std::size_t in_positions() const { return in[0] * in[1] * in[2]; }
  std::size_t patch() const { return kernel[0] * kernel[1] * kernel[2] * cin; }
  bool is_pointwise() const {
    return kernel == std::array<std::size_t, 3>{1, 1, 1} && stride == std::array<std::size_t, 3>{1, 1, 1};
  }
};

ConvGeometry make_geometry(std::size_t batch, std::array<std::size_t, 3> in, std::array<std::size_t, 3> kernel,
                           std::array<std::size_t, 3> stride, Padding padding, std::size_t cin,
                           std::size_t cout, std::size_t first_axis) {
  ConvGeometry g;
  g.batch = batch;
  g.in = in;
  g.kernel = kernel;
  g.stride = stride;
  g.cin = cin;
  g.cout = cout;
  for (std::size_t a = 0; a < 3; ++a) {
    g.out[a] = conv_output_extent(in[a], kernel[a], stride[a], padding, first_axis + a);
    if (padding == Padding::Same) {
      const std::size_t needed = (g.out[a] - 1) * stride[a] + kernel[a];
      const std::size_t total = needed > in[a] ? needed - in[a] : 0;
      g.pad[a] = total / 2;  // odd element lands on the trailing edge
    }
  }
  return g;
}

// Gathers patches of samples [n0, n1) into col[(rows), patch].
template <typename T>
void im2col(const ConvGeometry& g, const T* input, std::size_t n0, std::size_t n1, T* col) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t n = n0; n < n1; ++n) {
    const T* img = input + n * g.in_positions() * g.cin;
    for (std::size_t od = 0; od < g.out[0]; ++od)
      for (std::size_t oh = 0; oh < g.out[1]; ++oh)
        for (std::size_t ow = 0; ow < g.out[2]; ++ow, ++row) {
          T* dst = col + row * patch;
          for (std::size_t kd = 0; kd < g.kernel[0]; ++kd) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * g.stride[0] + kd) -
                                      static_cast<std::ptrdiff_t>(g.pad[0]);
            for (std::size_t kh = 0; kh < g.kernel[1]; ++kh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + kh) -
                                        static_cast<std::ptrdiff_t>(g.pad[1]);
              for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, dst += g.cin) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride[2] + kw) -
                                          static_cast<std::ptrdiff_t>(g.pad[2]);
                if (id < 0 || ih < 0 || iw < 0 || id >= static_cast<std::ptrdiff_t>(g.in[0]) ||
                    ih >= static_cast<std::ptrdiff_t>(g.in[1]) || iw >= static_cast<std::ptrdiff_t>(g.in[2])) {
                  std::fill_n(dst, g.cin, T(0));
                } else {
                  const std::size_t pos = (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) *
                                              g.in[2] +
                                          static_cast<std::size_t>(iw);
                  std::copy_n(img + pos * g.cin, g.cin, dst);
                }
              }
            }
          }
        }
  }
}

// Scatter-adds col rows back onto the input gradient of samples [n0, n1).
template <typename T>
void col2im(const ConvGeometry& g, const T* col, std::size_t n0, std::size_t n1, T* grad_input) {
  const std::size_t patch = g.patch();
  std::size_t row = 0;
  for (std::size_t n = n0; n < n1; ++n) {
    T* img = grad_input + n * g.in_positions() * g.cin;
    for (std::size_t od = 0; od < g.out[0]; ++od)
      for (std::size_t oh = 0; oh < g.out[1]; ++oh)
        for (std::size_t ow = 0; ow < g.out[2]; ++ow, ++row) {
          const T* src = col + row * patch;
          for (std::size_t kd = 0; kd < g.kernel[0]; ++kd) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od * g.stride[0] + kd) -
                                      static_cast<std::ptrdiff_t>(g.pad[0]);
            for (std::size_t kh = 0; kh < g.kernel[1]; ++kh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + kh) -
                                        static_cast<std::ptrdiff_t>(g.pad[1]);
              for (std::size_t kw = 0; kw < g.kernel[2]; ++kw, src += g.cin) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride[2] + kw) -
                                          static_cast<std::ptrdiff_t>(g.pad[2]);
                if (id < 0 || ih < 0 || iw < 0 || id >= static_cast<std::ptrdiff_t>(g.in[0]) ||
                    ih >= static_cast<std::ptrdiff_t>(g.in[1]) || iw >= static_cast<std::ptrdiff_t>(g.in[2])) {
                  continue;
                }
                const std::size_t pos =
                    (static_cast<std::size_t>(id) * g.in[1] + static_cast<std::size_t>(ih)) * g.in[2] +
                    static_cast<std::size_t>(iw);
                T* dst = img + pos * g.cin;
                for (std::size_t c = 0; c < g.cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
  }
}

// Samples per im2col chunk, bounding the scratch buffer to ~8M elements.
std::size_t chunk_samples(const ConvGeometry& g) {
  const std::size_t per_sample = std::max<std::size_t>(1, g.out_positions() * g.patch());
  return std::clamp<std::size_t>((std::size_t{1} << 23) / per_sample, 1, g.batch);
}

// out[N, out_pos, cout] = conv(input[N, in_pos, cin], kernel[patch, cout])
template <typename T>
void conv_forward(const ConvGeometry& g, const T* input, const T* kernel, T* out) {
  const std::size_t patch = g.patch();
  const std::size_t rows_per = g.out_positions();
  if (g.is_pointwise()) {
    detail::gemm<T>(false, false, g.batch * rows_per, g.cout, patch, input, kernel, out, false);
    return;
  }
  const std::size_t chunk = chunk_samples(g);
  std::vector<T> col(chunk * rows_per * patch);
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t n1 = std::min(g.batch, n0 + chunk);
    im2col(g, input, n0, n1, col.data());
    detail::gemm<T>(false, false, (n1 - n0) * rows_per, g.cout, patch, col.data(), kernel,
                    out + n0 * rows_per * g.cout, false);
  }
}

// grad_input += conv^T(grad_out, kernel)
template <typename T>
void conv_backward_input(const ConvGeometry& g, const T* grad_out, const T* kernel, T* grad_input) {
  const std::size_t patch = g.patch();
  const std::size_t rows_per = g.out_positions();
  if (g.is_pointwise()) {
    detail::gemm<T>(false, true, g.batch * rows_per, patch, g.cout, grad_out, kernel, grad_input, true);
    return;
  }
  const std::size_t chunk = chunk_samples(g);
  std::vector<T> col(chunk * rows_per * patch);
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t n1 = std::min(g.batch, n0 + chunk);
    detail::gemm<T>(false, true, (n1 - n0) * rows_per, patch, g.cout, grad_out + n0 * rows_per * g.cout,
                    kernel, col.data(), false);
    col2im(g, col.data(), n0, n1, grad_input);
  }
}

// grad_kernel += im2col(input)^T * grad_out
template <typename T>
void conv_backward_kernel(const ConvGeometry& g, const T* input, const T* grad_out, T* grad_kernel) {
  const std::size_t patch = g.patch();
  const std::size_t rows_per = g.out_positions();
  if (g.is_pointwise()) {
    detail::gemm<T>(true, false, patch, g.cout, g.batch * rows_per, input, grad_out, grad_kernel, true);
    return;
  }
  const std::size_t chunk = chunk_samples(g);
  std::vector<T> col(chunk * rows_per * patch);
  for (std::size_t n0 = 0; n0 < g.batch; n0 += chunk) {
    const std::size_t n1 = std::min(g.batch, n0 + chunk);
    im2col(g, input, n0, n1, col.data());
    detail::gemm<T>(true, false, patch, g.cout, (n1 - n0) * rows_per, col.data(),
                    grad_out + n0 * rows_per * g.cout, grad_kernel, true);
  }
}

template <typename T>
DTensor<T> conv_nd(const DTensor<T>& x, const DTensor<T>& kernel, const ConvGeometry& g,
                   const Shape& out_shape) {
  Tensor<T> out(out_shape);
  conv_forward(g, x.value().ptr(), kernel.value().ptr(), out.ptr());
  return finish(std::move(out), should_record({&x, &kernel}), [x, kernel, g](const Tensor<T>& go) {
    if (wants(kernel)) conv_backward_kernel(g, x.value().ptr(), go.ptr(), grad_of(kernel).ptr());
    if (wants(x)) conv_backward_input(g, go.ptr(), kernel.value().ptr(), grad_of(x).ptr());
  });
}

}  // namespace

template <typename T>
DTensor<T> conv2d(const DTensor<T>& x, const DTensor<T>& kernel, std::size_t stride, Padding padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.rank() != 4) throw ShapeError("conv2d: input must be [N,H,W,Cin], got " + xs.str());
  if (ks.rank() != 4) throw ShapeError("conv2d: kernel must be [kh,kw,Cin,Cout], got " + ks.str());
  if (ks[2] != xs[3]) {
    throw ShapeError("conv2d: channel axis mismatch, input Cin=" + std::to_string(xs[3]) +
                     " kernel Cin=" + std::to_string(ks[2]));
  }
  const ConvGeometry g = make_geometry(xs[0], {1, xs[1], xs[2]}, {1, ks[0], ks[1]}, {1, stride, stride},
                                       padding, xs[3], ks[3], 0);
  return conv_nd(x, kernel, g, Shape{xs[0], g.out[1], g.out[2], ks[3]});
}

template <typename T>
DTensor<T> conv3d(const DTensor<T>& x, const DTensor<T>& kernel, std::array<std::size_t, 3> strides,
                  Padding padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.rank() != 5) throw ShapeError("conv3d: input must be [N,D,H,W,Cin], got " + xs.str());
  if (ks.rank() != 5) throw ShapeError("conv3d: kernel must be [kd,kh,kw,Cin,Cout], got " + ks.str());
  if (ks[3] != xs[4]) {
    throw ShapeError("conv3d: channel axis mismatch, input Cin=" + std::to_string(xs[4]) +
                     " kernel Cin=" + std::to_string(ks[3]));
  }
  const ConvGeometry g =
      make_geometry(xs[0], {xs[1], xs[2], xs[3]}, {ks[0], ks[1], ks[2]}, strides, padding, xs[4], ks[4], 0);
  return conv_nd(x, kernel, g, Shape{xs[0], g.out[0], g.out[1], g.out[2], ks[4]});
}

template <typename T>
DTensor<T> conv_transpose2d(const DTensor<T>& x, const DTensor<T>& kernel, std::size_t stride,
                            Padding padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.rank() != 4) throw ShapeError("conv_transpose2d: input must be [N,H,W,Cin], got " + xs.str());
  if (ks.rank() != 4) throw ShapeError("conv_transpose2d: kernel must be [kh,kw,Cout,Cin], got " + ks.str());
  if (ks[3] != xs[3]) {
    throw ShapeError("conv_transpose2d: channel axis mismatch, input Cin=" + std::to_string(xs[3]) +
                     " kernel Cin=" + std::to_string(ks[3]));
  }
  if (stride == 0) throw ShapeError("conv_transpose2d: stride must be >= 1");
  std::array<std::size_t, 2> out_hw{};
  for (std::size_t a = 0; a < 2; ++a) {
    out_hw[a] = padding == Padding::Same ? xs[1 + a] * stride : (xs[1 + a] - 1) * stride + ks[a];
  }
  // Forward convolution mapping the (larger) output space back onto x.
  const ConvGeometry g = make_geometry(xs[0], {1, out_hw[0], out_hw[1]}, {1, ks[0], ks[1]},
                                       {1, stride, stride}, padding, ks[2], ks[3], 0);
  Tensor<T> out(Shape{xs[0], out_hw[0], out_hw[1], ks[2]});
  conv_backward_input(g, x.value().ptr(), kernel.value().ptr(), out.ptr());
  return finish(std::move(out), should_record({&x, &kernel}), [x, kernel, g](const Tensor<T>& go) {
    if (wants(kernel)) conv_backward_kernel(g, go.ptr(), x.value().ptr(), grad_of(kernel).ptr());
    if (wants(x)) {
      Tensor<T> gx(x.shape());
      conv_forward(g, go.ptr(), kernel.value().ptr(), gx.ptr());
      Tensor<T>& acc = grad_of(x);
      for (std::size_t i = 0; i < gx.numel(); ++i) acc[i] += gx[i];
    }
  });
}

template DTensor<float> conv2d(const DTensor<float>&, const DTensor<float>&, std::size_t, Padding);
template DTensor<double> conv2d(const DTensor<double>&, const DTensor<double>&, std::size_t, Padding);
template DTensor<float> conv3d(const DTensor<float>&, const DTensor<float>&, std::array<std::size_t, 3>, Padding);
template DTensor<double> conv3d(const DTensor<double>&, const DTensor<double>&, std::array<std::size_t, 3>,
                                Padding);
template DTensor<float> conv_transpose2d(const DTensor<float>&, const DTensor<float>&, std::size_t, Padding);
template DTensor<double> conv_transpose2d(const DTensor<double>&, const DTensor<double>&, std::size_t, Padding);

}  // namespace deepcaps
