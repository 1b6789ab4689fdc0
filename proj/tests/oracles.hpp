#pragma once

// Independent reference implementations used as test oracles. Everything
// here is written as direct nested loops over the mathematical definition,
// sharing no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <vector>

#include "deepcaps/tensor.hpp"

namespace oracle {

using deepcaps::Shape;
using deepcaps::Tensor;

// Leading padding for "same" convolution; the odd element goes to the end.
inline std::size_t same_pad_before(std::size_t in, std::size_t k, std::size_t s) {
  const std::size_t out = (in + s - 1) / s;
  const std::size_t needed = (out - 1) * s + k;
  return needed > in ? (needed - in) / 2 : 0;
}

inline std::size_t out_extent(std::size_t in, std::size_t k, std::size_t s, bool same) {
  return same ? (in + s - 1) / s : (in - k) / s + 1;
}

// x [N,H,W,Ci], k [kh,kw,Ci,Co]
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& k, std::size_t s, bool same) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1), Co = k.dim(3);
  const std::size_t Ho = out_extent(H, kh, s, same), Wo = out_extent(W, kw, s, same);
  const long ph = same ? static_cast<long>(same_pad_before(H, kh, s)) : 0;
  const long pw = same ? static_cast<long>(same_pad_before(W, kw, s)) : 0;
  Tensor<double> y(Shape{N, Ho, Wo, Co});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t co = 0; co < Co; ++co) {
          double acc = 0;
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long iy = static_cast<long>(oy * s + dy) - ph;
              const long ix = static_cast<long>(ox * s + dx) - pw;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                acc += x.at({n, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), ci}) *
                       k.at({dy, dx, ci, co});
              }
            }
          y.at({n, oy, ox, co}) = acc;
        }
  return y;
}

// x [N,D,H,W,Ci], k [kd,kh,kw,Ci,Co]
inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& k, std::size_t sd, std::size_t sh,
                             std::size_t sw, bool same) {
  const std::size_t N = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3), Ci = x.dim(4);
  const std::size_t kd = k.dim(0), kh = k.dim(1), kw = k.dim(2), Co = k.dim(4);
  const std::size_t Do = out_extent(D, kd, sd, same), Ho = out_extent(H, kh, sh, same),
                    Wo = out_extent(W, kw, sw, same);
  const long pd = same ? static_cast<long>(same_pad_before(D, kd, sd)) : 0;
  const long ph = same ? static_cast<long>(same_pad_before(H, kh, sh)) : 0;
  const long pw = same ? static_cast<long>(same_pad_before(W, kw, sw)) : 0;
  Tensor<double> y(Shape{N, Do, Ho, Wo, Co});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t od = 0; od < Do; ++od)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox)
          for (std::size_t co = 0; co < Co; ++co) {
            double acc = 0;
            for (std::size_t a = 0; a < kd; ++a)
              for (std::size_t dy = 0; dy < kh; ++dy)
                for (std::size_t dx = 0; dx < kw; ++dx) {
                  const long id = static_cast<long>(od * sd + a) - pd;
                  const long iy = static_cast<long>(oy * sh + dy) - ph;
                  const long ix = static_cast<long>(ox * sw + dx) - pw;
                  if (id < 0 || iy < 0 || ix < 0 || id >= static_cast<long>(D) || iy >= static_cast<long>(H) ||
                      ix >= static_cast<long>(W)) {
                    continue;
                  }
                  for (std::size_t ci = 0; ci < Ci; ++ci) {
                    acc += x.at({n, static_cast<std::size_t>(id), static_cast<std::size_t>(iy),
                                 static_cast<std::size_t>(ix), ci}) *
                           k.at({a, dy, dx, ci, co});
                  }
                }
            y.at({n, od, oy, ox, co}) = acc;
          }
  return y;
}

// Each vote is the explicit weighted sum over the kh x kw group of child
// capsules of type i around the output location:
//   vote[b,y,x,i,j,:] = sum_{dy,dx,a} W[a,dy,dx,0,j*D+:] * caps[b, y*s+dy-p, x*s+dx-p, i, a]
// caps [N,H,W,n,d], W [d,kh,kw,1,m*D] -> [N,H',W',n,m,D]
inline Tensor<double> votes(const Tensor<double>& caps, const Tensor<double>& w, std::size_t s, std::size_t m,
                            std::size_t D) {
  const std::size_t N = caps.dim(0), H = caps.dim(1), W = caps.dim(2), n = caps.dim(3), d = caps.dim(4);
  const std::size_t kh = w.dim(1), kw = w.dim(2);
  const std::size_t Ho = (H + s - 1) / s, Wo = (W + s - 1) / s;
  const long ph = static_cast<long>(same_pad_before(H, kh, s));
  const long pw = static_cast<long>(same_pad_before(W, kw, s));
  Tensor<double> out(Shape{N, Ho, Wo, n, m, D});
  for (std::size_t b = 0; b < N; ++b)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j)
            for (std::size_t e = 0; e < D; ++e) {
              double acc = 0;
              for (std::size_t dy = 0; dy < kh; ++dy)
                for (std::size_t dx = 0; dx < kw; ++dx) {
                  const long iy = static_cast<long>(y * s + dy) - ph;
                  const long ix = static_cast<long>(x * s + dx) - pw;
                  if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                  for (std::size_t a = 0; a < d; ++a) {
                    acc += w.at({a, dy, dx, 0, j * D + e}) *
                           caps.at({b, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), i, a});
                  }
                }
              out.at({b, y, x, i, j, e}) = acc;
            }
  return out;
}

// Scatter form of the transposed convolution. x [N,H,W,Ci], k [kh,kw,Co,Ci].
inline Tensor<double> conv_transpose2d(const Tensor<double>& x, const Tensor<double>& k, std::size_t s, bool same) {
  const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), Ci = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1), Co = k.dim(2);
  const std::size_t Ho = same ? H * s : (H - 1) * s + kh, Wo = same ? W * s : (W - 1) * s + kw;
  const long ph = same ? static_cast<long>(same_pad_before(Ho, kh, s)) : 0;
  const long pw = same ? static_cast<long>(same_pad_before(Wo, kw, s)) : 0;
  Tensor<double> y(Shape{N, Ho, Wo, Co});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t iy = 0; iy < H; ++iy)
      for (std::size_t ix = 0; ix < W; ++ix)
        for (std::size_t dy = 0; dy < kh; ++dy)
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const long oy = static_cast<long>(iy * s + dy) - ph;
            const long ox = static_cast<long>(ix * s + dx) - pw;
            if (oy < 0 || ox < 0 || oy >= static_cast<long>(Ho) || ox >= static_cast<long>(Wo)) continue;
            for (std::size_t co = 0; co < Co; ++co)
              for (std::size_t ci = 0; ci < Ci; ++ci) {
                y.at({n, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox), co}) +=
                    x.at({n, iy, ix, ci}) * k.at({dy, dx, co, ci});
              }
          }
  return y;
}

inline std::vector<double> squash_vec(const std::vector<double>& s) {
  double n2 = 0;
  for (double v : s) n2 += v * v;
  std::vector<double> out(s.size(), 0.0);
  if (n2 == 0) return out;
  const double f = n2 / (1 + n2) / std::sqrt(n2);
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = f * s[i];
  return out;
}

// Straight-line transcription of routing by agreement for a single sample.
// u[i][j][:] is the vote of child i for parent j.
//   b = 0
//   repeat r times:
//     c_i = softmax_j(b_i)
//     s_j = sum_i c_ij u_ij ; v_j = squash(s_j)
//     if not last: b_ij += <v_j, u_ij>
inline std::vector<std::vector<double>> route(const std::vector<std::vector<std::vector<double>>>& u, int r,
                                              bool softmax_over_children = false) {
  const std::size_t K = u.size(), M = u[0].size(), D = u[0][0].size();
  std::vector<std::vector<double>> b(K, std::vector<double>(M, 0.0));
  std::vector<std::vector<double>> v(M, std::vector<double>(D, 0.0));
  for (int it = 0; it < r; ++it) {
    std::vector<std::vector<double>> c(K, std::vector<double>(M, 0.0));
    if (!softmax_over_children) {
      for (std::size_t i = 0; i < K; ++i) {
        double mx = b[i][0];
        for (std::size_t j = 1; j < M; ++j) mx = std::max(mx, b[i][j]);
        double z = 0;
        for (std::size_t j = 0; j < M; ++j) z += std::exp(b[i][j] - mx);
        for (std::size_t j = 0; j < M; ++j) c[i][j] = std::exp(b[i][j] - mx) / z;
      }
    } else {
      for (std::size_t j = 0; j < M; ++j) {
        double mx = b[0][j];
        for (std::size_t i = 1; i < K; ++i) mx = std::max(mx, b[i][j]);
        double z = 0;
        for (std::size_t i = 0; i < K; ++i) z += std::exp(b[i][j] - mx);
        for (std::size_t i = 0; i < K; ++i) c[i][j] = std::exp(b[i][j] - mx) / z;
      }
    }
    for (std::size_t j = 0; j < M; ++j) {
      std::vector<double> s(D, 0.0);
      for (std::size_t i = 0; i < K; ++i)
        for (std::size_t e = 0; e < D; ++e) s[e] += c[i][j] * u[i][j][e];
      v[j] = squash_vec(s);
    }
    if (it + 1 < r) {
      for (std::size_t i = 0; i < K; ++i)
        for (std::size_t j = 0; j < M; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < D; ++e) dot += v[j][e] * u[i][j][e];
          b[i][j] += dot;
        }
    }
  }
  return v;
}

}  // namespace oracle
