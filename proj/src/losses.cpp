#include "deepcaps/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "deepcaps/ops.hpp"

namespace deepcaps {

void MarginParams::validate() const {
  if (!(0.0 < m_minus && m_minus < m_plus && m_plus < 1.0)) {
    throw ConfigError("margin params: need 0 < m_minus < m_plus < 1");
  }
  if (!(lambda_down > 0.0 && lambda_down <= 1.0)) throw ConfigError("margin params: lambda_down must be in (0,1]");
  if (!(recon_weight >= 0.0)) throw ConfigError("margin params: recon_weight must be >= 0");
}

template <typename T>
DTensor<T> margin_loss(const DTensor<T>& class_norms, const Tensor<T>& labels, const MarginParams& params) {
  const Shape& s = class_norms.shape();
  if (s.rank() != 2 || labels.shape() != s) {
    throw ShapeError("margin_loss: norms " + s.str() + " and labels " + labels.shape().str() + " must both be [N,C]");
  }
  const std::size_t N = s[0], C = s[1];
  for (std::size_t n = 0; n < N; ++n) {
    int ones = 0;
    for (std::size_t c = 0; c < C; ++c) {
      const T t = labels[n * C + c];
      if (t == T(1)) {
        ++ones;
      } else if (t != T(0)) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) throw ValueError("margin_loss: label row " + std::to_string(n) + " is not one-hot");
  }
  const T mp = static_cast<T>(params.m_plus), mm = static_cast<T>(params.m_minus),
          lam = static_cast<T>(params.lambda_down);
  const Tensor<T>& v = class_norms.value();
  T total = 0;
  for (std::size_t i = 0; i < N * C; ++i) {
    const T present = std::max(T(0), mp - v[i]);
    const T absent = std::max(T(0), v[i] - mm);
    total += labels[i] * present * present + lam * (T(1) - labels[i]) * absent * absent;
  }
  total /= static_cast<T>(N);
  return detail::finish(Tensor<T>(Shape{1}, total), detail::should_record({&class_norms}),
                        [class_norms, labels, mp, mm, lam, N](const Tensor<T>& g) {
                          Tensor<T>& gx = detail::grad_of(class_norms);
                          const Tensor<T>& v = class_norms.value();
                          const T f = g[0] / static_cast<T>(N);
                          for (std::size_t i = 0; i < v.numel(); ++i) {
                            const T present = std::max(T(0), mp - v[i]);
                            const T absent = std::max(T(0), v[i] - mm);
                            gx[i] += f * (-T(2) * labels[i] * present + T(2) * lam * (T(1) - labels[i]) * absent);
                          }
                        });
}

template <typename T>
DTensor<T> reconstruction_loss(const DTensor<T>& recon, const Tensor<T>& target) {
  if (recon.shape() != target.shape()) {
    throw ShapeError("reconstruction_loss: shape mismatch " + recon.shape().str() + " vs " + target.shape().str());
  }
  const std::size_t N = recon.shape()[0];
  const Tensor<T>& r = recon.value();
  T total = 0;
  for (std::size_t i = 0; i < r.numel(); ++i) {
    const T d = r[i] - target[i];
    total += d * d;
  }
  total /= static_cast<T>(N);
  return detail::finish(Tensor<T>(Shape{1}, total), detail::should_record({&recon}),
                        [recon, target, N](const Tensor<T>& g) {
                          Tensor<T>& gr = detail::grad_of(recon);
                          const Tensor<T>& r = recon.value();
                          const T f = T(2) * g[0] / static_cast<T>(N);
                          for (std::size_t i = 0; i < r.numel(); ++i) gr[i] += f * (r[i] - target[i]);
                        });
}

template <typename T>
LossReport<T> total_loss(const DTensor<T>& class_norms, const Tensor<T>& labels, const DTensor<T>& recon,
                         const Tensor<T>& target, const MarginParams& params) {
  LossReport<T> report;
  DTensor<T> margin = margin_loss(class_norms, labels, params);
  report.margin_term = margin.value()[0];
  report.recon_weight = static_cast<T>(params.recon_weight);
  report.class_norms = class_norms.value();
  if (recon.defined()) {
    DTensor<T> rl = reconstruction_loss(recon, target);
    report.recon_term = rl.value()[0];
    report.total = params.recon_weight == 0.0 ? margin : add(margin, scale(rl, report.recon_weight));
  } else {
    report.total = margin;
  }
  return report;
}

template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor<T> out(Shape{labels.size(), classes});
  for (std::size_t n = 0; n < labels.size(); ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= classes) {
      throw ValueError("one_hot: label " + std::to_string(labels[n]) + " outside [0," + std::to_string(classes) + ")");
    }
    out[n * classes + static_cast<std::size_t>(labels[n])] = T(1);
  }
  return out;
}

#define DEEPCAPS_INSTANTIATE_LOSSES(T)                                                                      \
  template DTensor<T> margin_loss(const DTensor<T>&, const Tensor<T>&, const MarginParams&);                \
  template DTensor<T> reconstruction_loss(const DTensor<T>&, const Tensor<T>&);                             \
  template LossReport<T> total_loss(const DTensor<T>&, const Tensor<T>&, const DTensor<T>&, const Tensor<T>&, \
                                    const MarginParams&);                                                   \
  template Tensor<T> one_hot(const std::vector<int>&, std::size_t);

DEEPCAPS_INSTANTIATE_LOSSES(float)
DEEPCAPS_INSTANTIATE_LOSSES(double)

}  // namespace deepcaps
