#pragma once

#include <vector>

#include "deepcaps/autograd.hpp"

namespace deepcaps {

struct MarginParams {
  double m_plus = 0.9;
  double m_minus = 0.1;
  double lambda_down = 0.5;
  double recon_weight = 0.0005;

  // Throws ConfigError unless 0 < m_minus < m_plus < 1, lambda in (0,1],
  // recon_weight >= 0.
  void validate() const;
};

template <typename T>
struct LossReport {
  DTensor<T> total;  // differentiable
  T margin_term = 0;
  T recon_term = 0;
  T recon_weight = 0;
  Tensor<T> class_norms;  // [N, C]
};

// Mean over the batch of
//   sum_c T_c max(0, m+ - |v_c|)^2 + lambda (1 - T_c) max(0, |v_c| - m-)^2.
// `labels` must be one-hot rows.
template <typename T>
DTensor<T> margin_loss(const DTensor<T>& class_norms, const Tensor<T>& labels, const MarginParams& params);

// Per-sample sum of squared differences, mean over the batch.
template <typename T>
DTensor<T> reconstruction_loss(const DTensor<T>& recon, const Tensor<T>& target);

// total = margin + recon_weight * recon. `recon` may be undefined, in which
// case the reconstruction term is zero.
template <typename T>
LossReport<T> total_loss(const DTensor<T>& class_norms, const Tensor<T>& labels, const DTensor<T>& recon,
                         const Tensor<T>& target, const MarginParams& params);

// Builds a [N, C] one-hot matrix.
template <typename T>
Tensor<T> one_hot(const std::vector<int>& labels, std::size_t classes);

}  // namespace deepcaps
