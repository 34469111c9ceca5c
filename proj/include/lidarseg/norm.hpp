#pragma once

#include "lidarseg/core.hpp"

namespace lidarseg {

inline constexpr Real kNormEps = 1e-5;

// Per-row normalization over channels (layer norm) and per-channel
// normalization over rows (batch norm). Both use biased variance.

template <class Scalar>
struct LayerNormCache {
  MatrixX<Scalar> xhat;        // normalized pre-affine activations
  VectorX<Scalar> invstd;      // per row
};

template <class Scalar>
MatrixX<Scalar> layer_norm_forward(const MatrixX<Scalar>& x, const VectorX<Scalar>& gamma,
                                   const VectorX<Scalar>& beta, LayerNormCache<Scalar>* cache = nullptr) {
  const Eigen::Index n = x.rows(), c = x.cols();
  MatrixX<Scalar> y(n, c);
  MatrixX<Scalar> xhat(n, c);
  VectorX<Scalar> invstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mean = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mean).square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + Scalar(kNormEps));
    invstd[i] = is;
    xhat.row(i) = (x.row(i).array() - mean) * is;
    y.row(i) = xhat.row(i).cwiseProduct(gamma.transpose()) + beta.transpose();
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->invstd = std::move(invstd);
  }
  return y;
}

template <class Scalar>
void layer_norm_backward(const MatrixX<Scalar>& grad_y, const VectorX<Scalar>& gamma,
                         const LayerNormCache<Scalar>& cache, MatrixX<Scalar>& grad_x,
                         VectorX<Scalar>& grad_gamma, VectorX<Scalar>& grad_beta) {
  const Eigen::Index n = grad_y.rows(), c = grad_y.cols();
  grad_x.resize(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = grad_y.row(i).cwiseProduct(gamma.transpose());
    const Scalar s1 = dxhat.sum();
    const Scalar s2 = dxhat.cwiseProduct(cache.xhat.row(i)).sum();
    grad_x.row(i) = (cache.invstd[i] / static_cast<Scalar>(c)) *
                    (static_cast<Scalar>(c) * dxhat.array() - s1 - cache.xhat.row(i).array() * s2);
  }
  grad_gamma += grad_y.cwiseProduct(cache.xhat).colwise().sum().transpose();
  grad_beta += grad_y.colwise().sum().transpose();
}

template <class Scalar>
struct BatchNormCache {
  MatrixX<Scalar> xhat;
  VectorX<Scalar> invstd;      // per channel
  VectorX<Scalar> batch_mean;  // per channel, for running-stat updates
  VectorX<Scalar> batch_var;
};

template <class Scalar>
MatrixX<Scalar> batch_norm_forward_train(const MatrixX<Scalar>& x, const VectorX<Scalar>& gamma,
                                         const VectorX<Scalar>& beta, BatchNormCache<Scalar>* cache) {
  const Eigen::Index n = x.rows(), c = x.cols();
  require(n >= 1, "batch norm needs at least one row");
  VectorX<Scalar> mean = x.colwise().mean();
  VectorX<Scalar> var(c);
  for (Eigen::Index j = 0; j < c; ++j) {
    var[j] = (x.col(j).array() - mean[j]).square().mean();
  }
  VectorX<Scalar> invstd = (var.array() + Scalar(kNormEps)).rsqrt();
  MatrixX<Scalar> xhat = (x.rowwise() - mean.transpose()).array().rowwise() * invstd.transpose().array();
  MatrixX<Scalar> y = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->invstd = std::move(invstd);
    cache->batch_mean = std::move(mean);
    cache->batch_var = std::move(var);
  }
  return y;
}

template <class Scalar>
MatrixX<Scalar> batch_norm_forward_eval(const MatrixX<Scalar>& x, const VectorX<Scalar>& gamma,
                                        const VectorX<Scalar>& beta, const VectorX<Scalar>& running_mean,
                                        const VectorX<Scalar>& running_var) {
  VectorX<Scalar> invstd = (running_var.array() + Scalar(kNormEps)).rsqrt();
  MatrixX<Scalar> xhat =
      (x.rowwise() - running_mean.transpose()).array().rowwise() * invstd.transpose().array();
  return (xhat.array().rowwise() * gamma.transpose().array()).rowwise() + beta.transpose().array();
}

template <class Scalar>
void batch_norm_backward(const MatrixX<Scalar>& grad_y, const VectorX<Scalar>& gamma,
                         const BatchNormCache<Scalar>& cache, MatrixX<Scalar>& grad_x,
                         VectorX<Scalar>& grad_gamma, VectorX<Scalar>& grad_beta) {
  const Eigen::Index n = grad_y.rows(), c = grad_y.cols();
  grad_x.resize(n, c);
  MatrixX<Scalar> dxhat = grad_y.array().rowwise() * gamma.transpose().array();
  for (Eigen::Index j = 0; j < c; ++j) {
    const Scalar s1 = dxhat.col(j).sum();
    const Scalar s2 = dxhat.col(j).dot(cache.xhat.col(j));
    grad_x.col(j) = (cache.invstd[j] / static_cast<Scalar>(n)) *
                    (static_cast<Scalar>(n) * dxhat.col(j).array() - s1 - cache.xhat.col(j).array() * s2);
  }
  grad_gamma += grad_y.cwiseProduct(cache.xhat).colwise().sum().transpose();
  grad_beta += grad_y.colwise().sum().transpose();
}

}  // namespace lidarseg
