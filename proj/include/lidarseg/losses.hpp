#pragma once

#include "lidarseg/core.hpp"

#include <algorithm>
#include <numeric>

namespace lidarseg {

// Row-wise softmax.
template <class Scalar>
MatrixX<Scalar> softmax(const MatrixX<Scalar>& logits) {
  MatrixX<Scalar> p = logits;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Scalar m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Chain rule through a row-wise softmax: given dL/dp and p, produce dL/dz.
template <class Scalar>
MatrixX<Scalar> softmax_backward(const MatrixX<Scalar>& probs, const MatrixX<Scalar>& grad_probs) {
  MatrixX<Scalar> grad(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const Scalar dot = probs.row(i).dot(grad_probs.row(i));
    grad.row(i) = probs.row(i).cwiseProduct(grad_probs.row(i) - VectorX<Scalar>::Constant(probs.cols(), dot).transpose());
  }
  return grad;
}

// Mean negative log-likelihood over non-ignored points. Points labeled
// ignore_id contribute nothing; an all-ignored batch scores 0.
template <class Scalar>
Scalar cross_entropy(const MatrixX<Scalar>& logits, const VecXi& labels, int ignore_id,
                     MatrixX<Scalar>* grad_logits = nullptr) {
  const Eigen::Index n = logits.rows();
  require(labels.size() == n, "cross_entropy: labels/logits row mismatch");
  if (grad_logits) grad_logits->setZero(n, logits.cols());

  Eigen::Index valid = 0;
  Scalar loss = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] == ignore_id) continue;
    require(labels[i] >= 0 && labels[i] < logits.cols(), "cross_entropy: label out of range");
    ++valid;
    const Scalar m = logits.row(i).maxCoeff();
    VectorX<Scalar> e = (logits.row(i).array() - m).exp();
    const Scalar z = e.sum();
    loss += std::log(z) + m - logits(i, labels[i]);
    if (grad_logits) {
      grad_logits->row(i) = (e / z).transpose();
      (*grad_logits)(i, labels[i]) -= Scalar(1);
    }
  }
  if (valid == 0) {
    if (grad_logits) grad_logits->setZero(n, logits.cols());
    return Scalar(0);
  }
  if (grad_logits) *grad_logits /= static_cast<Scalar>(valid);
  return loss / static_cast<Scalar>(valid);
}

namespace detail {

// Gradient of the Jaccard loss extension for one class, evaluated on the
// descending-sorted ground-truth indicator.
template <class Scalar>
VectorX<Scalar> jaccard_grad(const std::vector<char>& gt_sorted) {
  const Eigen::Index n = static_cast<Eigen::Index>(gt_sorted.size());
  Scalar positives = 0;
  for (char g : gt_sorted) positives += static_cast<Scalar>(g);
  VectorX<Scalar> grad(n);
  Scalar cum_gt = 0;
  Scalar cum_not = 0;
  Scalar prev = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    cum_gt += static_cast<Scalar>(gt_sorted[static_cast<std::size_t>(k)]);
    cum_not += static_cast<Scalar>(1 - gt_sorted[static_cast<std::size_t>(k)]);
    const Scalar intersection = positives - cum_gt;
    const Scalar uni = positives + cum_not;
    const Scalar jac = Scalar(1) - intersection / uni;
    grad[k] = jac - prev;
    prev = jac;
  }
  return grad;
}

}  // namespace detail

// Lovasz-softmax loss: the Lovasz extension of the Jaccard loss, averaged
// over the classes present among the non-ignored labels. probs rows must
// sum to 1.
template <class Scalar>
Scalar lovasz_softmax(const MatrixX<Scalar>& probs, const VecXi& labels, int ignore_id,
                      MatrixX<Scalar>* grad_probs = nullptr) {
  const Eigen::Index n = probs.rows();
  const Eigen::Index num_classes = probs.cols();
  require(labels.size() == n, "lovasz_softmax: labels/probs row mismatch");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] == ignore_id) continue;
    require(std::abs(probs.row(i).sum() - Scalar(1)) < Scalar(1e-5), "probs not normalized");
  }
  if (grad_probs) grad_probs->setZero(n, num_classes);

  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[i] != ignore_id) {
      require(labels[i] >= 0 && labels[i] < num_classes, "lovasz_softmax: label out of range");
      keep.push_back(i);
    }
  }
  if (keep.empty()) return Scalar(0);

  std::vector<char> present(static_cast<std::size_t>(num_classes), 0);
  for (Eigen::Index i : keep) present[static_cast<std::size_t>(labels[i])] = 1;
  int n_present = 0;
  for (char c : present) n_present += c;

  const Eigen::Index m = static_cast<Eigen::Index>(keep.size());
  std::vector<Eigen::Index> order(static_cast<std::size_t>(m));
  Scalar loss = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (!present[static_cast<std::size_t>(c)]) continue;
    // error vector: 1 - p_c for the class points, p_c for the rest
    VectorX<Scalar> errors(m);
    std::vector<char> is_gt(static_cast<std::size_t>(m));
    for (Eigen::Index k = 0; k < m; ++k) {
      const Eigen::Index i = keep[static_cast<std::size_t>(k)];
      const bool gt = labels[i] == c;
      is_gt[static_cast<std::size_t>(k)] = gt ? 1 : 0;
      errors[k] = gt ? Scalar(1) - probs(i, c) : probs(i, c);
    }
    std::iota(order.begin(), order.end(), Eigen::Index(0));
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return errors[a] > errors[b]; });
    std::vector<char> gt_sorted(static_cast<std::size_t>(m));
    for (Eigen::Index k = 0; k < m; ++k) {
      gt_sorted[static_cast<std::size_t>(k)] = is_gt[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
    }
    const VectorX<Scalar> jg = detail::jaccard_grad<Scalar>(gt_sorted);
    for (Eigen::Index k = 0; k < m; ++k) {
      const Eigen::Index src = order[static_cast<std::size_t>(k)];
      loss += errors[src] * jg[k];
      if (grad_probs) {
        const Eigen::Index i = keep[static_cast<std::size_t>(src)];
        const Scalar sign = is_gt[static_cast<std::size_t>(src)] ? Scalar(-1) : Scalar(1);
        (*grad_probs)(i, c) += sign * jg[k] / static_cast<Scalar>(n_present);
      }
    }
  }
  return loss / static_cast<Scalar>(n_present);
}

// Mean squared l2 distance between row-unit-normalized feature sets.
// Value is in [0, 4]; invariant to positive rescaling of either side.
template <class Scalar>
Scalar distillation_loss(const MatrixX<Scalar>& point_feats, const MatrixX<Scalar>& pixel_feats,
                         MatrixX<Scalar>* grad_point_feats = nullptr) {
  require(point_feats.rows() == pixel_feats.rows() && point_feats.cols() == pixel_feats.cols(),
          "distillation_loss: shape mismatch");
  const Eigen::Index m = point_feats.rows();
  if (grad_point_feats) grad_point_feats->setZero(m, point_feats.cols());
  if (m == 0) return Scalar(0);

  constexpr Scalar kNormEps = Scalar(1e-8);
  Scalar loss = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Scalar rp = std::max(point_feats.row(i).norm(), kNormEps);
    const Scalar rq = std::max(pixel_feats.row(i).norm(), kNormEps);
    VectorX<Scalar> p = point_feats.row(i).transpose() / rp;
    VectorX<Scalar> q = pixel_feats.row(i).transpose() / rq;
    VectorX<Scalar> d = p - q;
    loss += d.squaredNorm();
    if (grad_point_feats) {
      // d||p_hat - q_hat||^2 / dp = (2/r) (I - p_hat p_hat^T)(p_hat - q_hat)
      VectorX<Scalar> g = Scalar(2) * (d - p * p.dot(d)) / rp;
      grad_point_feats->row(i) = g.transpose() / static_cast<Scalar>(m);
    }
  }
  return loss / static_cast<Scalar>(m);
}

}  // namespace lidarseg
