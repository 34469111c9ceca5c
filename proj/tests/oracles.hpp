#pragma once

// Independent reference implementations used as test oracles. These are
// deliberately written as plain scalar loops, structured differently from
// the library code they check.

#include "lidarseg/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

using lidarseg::MatX;
using lidarseg::Real;
using lidarseg::VecXi;

// Cross entropy, one point at a time, with explicit log-sum-exp.
inline Real cross_entropy(const MatX& logits, const VecXi& labels, int ignore_id) {
  Real total = 0.0;
  long count = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (labels[i] == ignore_id) continue;
    Real mx = logits(i, 0);
    for (Eigen::Index j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    Real z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - mx);
    total += std::log(z) + mx - logits(i, labels[i]);
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<Real>(count);
}

// Jaccard loss of the misprediction set consisting of the first k sorted
// points, recounted from the set definition each time.
inline Real jaccard_loss_of_prefix(const std::vector<int>& sorted_is_gt, std::size_t k,
                                   std::size_t positives) {
  std::size_t false_neg = 0, false_pos = 0;
  for (std::size_t i = 0; i < k; ++i) {
    if (sorted_is_gt[i]) {
      ++false_neg;
    } else {
      ++false_pos;
    }
  }
  const Real intersection = static_cast<Real>(positives - false_neg);
  const Real uni = static_cast<Real>(positives + false_pos);
  return 1.0 - intersection / uni;
}

// Lovasz-softmax evaluated from the definition of the Lovasz extension:
// sort errors descending, weight each error by the increase of the Jaccard
// loss when that point joins the misprediction set.
inline Real lovasz_softmax(const MatX& probs, const VecXi& labels, int ignore_id) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (labels[i] != ignore_id) keep.push_back(i);
  }
  if (keep.empty()) return 0.0;

  Real total = 0.0;
  int present = 0;
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    std::size_t positives = 0;
    for (Eigen::Index i : keep) {
      if (labels[i] == c) ++positives;
    }
    if (positives == 0) continue;
    ++present;

    std::vector<std::pair<Real, int>> err;  // (error, is_gt)
    for (Eigen::Index i : keep) {
      const bool gt = labels[i] == c;
      err.emplace_back(gt ? 1.0 - probs(i, c) : probs(i, c), gt ? 1 : 0);
    }
    std::stable_sort(err.begin(), err.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<int> is_gt(err.size());
    for (std::size_t i = 0; i < err.size(); ++i) is_gt[i] = err[i].second;

    Real cls_loss = 0.0;
    for (std::size_t k = 1; k <= err.size(); ++k) {
      const Real delta = jaccard_loss_of_prefix(is_gt, k, positives) -
                         jaccard_loss_of_prefix(is_gt, k - 1, positives);
      cls_loss += err[k - 1].first * delta;
    }
    total += cls_loss;
  }
  return total / static_cast<Real>(present);
}

// Central finite differences of a scalar function of one coordinate.
template <class F>
Real central_diff(F&& f, Real& coord, Real h = 1e-4) {
  const Real saved = coord;
  coord = saved + h;
  const Real plus = f();
  coord = saved - h;
  const Real minus = f();
  coord = saved;
  return (plus - minus) / (2.0 * h);
}

inline bool rel_close(Real a, Real b, Real rel_tol, Real abs_floor = 1e-8) {
  return std::abs(a - b) <= rel_tol * std::max({std::abs(a), std::abs(b), abs_floor / rel_tol});
}

}  // namespace oracle
