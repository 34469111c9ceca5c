#include "lidarseg/evaluation.hpp"

namespace lidarseg {

void accumulate(ConfusionMatrix& cm, const VecXi& preds, const VecXi& labels, int ignore_id) {
  require(preds.size() == labels.size(), "accumulate: preds/labels size mismatch");
  const int c = cm.num_classes();
  for (Eigen::Index i = 0; i < preds.size(); ++i) {
    const int l = labels[i];
    if (l == ignore_id) continue;
    require(l >= 0 && l < c, "accumulate: label out of range");
    require(preds[i] >= 0 && preds[i] < c, "accumulate: prediction out of range");
    ++cm.counts(l, preds[i]);
  }
}

ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b) {
  require(a.class_names == b.class_names, "merge: class sets differ");
  ConfusionMatrix out = a;
  out.counts += b.counts;
  return out;
}

ClassIou iou_per_class(const ConfusionMatrix& cm) {
  const int c = cm.num_classes();
  ClassIou out;
  out.iou = VecX::Zero(c);
  out.present.assign(static_cast<std::size_t>(c), false);
  for (int k = 0; k < c; ++k) {
    const std::int64_t tp = cm.counts(k, k);
    const std::int64_t fn = cm.counts.row(k).sum() - tp;
    const std::int64_t fp = cm.counts.col(k).sum() - tp;
    const std::int64_t denom = tp + fp + fn;
    if (denom > 0) {
      out.present[static_cast<std::size_t>(k)] = true;
      out.iou[k] = static_cast<Real>(tp) / static_cast<Real>(denom);
    }
  }
  return out;
}

Real miou(const ConfusionMatrix& cm) {
  const ClassIou per_class = iou_per_class(cm);
  Real sum = 0.0;
  int n = 0;
  for (int k = 0; k < cm.num_classes(); ++k) {
    if (!per_class.present[static_cast<std::size_t>(k)]) continue;
    sum += per_class.iou[k];
    ++n;
  }
  require(n > 0, "empty evaluation");
  return sum / static_cast<Real>(n);
}

Real mean_of(const std::vector<Real>& values) {
  require(!values.empty(), "mean of empty row");
  Real sum = 0.0;
  for (Real v : values) sum += v;
  return sum / static_cast<Real>(values.size());
}

VecXi predict_labels(const BackboneParams& backbone, const HeadParams& head,
                     const PointCloud& cloud) {
  const MatX feats = backbone_forward(backbone, cloud, Mode::eval);
  const MatX logits = head_forward(head, feats, Mode::eval);
  VecXi preds(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best;
    logits.row(i).maxCoeff(&best);
    preds[i] = static_cast<int>(best);
  }
  return preds;
}

ConfusionMatrix evaluate_split(const BackboneParams& backbone, const HeadParams& head,
                               const DatasetManifest& split, FrameCache& frames) {
  ConfusionMatrix cm(split.class_map.shared_names);
  for (const std::string& dir : split.frames) {
    const Frame& frame = frames.get(dir);
    require(frame.cloud.labels.has_value(), "evaluate_split: unlabeled frame " + dir);
    const VecXi labels = mapped_labels(frame, split);
    const VecXi preds = predict_labels(backbone, head, frame.cloud);
    accumulate(cm, preds, labels, split.class_map.ignore_id);
  }
  return cm;
}

}  // namespace lidarseg
