#pragma once

#include "lidarseg/backbone.hpp"
#include "lidarseg/datasets.hpp"

#include <string>
#include <vector>

namespace lidarseg {

// C x C counts, rows = ground truth, columns = prediction. Ignored points
// are never counted.
struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;
  std::vector<std::string> class_names;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::vector<std::string> names)
      : counts(Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(
            static_cast<Eigen::Index>(names.size()), static_cast<Eigen::Index>(names.size()))),
        class_names(std::move(names)) {}

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

void accumulate(ConfusionMatrix& cm, const VecXi& preds, const VecXi& labels, int ignore_id);

// matrix sum; accumulation over a partition equals the whole
ConfusionMatrix merge(const ConfusionMatrix& a, const ConfusionMatrix& b);

struct ClassIou {
  VecX iou;                   // per class; 0 where absent
  std::vector<bool> present;  // classes with TP+FP+FN > 0
};

ClassIou iou_per_class(const ConfusionMatrix& cm);

// arithmetic mean over present classes; throws "empty evaluation" when no
// class is present
Real miou(const ConfusionMatrix& cm);

// used by the report generator's averaging column
Real mean_of(const std::vector<Real>& values);

// full-cloud eval-mode predictions of backbone + head
VecXi predict_labels(const BackboneParams& backbone, const HeadParams& head,
                     const PointCloud& cloud);

// confusion over every frame of a split (labels mapped through the
// manifest's class map)
ConfusionMatrix evaluate_split(const BackboneParams& backbone, const HeadParams& head,
                               const DatasetManifest& split, FrameCache& frames);

}  // namespace lidarseg
