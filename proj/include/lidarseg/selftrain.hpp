#pragma once

#include "lidarseg/datasets.hpp"
#include "lidarseg/evaluation.hpp"
#include "lidarseg/train_util.hpp"

namespace lidarseg {

struct SelfTrainConfig {
  Real momentum = 0.99;
  Real confidence_threshold = 0.9;
  int epochs = 5;
  int batch_size = 8;
  // constant learning rate: the protocol for this stage names no schedule
  Real lr = 2e-4;
  Real weight_decay = 0.0;
  int max_points_per_cloud = 1536;
  AugmentPolicy augment{true, true, 0.9, 1.1};
  bool augment_student = true;  // pseudo-labels always come from clean clouds
};

void validate(const SelfTrainConfig& cfg);

// w_teacher <- momentum * w_teacher + (1 - momentum) * w_student, for
// every weight (and running statistic) of the head.
void ema_update(HeadParams& teacher, const HeadParams& student, Real momentum);

// scalar/vector form used by the closed-form checks
template <class Scalar>
Scalar ema_update(Scalar teacher, Scalar student, Scalar momentum) {
  return momentum * teacher + (Scalar(1) - momentum) * student;
}

// argmax where the max softmax strictly exceeds the threshold, ignore_id
// elsewhere (ties at the threshold are rejected)
VecXi pseudo_labels(const MatX& teacher_logits, Real threshold, int ignore_id = kIgnoreId);

struct SelfTrainResult {
  HeadParams head;     // final student
  HeadParams teacher;  // final EMA head
  TrainLog log;
};

// Stage 3: alternating source/target batches over a frozen backbone.
// Source batches train on true labels with CE + Lovasz; target batches
// train on confident teacher pseudo-labels with CE only. The teacher is
// EMA-updated after every student step. An empty target manifest
// degenerates to source-only continued training.
SelfTrainResult self_train(const BackboneParams& backbone, const HeadParams& init_head,
                           const DatasetManifest& source_train, const DatasetManifest& source_val,
                           const DatasetManifest& target_train, const SelfTrainConfig& cfg,
                           std::uint64_t seed);

}  // namespace lidarseg
