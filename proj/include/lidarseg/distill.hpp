#pragma once

#include "lidarseg/datasets.hpp"
#include "lidarseg/teacher.hpp"
#include "lidarseg/train_util.hpp"

namespace lidarseg {

struct DistillConfig {
  int epochs = 8;
  int batch_size = 2;
  Real lr = 5e-4;
  Real weight_decay = 0.03;
  int warmup_epochs = 1;
  int image_width = 448;  // teacher input size; camera images are resized to it
  int image_height = 224;
  int max_points_per_cloud = 1536;  // 0 keeps full clouds
  AugmentPolicy augment{true, true, 0.9, 1.1};
};

void validate(const DistillConfig& cfg);

struct DistillResult {
  BackboneParams backbone;
  HeadParams proj;
  TrainLog log;
};

// Stage 1: align point features with the frozen teacher over point-pixel
// correspondences. AdamW on backbone + projection head, warmup + cosine
// schedule, point-cloud augmentations only (never the images).
DistillResult pretrain(const MergedDataset& merged, const Teacher& teacher, const ArchConfig& arch,
                       const DistillConfig& cfg, std::uint64_t seed);

}  // namespace lidarseg
