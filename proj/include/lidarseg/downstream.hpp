#pragma once

#include "lidarseg/datasets.hpp"
#include "lidarseg/distill.hpp"
#include "lidarseg/evaluation.hpp"
#include "lidarseg/train_util.hpp"

namespace lidarseg {

enum class Recipe { from_scratch, frozen_linear, frozen_mlp, full_finetune, joint_distill_classify };

std::string recipe_name(Recipe recipe);

struct TrainConfig {
  Recipe recipe = Recipe::frozen_mlp;
  int epochs = 10;
  int batch_size = 8;
  Real lr = 1e-3;
  int warmup_epochs = 1;
  Real weight_decay = 0.03;
  Real layerwise_decay = 0.99;  // full finetuning only
  int max_points_per_cloud = 1536;
  AugmentPolicy augment{true, true, 0.9, 1.1};
  Real joint_distill_weight = 1.0;  // joint recipe: cls + w * distill
};

void validate(const TrainConfig& cfg);

// Protocol defaults: 45 epochs / warmup 4 / weight decay 0.003 when
// training from scratch, 10 / 1 / 0.03 for the downstream recipes.
TrainConfig default_train_config(Recipe recipe);

struct TrainResult {
  BackboneParams backbone;
  HeadParams head;
  TrainLog log;
};

// Stage 2. Loss is cross-entropy plus Lovasz-softmax on the source labels.
// frozen_* recipes keep the pretrained backbone byte-identical and train
// only the head; full_finetune applies layerwise lr decay and no weight
// decay on the pretrained weights; from_scratch initializes a fresh
// backbone (pass pretrained = nullptr).
TrainResult train(const ArchConfig& arch, const BackboneParams* pretrained,
                  const DatasetManifest& train_split, const DatasetManifest& val_split,
                  const TrainConfig& cfg, std::uint64_t seed);

struct JointResult {
  BackboneParams backbone;
  HeadParams cls_head;
  HeadParams distill_head;
  TrainLog log;
};

// Joint distillation + classification over a source/target mix: the
// distillation loss sees every cloud, the classification loss only the
// labeled (source) clouds.
JointResult train_joint(const MergedDataset& merged, const Teacher& teacher, const ArchConfig& arch,
                        const TrainConfig& cfg, const DistillConfig& dcfg,
                        const DatasetManifest& source_val, std::uint64_t seed);

}  // namespace lidarseg
