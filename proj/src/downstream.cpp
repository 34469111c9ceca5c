#include "lidarseg/downstream.hpp"

#include "lidarseg/image_io.hpp"
#include "lidarseg/losses.hpp"

#include <map>

namespace lidarseg {

std::string recipe_name(Recipe recipe) {
  switch (recipe) {
    case Recipe::from_scratch: return "from_scratch";
    case Recipe::frozen_linear: return "frozen_linear";
    case Recipe::frozen_mlp: return "frozen_mlp";
    case Recipe::full_finetune: return "full_finetune";
    case Recipe::joint_distill_classify: return "joint_distill_classify";
  }
  return "?";
}

void validate(const TrainConfig& cfg) {
  require(cfg.epochs >= 1, "train epochs must be positive");
  require(cfg.batch_size >= 1, "train batch size must be positive");
  require(cfg.lr > 0.0, "train lr must be positive");
  require(cfg.warmup_epochs >= 0, "train warmup must be non-negative");
  require(cfg.weight_decay >= 0.0, "train weight decay must be non-negative");
  require(cfg.layerwise_decay > 0.0 && cfg.layerwise_decay <= 1.0,
          "layerwise decay must be in (0, 1]");
  validate(cfg.augment);
}

TrainConfig default_train_config(Recipe recipe) {
  TrainConfig cfg;
  cfg.recipe = recipe;
  if (recipe == Recipe::from_scratch) {
    cfg.epochs = 45;
    cfg.warmup_epochs = 4;
    cfg.weight_decay = 0.003;
  }
  return cfg;
}

namespace {

struct ClsLoss {
  Real ce = 0.0;
  Real lovasz = 0.0;
  MatX grad_logits;
};

// cross entropy + lovasz on the softmax, with the combined gradient
ClsLoss classification_loss(const MatX& logits, const VecXi& labels, int ignore_id) {
  ClsLoss out;
  MatX grad_ce;
  out.ce = cross_entropy(logits, labels, ignore_id, &grad_ce);
  const MatX probs = softmax(logits);
  MatX grad_probs;
  out.lovasz = lovasz_softmax(probs, labels, ignore_id, &grad_probs);
  out.grad_logits = grad_ce + softmax_backward(probs, grad_probs);
  return out;
}

HeadKind head_kind_for(Recipe recipe) {
  switch (recipe) {
    case Recipe::frozen_mlp:
    case Recipe::joint_distill_classify:
      return HeadKind::mlp2;
    case Recipe::frozen_linear:
    case Recipe::full_finetune:
    case Recipe::from_scratch:
      return HeadKind::linear_bn;
  }
  return HeadKind::mlp2;
}

}  // namespace

TrainResult train(const ArchConfig& arch, const BackboneParams* pretrained,
                  const DatasetManifest& train_split, const DatasetManifest& val_split,
                  const TrainConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  validate(arch);
  require(!train_split.frames.empty(), "train: empty training split");
  require(!train_split.label_free, "train: training split must be labeled");

  const bool frozen_backbone =
      cfg.recipe == Recipe::frozen_linear || cfg.recipe == Recipe::frozen_mlp;
  const bool needs_pretrained = frozen_backbone || cfg.recipe == Recipe::full_finetune;
  if (needs_pretrained) {
    require(pretrained != nullptr,
            "configuration error: recipe " + recipe_name(cfg.recipe) + " needs a pretrained backbone");
  } else if (cfg.recipe == Recipe::from_scratch) {
    require(pretrained == nullptr,
            "configuration error: from_scratch ignores a pretrained backbone; pass none");
  } else {
    throw std::runtime_error("configuration error: use train_joint for the joint recipe");
  }

  TrainResult result;
  if (cfg.recipe == Recipe::from_scratch) {
    result.backbone = init_params(arch, derive_seed(seed, fnv1a("scratch_backbone")));
  } else {
    result.backbone = *pretrained;
  }
  std::fill(result.backbone.frozen.begin(), result.backbone.frozen.end(),
            frozen_backbone ? 1 : 0);

  const int num_classes = train_split.class_map.num_classes();
  result.head = init_head(head_kind_for(cfg.recipe), arch.width, num_classes,
                          derive_seed(seed, fnv1a("cls_head")));

  FrameCache frames;
  Rng rng_data(derive_seed(seed, fnv1a("train_data")));

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_split.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  AdamW opt;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(train_split.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng_data.shuffle(order);

    Real epoch_ce = 0.0, epoch_lovasz = 0.0;
    std::int64_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PointCloud> clouds;
      std::vector<VecXi> labels;
      for (std::size_t k = start; k < end; ++k) {
        const Frame& frame = frames.get(train_split.frames[static_cast<std::size_t>(order[k])]);
        PointCloud cloud = frame.cloud;
        cloud.labels = apply_class_map(*frame.cloud.labels, train_split.class_map);
        cloud = subsample_cloud(cloud, cfg.max_points_per_cloud, rng_data);
        cloud = augment(cloud, cfg.augment, rng_data.bits());
        labels.push_back(*cloud.labels);
        clouds.push_back(std::move(cloud));
      }

      std::vector<const PointCloud*> batch;
      for (const PointCloud& c : clouds) batch.push_back(&c);
      VecXi all_labels(([&] {
        Eigen::Index total = 0;
        for (const VecXi& l : labels) total += l.size();
        return total;
      })());
      Eigen::Index row = 0;
      for (const VecXi& l : labels) {
        all_labels.segment(row, l.size()) = l;
        row += l.size();
      }

      const Mode backbone_mode = frozen_backbone ? Mode::eval : Mode::train;
      BackboneCache cache;
      const MatX feats = backbone_forward(result.backbone, batch, backbone_mode,
                                          frozen_backbone ? nullptr : &cache);

      HeadCache hcache;
      const MatX logits = head_forward(result.head, feats, Mode::train, &hcache);
      ClsLoss loss = classification_loss(logits, all_labels, train_split.class_map.ignore_id);
      epoch_ce += loss.ce;
      epoch_lovasz += loss.lovasz;
      ++batches;

      HeadParams head_grads = zeros_like(result.head);
      MatX grad_feats;
      head_backward(result.head, hcache, loss.grad_logits, head_grads,
                    frozen_backbone ? nullptr : &grad_feats);
      BackboneParams grads = zeros_like(result.backbone);
      if (!frozen_backbone) {
        backbone_backward(result.backbone, cache, grad_feats, grads);
      }

      const Real lr = lr_at(step, total_steps, warmup_steps, cfg.lr);
      const Real sched = schedule_fraction<Real>(step, total_steps, warmup_steps);
      const bool pretrained_backbone = cfg.recipe == Recipe::full_finetune;
      auto slots = collect_slots(result.backbone, grads, pretrained_backbone, &result.head, &head_grads);
      adamw_step(opt, slots, [&](const ParamSlot& s) {
        Real slot_lr = lr;
        Real slot_wd = cfg.weight_decay * sched;
        if (cfg.recipe == Recipe::full_finetune && s.group < result.backbone.num_groups()) {
          slot_lr *= layerwise_scale(cfg.layerwise_decay,
                                     group_depth_from_top(result.backbone, s.group));
          slot_wd = 0.0;  // no weight decay on pretrained weights
        }
        return std::make_pair(slot_lr, slot_wd);
      });
      if (!frozen_backbone) commit_batch_stats(result.backbone, cache);
      commit_head_batch_stats(result.head, hcache);
      ++step;
    }

    nlohmann::json record = {{"epoch", epoch},
                             {"split", "train"},
                             {"ce", epoch_ce / std::max<std::int64_t>(1, batches)},
                             {"lovasz", epoch_lovasz / std::max<std::int64_t>(1, batches)}};
    result.log.add(record);
    if (!val_split.frames.empty()) {
      const Real val_miou = miou(evaluate_split(result.backbone, result.head, val_split, frames));
      result.log.add({{"epoch", epoch}, {"split", "val"}, {"miou", val_miou}});
    }
  }
  return result;
}

JointResult train_joint(const MergedDataset& merged, const Teacher& teacher, const ArchConfig& arch,
                        const TrainConfig& cfg, const DistillConfig& dcfg,
                        const DatasetManifest& source_val, std::uint64_t seed) {
  validate(cfg);
  validate(arch);
  require(cfg.recipe == Recipe::joint_distill_classify,
          "configuration error: train_joint runs the joint recipe only");
  bool has_source = false, has_target = false;
  for (const auto& part : merged.parts) {
    (part.label_free ? has_target : has_source) = true;
  }
  require(has_source, "train_joint: no labeled source part");
  require(has_target, "train_joint: no label-free target part");
  require(teacher.feature_dim() == arch.feature_dim_out,
          "train_joint: teacher feature dim must match arch.feature_dim_out");

  JointResult result;
  result.backbone = init_params(arch, derive_seed(seed, fnv1a("joint_backbone")));
  int num_classes = 0;
  for (const auto& part : merged.parts) {
    if (!part.label_free) num_classes = part.class_map.num_classes();
  }
  result.cls_head = init_head(HeadKind::mlp2, arch.width, num_classes,
                              derive_seed(seed, fnv1a("joint_cls")));
  result.distill_head = init_head(HeadKind::distill_proj, arch.width, arch.feature_dim_out,
                                  derive_seed(seed, fnv1a("joint_proj")));

  FrameCache frames;
  Rng rng_data(derive_seed(seed, fnv1a("joint_data")));

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(merged.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  AdamW opt;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = epoch_order(merged);
    rng_data.shuffle(order);

    Real epoch_cls = 0.0, epoch_distill = 0.0;
    std::int64_t batches = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));

      std::vector<PointCloud> clouds;
      std::vector<VecXi> cls_labels;  // empty for target clouds
      std::vector<VecXi> matched_idx;
      std::vector<MatX> matched_feats;
      for (std::size_t k = start; k < end; ++k) {
        const auto [part, idx] = order[k];
        const DatasetManifest& manifest = merged.parts[static_cast<std::size_t>(part)];
        const Frame& frame = frames.get(manifest.frames[static_cast<std::size_t>(idx)]);
        require(!frame.cameras.empty(), "train_joint: frame without cameras");

        PointCloud cloud = frame.cloud;
        if (!manifest.label_free && frame.cloud.labels) {
          cloud.labels = apply_class_map(*frame.cloud.labels, manifest.class_map);
        } else {
          cloud.labels.reset();
        }
        cloud = subsample_cloud(cloud, cfg.max_points_per_cloud, rng_data);

        Matches m = match_features(cloud, frame.cameras, teacher);
        cls_labels.push_back(cloud.labels ? *cloud.labels : VecXi());
        clouds.push_back(augment(cloud, cfg.augment, rng_data.bits()));
        matched_idx.push_back(std::move(m.point_idx));
        matched_feats.push_back(std::move(m.pixel_feats));
      }

      std::vector<const PointCloud*> batch;
      for (const PointCloud& c : clouds) batch.push_back(&c);
      BackboneCache cache;
      const MatX feats = backbone_forward(result.backbone, batch, Mode::train, &cache);

      MatX grad_feats = MatX::Zero(feats.rows(), feats.cols());
      BackboneParams grads = zeros_like(result.backbone);
      HeadParams cls_grads = zeros_like(result.cls_head);
      HeadParams proj_grads = zeros_like(result.distill_head);

      // classification on labeled (source) rows only
      Eigen::Index labeled_rows = 0;
      for (const VecXi& l : cls_labels) labeled_rows += l.size();
      HeadCache cls_cache;
      if (labeled_rows > 0) {
        MatX src_feats(labeled_rows, feats.cols());
        VecXi src_labels(labeled_rows);
        Eigen::Index row = 0;
        for (std::size_t c = 0; c < clouds.size(); ++c) {
          if (cls_labels[c].size() == 0) continue;
          src_feats.middleRows(row, cls_labels[c].size()) =
              feats.middleRows(cache.cloud_offsets[c], cls_labels[c].size());
          src_labels.segment(row, cls_labels[c].size()) = cls_labels[c];
          row += cls_labels[c].size();
        }
        const MatX logits = head_forward(result.cls_head, src_feats, Mode::train, &cls_cache);
        ClsLoss loss = classification_loss(logits, src_labels, kIgnoreId);
        epoch_cls += loss.ce + loss.lovasz;
        MatX grad_src;
        head_backward(result.cls_head, cls_cache, loss.grad_logits, cls_grads, &grad_src);
        row = 0;
        for (std::size_t c = 0; c < clouds.size(); ++c) {
          if (cls_labels[c].size() == 0) continue;
          grad_feats.middleRows(cache.cloud_offsets[c], cls_labels[c].size()) +=
              grad_src.middleRows(row, cls_labels[c].size());
          row += cls_labels[c].size();
        }
      }

      // distillation on every matched point
      Eigen::Index total_matched = 0;
      for (const VecXi& m : matched_idx) total_matched += m.size();
      if (total_matched > 0) {
        MatX point_rows(total_matched, arch.width);
        MatX teacher_rows(total_matched, arch.feature_dim_out);
        Eigen::Index row = 0;
        for (std::size_t c = 0; c < clouds.size(); ++c) {
          const Eigen::Index offset = cache.cloud_offsets[c];
          for (Eigen::Index k = 0; k < matched_idx[c].size(); ++k, ++row) {
            point_rows.row(row) = feats.row(offset + matched_idx[c][k]);
            teacher_rows.row(row) = matched_feats[c].row(k);
          }
        }
        HeadCache proj_cache;
        const MatX projected = head_forward(result.distill_head, point_rows, Mode::train, &proj_cache);
        MatX grad_projected;
        const Real dloss = distillation_loss(projected, teacher_rows, &grad_projected);
        epoch_distill += dloss;
        grad_projected *= cfg.joint_distill_weight;
        MatX grad_rows;
        head_backward(result.distill_head, proj_cache, grad_projected, proj_grads, &grad_rows);
        row = 0;
        for (std::size_t c = 0; c < clouds.size(); ++c) {
          const Eigen::Index offset = cache.cloud_offsets[c];
          for (Eigen::Index k = 0; k < matched_idx[c].size(); ++k, ++row) {
            grad_feats.row(offset + matched_idx[c][k]) += grad_rows.row(row);
          }
        }
      }

      backbone_backward(result.backbone, cache, grad_feats, grads);
      ++batches;

      const Real lr = lr_at(step, total_steps, warmup_steps, cfg.lr);
      const Real sched = schedule_fraction<Real>(step, total_steps, warmup_steps);

      auto slots = collect_slots(result.backbone, grads, false, &result.cls_head, &cls_grads);
      // append the distill head as its own slots
      {
        const std::size_t base = slots.size();
        std::vector<const Real*> pg;
        visit_head_tensors(proj_grads, [&](int, const std::string&, const Real* d, Eigen::Index) {
          pg.push_back(d);
        });
        std::size_t j = 0;
        visit_head_tensors(result.distill_head,
                           [&](int, const std::string& name, Real* d, Eigen::Index size) {
                             ParamSlot s;
                             s.group = result.backbone.num_groups() + 1;
                             s.name = "distill_" + name;
                             s.weights = d;
                             s.grads = pg[j++];
                             s.size = size;
                             slots.push_back(s);
                           });
        (void)base;
      }
      adamw_step(opt, slots, [&](const ParamSlot&) {
        return std::make_pair(lr, cfg.weight_decay * sched);
      });
      commit_batch_stats(result.backbone, cache);
      if (labeled_rows > 0) commit_head_batch_stats(result.cls_head, cls_cache);
      ++step;
    }

    result.log.add({{"epoch", epoch},
                    {"split", "train"},
                    {"cls_loss", epoch_cls / std::max<std::int64_t>(1, batches)},
                    {"distill_loss", epoch_distill / std::max<std::int64_t>(1, batches)}});
    if (!source_val.frames.empty()) {
      const Real val_miou =
          miou(evaluate_split(result.backbone, result.cls_head, source_val, frames));
      result.log.add({{"epoch", epoch}, {"split", "val"}, {"miou", val_miou}});
    }
  }
  return result;
}

}  // namespace lidarseg
