#include "lidarseg/distill.hpp"

#include "lidarseg/image_io.hpp"
#include "lidarseg/losses.hpp"

#include <map>

namespace lidarseg {

void validate(const DistillConfig& cfg) {
  require(cfg.epochs >= 1, "distill epochs must be positive");
  require(cfg.batch_size >= 1, "distill batch size must be positive");
  require(cfg.lr > 0.0, "distill lr must be positive");
  require(cfg.weight_decay >= 0.0, "distill weight decay must be non-negative");
  require(cfg.warmup_epochs >= 0, "distill warmup must be non-negative");
  require(cfg.image_width >= 1 && cfg.image_height >= 1, "distill image size must be positive");
  validate(cfg.augment);
}

namespace {

// teacher feature maps per (frame dir, camera id), with uv rescaling for
// the resize folded into the map
class TeacherMapCache {
 public:
  TeacherMapCache(const Teacher& teacher, int width, int height)
      : teacher_(teacher), width_(width), height_(height) {}

  const FeatureMap& get(const std::string& frame_dir, const CameraView& view) {
    const std::string key = frame_dir + "#" + std::to_string(view.id);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;

    FeatureMap map;
    if (view.image.width == width_ && view.image.height == height_) {
      map = teacher_.features(view.image, key);
    } else {
      const Image resized = resize_nearest(view.image, width_, height_);
      map = teacher_.features(resized, key);
      // uv arrive in native pixel coordinates; fold the resize in
      map.scale_u *= static_cast<Real>(width_) / view.image.width;
      map.scale_v *= static_cast<Real>(height_) / view.image.height;
    }
    return cache_.emplace(key, std::move(map)).first->second;
  }

 private:
  const Teacher& teacher_;
  int width_, height_;
  std::map<std::string, FeatureMap> cache_;
};

}  // namespace

DistillResult pretrain(const MergedDataset& merged, const Teacher& teacher, const ArchConfig& arch,
                       const DistillConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  validate(arch);
  require(merged.size() > 0, "pretrain: empty dataset");
  require(teacher.feature_dim() == arch.feature_dim_out,
          "pretrain: teacher feature dim must match arch.feature_dim_out");

  DistillResult result;
  result.backbone = init_params(arch, derive_seed(seed, fnv1a("distill_backbone")));
  result.proj = init_head(HeadKind::distill_proj, arch.width, arch.feature_dim_out,
                          derive_seed(seed, fnv1a("distill_proj")));

  FrameCache frames;
  TeacherMapCache maps(teacher, cfg.image_width, cfg.image_height);
  Rng rng_data(derive_seed(seed, fnv1a("distill_data")));

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(merged.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  AdamW opt;
  std::int64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto order = epoch_order(merged);
    rng_data.shuffle(order);

    Real epoch_loss = 0.0;
    std::int64_t epoch_batches = 0;
    std::int64_t epoch_matched = 0;

    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));

      std::vector<PointCloud> clouds;
      std::vector<VecXi> matched_idx;
      std::vector<MatX> matched_feats;
      for (std::size_t k = start; k < end; ++k) {
        const auto [part, idx] = order[k];
        const DatasetManifest& manifest = merged.parts[static_cast<std::size_t>(part)];
        const std::string& dir = manifest.frames[static_cast<std::size_t>(idx)];
        const Frame& frame = frames.get(dir);
        require(!frame.cameras.empty(), "pretrain: frame without cameras: " + dir);

        PointCloud cloud = subsample_cloud(frame.cloud, cfg.max_points_per_cloud, rng_data);

        // correspondences on the un-augmented geometry
        std::vector<FeatureMap> view_maps;
        view_maps.reserve(frame.cameras.size());
        for (const CameraView& view : frame.cameras) view_maps.push_back(maps.get(dir, view));
        Matches m = match_features(cloud, frame.cameras, view_maps);

        clouds.push_back(augment(cloud, cfg.augment, rng_data.bits()));
        matched_idx.push_back(std::move(m.point_idx));
        matched_feats.push_back(std::move(m.pixel_feats));
      }

      Eigen::Index total_matched = 0;
      for (const VecXi& m : matched_idx) total_matched += m.size();
      if (total_matched == 0) {
        result.log.add({{"epoch", epoch}, {"warning", "no correspondences in batch"}});
        continue;
      }
      epoch_matched += total_matched;

      std::vector<const PointCloud*> batch;
      for (const PointCloud& c : clouds) batch.push_back(&c);
      BackboneCache cache;
      const MatX feats = backbone_forward(result.backbone, batch, Mode::train, &cache);

      // stack the matched rows (with per-cloud row offsets)
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

      HeadCache hcache;
      const MatX projected = head_forward(result.proj, point_rows, Mode::train, &hcache);
      MatX grad_projected;
      const Real loss = distillation_loss(projected, teacher_rows, &grad_projected);
      epoch_loss += loss;
      ++epoch_batches;

      HeadParams proj_grads = zeros_like(result.proj);
      MatX grad_point_rows;
      head_backward(result.proj, hcache, grad_projected, proj_grads, &grad_point_rows);

      MatX grad_feats = MatX::Zero(feats.rows(), feats.cols());
      row = 0;
      for (std::size_t c = 0; c < clouds.size(); ++c) {
        const Eigen::Index offset = cache.cloud_offsets[c];
        for (Eigen::Index k = 0; k < matched_idx[c].size(); ++k, ++row) {
          grad_feats.row(offset + matched_idx[c][k]) = grad_point_rows.row(row);
        }
      }
      BackboneParams grads = zeros_like(result.backbone);
      backbone_backward(result.backbone, cache, grad_feats, grads);

      const Real lr = lr_at(step, total_steps, warmup_steps, cfg.lr);
      const Real sched = schedule_fraction<Real>(step, total_steps, warmup_steps);
      auto slots = collect_slots(result.backbone, grads, false, &result.proj, &proj_grads);
      adamw_step(opt, slots, [&](const ParamSlot&) {
        return std::make_pair(lr, cfg.weight_decay * sched);
      });
      commit_batch_stats(result.backbone, cache);
      ++step;
    }

    require(epoch_matched > 0, "no correspondences in dataset");
    result.log.add({{"epoch", epoch},
                    {"split", "train"},
                    {"distill_loss", epoch_loss / std::max<std::int64_t>(1, epoch_batches)},
                    {"matched_points", epoch_matched},
                    {"lr", lr_at(step, total_steps, warmup_steps, cfg.lr)}});
  }
  return result;
}

}  // namespace lidarseg
