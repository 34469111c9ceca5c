#include "lidarseg/selftrain.hpp"

#include "lidarseg/losses.hpp"

namespace lidarseg {

void validate(const SelfTrainConfig& cfg) {
  // 1.0 is admitted for both knobs: momentum 1 freezes the teacher and
  // threshold 1 rejects every pseudo-label
  require(cfg.momentum > 0.0 && cfg.momentum <= 1.0, "ema momentum must be in (0, 1]");
  require(cfg.confidence_threshold > 0.0 && cfg.confidence_threshold <= 1.0,
          "confidence threshold must be in (0, 1]");
  require(cfg.epochs >= 1, "selftrain epochs must be positive");
  require(cfg.batch_size >= 1, "selftrain batch size must be positive");
  require(cfg.lr > 0.0, "selftrain lr must be positive");
  validate(cfg.augment);
}

void ema_update(HeadParams& teacher, const HeadParams& student, Real momentum) {
  require(teacher.kind == student.kind, "ema_update: head kinds differ");
  std::vector<std::pair<const Real*, Eigen::Index>> src;
  visit_head_tensors(student, [&](int, const std::string&, const Real* data, Eigen::Index size) {
    src.emplace_back(data, size);
  });
  std::size_t i = 0;
  visit_head_tensors(teacher, [&](int, const std::string& name, Real* data, Eigen::Index size) {
    require(i < src.size() && src[i].second == size, "ema_update: shape mismatch at " + name);
    Eigen::Map<VecX> t(data, size);
    t = momentum * t + (1.0 - momentum) * Eigen::Map<const VecX>(src[i].first, size);
    ++i;
  });
  if (teacher.kind == HeadKind::linear_bn) {
    require(teacher.bn.running_mean.size() == student.bn.running_mean.size(),
            "ema_update: shape mismatch");
    teacher.bn.running_mean =
        momentum * teacher.bn.running_mean + (1.0 - momentum) * student.bn.running_mean;
    teacher.bn.running_var =
        momentum * teacher.bn.running_var + (1.0 - momentum) * student.bn.running_var;
  }
}

VecXi pseudo_labels(const MatX& teacher_logits, Real threshold, int ignore_id) {
  const MatX probs = softmax(teacher_logits);
  VecXi labels(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index best;
    const Real confidence = probs.row(i).maxCoeff(&best);
    labels[i] = confidence > threshold ? static_cast<int>(best) : ignore_id;
  }
  return labels;
}

namespace {

struct HeadOptimizer {
  AdamW opt;

  void step(HeadParams& head, const HeadParams& grads, Real lr, Real wd) {
    std::vector<std::pair<const Real*, Eigen::Index>> g;
    visit_head_tensors(grads, [&](int, const std::string&, const Real* data, Eigen::Index size) {
      g.emplace_back(data, size);
    });
    opt.begin_step();
    std::size_t i = 0;
    visit_head_tensors(head, [&](int, const std::string&, Real* data, Eigen::Index size) {
      opt.update(i, Eigen::Map<VecX>(data, size), Eigen::Map<const VecX>(g[i].first, size), lr, wd);
      ++i;
    });
  }
};

}  // namespace

SelfTrainResult self_train(const BackboneParams& backbone, const HeadParams& init_head,
                           const DatasetManifest& source_train, const DatasetManifest& source_val,
                           const DatasetManifest& target_train, const SelfTrainConfig& cfg,
                           std::uint64_t seed) {
  validate(cfg);
  require(!source_train.frames.empty(), "self_train: empty source split");
  require(!source_train.label_free, "self_train: source must be labeled");
  for (std::uint8_t f : backbone.frozen) {
    require(f != 0, "self_train: backbone must be frozen");
  }

  SelfTrainResult result;
  result.head = init_head;
  result.head.frozen = false;
  result.teacher = init_head;  // warm start from the stage-2 head

  FrameCache frames;
  Rng rng_source(derive_seed(seed, fnv1a("selftrain_source")));
  Rng rng_target(derive_seed(seed, fnv1a("selftrain_target")));
  HeadOptimizer optimizer;

  const int ignore_id = source_train.class_map.ignore_id;

  auto make_batches = [](std::size_t n, int batch_size, Rng& rng) {
    std::vector<int> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(batch_size));
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto source_batches = make_batches(source_train.size(), cfg.batch_size, rng_source);
    const auto target_batches = make_batches(target_train.size(), cfg.batch_size, rng_target);

    Real epoch_source_loss = 0.0;
    Real epoch_target_loss = 0.0;
    std::int64_t source_steps = 0;
    std::int64_t confident_points = 0;
    std::int64_t target_points = 0;

    const std::size_t pairs = std::max(source_batches.size(), target_batches.size());
    for (std::size_t k = 0; k < pairs; ++k) {
      // source batch: CE + Lovasz on true labels
      if (k < source_batches.size()) {
        std::vector<PointCloud> clouds;
        std::vector<VecXi> labels;
        for (int idx : source_batches[k]) {
          const Frame& frame = frames.get(source_train.frames[static_cast<std::size_t>(idx)]);
          PointCloud cloud = frame.cloud;
          cloud.labels = apply_class_map(*frame.cloud.labels, source_train.class_map);
          cloud = subsample_cloud(cloud, cfg.max_points_per_cloud, rng_source);
          cloud = augment(cloud, cfg.augment, rng_source.bits());
          labels.push_back(*cloud.labels);
          clouds.push_back(std::move(cloud));
        }
        std::vector<const PointCloud*> batch;
        for (const PointCloud& c : clouds) batch.push_back(&c);
        const MatX feats = backbone_forward(backbone, batch, Mode::eval);
        Eigen::Index total = 0;
        for (const VecXi& l : labels) total += l.size();
        VecXi all_labels(total);
        Eigen::Index row = 0;
        for (const VecXi& l : labels) {
          all_labels.segment(row, l.size()) = l;
          row += l.size();
        }
        HeadCache hcache;
        const MatX logits = head_forward(result.head, feats, Mode::train, &hcache);
        MatX grad_ce;
        const Real ce = cross_entropy(logits, all_labels, ignore_id, &grad_ce);
        const MatX probs = softmax(logits);
        MatX grad_probs;
        const Real lov = lovasz_softmax(probs, all_labels, ignore_id, &grad_probs);
        const MatX grad_logits = grad_ce + softmax_backward(probs, grad_probs);
        epoch_source_loss += ce + lov;
        ++source_steps;

        HeadParams grads = zeros_like(result.head);
        head_backward(result.head, hcache, grad_logits, grads, nullptr);
        optimizer.step(result.head, grads, cfg.lr, cfg.weight_decay);
        commit_head_batch_stats(result.head, hcache);
        ema_update(result.teacher, result.head, cfg.momentum);
      }

      // target batch: CE on confident teacher pseudo-labels
      if (k < target_batches.size()) {
        std::vector<PointCloud> student_clouds;
        std::vector<VecXi> pseudo;
        for (int idx : target_batches[k]) {
          const Frame& frame = frames.get(target_train.frames[static_cast<std::size_t>(idx)]);
          PointCloud clean = subsample_cloud(frame.cloud, cfg.max_points_per_cloud, rng_target);
          clean.labels.reset();  // target ground truth is never read here
          const MatX teacher_logits =
              head_forward(result.teacher, backbone_forward(backbone, clean, Mode::eval), Mode::eval);
          pseudo.push_back(pseudo_labels(teacher_logits, cfg.confidence_threshold, ignore_id));
          student_clouds.push_back(cfg.augment_student ? augment(clean, cfg.augment, rng_target.bits())
                                                       : clean);
        }
        Eigen::Index total = 0;
        Eigen::Index confident = 0;
        for (const VecXi& p : pseudo) {
          total += p.size();
          confident += (p.array() != ignore_id).count();
        }
        target_points += total;
        confident_points += confident;
        if (confident > 0) {
          std::vector<const PointCloud*> batch;
          for (const PointCloud& c : student_clouds) batch.push_back(&c);
          const MatX feats = backbone_forward(backbone, batch, Mode::eval);
          VecXi all_pseudo(total);
          Eigen::Index row = 0;
          for (const VecXi& p : pseudo) {
            all_pseudo.segment(row, p.size()) = p;
            row += p.size();
          }
          HeadCache hcache;
          const MatX logits = head_forward(result.head, feats, Mode::train, &hcache);
          MatX grad_logits;
          const Real ce = cross_entropy(logits, all_pseudo, ignore_id, &grad_logits);
          epoch_target_loss += ce;

          HeadParams grads = zeros_like(result.head);
          head_backward(result.head, hcache, grad_logits, grads, nullptr);
          optimizer.step(result.head, grads, cfg.lr, cfg.weight_decay);
          commit_head_batch_stats(result.head, hcache);
          ema_update(result.teacher, result.head, cfg.momentum);
        }
      }
    }

    nlohmann::json record = {{"epoch", epoch},
                             {"split", "train"},
                             {"source_loss", epoch_source_loss / std::max<std::int64_t>(1, source_steps)},
                             {"target_ce", epoch_target_loss},
                             {"confident_fraction",
                              target_points > 0 ? static_cast<double>(confident_points) /
                                                      static_cast<double>(target_points)
                                                : 0.0}};
    if (target_points > 0 && confident_points == 0) {
      record["warning"] = "no confident pseudo-labels";
    }
    result.log.add(record);
    if (!source_val.frames.empty()) {
      const Real val_miou = miou(evaluate_split(backbone, result.head, source_val, frames));
      result.log.add({{"epoch", epoch}, {"split", "val"}, {"miou", val_miou}});
    }
  }
  return result;
}

}  // namespace lidarseg
