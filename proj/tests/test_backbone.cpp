#include <doctest.h>

#include "lidarseg/backbone.hpp"
#include "lidarseg/geometry.hpp"
#include "lidarseg/losses.hpp"

#include "oracles.hpp"

using namespace lidarseg;

namespace {

PointCloud test_cloud(int target_points, std::uint64_t seed, bool with_labels = true) {
  SceneSpec scene;
  Primitive ground;
  ground.kind = Primitive::Kind::plane;
  ground.class_id = 6;
  scene.primitives.push_back(ground);
  Primitive box;
  box.kind = Primitive::Kind::box;
  box.class_id = 0;
  box.center = Vec3(7.0, 2.0, 0.8);
  box.size = Vec3(4.2, 1.8, 1.6);
  scene.primitives.push_back(box);
  Primitive ped;
  ped.kind = Primitive::Kind::cylinder;
  ped.class_id = 5;
  ped.center = Vec3(5.0, -3.0, 0.0);
  ped.radius = 0.35;
  ped.z_low = 0.0;
  ped.z_high = 1.75;
  scene.primitives.push_back(ped);

  SensorConfig sensor;
  sensor.beams = 8;
  sensor.azimuth_steps = 64;
  sensor.vertical_fov_low_deg = -25.0;
  sensor.vertical_fov_high_deg = -2.0;
  Frame frame = simulate_scan(scene, sensor, seed);

  PointCloud cloud = frame.cloud;
  Rng rng(seed);
  const auto keep = rng.sample_indices(static_cast<int>(cloud.size()),
                                       std::min<int>(target_points, static_cast<int>(cloud.size())));
  PointCloud out;
  out.xyz.resize(static_cast<Eigen::Index>(keep.size()), 3);
  VecX intensity(static_cast<Eigen::Index>(keep.size()));
  VecXi labels(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.xyz.row(static_cast<Eigen::Index>(i)) = cloud.xyz.row(keep[i]);
    intensity[static_cast<Eigen::Index>(i)] = (*cloud.intensity)[keep[i]];
    labels[static_cast<Eigen::Index>(i)] = (*cloud.labels)[keep[i]];
  }
  out.intensity = intensity;
  if (with_labels) out.labels = labels;
  return out;
}

ArchConfig small_arch(NormKind norm) {
  ArchConfig cfg;
  cfg.width = 16;
  cfg.depth = 2;
  cfg.norm = norm;
  cfg.grid_res = 1.5;
  cfg.feature_dim_out = 6;
  return cfg;
}

// collects addresses of every learnable coordinate
std::vector<Real*> all_coords(BackboneParams& p) {
  std::vector<Real*> out;
  visit_tensors(p, [&](int, const std::string&, Real* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) out.push_back(data + i);
  });
  return out;
}

std::vector<Real*> all_head_coords(HeadParams& h) {
  std::vector<Real*> out;
  visit_head_tensors(h, [&](int, const std::string&, Real* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) out.push_back(data + i);
  });
  return out;
}

std::vector<const Real*> grad_lookup(const BackboneParams& grads) {
  std::vector<const Real*> out;
  visit_tensors(grads, [&](int, const std::string&, const Real* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) out.push_back(data + i);
  });
  return out;
}

}  // namespace

TEST_CASE("init_params: deterministic per seed, distinct across seeds") {
  const ArchConfig cfg = small_arch(NormKind::layer);
  CHECK(parameter_hash(init_params(cfg, 5)) == parameter_hash(init_params(cfg, 5)));
  CHECK(parameter_hash(init_params(cfg, 5)) != parameter_hash(init_params(cfg, 6)));
}

TEST_CASE("init_params: parameter count matches the closed form") {
  ArchConfig cfg;
  cfg.width = 64;
  cfg.depth = 2;
  cfg.norm = NormKind::layer;
  const BackboneParams p = init_params(cfg, 1);
  // embed: C*in + C; per layer: 2C (norm1) + 9C + C (conv) + 2C (norm2)
  // + C^2 + C + C^2 + C (mlp); out norm: 2C
  const std::int64_t c = 64, in = 3, depth = 2;
  const std::int64_t expected = c * in + c + depth * (2 * c * c + 16 * c) + 2 * c;
  CHECK(parameter_count(p) == expected);
  // intensity adds one input column
  cfg.use_intensity = true;
  CHECK(parameter_count(init_params(cfg, 1)) == expected + c);
}

TEST_CASE("init_params: layer norm allocates no running statistics") {
  const BackboneParams p = init_params(small_arch(NormKind::layer), 2);
  std::size_t buffers = 0;
  visit_buffers(p, [&](const std::string&, const Real*, Eigen::Index) { ++buffers; });
  CHECK(buffers == 0);
  CHECK(p.layers[0].norm1.running_mean.size() == 0);

  const BackboneParams pb = init_params(small_arch(NormKind::batch), 2);
  std::size_t bn_buffers = 0;
  visit_buffers(pb, [&](const std::string&, const Real*, Eigen::Index) { ++bn_buffers; });
  CHECK(bn_buffers == (2 * 2 + 1) * 2);
}

TEST_CASE("backbone_forward: single point gives one finite feature row") {
  PointCloud cloud;
  cloud.xyz.resize(1, 3);
  cloud.xyz << 4.0, 1.0, 0.3;
  const BackboneParams p = init_params(small_arch(NormKind::layer), 3);
  const MatX f = backbone_forward(p, cloud, Mode::eval);
  CHECK(f.rows() == 1);
  CHECK(f.cols() == 16);
  CHECK(f.allFinite());
}

TEST_CASE("backbone_forward: permuting input points permutes output rows") {
  const PointCloud cloud = test_cloud(96, 4);
  const BackboneParams p = init_params(small_arch(NormKind::layer), 4);
  const MatX base = backbone_forward(p, cloud, Mode::eval);

  Rng rng(9);
  std::vector<int> perm(static_cast<std::size_t>(cloud.size()));
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  rng.shuffle(perm);
  PointCloud shuffled = cloud;
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    shuffled.xyz.row(i) = cloud.xyz.row(perm[static_cast<std::size_t>(i)]);
    (*shuffled.intensity)[i] = (*cloud.intensity)[perm[static_cast<std::size_t>(i)]];
  }
  const MatX moved = backbone_forward(p, shuffled, Mode::eval);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    CHECK((moved.row(i) - base.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("backbone_forward: layernorm output is batch-composition invariant") {
  const PointCloud a = test_cloud(80, 5);
  const PointCloud b = test_cloud(64, 6);
  const BackboneParams p = init_params(small_arch(NormKind::layer), 5);
  const MatX solo = backbone_forward(p, a, Mode::eval);
  const MatX joint = backbone_forward(p, {&a, &b}, Mode::eval);
  CHECK((joint.topRows(a.size()) - solo).cwiseAbs().maxCoeff() < 1e-5);

  // batch norm in train mode is not: the batch statistics shift
  const BackboneParams pb = init_params(small_arch(NormKind::batch), 5);
  const MatX solo_bn = backbone_forward(pb, a, Mode::train);
  const MatX joint_bn = backbone_forward(pb, {&a, &b}, Mode::train);
  CHECK((joint_bn.topRows(a.size()) - solo_bn).cwiseAbs().maxCoeff() > 1e-4);
}

TEST_CASE("backbone_forward: eval mode is deterministic and leaves statistics alone") {
  const PointCloud a = test_cloud(80, 7);
  BackboneParams p = init_params(small_arch(NormKind::batch), 7);
  const std::uint64_t before = parameter_hash(p);
  const MatX f1 = backbone_forward(p, a, Mode::eval);
  const MatX f2 = backbone_forward(p, a, Mode::eval);
  CHECK((f1 - f2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(parameter_hash(p) == before);
}

TEST_CASE("backbone_forward: missing intensity is rejected when the channel is enabled") {
  ArchConfig cfg = small_arch(NormKind::layer);
  cfg.use_intensity = true;
  PointCloud cloud = test_cloud(40, 8);
  cloud.intensity.reset();
  const BackboneParams p = init_params(cfg, 8);
  CHECK_THROWS_WITH(backbone_forward(p, cloud, Mode::eval), "intensity required");
}

TEST_CASE("backbone gradients match finite differences on a 64-point cloud") {
  const PointCloud cloud = test_cloud(64, 10);
  const int num_classes = 5;
  VecXi labels = cloud.labels->unaryExpr([](int l) {
    switch (l) {
      case 6: return 0;
      case 0: return 1;
      case 5: return 2;
      default: return 3;
    }
  });

  for (NormKind norm : {NormKind::layer, NormKind::batch}) {
    CAPTURE(static_cast<int>(norm));
    BackboneParams params = init_params(small_arch(norm), 11);
    HeadParams head = init_head(HeadKind::mlp2, 16, num_classes, 12);

    auto loss_fn = [&]() {
      const MatX feats = backbone_forward(params, cloud, Mode::train);
      const MatX logits = head_forward(head, feats, Mode::train);
      return cross_entropy(logits, labels, kIgnoreId) +
             lovasz_softmax(softmax(logits), labels, kIgnoreId);
    };

    // analytic gradients
    BackboneCache cache;
    HeadCache hcache;
    const MatX feats = backbone_forward(params, cloud, Mode::train, &cache);
    const MatX logits = head_forward(head, feats, Mode::train, &hcache);
    MatX grad_ce;
    cross_entropy(logits, labels, kIgnoreId, &grad_ce);
    const MatX probs = softmax(logits);
    MatX grad_probs;
    lovasz_softmax(probs, labels, kIgnoreId, &grad_probs);
    const MatX grad_logits = grad_ce + softmax_backward(probs, grad_probs);

    BackboneParams grads = zeros_like(params);
    HeadParams hgrads = zeros_like(head);
    MatX grad_feats;
    head_backward(head, hcache, grad_logits, hgrads, &grad_feats);
    backbone_backward(params, cache, grad_feats, grads);

    // random 32-coordinate subset of the backbone parameters
    std::vector<Real*> coords = all_coords(params);
    const std::vector<const Real*> grad_coords = grad_lookup(grads);
    Rng rng(13 + static_cast<std::uint64_t>(norm));
    const auto subset = rng.sample_indices(static_cast<int>(coords.size()), 32);
    int checked = 0;
    for (int idx : subset) {
      const Real fd = oracle::central_diff([&] { return loss_fn(); }, *coords[static_cast<std::size_t>(idx)]);
      const Real fd_big =
          oracle::central_diff([&] { return loss_fn(); }, *coords[static_cast<std::size_t>(idx)], 2e-4);
      if (!oracle::rel_close(fd, fd_big, 5e-3, 1e-7)) continue;  // lovasz sort tie
      CHECK(oracle::rel_close(*grad_coords[static_cast<std::size_t>(idx)], fd, 2e-3, 1e-7));
      ++checked;
    }
    CHECK(checked >= 24);

    // head gradient subset too
    std::vector<Real*> hcoords = all_head_coords(head);
    const auto hsubset = rng.sample_indices(static_cast<int>(hcoords.size()), 16);
    std::vector<const Real*> hgrad_coords;
    visit_head_tensors(hgrads, [&](int, const std::string&, const Real* data, Eigen::Index size) {
      for (Eigen::Index i = 0; i < size; ++i) hgrad_coords.push_back(data + i);
    });
    for (int idx : hsubset) {
      const Real fd = oracle::central_diff([&] { return loss_fn(); }, *hcoords[static_cast<std::size_t>(idx)]);
      const Real fd_big =
          oracle::central_diff([&] { return loss_fn(); }, *hcoords[static_cast<std::size_t>(idx)], 2e-4);
      if (!oracle::rel_close(fd, fd_big, 5e-3, 1e-7)) continue;
      CHECK(oracle::rel_close(*hgrad_coords[static_cast<std::size_t>(idx)], fd, 2e-3, 1e-7));
    }
  }
}

TEST_CASE("distillation gradient through backbone and projection head matches finite differences") {
  const PointCloud cloud = test_cloud(48, 20);
  BackboneParams params = init_params(small_arch(NormKind::layer), 21);
  HeadParams proj = init_head(HeadKind::distill_proj, 16, 6, 22);

  Rng rng(23);
  MatX targets(cloud.size(), 6);
  for (Eigen::Index i = 0; i < targets.rows(); ++i) {
    for (Eigen::Index j = 0; j < 6; ++j) targets(i, j) = rng.normal();
    targets.row(i) /= targets.row(i).norm();
  }

  auto loss_fn = [&]() {
    const MatX feats = backbone_forward(params, cloud, Mode::train);
    return distillation_loss(MatX(head_forward(proj, feats, Mode::train)), targets);
  };

  BackboneCache cache;
  HeadCache hcache;
  const MatX feats = backbone_forward(params, cloud, Mode::train, &cache);
  const MatX pf = head_forward(proj, feats, Mode::train, &hcache);
  MatX grad_pf;
  distillation_loss(pf, targets, &grad_pf);
  BackboneParams grads = zeros_like(params);
  HeadParams pgrads = zeros_like(proj);
  MatX grad_feats;
  head_backward(proj, hcache, grad_pf, pgrads, &grad_feats);
  backbone_backward(params, cache, grad_feats, grads);

  std::vector<Real*> coords = all_coords(params);
  const std::vector<const Real*> grad_coords = grad_lookup(grads);
  const auto subset = Rng(24).sample_indices(static_cast<int>(coords.size()), 32);
  int checked = 0;
  for (int idx : subset) {
    const Real fd = oracle::central_diff([&] { return loss_fn(); }, *coords[static_cast<std::size_t>(idx)]);
    const Real fd_big =
        oracle::central_diff([&] { return loss_fn(); }, *coords[static_cast<std::size_t>(idx)], 2e-4);
    if (!oracle::rel_close(fd, fd_big, 5e-3, 1e-8)) continue;  // relu kink under the step
    CHECK(oracle::rel_close(*grad_coords[static_cast<std::size_t>(idx)], fd, 2e-3, 1e-8));
    ++checked;
  }
  CHECK(checked >= 24);
}

TEST_CASE("head_forward: mlp2 with zero second layer gives all-zero logits") {
  HeadParams head = init_head(HeadKind::mlp2, 8, 4, 1);
  head.w2.setZero();
  head.b2.setZero();
  const MatX feats = MatX::Random(10, 8);
  CHECK(head_forward(head, feats, Mode::eval).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("head_forward: identity batchnorm reduces linear_bn to a plain linear layer") {
  HeadParams head = init_head(HeadKind::linear_bn, 8, 4, 2);
  // identity statistics: mean 0, var 1 - eps correction, scale 1, shift 0
  head.bn.running_mean.setZero();
  head.bn.running_var.setConstant(1.0 - kNormEps);
  const MatX feats = MatX::Random(10, 8);
  const MatX got = head_forward(head, feats, Mode::eval);
  const MatX want = (feats * head.w1.transpose()).rowwise() + head.b1.transpose();
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("head dimension mismatch is rejected") {
  HeadParams head = init_head(HeadKind::mlp2, 8, 4, 3);
  const MatX feats = MatX::Random(5, 7);
  CHECK_THROWS(head_forward(head, feats, Mode::eval));
}

TEST_CASE("fold_linear_head: identity statistics keep the original weights") {
  HeadParams head = init_head(HeadKind::linear_bn, 8, 4, 4);
  head.bn.running_mean.setZero();
  head.bn.running_var.setConstant(1.0 - kNormEps);
  const AffineLayer folded = fold_linear_head(head);
  CHECK((folded.w - head.w1).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((folded.b - head.b1).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("fold_linear_head: folded affine matches the unfolded head on random inputs") {
  Rng rng(31);
  HeadParams head = init_head(HeadKind::linear_bn, 12, 5, 5);
  for (Eigen::Index j = 0; j < 12; ++j) {
    head.bn.running_mean[j] = rng.normal();
    head.bn.running_var[j] = 0.2 + rng.uniform();
    head.bn.gamma[j] = 0.5 + rng.uniform();
    head.bn.beta[j] = rng.normal();
  }
  const AffineLayer folded = fold_linear_head(head);
  Real max_dev = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    MatX x(1, 12);
    for (Eigen::Index j = 0; j < 12; ++j) x(0, j) = 3.0 * rng.normal();
    const MatX a = head_forward(head, x, Mode::eval);
    const MatX b = folded.apply(x);
    max_dev = std::max(max_dev, (a - b).cwiseAbs().maxCoeff());
  }
  CHECK(max_dev < 1e-5);
}

TEST_CASE("fold_linear_head: zero-variance channel stays finite") {
  HeadParams head = init_head(HeadKind::linear_bn, 6, 3, 6);
  head.bn.running_var.setZero();
  head.bn.running_mean.setConstant(2.0);
  const AffineLayer folded = fold_linear_head(head);
  CHECK(folded.w.allFinite());
  CHECK(folded.b.allFinite());
  const MatX out = folded.apply(MatX::Random(4, 6));
  CHECK(out.allFinite());
}

TEST_CASE("recalibrate_batchnorm: weights unchanged, statistics match a scalar-loop oracle") {
  std::vector<PointCloud> clouds;
  for (std::uint64_t s = 40; s < 46; ++s) clouds.push_back(test_cloud(90, s));
  std::vector<const PointCloud*> ptrs;
  for (const auto& c : clouds) ptrs.push_back(&c);

  BackboneParams params = init_params(small_arch(NormKind::batch), 41);
  // converge the running stats onto this distribution (same batch every
  // pass, so the EMA settles geometrically)
  for (int pass = 0; pass < 400; ++pass) {
    BackboneCache cache;
    backbone_forward(params, ptrs, Mode::train, &cache);
    commit_batch_stats(params, cache);
  }

  // weight bytes identical before/after recalibration
  const BackboneParams recal = recalibrate_batchnorm(params, ptrs);
  bool weights_equal = true;
  visit_tensors(params, [&](int g, const std::string& name, const Real* data, Eigen::Index size) {
    const Real* other = nullptr;
    visit_tensors(recal, [&](int, const std::string& n2, const Real* d2, Eigen::Index) {
      if (n2 == name) other = d2;
    });
    (void)g;
    for (Eigen::Index i = 0; i < size; ++i) {
      if (data[i] != other[i]) weights_equal = false;
    }
  });
  CHECK(weights_equal);

  // oracle: capture raw inputs during an identical eval pass and take the
  // per-channel mean/var with plain loops
  BnCapture capture;
  capture.keep_raw = true;
  for (const PointCloud* c : ptrs) backbone_forward(params, {c}, Mode::eval, nullptr, &capture);
  const std::size_t sites = capture.raw.size();
  REQUIRE(sites == 5);  // 2 layers x 2 + out norm
  std::vector<VecX> means(sites), vars(sites);
  for (std::size_t s = 0; s < sites; ++s) {
    const Eigen::Index c = capture.raw[s][0].cols();
    VecX mean = VecX::Zero(c), var = VecX::Zero(c);
    std::int64_t n = 0;
    for (const MatX& m : capture.raw[s]) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < c; ++j) mean[j] += m(i, j);
        ++n;
      }
    }
    mean /= static_cast<Real>(n);
    for (const MatX& m : capture.raw[s]) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < c; ++j) {
          var[j] += (m(i, j) - mean[j]) * (m(i, j) - mean[j]);
        }
      }
    }
    var /= static_cast<Real>(n);
    means[s] = mean;
    vars[s] = var;
  }
  std::size_t site = 0;
  auto check_site = [&](const NormParams& np) {
    CHECK((np.running_mean - means[site]).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((np.running_var - vars[site]).cwiseAbs().maxCoeff() < 1e-6);
    ++site;
  };
  for (const auto& layer : recal.layers) {
    check_site(layer.norm1);
    check_site(layer.norm2);
  }
  check_site(recal.out_norm);

  // recalibrating on the training distribution barely changes eval outputs
  Real change = 0.0;
  Real count = 0.0;
  for (const PointCloud* c : ptrs) {
    const MatX before = backbone_forward(params, {c}, Mode::eval);
    const MatX after = backbone_forward(recal, {c}, Mode::eval);
    change += (before - after).cwiseAbs().sum();
    count += static_cast<Real>(before.size());
  }
  CHECK(change / count < 1e-3);

  // layer-norm backbones have nothing to recalibrate
  const BackboneParams ln = init_params(small_arch(NormKind::layer), 42);
  CHECK_THROWS_WITH(recalibrate_batchnorm(ln, ptrs), "no batchnorm to recalibrate");
}
