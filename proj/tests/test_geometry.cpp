#include <doctest.h>

#include "lidarseg/geometry.hpp"
#include "lidarseg/image_io.hpp"

#include "oracles.hpp"

#include <cstdio>
#include <filesystem>

using namespace lidarseg;

namespace {

SceneSpec ground_only() {
  SceneSpec scene;
  Primitive ground;
  ground.kind = Primitive::Kind::plane;
  ground.class_id = 6;  // driveable surface
  ground.z = 0.0;
  scene.primitives.push_back(ground);
  return scene;
}

SensorConfig downward_sensor(int beams, int azimuth_steps) {
  SensorConfig s;
  s.beams = beams;
  s.azimuth_steps = azimuth_steps;
  s.mount_height = 1.8;
  s.vertical_fov_low_deg = -30.0;
  s.vertical_fov_high_deg = -10.0;
  s.max_range = 100.0;
  s.dropout_rate = 0.0;
  return s;
}

CameraModel simple_camera(int width = 200, int height = 100) {
  CameraModel cam;
  cam.intrinsics << 120.0, 0.0, width / 2.0, 0.0, 120.0, height / 2.0, 0.0, 0.0, 1.0;
  cam.extrinsics = Mat4::Identity();
  cam.width = width;
  cam.height = height;
  return cam;
}

bool clouds_equal(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) return false;
  if ((a.xyz - b.xyz).cwiseAbs().maxCoeff() != 0.0) return false;
  if (a.intensity.has_value() != b.intensity.has_value()) return false;
  if (a.intensity && (*a.intensity - *b.intensity).cwiseAbs().maxCoeff() != 0.0) return false;
  if (a.labels.has_value() != b.labels.has_value()) return false;
  if (a.labels && *a.labels != *b.labels) return false;
  return true;
}

// Independent ray-AABB caster: intersects all six face planes and keeps
// contained hits, instead of the slab method used by the library.
double oracle_ray_aabb(const Vec3& o, const Vec3& d, const Vec3& lo, const Vec3& hi) {
  double best = std::numeric_limits<double>::infinity();
  for (int axis = 0; axis < 3; ++axis) {
    for (double plane : {lo[axis], hi[axis]}) {
      if (std::abs(d[axis]) < 1e-12) continue;
      const double t = (plane - o[axis]) / d[axis];
      if (t <= 1e-9 || t >= best) continue;
      const Vec3 p = o + t * d;
      bool inside = true;
      for (int other = 0; other < 3; ++other) {
        if (other == axis) continue;
        if (p[other] < lo[other] - 1e-12 || p[other] > hi[other] + 1e-12) inside = false;
      }
      if (inside) best = t;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("simulate_scan: downward beam grid over flat ground hits every ray") {
  const Frame frame = simulate_scan(ground_only(), downward_sensor(2, 4), 1);
  CHECK(frame.cloud.size() == 8);
  REQUIRE(frame.cloud.labels.has_value());
  for (Eigen::Index i = 0; i < 8; ++i) CHECK((*frame.cloud.labels)[i] == 6);
  // every point lies on the ground plane
  CHECK(frame.cloud.xyz.col(2).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("simulate_scan: same scene and seed give bit-identical frames") {
  SceneSpec scene = ground_only();
  Primitive box;
  box.kind = Primitive::Kind::box;
  box.class_id = 0;
  box.center = Vec3(6.0, 1.0, 0.8);
  box.size = Vec3(4.0, 1.8, 1.6);
  scene.primitives.push_back(box);

  SensorConfig sensor = downward_sensor(8, 64);
  sensor.dropout_rate = 0.1;
  const Frame a = simulate_scan(scene, sensor, 77);
  const Frame b = simulate_scan(scene, sensor, 77);
  CHECK(clouds_equal(a.cloud, b.cloud));

  const Frame c = simulate_scan(scene, sensor, 78);
  CHECK_FALSE(clouds_equal(a.cloud, c.cloud));
}

TEST_CASE("simulate_scan: box hits match an independent brute-force ray caster") {
  SceneSpec scene;
  Primitive box;
  box.kind = Primitive::Kind::box;
  box.class_id = 3;
  box.center = Vec3(8.0, -2.0, 1.0);
  box.size = Vec3(5.0, 2.4, 2.0);
  scene.primitives.push_back(box);

  SensorConfig sensor;
  sensor.beams = 64;
  sensor.azimuth_steps = 256;
  sensor.mount_height = 1.8;
  sensor.vertical_fov_low_deg = -25.0;
  sensor.vertical_fov_high_deg = 3.0;
  sensor.max_range = 60.0;

  const Frame frame = simulate_scan(scene, sensor, 5);

  // replay the beam grid with the independent caster
  const Vec3 origin(0.0, 0.0, sensor.mount_height);
  const Vec3 lo = box.center - 0.5 * box.size;
  const Vec3 hi = box.center + 0.5 * box.size;
  const double elo = sensor.vertical_fov_low_deg * M_PI / 180.0;
  const double ehi = sensor.vertical_fov_high_deg * M_PI / 180.0;

  std::vector<double> expected_ranges;
  for (int b = 0; b < sensor.beams; ++b) {
    const double elev = elo + (ehi - elo) * b / (sensor.beams - 1);
    for (int a = 0; a < sensor.azimuth_steps; ++a) {
      const double az = 2.0 * M_PI * a / sensor.azimuth_steps;
      const Vec3 dir(std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev));
      const double t = oracle_ray_aabb(origin, dir, lo, hi);
      if (t < sensor.max_range) expected_ranges.push_back(t);
    }
  }

  REQUIRE(frame.cloud.size() == static_cast<Eigen::Index>(expected_ranges.size()));
  for (Eigen::Index i = 0; i < frame.cloud.size(); ++i) {
    const double r = (frame.cloud.xyz.row(i).transpose() - origin).norm();
    CHECK(r == doctest::Approx(expected_ranges[static_cast<std::size_t>(i)]).epsilon(1e-9));
  }
}

TEST_CASE("simulate_scan: point count never exceeds the beam grid") {
  SceneSpec scene = ground_only();
  Primitive pole;
  pole.kind = Primitive::Kind::cylinder;
  pole.class_id = 5;
  pole.center = Vec3(4.0, 0.0, 0.0);
  pole.radius = 0.3;
  pole.z_low = 0.0;
  pole.z_high = 1.8;
  scene.primitives.push_back(pole);
  for (int beams : {1, 4, 16}) {
    SensorConfig s = downward_sensor(beams, 32);
    s.vertical_fov_high_deg = 10.0;  // some rays escape upward
    const Frame f = simulate_scan(scene, s, 3);
    CHECK(f.cloud.size() <= beams * 32);
  }
}

TEST_CASE("simulate_scan: rejects an empty scene") {
  CHECK_THROWS_WITH(simulate_scan(SceneSpec{}, downward_sensor(2, 4), 1), "empty scene");
}

TEST_CASE("simulate_scan: intensity stays in range and shifts with the domain offset") {
  SceneSpec scene = ground_only();
  SensorConfig sensor = downward_sensor(8, 128);
  const Frame base = simulate_scan(scene, sensor, 9);
  scene.intensity_offset = 0.2;
  const Frame shifted = simulate_scan(scene, sensor, 9);
  REQUIRE(base.cloud.intensity.has_value());
  CHECK(base.cloud.intensity->minCoeff() >= 0.0);
  CHECK(base.cloud.intensity->maxCoeff() <= 1.0);
  CHECK(shifted.cloud.intensity->mean() - base.cloud.intensity->mean() ==
        doctest::Approx(0.2).epsilon(0.05));
}

TEST_CASE("project_points: point on the optical axis lands on the principal point") {
  PointCloud cloud;
  cloud.xyz.resize(1, 3);
  cloud.xyz << 0.0, 0.0, 5.0;
  CameraModel cam = simple_camera();
  cam.intrinsics(0, 2) = 100.0;
  cam.intrinsics(1, 2) = 50.0;
  const Correspondences c = project_points(cloud, cam);
  REQUIRE(c.size() == 1);
  CHECK(c.pixel_uv(0, 0) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(c.pixel_uv(0, 1) == doctest::Approx(50.0).epsilon(1e-12));
}

TEST_CASE("project_points: points behind the camera are excluded") {
  PointCloud cloud;
  cloud.xyz.resize(1, 3);
  cloud.xyz << 0.0, 0.0, -1.0;
  const Correspondences c = project_points(cloud, simple_camera());
  CHECK(c.size() == 0);
}

TEST_CASE("project_points: matches a scalar per-point oracle on a random cloud") {
  Rng rng(2024);
  PointCloud cloud;
  cloud.xyz.resize(1000, 3);
  for (Eigen::Index i = 0; i < 1000; ++i) {
    cloud.xyz(i, 0) = rng.uniform(-20.0, 20.0);
    cloud.xyz(i, 1) = rng.uniform(-20.0, 20.0);
    cloud.xyz(i, 2) = rng.uniform(-5.0, 40.0);
  }
  CameraModel cam = simple_camera(320, 240);
  // rotate the camera a little around y and shift it
  const double a = 0.3;
  Mat3 rot;
  rot << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  cam.extrinsics.topLeftCorner<3, 3>() = rot;
  cam.extrinsics.topRightCorner<3, 1>() = Vec3(0.4, -0.2, 1.0);

  const Correspondences got = project_points(cloud, cam);

  // scalar re-implementation
  std::vector<int> want_idx;
  std::vector<double> want_u, want_v;
  for (int i = 0; i < 1000; ++i) {
    double x = cloud.xyz(i, 0), y = cloud.xyz(i, 1), z = cloud.xyz(i, 2);
    const double xc = rot(0, 0) * x + rot(0, 1) * y + rot(0, 2) * z + 0.4;
    const double yc = rot(1, 0) * x + rot(1, 1) * y + rot(1, 2) * z - 0.2;
    const double zc = rot(2, 0) * x + rot(2, 1) * y + rot(2, 2) * z + 1.0;
    if (zc <= 0.0) continue;
    const double u = 120.0 * xc / zc + 160.0;
    const double v = 120.0 * yc / zc + 120.0;
    if (u < 0.0 || u >= 320.0 || v < 0.0 || v >= 240.0) continue;
    want_idx.push_back(i);
    want_u.push_back(u);
    want_v.push_back(v);
  }

  REQUIRE(got.size() == static_cast<Eigen::Index>(want_idx.size()));
  for (Eigen::Index k = 0; k < got.size(); ++k) {
    CHECK(got.point_idx[k] == want_idx[static_cast<std::size_t>(k)]);
    CHECK(std::abs(got.pixel_uv(k, 0) - want_u[static_cast<std::size_t>(k)]) < 1e-9);
    CHECK(std::abs(got.pixel_uv(k, 1) - want_v[static_cast<std::size_t>(k)]) < 1e-9);
  }
}

TEST_CASE("project_points: invariant under a joint rigid transform of cloud and extrinsics") {
  Rng rng(6);
  PointCloud cloud;
  cloud.xyz.resize(200, 3);
  for (Eigen::Index i = 0; i < 200; ++i) {
    cloud.xyz(i, 0) = rng.uniform(-10.0, 10.0);
    cloud.xyz(i, 1) = rng.uniform(-10.0, 10.0);
    cloud.xyz(i, 2) = rng.uniform(1.0, 30.0);
  }
  CameraModel cam = simple_camera(256, 128);

  // rigid world transform
  const double a = 0.7;
  Mat4 world = Mat4::Identity();
  world.topLeftCorner<3, 3>() << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  world.topRightCorner<3, 1>() = Vec3(2.0, -1.0, 0.5);

  const PointCloud moved = transform_cloud(cloud, world);
  CameraModel cam_moved = cam;
  cam_moved.extrinsics = cam.extrinsics * world.inverse();

  const Correspondences c0 = project_points(cloud, cam);
  const Correspondences c1 = project_points(moved, cam_moved);
  REQUIRE(c0.size() == c1.size());
  CHECK(c0.point_idx == c1.point_idx);
  CHECK((c0.pixel_uv - c1.pixel_uv).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("augment: all-off policy returns the input bitwise") {
  const Frame f = simulate_scan(ground_only(), downward_sensor(4, 16), 12);
  const PointCloud out = augment(f.cloud, AugmentPolicy{}, 55);
  CHECK(clouds_equal(out, f.cloud));
}

TEST_CASE("augment: scale stays inside the configured range and is shared by all points") {
  const Frame f = simulate_scan(ground_only(), downward_sensor(4, 32), 12);
  AugmentPolicy policy;
  policy.scale_low = 0.9;
  policy.scale_high = 1.1;
  for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
    const PointCloud out = augment(f.cloud, policy, seed);
    double shared_ratio = -1.0;
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const double ratio = out.xyz.row(i).norm() / f.cloud.xyz.row(i).norm();
      CHECK(ratio >= 0.9 - 1e-12);
      CHECK(ratio <= 1.1 + 1e-12);
      if (shared_ratio < 0) shared_ratio = ratio;
      CHECK(ratio == doctest::Approx(shared_ratio).epsilon(1e-12));
    }
  }
}

TEST_CASE("augment: z-rotation is undone by the recovered angle") {
  const Frame f = simulate_scan(ground_only(), downward_sensor(4, 32), 8);
  AugmentPolicy policy;
  policy.rotate_z = true;
  const PointCloud out = augment(f.cloud, policy, 91);

  // recover the angle from the first point and rotate back
  const double before = std::atan2(f.cloud.xyz(0, 1), f.cloud.xyz(0, 0));
  const double after = std::atan2(out.xyz(0, 1), out.xyz(0, 0));
  const double theta = after - before;
  const double c = std::cos(-theta), s = std::sin(-theta);
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double x = c * out.xyz(i, 0) - s * out.xyz(i, 1);
    const double y = s * out.xyz(i, 0) + c * out.xyz(i, 1);
    CHECK(std::abs(x - f.cloud.xyz(i, 0)) < 1e-6);
    CHECK(std::abs(y - f.cloud.xyz(i, 1)) < 1e-6);
    CHECK(out.xyz(i, 2) == f.cloud.xyz(i, 2));
    // xy norm preserved
    CHECK(std::hypot(out.xyz(i, 0), out.xyz(i, 1)) ==
          doctest::Approx(std::hypot(f.cloud.xyz(i, 0), f.cloud.xyz(i, 1))).epsilon(1e-12));
  }
}

TEST_CASE("augment: flip negates exactly one axis or none, labels/intensity pass through") {
  const Frame f = simulate_scan(ground_only(), downward_sensor(4, 32), 8);
  AugmentPolicy policy;
  policy.flip_xy = true;
  bool saw_flip = false, saw_identity = false;
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    const PointCloud out = augment(f.cloud, policy, seed);
    const bool x_flipped = (out.xyz.col(0) + f.cloud.xyz.col(0)).cwiseAbs().maxCoeff() == 0.0;
    const bool x_same = (out.xyz.col(0) - f.cloud.xyz.col(0)).cwiseAbs().maxCoeff() == 0.0;
    const bool y_flipped = (out.xyz.col(1) + f.cloud.xyz.col(1)).cwiseAbs().maxCoeff() == 0.0;
    const bool y_same = (out.xyz.col(1) - f.cloud.xyz.col(1)).cwiseAbs().maxCoeff() == 0.0;
    CHECK((x_flipped ? y_same : true));
    CHECK((y_flipped ? x_same : true));
    CHECK((x_flipped || y_flipped || (x_same && y_same)));
    saw_flip = saw_flip || x_flipped || y_flipped;
    saw_identity = saw_identity || (x_same && y_same);
    CHECK(*out.labels == *f.cloud.labels);
    CHECK((*out.intensity - *f.cloud.intensity).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(saw_flip);
  CHECK(saw_identity);
}

TEST_CASE("scene spec json round trip") {
  SceneSpec scene = ground_only();
  Primitive box;
  box.kind = Primitive::Kind::box;
  box.class_id = 0;
  box.center = Vec3(1.0, 2.0, 0.5);
  box.size = Vec3(4.0, 2.0, 1.5);
  scene.primitives.push_back(box);
  Primitive bb;
  bb.kind = Primitive::Kind::billboard;
  bb.class_id = 9;
  bb.center = Vec3(-3.0, 5.0, 1.0);
  bb.azimuth = 0.4;
  bb.bb_width = 6.0;
  bb.bb_height = 2.0;
  scene.primitives.push_back(bb);
  scene.intensity_offset = -0.1;

  const SceneSpec back = scene_from_json(scene_to_json(scene));
  REQUIRE(back.primitives.size() == scene.primitives.size());
  CHECK(back.intensity_offset == scene.intensity_offset);
  CHECK(back.primitives[1].center == scene.primitives[1].center);
  CHECK(back.primitives[2].bb_width == scene.primitives[2].bb_width);

  const Frame a = simulate_scan(scene, downward_sensor(8, 64), 4);
  const Frame b = simulate_scan(back, downward_sensor(8, 64), 4);
  CHECK(clouds_equal(a.cloud, b.cloud));
}

TEST_CASE("png round trip preserves every byte") {
  Rng rng(64);
  Image img;
  img.width = 37;
  img.height = 21;
  img.rgb.resize(37 * 21 * 3);
  for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.uniform_int(256));

  const std::string path =
      (std::filesystem::temp_directory_path() / "lidarseg_test_roundtrip.png").string();
  write_png(path, img);
  const Image back = read_png(path);
  std::filesystem::remove(path);

  REQUIRE(back.width == img.width);
  REQUIRE(back.height == img.height);
  CHECK(back.rgb == img.rgb);
}

TEST_CASE("camera render marks classes and misses") {
  SceneSpec scene = ground_only();
  Primitive box;
  box.kind = Primitive::Kind::box;
  box.class_id = 0;
  box.center = Vec3(0.0, 0.0, 10.0);  // straight ahead of a z-forward camera
  box.size = Vec3(2.0, 2.0, 2.0);
  scene.primitives.push_back(box);

  CameraModel cam = simple_camera(64, 48);
  const Image img = render_camera_view(scene, cam);
  // center pixel sees the box
  CHECK(img.at(32, 24, 0) == 0);
  // top corner rays miss everything
  CHECK(img.at(0, 0, 0) == 255);
}
