#pragma once

#include "lidarseg/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lidarseg {

// Analytic scene primitives keep ray casting exact and easy to verify.
struct Primitive {
  enum class Kind { plane, box, cylinder, billboard };
  Kind kind = Kind::plane;
  int class_id = 0;

  // plane: horizontal plane at height z, optionally bounded in xy
  double z = 0.0;
  bool bounded = false;
  double min_x = 0.0, max_x = 0.0, min_y = 0.0, max_y = 0.0;

  // box: axis-aligned, center/size
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3::Zero();

  // cylinder: vertical axis through (center.x, center.y), lateral surface only
  double radius = 0.0;
  double z_low = 0.0, z_high = 0.0;

  // billboard: vertical rectangle at center, facing azimuth
  double azimuth = 0.0;
  double bb_width = 0.0, bb_height = 0.0;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  double intensity_offset = 0.0;  // per-domain shift of the intensity model
};

struct RayHit {
  double t = 0.0;
  int prim_index = -1;
  int class_id = -1;
};

// Nearest positive intersection along origin + t * dir, within max_range.
std::optional<RayHit> cast_ray(const SceneSpec& scene, const Vec3& origin, const Vec3& dir,
                               double max_range);

// Per-class reflectance used by the synthetic intensity model.
double class_intensity_base(int class_id);

// Beam-grid scan of an analytic scene. Deterministic per seed. Every point
// carries the label of the primitive it hit; intensity is a class-dependent
// base plus seeded Gaussian noise (sigma 0.05), clipped to [0, 1].
Frame simulate_scan(const SceneSpec& scene, const SensorConfig& sensor, std::uint64_t seed);

// Pinhole projection of all points with positive depth that land inside the
// image. A cloud fully behind the camera yields an empty result.
Correspondences project_points(const PointCloud& cloud, const CameraModel& cam, int camera_id = 0);

// z-rotation / single-axis flip / global scale, each drawn from the seed.
// Labels and intensity pass through unchanged.
PointCloud augment(const PointCloud& cloud, const AugmentPolicy& policy, std::uint64_t seed);

// Applies a rigid transform (4x4, det +1) to the cloud coordinates.
PointCloud transform_cloud(const PointCloud& cloud, const Mat4& transform);

// Per-pixel class/instance render of the scene from a camera. Channels:
// R = class id (255 where no hit), G = (primitive index + 1) mod 256,
// B = depth shading. This is the synthetic stand-in for a real photo.
Image render_camera_view(const SceneSpec& scene, const CameraModel& cam, double max_range = 120.0);

// JSON (de)serialization of SceneSpec; schema documented in the README.
std::string scene_to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const std::string& text);

}  // namespace lidarseg
