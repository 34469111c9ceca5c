#include "lidarseg/geometry.hpp"

#include <json.hpp>

#include <cmath>
#include <limits>

namespace lidarseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// t of the nearest positive intersection, or +inf.
double hit_plane(const Primitive& p, const Vec3& o, const Vec3& d) {
  if (std::abs(d.z()) < 1e-12) return kInf;
  const double t = (p.z - o.z()) / d.z();
  if (t <= 1e-9) return kInf;
  if (p.bounded) {
    const double x = o.x() + t * d.x();
    const double y = o.y() + t * d.y();
    if (x < p.min_x || x > p.max_x || y < p.min_y || y > p.max_y) return kInf;
  }
  return t;
}

// slab method
double hit_box(const Primitive& p, const Vec3& o, const Vec3& d) {
  double t0 = 0.0, t1 = kInf;
  for (int a = 0; a < 3; ++a) {
    const double lo = p.center[a] - 0.5 * p.size[a];
    const double hi = p.center[a] + 0.5 * p.size[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return kInf;
      continue;
    }
    double ta = (lo - o[a]) / d[a];
    double tb = (hi - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return kInf;
  }
  return t0 > 1e-9 ? t0 : kInf;
}

// lateral surface only; caps are not modeled
double hit_cylinder(const Primitive& p, const Vec3& o, const Vec3& d) {
  const double ox = o.x() - p.center.x();
  const double oy = o.y() - p.center.y();
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a < 1e-15) return kInf;
  const double b = 2.0 * (ox * d.x() + oy * d.y());
  const double c = ox * ox + oy * oy - p.radius * p.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return kInf;
  const double sq = std::sqrt(disc);
  for (double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
    if (t <= 1e-9) continue;
    const double z = o.z() + t * d.z();
    if (z >= p.z_low && z <= p.z_high) return t;
  }
  return kInf;
}

double hit_billboard(const Primitive& p, const Vec3& o, const Vec3& d) {
  const Vec3 normal(std::cos(p.azimuth), std::sin(p.azimuth), 0.0);
  const double denom = normal.dot(d);
  if (std::abs(denom) < 1e-12) return kInf;
  const double t = normal.dot(p.center - o) / denom;
  if (t <= 1e-9) return kInf;
  const Vec3 hp = o + t * d;
  // in-plane horizontal axis
  const Vec3 side(-std::sin(p.azimuth), std::cos(p.azimuth), 0.0);
  if (std::abs(side.dot(hp - p.center)) > 0.5 * p.bb_width) return kInf;
  if (std::abs(hp.z() - p.center.z()) > 0.5 * p.bb_height) return kInf;
  return t;
}

double hit_primitive(const Primitive& p, const Vec3& o, const Vec3& d) {
  switch (p.kind) {
    case Primitive::Kind::plane: return hit_plane(p, o, d);
    case Primitive::Kind::box: return hit_box(p, o, d);
    case Primitive::Kind::cylinder: return hit_cylinder(p, o, d);
    case Primitive::Kind::billboard: return hit_billboard(p, o, d);
  }
  return kInf;
}

}  // namespace

std::optional<RayHit> cast_ray(const SceneSpec& scene, const Vec3& origin, const Vec3& dir,
                               double max_range) {
  RayHit best;
  best.t = max_range;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    const double t = hit_primitive(scene.primitives[i], origin, dir);
    if (t < best.t) {
      best.t = t;
      best.prim_index = static_cast<int>(i);
      best.class_id = scene.primitives[i].class_id;
    }
  }
  if (best.prim_index < 0) return std::nullopt;
  return best;
}

double class_intensity_base(int class_id) {
  // shared class order: car, bicycle, motorcycle, truck, other vehicle,
  // pedestrian, driveable surface, sidewalk, terrain, vegetation
  static constexpr double kBases[10] = {0.55, 0.35, 0.40, 0.50, 0.45,
                                        0.30, 0.18, 0.26, 0.32, 0.62};
  if (class_id >= 0 && class_id < 10) return kBases[class_id];
  return 0.40;
}

Frame simulate_scan(const SceneSpec& scene, const SensorConfig& sensor, std::uint64_t seed) {
  validate(sensor);
  require(!scene.primitives.empty(), "empty scene");

  Rng rng(derive_seed(seed, fnv1a("simulate_scan")));
  const Vec3 origin(0.0, 0.0, sensor.mount_height);
  const double lo = sensor.vertical_fov_low_deg * M_PI / 180.0;
  const double hi = sensor.vertical_fov_high_deg * M_PI / 180.0;

  std::vector<Vec3> pts;
  std::vector<int> labels;
  std::vector<double> intensities;
  pts.reserve(static_cast<std::size_t>(sensor.beams) * static_cast<std::size_t>(sensor.azimuth_steps));

  for (int b = 0; b < sensor.beams; ++b) {
    const double elev = sensor.beams == 1
                            ? 0.5 * (lo + hi)
                            : lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(sensor.beams - 1);
    const double ce = std::cos(elev), se = std::sin(elev);
    for (int a = 0; a < sensor.azimuth_steps; ++a) {
      const double az = 2.0 * M_PI * static_cast<double>(a) / static_cast<double>(sensor.azimuth_steps);
      const Vec3 dir(ce * std::cos(az), ce * std::sin(az), se);
      const auto hit = cast_ray(scene, origin, dir, sensor.max_range);
      if (!hit) continue;
      if (sensor.dropout_rate > 0.0 && rng.uniform() < sensor.dropout_rate) continue;
      pts.push_back(origin + hit->t * dir);
      labels.push_back(hit->class_id);
      const double base = class_intensity_base(hit->class_id) + scene.intensity_offset;
      intensities.push_back(std::clamp(base + 0.05 * rng.normal(), 0.0, 1.0));
    }
  }

  Frame frame;
  const Eigen::Index n = static_cast<Eigen::Index>(pts.size());
  frame.cloud.xyz.resize(n, 3);
  VecX intensity(n);
  VecXi lab(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    frame.cloud.xyz.row(i) = pts[static_cast<std::size_t>(i)].transpose();
    intensity[i] = intensities[static_cast<std::size_t>(i)];
    lab[i] = labels[static_cast<std::size_t>(i)];
  }
  frame.cloud.intensity = std::move(intensity);
  frame.cloud.labels = std::move(lab);
  return frame;
}

Correspondences project_points(const PointCloud& cloud, const CameraModel& cam, int camera_id) {
  require(cloud.size() > 0, "project_points: empty cloud");
  validate(cam);

  const Mat3 rot = cam.extrinsics.topLeftCorner<3, 3>();
  const Vec3 trans = cam.extrinsics.topRightCorner<3, 1>();

  std::vector<int> idx;
  std::vector<Vec2> uv;
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const Vec3 pc = rot * cloud.xyz.row(i).transpose() + trans;
    if (pc.z() <= 0.0) continue;
    const double u = cam.fx() * pc.x() / pc.z() + cam.cx();
    const double v = cam.fy() * pc.y() / pc.z() + cam.cy();
    if (u < 0.0 || u >= static_cast<double>(cam.width)) continue;
    if (v < 0.0 || v >= static_cast<double>(cam.height)) continue;
    idx.push_back(static_cast<int>(i));
    uv.emplace_back(u, v);
  }

  Correspondences out;
  out.camera_id = camera_id;
  const Eigen::Index m = static_cast<Eigen::Index>(idx.size());
  out.point_idx.resize(m);
  out.pixel_uv.resize(m, 2);
  for (Eigen::Index k = 0; k < m; ++k) {
    out.point_idx[k] = idx[static_cast<std::size_t>(k)];
    out.pixel_uv.row(k) = uv[static_cast<std::size_t>(k)].transpose();
  }
  return out;
}

PointCloud augment(const PointCloud& cloud, const AugmentPolicy& policy, std::uint64_t seed) {
  require(cloud.size() > 0, "augment: empty cloud");
  validate(policy);

  Rng rng(derive_seed(seed, fnv1a("augment")));
  PointCloud out = cloud;

  if (policy.flip_xy) {
    // exactly one of x/y, or neither, each with probability 1/3
    const double u = rng.uniform();
    if (u < 1.0 / 3.0) {
      out.xyz.col(0) = -out.xyz.col(0);
    } else if (u < 2.0 / 3.0) {
      out.xyz.col(1) = -out.xyz.col(1);
    }
  }
  if (policy.rotate_z) {
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const double c = std::cos(theta), s = std::sin(theta);
    for (Eigen::Index i = 0; i < out.size(); ++i) {
      const double x = out.xyz(i, 0), y = out.xyz(i, 1);
      out.xyz(i, 0) = c * x - s * y;
      out.xyz(i, 1) = s * x + c * y;
    }
  }
  if (policy.scale_low != 1.0 || policy.scale_high != 1.0) {
    const double s = rng.uniform(policy.scale_low, policy.scale_high);
    out.xyz *= s;
  }
  return out;
}

PointCloud transform_cloud(const PointCloud& cloud, const Mat4& transform) {
  PointCloud out = cloud;
  const Mat3 rot = transform.topLeftCorner<3, 3>();
  const Vec3 trans = transform.topRightCorner<3, 1>();
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    out.xyz.row(i) = (rot * cloud.xyz.row(i).transpose() + trans).transpose();
  }
  return out;
}

Image render_camera_view(const SceneSpec& scene, const CameraModel& cam, double max_range) {
  validate(cam);
  const Mat3 rot = cam.extrinsics.topLeftCorner<3, 3>();
  const Vec3 trans = cam.extrinsics.topRightCorner<3, 1>();
  const Mat3 rot_inv = rot.transpose();
  const Vec3 center = -rot_inv * trans;  // camera center in lidar frame

  Image img;
  img.width = cam.width;
  img.height = cam.height;
  img.rgb.assign(static_cast<std::size_t>(cam.width) * static_cast<std::size_t>(cam.height) * 3, 0);

  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Vec3 dir_cam((static_cast<double>(x) + 0.5 - cam.cx()) / cam.fx(),
                         (static_cast<double>(y) + 0.5 - cam.cy()) / cam.fy(), 1.0);
      const Vec3 dir = (rot_inv * dir_cam).normalized();
      const auto hit = cast_ray(scene, center, dir, max_range);
      if (hit) {
        img.at(x, y, 0) = static_cast<std::uint8_t>(hit->class_id & 0xff);
        img.at(x, y, 1) = static_cast<std::uint8_t>((hit->prim_index + 1) & 0xff);
        const double shade = std::clamp(1.0 - hit->t / max_range, 0.0, 1.0);
        img.at(x, y, 2) = static_cast<std::uint8_t>(shade * 255.0);
      } else {
        img.at(x, y, 0) = 255;
        img.at(x, y, 1) = 0;
        img.at(x, y, 2) = 0;
      }
    }
  }
  return img;
}

std::string scene_to_json(const SceneSpec& scene) {
  nlohmann::json doc;
  doc["intensity_offset"] = scene.intensity_offset;
  nlohmann::json prims = nlohmann::json::array();
  for (const Primitive& p : scene.primitives) {
    nlohmann::json j;
    j["class_id"] = p.class_id;
    switch (p.kind) {
      case Primitive::Kind::plane:
        j["type"] = "plane";
        j["z"] = p.z;
        if (p.bounded) j["bounds"] = {p.min_x, p.max_x, p.min_y, p.max_y};
        break;
      case Primitive::Kind::box:
        j["type"] = "box";
        j["center"] = {p.center.x(), p.center.y(), p.center.z()};
        j["size"] = {p.size.x(), p.size.y(), p.size.z()};
        break;
      case Primitive::Kind::cylinder:
        j["type"] = "cylinder";
        j["center"] = {p.center.x(), p.center.y()};
        j["z_range"] = {p.z_low, p.z_high};
        j["radius"] = p.radius;
        break;
      case Primitive::Kind::billboard:
        j["type"] = "billboard";
        j["center"] = {p.center.x(), p.center.y(), p.center.z()};
        j["azimuth"] = p.azimuth;
        j["width"] = p.bb_width;
        j["height"] = p.bb_height;
        break;
    }
    prims.push_back(std::move(j));
  }
  doc["primitives"] = std::move(prims);
  return doc.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
  const nlohmann::json doc = nlohmann::json::parse(text);
  SceneSpec scene;
  scene.intensity_offset = doc.value("intensity_offset", 0.0);
  for (const auto& j : doc.at("primitives")) {
    Primitive p;
    p.class_id = j.at("class_id").get<int>();
    const std::string type = j.at("type").get<std::string>();
    if (type == "plane") {
      p.kind = Primitive::Kind::plane;
      p.z = j.at("z").get<double>();
      if (j.contains("bounds")) {
        p.bounded = true;
        p.min_x = j["bounds"][0].get<double>();
        p.max_x = j["bounds"][1].get<double>();
        p.min_y = j["bounds"][2].get<double>();
        p.max_y = j["bounds"][3].get<double>();
      }
    } else if (type == "box") {
      p.kind = Primitive::Kind::box;
      p.center = Vec3(j["center"][0].get<double>(), j["center"][1].get<double>(),
                      j["center"][2].get<double>());
      p.size = Vec3(j["size"][0].get<double>(), j["size"][1].get<double>(),
                    j["size"][2].get<double>());
    } else if (type == "cylinder") {
      p.kind = Primitive::Kind::cylinder;
      p.center.x() = j["center"][0].get<double>();
      p.center.y() = j["center"][1].get<double>();
      p.z_low = j["z_range"][0].get<double>();
      p.z_high = j["z_range"][1].get<double>();
      p.radius = j.at("radius").get<double>();
    } else if (type == "billboard") {
      p.kind = Primitive::Kind::billboard;
      p.center = Vec3(j["center"][0].get<double>(), j["center"][1].get<double>(),
                      j["center"][2].get<double>());
      p.azimuth = j.at("azimuth").get<double>();
      p.bb_width = j.at("width").get<double>();
      p.bb_height = j.at("height").get<double>();
    } else {
      throw std::runtime_error("unknown primitive type: " + type);
    }
    scene.primitives.push_back(p);
  }
  return scene;
}

}  // namespace lidarseg
