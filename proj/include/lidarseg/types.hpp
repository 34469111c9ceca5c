#pragma once

#include "lidarseg/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lidarseg {

// One lidar sweep in the sensor frame. intensity/labels are optional; when
// present they have one entry per point.
struct PointCloud {
  Matrix3X<Real> xyz;           // N x 3, meters
  std::optional<VecX> intensity;  // N, in [0, 1]
  std::optional<VecXi> labels;    // N, label ids

  Eigen::Index size() const { return xyz.rows(); }
};

void validate(const PointCloud& cloud);

// Pinhole camera with a rigid lidar->camera transform.
struct CameraModel {
  Mat3 intrinsics = Mat3::Identity();
  Mat4 extrinsics = Mat4::Identity();  // lidar -> camera
  int width = 0;
  int height = 0;

  double fx() const { return intrinsics(0, 0); }
  double fy() const { return intrinsics(1, 1); }
  double cx() const { return intrinsics(0, 2); }
  double cy() const { return intrinsics(1, 2); }
};

void validate(const CameraModel& cam);

// Rotating-lidar beam layout. Beam elevations are linearly spaced in the
// vertical field of view.
struct SensorConfig {
  int beams = 32;
  int azimuth_steps = 512;
  double mount_height = 1.8;                 // meters
  double vertical_fov_low_deg = -25.0;
  double vertical_fov_high_deg = 3.0;
  double max_range = 80.0;                   // meters
  double dropout_rate = 0.0;                 // probability a return is missing
};

void validate(const SensorConfig& sensor);

// Point->pixel links for one camera view.
struct Correspondences {
  VecXi point_idx;                        // M indices into the cloud
  Eigen::Matrix<Real, Eigen::Dynamic, 2> pixel_uv;  // M x 2
  int camera_id = 0;

  Eigen::Index size() const { return point_idx.size(); }
};

struct AugmentPolicy {
  bool rotate_z = false;
  bool flip_xy = false;
  double scale_low = 1.0;
  double scale_high = 1.0;
};

void validate(const AugmentPolicy& policy);

// 8-bit RGB image, row-major.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  std::uint8_t& at(int x, int y, int c) {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
  std::uint8_t at(int x, int y, int c) const {
    return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }
};

struct CameraView {
  int id = 0;
  CameraModel model;
  Image image;
};

// One sweep plus its calibrated camera views.
struct Frame {
  PointCloud cloud;
  std::vector<CameraView> cameras;
};

}  // namespace lidarseg
