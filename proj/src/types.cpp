#include "lidarseg/types.hpp"

namespace lidarseg {

void validate(const PointCloud& cloud) {
  require(cloud.xyz.allFinite(), "point cloud has non-finite coordinates");
  if (cloud.intensity) {
    require(cloud.intensity->size() == cloud.size(), "intensity length mismatch");
  }
  if (cloud.labels) {
    require(cloud.labels->size() == cloud.size(), "labels length mismatch");
  }
}

void validate(const CameraModel& cam) {
  require(cam.fx() > 0.0 && cam.fy() > 0.0, "camera focal lengths must be positive");
  require(cam.width > 0 && cam.height > 0, "camera image size must be positive");
  const Mat3 rot = cam.extrinsics.topLeftCorner<3, 3>();
  require((rot * rot.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6,
          "extrinsic rotation is not orthonormal");
  require(std::abs(rot.determinant() - 1.0) < 1e-6, "extrinsic rotation determinant is not +1");
}

void validate(const SensorConfig& sensor) {
  require(sensor.beams >= 1, "sensor needs at least one beam");
  require(sensor.azimuth_steps >= 1, "sensor needs at least one azimuth step");
  require(sensor.vertical_fov_low_deg < sensor.vertical_fov_high_deg,
          "vertical fov low must be below high");
  require(sensor.dropout_rate >= 0.0 && sensor.dropout_rate < 1.0, "dropout rate must be in [0,1)");
  require(sensor.max_range > 0.0, "max range must be positive");
}

void validate(const AugmentPolicy& policy) {
  require(policy.scale_low > 0.0 && policy.scale_low <= policy.scale_high,
          "scale range must satisfy 0 < low <= high");
}

}  // namespace lidarseg
