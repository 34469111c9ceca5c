#pragma once

#include "lidarseg/types.hpp"

#include <memory>
#include <string>
#include <vector>

namespace lidarseg {

// Dense per-pixel feature map at a (possibly) reduced resolution. Pixel
// coordinates map to feature coordinates via u_f = u * scale_u + offset_u.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int dim = 0;
  MatX data;  // (height*width) x dim, row-major over nodes
  Real scale_u = 1.0, scale_v = 1.0;
  Real offset_u = 0.0, offset_v = 0.0;

  Eigen::Index node(int ix, int iy) const {
    return static_cast<Eigen::Index>(iy) * width + ix;
  }
};

// Bilinear sample at pixel coordinates (u, v); clamps at the borders.
VecX bilinear_sample(const FeatureMap& map, Real u, Real v);

// Frozen per-pixel feature extractor. Implementations must be pure
// functions of the image (and id): they are never trained.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual int feature_dim() const = 0;
  // image_id identifies the image for adapters backed by sidecar files
  virtual FeatureMap features(const Image& image, const std::string& image_id) const = 0;
};

enum class MockTeacherMode {
  semantic,  // one palette vector per class (DINOv2-like)
  instance,  // one random vector per rendered object (SAM-like)
};

// Desk-scale teacher for synthetic renders. Reads the class id from the R
// channel and the instance id from the G channel, emits a unit palette
// vector plus seeded noise per feature node.
class MockTeacher : public Teacher {
 public:
  MockTeacher(int num_classes, int dim, MockTeacherMode mode, Real noise_sigma, int patch,
              std::uint64_t seed);

  int feature_dim() const override { return dim_; }
  FeatureMap features(const Image& image, const std::string& image_id) const override;

  const MatX& palette() const { return palette_; }
  // the unit vector emitted for class c (before noise)
  VecX class_vector(int class_id) const;

 private:
  int num_classes_;
  int dim_;
  MockTeacherMode mode_;
  Real noise_sigma_;
  int patch_;
  std::uint64_t seed_;
  MatX palette_;       // (num_classes + 1) x dim, last row for background
};

// Reads per-image feature files so externally computed features can be
// dropped in. File format (little-endian):
//   magic 'PFT1' (4 bytes), u32 height, u32 width, u32 dim,
//   f32 scale_u, f32 scale_v, f32 offset_u, f32 offset_v,
//   height*width*dim float32 node-major (dim innermost)
class PrecomputedTeacher : public Teacher {
 public:
  PrecomputedTeacher(std::string root, int dim) : root_(std::move(root)), dim_(dim) {}

  int feature_dim() const override { return dim_; }
  FeatureMap features(const Image& image, const std::string& image_id) const override;

 private:
  std::string root_;
  int dim_;
};

void write_feature_file(const std::string& path, const FeatureMap& map);
FeatureMap read_feature_file(const std::string& path);

// Point->teacher-feature matching over all camera views: each point takes
// the bilinearly sampled feature of the first camera (by id) that sees it.
struct Matches {
  VecXi point_idx;
  MatX pixel_feats;  // one row per matched point
};

Matches match_features(const PointCloud& cloud, const std::vector<CameraView>& cams,
                       const std::vector<FeatureMap>& maps);
Matches match_features(const PointCloud& cloud, const std::vector<CameraView>& cams,
                       const Teacher& teacher);

}  // namespace lidarseg
