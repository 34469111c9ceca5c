#include "lidarseg/teacher.hpp"

#include "lidarseg/geometry.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace lidarseg {

VecX bilinear_sample(const FeatureMap& map, Real u, Real v) {
  require(map.width > 0 && map.height > 0, "bilinear_sample: empty feature map");
  const Real fu = std::clamp(u * map.scale_u + map.offset_u, Real(0), static_cast<Real>(map.width - 1));
  const Real fv = std::clamp(v * map.scale_v + map.offset_v, Real(0), static_cast<Real>(map.height - 1));
  const int x0 = std::min(static_cast<int>(std::floor(fu)), map.width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(fv)), map.height - 1);
  const int x1 = std::min(x0 + 1, map.width - 1);
  const int y1 = std::min(y0 + 1, map.height - 1);
  const Real ax = fu - static_cast<Real>(x0);
  const Real ay = fv - static_cast<Real>(y0);
  return ((1 - ax) * (1 - ay)) * map.data.row(map.node(x0, y0)).transpose() +
         (ax * (1 - ay)) * map.data.row(map.node(x1, y0)).transpose() +
         ((1 - ax) * ay) * map.data.row(map.node(x0, y1)).transpose() +
         (ax * ay) * map.data.row(map.node(x1, y1)).transpose();
}

MockTeacher::MockTeacher(int num_classes, int dim, MockTeacherMode mode, Real noise_sigma, int patch,
                         std::uint64_t seed)
    : num_classes_(num_classes),
      dim_(dim),
      mode_(mode),
      noise_sigma_(noise_sigma),
      patch_(patch),
      seed_(seed) {
  require(dim >= num_classes + 1, "mock teacher needs dim >= num_classes + 1 for an orthonormal palette");
  require(patch >= 1, "mock teacher patch must be positive");
  // orthonormal palette via QR of a seeded gaussian matrix
  Rng rng(derive_seed(seed, fnv1a("mock_palette")));
  MatX g(dim, num_classes + 1);
  for (Eigen::Index i = 0; i < g.rows(); ++i) {
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  }
  const Eigen::HouseholderQR<MatX> qr(g);
  MatX q = qr.householderQ() * MatX::Identity(dim, num_classes + 1);
  palette_ = q.transpose();
}

VecX MockTeacher::class_vector(int class_id) const {
  if (class_id >= 0 && class_id < num_classes_) return palette_.row(class_id).transpose();
  return palette_.row(num_classes_).transpose();  // background
}

FeatureMap MockTeacher::features(const Image& image, const std::string&) const {
  FeatureMap map;
  map.width = std::max(1, image.width / patch_);
  map.height = std::max(1, image.height / patch_);
  map.dim = dim_;
  map.scale_u = 1.0 / static_cast<Real>(patch_);
  map.scale_v = 1.0 / static_cast<Real>(patch_);
  map.offset_u = -0.5;
  map.offset_v = -0.5;
  map.data.resize(static_cast<Eigen::Index>(map.width) * map.height, dim_);

  for (int iy = 0; iy < map.height; ++iy) {
    for (int ix = 0; ix < map.width; ++ix) {
      // node (ix, iy) looks at the center pixel of its patch
      const int px = std::min(image.width - 1, ix * patch_ + patch_ / 2);
      const int py = std::min(image.height - 1, iy * patch_ + patch_ / 2);
      const int class_id = image.at(px, py, 0);
      const int instance_id = image.at(px, py, 1);

      VecX f;
      if (mode_ == MockTeacherMode::semantic || class_id == 255) {
        f = class_vector(class_id == 255 ? 255 : class_id);
      } else {
        // one stable random unit vector per rendered object
        Rng rng(derive_seed(seed_, fnv1a("instance") ^ static_cast<std::uint64_t>(instance_id)));
        f.resize(dim_);
        for (int d = 0; d < dim_; ++d) f[d] = rng.normal();
        f /= std::max(f.norm(), Real(1e-12));
      }
      if (noise_sigma_ > 0.0) {
        Rng rng(derive_seed(seed_, fnv1a("noise") ^ pack_xy(ix, iy)));
        for (int d = 0; d < dim_; ++d) f[d] += noise_sigma_ * rng.normal();
        f /= std::max(f.norm(), Real(1e-12));
      }
      map.data.row(map.node(ix, iy)) = f.transpose();
    }
  }
  return map;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

void put_f32_le(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32_le(out, bits);
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32_le(const std::uint8_t* p) {
  const std::uint32_t bits = get_u32_le(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void write_feature_file(const std::string& path, const FeatureMap& map) {
  std::vector<std::uint8_t> out = {'P', 'F', 'T', '1'};
  put_u32_le(out, static_cast<std::uint32_t>(map.height));
  put_u32_le(out, static_cast<std::uint32_t>(map.width));
  put_u32_le(out, static_cast<std::uint32_t>(map.dim));
  put_f32_le(out, static_cast<float>(map.scale_u));
  put_f32_le(out, static_cast<float>(map.scale_v));
  put_f32_le(out, static_cast<float>(map.offset_u));
  put_f32_le(out, static_cast<float>(map.offset_v));
  for (Eigen::Index n = 0; n < map.data.rows(); ++n) {
    for (int d = 0; d < map.dim; ++d) put_f32_le(out, static_cast<float>(map.data(n, d)));
  }
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot write feature file " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

FeatureMap read_feature_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open feature file " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  require(bytes.size() >= 32 && std::memcmp(bytes.data(), "PFT1", 4) == 0,
          "bad feature file " + path);
  FeatureMap map;
  map.height = static_cast<int>(get_u32_le(bytes.data() + 4));
  map.width = static_cast<int>(get_u32_le(bytes.data() + 8));
  map.dim = static_cast<int>(get_u32_le(bytes.data() + 12));
  map.scale_u = get_f32_le(bytes.data() + 16);
  map.scale_v = get_f32_le(bytes.data() + 20);
  map.offset_u = get_f32_le(bytes.data() + 24);
  map.offset_v = get_f32_le(bytes.data() + 28);
  const std::size_t n =
      static_cast<std::size_t>(map.height) * static_cast<std::size_t>(map.width) * map.dim;
  require(bytes.size() == 32 + n * 4, "feature file size mismatch " + path);
  map.data.resize(static_cast<Eigen::Index>(map.height) * map.width, map.dim);
  const std::uint8_t* p = bytes.data() + 32;
  for (Eigen::Index node = 0; node < map.data.rows(); ++node) {
    for (int d = 0; d < map.dim; ++d, p += 4) map.data(node, d) = get_f32_le(p);
  }
  return map;
}

FeatureMap PrecomputedTeacher::features(const Image&, const std::string& image_id) const {
  const std::filesystem::path path = std::filesystem::path(root_) / (image_id + ".feat");
  FeatureMap map = read_feature_file(path.string());
  require(map.dim == dim_, "feature file dim mismatch for " + image_id);
  return map;
}

// ---------------------------------------------------------------------------

Matches match_features(const PointCloud& cloud, const std::vector<CameraView>& cams,
                       const std::vector<FeatureMap>& maps) {
  require(cams.size() == maps.size(), "match_features: one feature map per camera view");

  std::vector<std::size_t> order(cams.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return cams[a].id < cams[b].id; });

  const int dim = maps.empty() ? 0 : maps[order.empty() ? 0 : order[0]].dim;
  std::vector<char> taken(static_cast<std::size_t>(cloud.size()), 0);
  std::vector<int> idx;
  std::vector<VecX> feats;

  for (std::size_t o : order) {
    if (cloud.size() == 0) break;
    const Correspondences corr = project_points(cloud, cams[o].model, cams[o].id);
    for (Eigen::Index k = 0; k < corr.size(); ++k) {
      const int point = corr.point_idx[k];
      if (taken[static_cast<std::size_t>(point)]) continue;
      taken[static_cast<std::size_t>(point)] = 1;
      idx.push_back(point);
      feats.push_back(bilinear_sample(maps[o], corr.pixel_uv(k, 0), corr.pixel_uv(k, 1)));
    }
  }

  Matches m;
  m.point_idx.resize(static_cast<Eigen::Index>(idx.size()));
  m.pixel_feats.resize(static_cast<Eigen::Index>(idx.size()), dim);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    m.point_idx[static_cast<Eigen::Index>(k)] = idx[k];
    m.pixel_feats.row(static_cast<Eigen::Index>(k)) = feats[k].transpose();
  }
  return m;
}

Matches match_features(const PointCloud& cloud, const std::vector<CameraView>& cams,
                       const Teacher& teacher) {
  std::vector<FeatureMap> maps;
  maps.reserve(cams.size());
  for (const CameraView& v : cams) {
    maps.push_back(teacher.features(v.image, "cam_" + std::to_string(v.id)));
  }
  return match_features(cloud, cams, maps);
}

}  // namespace lidarseg
