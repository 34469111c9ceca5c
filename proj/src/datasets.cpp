#include "lidarseg/datasets.hpp"

#include "lidarseg/image_io.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;

namespace lidarseg {

namespace {

void put_f32_le(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out.push_back(static_cast<std::uint8_t>(bits));
  out.push_back(static_cast<std::uint8_t>(bits >> 8));
  out.push_back(static_cast<std::uint8_t>(bits >> 16));
  out.push_back(static_cast<std::uint8_t>(bits >> 24));
}

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

float get_f32_le(const std::uint8_t* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(f.good(), "write failed: " + path);
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open: " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
}

nlohmann::json sensor_to_json(const SensorConfig& s) {
  return {{"beams", s.beams},
          {"azimuth_steps", s.azimuth_steps},
          {"mount_height", s.mount_height},
          {"vertical_fov_low_deg", s.vertical_fov_low_deg},
          {"vertical_fov_high_deg", s.vertical_fov_high_deg},
          {"max_range", s.max_range},
          {"dropout_rate", s.dropout_rate}};
}

SensorConfig sensor_from_json(const nlohmann::json& j) {
  SensorConfig s;
  s.beams = j.at("beams").get<int>();
  s.azimuth_steps = j.at("azimuth_steps").get<int>();
  s.mount_height = j.at("mount_height").get<double>();
  s.vertical_fov_low_deg = j.at("vertical_fov_low_deg").get<double>();
  s.vertical_fov_high_deg = j.at("vertical_fov_high_deg").get<double>();
  s.max_range = j.at("max_range").get<double>();
  s.dropout_rate = j.at("dropout_rate").get<double>();
  return s;
}

nlohmann::json class_map_to_json(const ClassMap& m) {
  nlohmann::json raw = nlohmann::json::object();
  for (const auto& [k, v] : m.raw_to_shared) raw[std::to_string(k)] = v;
  return {{"raw_to_shared", raw}, {"shared_names", m.shared_names}, {"ignore_id", m.ignore_id}};
}

ClassMap class_map_from_json(const nlohmann::json& j) {
  ClassMap m;
  m.ignore_id = j.at("ignore_id").get<int>();
  m.shared_names = j.at("shared_names").get<std::vector<std::string>>();
  for (const auto& [k, v] : j.at("raw_to_shared").items()) {
    m.raw_to_shared[std::stoi(k)] = v.get<int>();
  }
  return m;
}

}  // namespace

void write_frame(const Frame& frame, const std::string& dir_path) {
  validate(frame.cloud);
  fs::create_directories(dir_path);
  const Eigen::Index n = frame.cloud.size();

  std::vector<std::uint8_t> pts;
  pts.reserve(static_cast<std::size_t>(n) * 16);
  for (Eigen::Index i = 0; i < n; ++i) {
    put_f32_le(pts, static_cast<float>(frame.cloud.xyz(i, 0)));
    put_f32_le(pts, static_cast<float>(frame.cloud.xyz(i, 1)));
    put_f32_le(pts, static_cast<float>(frame.cloud.xyz(i, 2)));
    put_f32_le(pts, frame.cloud.intensity ? static_cast<float>((*frame.cloud.intensity)[i]) : 0.0f);
  }
  write_bytes((fs::path(dir_path) / "points.bin").string(), pts);

  if (frame.cloud.labels) {
    std::vector<std::uint8_t> lab;
    lab.reserve(static_cast<std::size_t>(n) * 4);
    for (Eigen::Index i = 0; i < n; ++i) {
      put_u32_le(lab, static_cast<std::uint32_t>((*frame.cloud.labels)[i]) & 0xffffu);
    }
    write_bytes((fs::path(dir_path) / "labels.bin").string(), lab);
  }

  for (const CameraView& view : frame.cameras) {
    const std::string stem = "cam_" + std::to_string(view.id);
    write_png((fs::path(dir_path) / (stem + ".png")).string(), view.image);
    std::ofstream txt(fs::path(dir_path) / (stem + ".txt"));
    require(txt.good(), "cannot write camera calib in " + dir_path);
    txt.precision(17);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) txt << view.model.intrinsics(r, c) << (c == 2 ? "\n" : " ");
    }
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) txt << view.model.extrinsics(r, c) << (c == 3 ? "\n" : " ");
    }
  }
}

Frame load_frame(const std::string& dir_path) {
  const std::vector<std::uint8_t> pts = read_bytes((fs::path(dir_path) / "points.bin").string());
  require(pts.size() % 16 == 0, "corrupt frame");
  const Eigen::Index n = static_cast<Eigen::Index>(pts.size() / 16);

  Frame frame;
  frame.cloud.xyz.resize(n, 3);
  VecX intensity(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::uint8_t* rec = pts.data() + static_cast<std::size_t>(i) * 16;
    frame.cloud.xyz(i, 0) = get_f32_le(rec);
    frame.cloud.xyz(i, 1) = get_f32_le(rec + 4);
    frame.cloud.xyz(i, 2) = get_f32_le(rec + 8);
    intensity[i] = get_f32_le(rec + 12);
  }
  frame.cloud.intensity = std::move(intensity);

  const fs::path label_path = fs::path(dir_path) / "labels.bin";
  if (fs::exists(label_path)) {
    const std::vector<std::uint8_t> lab = read_bytes(label_path.string());
    require(lab.size() == static_cast<std::size_t>(n) * 4, "label mismatch");
    VecXi labels(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      // upper 16 bits are ignored on read
      labels[i] = static_cast<int>(get_u32_le(lab.data() + static_cast<std::size_t>(i) * 4) & 0xffffu);
    }
    frame.cloud.labels = std::move(labels);
  }

  for (int k = 0;; ++k) {
    const fs::path png = fs::path(dir_path) / ("cam_" + std::to_string(k) + ".png");
    if (!fs::exists(png)) break;
    CameraView view;
    view.id = k;
    view.image = read_png(png.string());
    std::ifstream txt(fs::path(dir_path) / ("cam_" + std::to_string(k) + ".txt"));
    require(txt.good(), "missing camera calib for view " + std::to_string(k) + " in " + dir_path);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) txt >> view.model.intrinsics(r, c);
    }
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 4; ++c) txt >> view.model.extrinsics(r, c);
    }
    require(static_cast<bool>(txt), "corrupt camera calib in " + dir_path);
    view.model.width = view.image.width;
    view.model.height = view.image.height;
    frame.cameras.push_back(std::move(view));
  }
  return frame;
}

DatasetManifest Dataset::split(Split which) const {
  const std::size_t n = frames.size();
  const std::size_t n_val = std::max<std::size_t>(1, n / 5);
  require(n >= 2, "dataset too small to split");
  DatasetManifest m;
  m.name = name;
  m.sensor = sensor;
  m.class_map = class_map;
  m.split = which;
  m.label_free = label_free;
  if (which == Split::train) {
    m.frames.assign(frames.begin(), frames.end() - static_cast<std::ptrdiff_t>(n_val));
  } else {
    m.frames.assign(frames.end() - static_cast<std::ptrdiff_t>(n_val), frames.end());
  }
  return m;
}

void save_dataset_manifest(const Dataset& ds) {
  nlohmann::json doc;
  doc["name"] = ds.name;
  doc["sensor"] = sensor_to_json(ds.sensor);
  doc["class_map"] = class_map_to_json(ds.class_map);
  doc["label_free"] = ds.label_free;
  nlohmann::json frames = nlohmann::json::array();
  for (const std::string& f : ds.frames) {
    frames.push_back(fs::relative(f, ds.root).string());
  }
  doc["frames"] = std::move(frames);
  std::ofstream out(fs::path(ds.root) / "manifest.json");
  require(out.good(), "cannot write manifest under " + ds.root);
  out << doc.dump(2) << "\n";
}

Dataset load_dataset(const std::string& root) {
  std::ifstream in(fs::path(root) / "manifest.json");
  require(in.good(), "missing manifest.json under " + root);
  nlohmann::json doc;
  in >> doc;
  Dataset ds;
  ds.root = root;
  ds.name = doc.at("name").get<std::string>();
  ds.sensor = sensor_from_json(doc.at("sensor"));
  ds.class_map = class_map_from_json(doc.at("class_map"));
  ds.label_free = doc.value("label_free", false);
  for (const auto& f : doc.at("frames")) {
    const fs::path p = fs::path(root) / f.get<std::string>();
    require(fs::exists(p / "points.bin"), "manifest references missing frame " + p.string());
    ds.frames.push_back(p.string());
  }
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

struct Placement {
  double x = 0.0, y = 0.0, r = 0.0;
};

bool too_close(const std::vector<Placement>& placed, double x, double y, double r) {
  if (std::hypot(x, y) < 3.0 + r) return true;  // keep the sensor clear
  for (const Placement& p : placed) {
    if (std::hypot(p.x - x, p.y - y) < p.r + r + 0.4) return true;
  }
  return false;
}

// height of the walkable surface under (|y| position): road, curb, terrain
double ground_z_for(double y, double road, double walk) {
  const double a = std::abs(y);
  if (a <= road) return 0.0;
  if (a <= road + walk) return 0.12;
  return 0.05;
}

int draw_count(Rng& rng, const CountRange& range) {
  if (range.hi <= range.lo) return range.lo;
  return range.lo + static_cast<int>(rng.uniform_int(range.hi - range.lo + 1));
}

}  // namespace

SceneSpec sample_scene(const SceneDistribution& dist, double intensity_offset, std::uint64_t seed) {
  Rng rng(derive_seed(seed, fnv1a("sample_scene")));
  SceneSpec scene;
  scene.intensity_offset = intensity_offset;

  const double road = dist.road_half_width;
  const double walk = dist.sidewalk_width;
  const double extent = 60.0;

  Primitive ground;
  ground.kind = Primitive::Kind::plane;
  ground.class_id = 6;
  ground.z = 0.0;
  ground.bounded = true;
  ground.min_x = -extent;
  ground.max_x = extent;
  ground.min_y = -road;
  ground.max_y = road;
  scene.primitives.push_back(ground);

  for (double side : {-1.0, 1.0}) {
    Primitive sidewalk;
    sidewalk.kind = Primitive::Kind::plane;
    sidewalk.class_id = 7;
    sidewalk.z = 0.12;
    sidewalk.bounded = true;
    sidewalk.min_x = -extent;
    sidewalk.max_x = extent;
    sidewalk.min_y = side < 0 ? -road - walk : road;
    sidewalk.max_y = side < 0 ? -road : road + walk;
    scene.primitives.push_back(sidewalk);

    Primitive terrain;
    terrain.kind = Primitive::Kind::plane;
    terrain.class_id = 8;
    terrain.z = 0.05;
    terrain.bounded = true;
    terrain.min_x = -extent;
    terrain.max_x = extent;
    terrain.min_y = side < 0 ? -extent : road + walk;
    terrain.max_y = side < 0 ? -road - walk : extent;
    scene.primitives.push_back(terrain);
  }

  std::vector<Placement> placed;
  const double s = dist.object_scale;
  const double R = dist.layout_radius;

  auto place_box = [&](int class_id, double lx, double ly, double lz, bool on_road) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const double x = rng.uniform(-R, R);
      const double y = on_road ? rng.uniform(-road + 1.0, road - 1.0)
                               : (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(road, road + walk - 0.5);
      const double footprint = 0.5 * std::hypot(lx, ly);
      if (too_close(placed, x, y, footprint)) continue;
      Primitive box;
      box.kind = Primitive::Kind::box;
      box.class_id = class_id;
      const bool swap_extents = rng.uniform() < 0.5;  // boxes stay axis-aligned
      box.size = swap_extents ? Vec3(ly, lx, lz) : Vec3(lx, ly, lz);
      box.center = Vec3(x, y, ground_z_for(y, road, walk) + 0.5 * lz);
      scene.primitives.push_back(box);
      placed.push_back({x, y, footprint});
      return;
    }
  };

  auto place_cylinder = [&](int class_id, double radius, double height, bool on_walk) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      const double x = rng.uniform(-R, R);
      const double y = on_walk
                           ? (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(road + 0.3, road + walk - 0.3)
                           : (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(road + walk, R + road + walk);
      if (too_close(placed, x, y, radius)) continue;
      Primitive cyl;
      cyl.kind = Primitive::Kind::cylinder;
      cyl.class_id = class_id;
      cyl.center = Vec3(x, y, 0.0);
      cyl.radius = radius;
      cyl.z_low = ground_z_for(y, road, walk);
      cyl.z_high = cyl.z_low + height;
      scene.primitives.push_back(cyl);
      placed.push_back({x, y, radius});
      return;
    }
  };

  for (int i = 0, n = draw_count(rng, dist.cars); i < n; ++i) {
    place_box(0, s * rng.uniform(3.9, 4.7), s * rng.uniform(1.7, 2.0), s * rng.uniform(1.4, 1.7), true);
  }
  for (int i = 0, n = draw_count(rng, dist.trucks); i < n; ++i) {
    place_box(3, s * rng.uniform(6.5, 9.0), s * rng.uniform(2.4, 2.8), s * rng.uniform(2.8, 3.4), true);
  }
  for (int i = 0, n = draw_count(rng, dist.buses); i < n; ++i) {
    place_box(4, s * rng.uniform(10.0, 12.0), s * rng.uniform(2.5, 2.9), s * rng.uniform(3.0, 3.4), true);
  }
  for (int i = 0, n = draw_count(rng, dist.bicycles); i < n; ++i) {
    place_box(1, s * rng.uniform(1.6, 1.9), s * rng.uniform(0.4, 0.6), s * rng.uniform(1.0, 1.2), true);
  }
  for (int i = 0, n = draw_count(rng, dist.motorcycles); i < n; ++i) {
    place_box(2, s * rng.uniform(2.0, 2.3), s * rng.uniform(0.7, 0.9), s * rng.uniform(1.1, 1.3), true);
  }
  for (int i = 0, n = draw_count(rng, dist.pedestrians); i < n; ++i) {
    place_cylinder(5, s * rng.uniform(0.25, 0.4), s * rng.uniform(1.6, 1.9), true);
  }
  for (int i = 0, n = draw_count(rng, dist.vegetation); i < n; ++i) {
    if (rng.uniform() < 0.5) {
      place_cylinder(9, s * rng.uniform(0.8, 1.6), s * rng.uniform(2.5, 4.5), false);
    } else {
      // hedge wall on the terrain strip
      const double x = rng.uniform(-R, R);
      const double y = (rng.uniform() < 0.5 ? 1.0 : -1.0) * rng.uniform(road + walk + 1.0, road + walk + 8.0);
      Primitive bb;
      bb.kind = Primitive::Kind::billboard;
      bb.class_id = 9;
      bb.bb_width = s * rng.uniform(4.0, 9.0);
      bb.bb_height = s * rng.uniform(1.5, 3.0);
      bb.center = Vec3(x, y, 0.05 + 0.5 * bb.bb_height);
      bb.azimuth = y > 0 ? -M_PI / 2.0 : M_PI / 2.0;
      scene.primitives.push_back(bb);
      placed.push_back({x, y, 0.5 * bb.bb_width});
    }
  }
  return scene;
}

std::vector<CameraModel> make_camera_ring(const DomainSpec& spec) {
  std::vector<CameraModel> cams;
  for (int k = 0; k < spec.num_cameras; ++k) {
    const double az = 2.0 * M_PI * k / spec.num_cameras;
    CameraModel cam;
    cam.width = spec.camera_width;
    cam.height = spec.camera_height;
    const double f = spec.camera_width / 2.0;  // 90 degree horizontal fov
    cam.intrinsics << f, 0.0, spec.camera_width / 2.0, 0.0, f, spec.camera_height / 2.0, 0.0, 0.0, 1.0;

    // camera frame: x right, y down, z forward (looking along azimuth az)
    const Vec3 forward(std::cos(az), std::sin(az), 0.0);
    const Vec3 right(std::sin(az), -std::cos(az), 0.0);
    const Vec3 down(0.0, 0.0, -1.0);
    Mat3 rot;
    rot.row(0) = right.transpose();
    rot.row(1) = down.transpose();
    rot.row(2) = forward.transpose();
    const Vec3 center(0.0, 0.0, spec.sensor.mount_height - 0.2);
    cam.extrinsics = Mat4::Identity();
    cam.extrinsics.topLeftCorner<3, 3>() = rot;
    cam.extrinsics.topRightCorner<3, 1>() = -rot * center;
    cams.push_back(cam);
  }
  return cams;
}

Frame generate_frame(const DomainSpec& spec, std::uint64_t seed) {
  const SceneSpec scene = sample_scene(spec.dist, spec.intensity_offset, seed);
  Frame frame = simulate_scan(scene, spec.sensor, derive_seed(seed, fnv1a("scan")));
  const std::vector<CameraModel> cams = make_camera_ring(spec);
  for (std::size_t k = 0; k < cams.size(); ++k) {
    CameraView view;
    view.id = static_cast<int>(k);
    view.model = cams[k];
    view.image = render_camera_view(scene, cams[k]);
    frame.cameras.push_back(std::move(view));
  }
  return frame;
}

std::pair<Dataset, Dataset> make_domain_pair(const GapSpec& gap, std::uint64_t seed,
                                             const std::string& out_root) {
  require(gap.frames_per_domain >= 2, "need at least 2 frames per domain for a train/val split");
  validate(gap.source.sensor);
  validate(gap.target.sensor);

  auto build = [&](const DomainSpec& spec, std::uint64_t domain_stream) {
    Dataset ds;
    ds.root = (fs::path(out_root) / spec.name).string();
    ds.name = spec.name;
    ds.sensor = spec.sensor;
    ds.class_map = class_map_synthetic();
    fs::create_directories(ds.root);
    for (int i = 0; i < gap.frames_per_domain; ++i) {
      const std::uint64_t frame_seed =
          derive_seed(seed, domain_stream ^ (0x1000 + static_cast<std::uint64_t>(i)));
      const Frame frame = generate_frame(spec, frame_seed);
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%04d", i);
      const std::string dir = (fs::path(ds.root) / name).string();
      write_frame(frame, dir);
      ds.frames.push_back(dir);
    }
    save_dataset_manifest(ds);
    return ds;
  };

  Dataset source = build(gap.source, fnv1a("source"));
  Dataset target = build(gap.target, fnv1a("target"));
  return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------

MergedDataset merge(const std::vector<DatasetManifest>& parts, bool require_labels) {
  require(!parts.empty(), "merge needs at least one part");
  if (require_labels) {
    const std::vector<std::string>* names = nullptr;
    for (const auto& p : parts) {
      if (p.label_free) continue;
      if (!names) {
        names = &p.class_map.shared_names;
      } else if (*names != p.class_map.shared_names) {
        throw std::runtime_error("class-set mismatch");
      }
    }
  }
  MergedDataset merged;
  merged.parts = parts;
  return merged;
}

std::vector<std::pair<int, int>> epoch_order(const MergedDataset& merged) {
  std::vector<std::pair<int, int>> order;
  order.reserve(merged.size());
  for (int p = 0; p < static_cast<int>(merged.parts.size()); ++p) {
    for (int i = 0; i < static_cast<int>(merged.parts[p].size()); ++i) {
      order.emplace_back(p, i);
    }
  }
  return order;
}

const Frame& FrameCache::get(const std::string& frame_dir) {
  auto it = cache_.find(frame_dir);
  if (it == cache_.end()) {
    it = cache_.emplace(frame_dir, load_frame(frame_dir)).first;
  }
  return it->second;
}

VecXi mapped_labels(const Frame& frame, const DatasetManifest& manifest) {
  if (!frame.cloud.labels) return VecXi();
  return apply_class_map(*frame.cloud.labels, manifest.class_map);
}

}  // namespace lidarseg
