#pragma once

#include "lidarseg/classmap.hpp"
#include "lidarseg/geometry.hpp"
#include "lidarseg/types.hpp"

#include <map>
#include <string>
#include <vector>

namespace lidarseg {

// ---------------------------------------------------------------------------
// Frame directory format (KITTI-style binaries):
//   points.bin  little-endian float32, N records of (x, y, z, intensity)
//   labels.bin  little-endian uint32, N records, raw label in the low 16
//               bits; absent for unlabeled frames
//   cam_k.png   8-bit RGB view of camera k
//   cam_k.txt   9 intrinsic reals row-major, then 16 extrinsic reals
//               row-major, whitespace-separated
// ---------------------------------------------------------------------------

void write_frame(const Frame& frame, const std::string& dir_path);
Frame load_frame(const std::string& dir_path);

enum class Split { train, val };

// One split of a dataset: ordered frame paths plus the metadata shared by
// all of them.
struct DatasetManifest {
  std::string name;
  std::vector<std::string> frames;
  SensorConfig sensor;
  ClassMap class_map;
  Split split = Split::train;
  bool label_free = false;  // declared for distillation-only parts

  std::size_t size() const { return frames.size(); }
};

// Whole dataset as stored on disk; splits are views (last 20% of frames
// by index -> val).
struct Dataset {
  std::string root;
  std::string name;
  SensorConfig sensor;
  ClassMap class_map;
  std::vector<std::string> frames;  // absolute frame dir paths
  bool label_free = false;

  DatasetManifest split(Split which) const;
};

void save_dataset_manifest(const Dataset& ds);
Dataset load_dataset(const std::string& root);

// ---------------------------------------------------------------------------
// Synthetic domain generation
// ---------------------------------------------------------------------------

struct CountRange {
  int lo = 0;
  int hi = 0;
};

// Scene composition knobs; shifting them between domains creates the
// distribution part of the gap.
struct SceneDistribution {
  CountRange cars{2, 5};
  CountRange bicycles{1, 3};
  CountRange motorcycles{1, 3};
  CountRange trucks{1, 2};
  CountRange buses{1, 2};
  CountRange pedestrians{2, 5};
  CountRange vegetation{3, 6};
  double object_scale = 1.0;
  double layout_radius = 20.0;
  double road_half_width = 6.0;
  double sidewalk_width = 3.0;
};

struct DomainSpec {
  std::string name = "domain";
  SensorConfig sensor;
  SceneDistribution dist;
  double intensity_offset = 0.0;
  int num_cameras = 4;
  int camera_width = 192;
  int camera_height = 96;
};

struct GapSpec {
  DomainSpec source;
  DomainSpec target;
  int frames_per_domain = 30;
};

// Procedural street scene drawn from a distribution; used by the domain
// generator and directly by tests.
SceneSpec sample_scene(const SceneDistribution& dist, double intensity_offset, std::uint64_t seed);

// Cameras mounted at the sensor, looking outward at evenly spaced azimuths.
std::vector<CameraModel> make_camera_ring(const DomainSpec& spec);

// Generates one frame of a domain: scan plus rendered camera views.
Frame generate_frame(const DomainSpec& spec, std::uint64_t seed);

// Generates both domains of a gap under out_root/<domain name>, writing
// frames and manifests to disk. Deterministic per seed; the two domains
// use disjoint scene seeds.
std::pair<Dataset, Dataset> make_domain_pair(const GapSpec& gap, std::uint64_t seed,
                                             const std::string& out_root);

// ---------------------------------------------------------------------------
// Multi-dataset merging (for pretraining)
// ---------------------------------------------------------------------------

struct MergedDataset {
  std::vector<DatasetManifest> parts;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.size();
    return n;
  }
};

// require_labels demands a common shared class set across all parts that
// are not declared label-free.
MergedDataset merge(const std::vector<DatasetManifest>& parts, bool require_labels = false);

// (part index, frame index) pairs covering one epoch, in storage order;
// trainers shuffle this with their own rng.
std::vector<std::pair<int, int>> epoch_order(const MergedDataset& merged);

// Loads frames at most once; read-only afterwards.
class FrameCache {
 public:
  const Frame& get(const std::string& frame_dir);
  void clear() { cache_.clear(); }

 private:
  std::map<std::string, Frame> cache_;
};

// Shared labels of a frame under a manifest's class map (empty when the
// frame is unlabeled).
VecXi mapped_labels(const Frame& frame, const DatasetManifest& manifest);

}  // namespace lidarseg
