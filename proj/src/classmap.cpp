#include "lidarseg/classmap.hpp"

namespace lidarseg {

VecXi apply_class_map(const VecXi& labels, const ClassMap& map) {
  VecXi out(labels.size());
  for (Eigen::Index i = 0; i < labels.size(); ++i) out[i] = map.map(labels[i]);
  return out;
}

std::vector<std::string> shared_class_names(bool bus_flavor) {
  return {"car",
          "bicycle",
          "motorcycle",
          "truck",
          bus_flavor ? "bus" : "oth. vehicle",
          "pedestrian",
          "driveable surface",
          "sidewalk",
          "terrain",
          "vegetation"};
}

ClassMap class_map_synthetic() {
  ClassMap m;
  m.shared_names = shared_class_names();
  for (int i = 0; i < m.num_classes(); ++i) m.raw_to_shared[i] = i;
  return m;
}

ClassMap class_map_nuscenes(bool bus_flavor) {
  // raw ids follow the 16-class lidarseg taxonomy
  ClassMap m;
  m.shared_names = shared_class_names(bus_flavor);
  m.raw_to_shared = {
      {4, 0},   // car
      {2, 1},   // bicycle
      {6, 2},   // motorcycle
      {10, 3},  // truck
      {3, 4},   // bus -> oth. vehicle / bus
      {7, 5},   // pedestrian
      {11, 6},  // driveable surface
      {13, 7},  // sidewalk
      {14, 8},  // terrain
      {16, 9},  // vegetation
  };
  return m;
}

ClassMap class_map_semantickitti() {
  // raw ids follow the official label ids; bicyclist (31) and
  // motorcyclist (32) intentionally have no entry and fall to ignore
  ClassMap m;
  m.shared_names = shared_class_names();
  m.raw_to_shared = {
      {10, 0},  // car
      {11, 1},  // bicycle
      {15, 2},  // motorcycle
      {18, 3},  // truck
      {20, 4},  // other-vehicle
      {30, 5},  // person
      {40, 6},  // road
      {44, 6},  // parking
      {48, 7},  // sidewalk
      {72, 8},  // terrain
      {70, 9},  // vegetation
      {71, 9},  // trunk
  };
  return m;
}

ClassMap class_map_waymo() {
  ClassMap m;
  m.shared_names = shared_class_names(true);
  m.raw_to_shared = {
      {1, 0},   // car
      {12, 1},  // bicycle
      {6, 1},   // bicyclist
      {13, 2},  // motorcycle
      {5, 2},   // motorcyclist
      {2, 3},   // truck
      {3, 4},   // bus
      {7, 5},   // pedestrian
      {18, 6},  // road
      {19, 6},  // lane marker
      {22, 7},  // sidewalk
      {21, 8},  // walkable
      {15, 9},  // vegetation
      {16, 9},  // tree trunk
  };
  return m;
}

}  // namespace lidarseg
