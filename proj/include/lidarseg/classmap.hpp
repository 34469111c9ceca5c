#pragma once

#include "lidarseg/core.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace lidarseg {

// Total mapping from a dataset's raw label ids onto the shared class set.
// Raw ids without an entry map to ignore_id.
struct ClassMap {
  std::unordered_map<int, int> raw_to_shared;
  std::vector<std::string> shared_names;
  int ignore_id = kIgnoreId;

  int num_classes() const { return static_cast<int>(shared_names.size()); }
  int map(int raw) const {
    const auto it = raw_to_shared.find(raw);
    return it == raw_to_shared.end() ? ignore_id : it->second;
  }
};

VecXi apply_class_map(const VecXi& labels, const ClassMap& map);

// Shared 10-class set. Slot 4 is "oth. vehicle" in the 32/64-beam city
// pairing and "bus" in the long-range pairing; same slot either way.
std::vector<std::string> shared_class_names(bool bus_flavor = false);

// Identity map for synthetic domains that already carry shared ids.
ClassMap class_map_synthetic();

// Built-in raw-id maps for the three real-data taxonomies this project
// can adapt from. Unlisted raw ids land on ignore.
ClassMap class_map_nuscenes(bool bus_flavor = false);
ClassMap class_map_semantickitti();
ClassMap class_map_waymo();

}  // namespace lidarseg
