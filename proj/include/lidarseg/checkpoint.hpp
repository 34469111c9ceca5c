#pragma once

#include "lidarseg/backbone.hpp"

#include <optional>
#include <string>

namespace lidarseg {

// Checkpoint container (little-endian):
//   magic 'LSEGCKP1' (8 bytes), u32 version,
//   u32 meta length, meta JSON (arch config, frozen flags, head layout),
//   u32 tensor count, then per tensor:
//     u32 name length, name bytes, u64 element count, float32 data
// Tensors cover learnable parameters and running-statistic buffers;
// head tensors are stored under "head." names.
void save_checkpoint(const std::string& path, const BackboneParams& backbone,
                     const HeadParams* head = nullptr);

struct Checkpoint {
  BackboneParams backbone;
  std::optional<HeadParams> head;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace lidarseg
