#pragma once

#include "lidarseg/types.hpp"

#include <string>

namespace lidarseg {

// Minimal 8-bit RGB PNG codec (zlib-backed). Writes non-interlaced RGB8;
// the reader handles all five scanline filters but only the RGB8 layout
// this project produces.
void write_png(const std::string& path, const Image& image);
Image read_png(const std::string& path);

// Nearest-neighbour resize; keeps class/instance id channels intact.
Image resize_nearest(const Image& image, int new_width, int new_height);

}  // namespace lidarseg
