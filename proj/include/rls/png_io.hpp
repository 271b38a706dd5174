#pragma once

#include <filesystem>
#include <vector>

#include "rls/image.hpp"

namespace rls {

/// Lossless 16-bit-per-channel PNG (gray for C=1, RGB for C=3).
void write_png16(const std::filesystem::path& path, const Image& img);
/// Reads 8- or 16-bit gray/RGB(A) PNG into unit-interval floats. Alpha is dropped.
Image read_png(const std::filesystem::path& path);

/// Nearest-neighbour resize to `size` x `size`.
Image resize_nearest(const Image& img, int size);

/// Grid of tiles, each resized to `cell` px, separated by `gap` px of white.
Image contact_sheet(const std::vector<std::vector<Image>>& rows, int cell, int gap = 2);

}  // namespace rls
