#pragma once

#include <filesystem>

#include "tps/tensor.hpp"

namespace tps {

// Scene pixel container: magic "PFM1", then u32 channels/height/width and
// channels*height*width little-endian f64 values, row-major. Doubles keep
// save -> load an exact identity.
void write_pfm(const std::filesystem::path& path, const Tensor& pixels);
Tensor read_pfm(const std::filesystem::path& path);

}  // namespace tps
