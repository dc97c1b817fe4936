#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lethe/nn.hpp"

namespace lethe {

/// Flat binary model file:
///
///   "LETH"                       4 bytes
///   version (= 1)                u32
///   layer count L                u32
///   L x (rows, cols) of weights  u32 pairs
///   per layer: weight row-major, then bias (cols values)
///
/// Integers and f64 values are little-endian.
std::string encode_checkpoint(const nn::ModelParams& params);
nn::ModelParams decode_checkpoint(const std::string& bytes);  // FormatError

void save_checkpoint(const std::filesystem::path& path, const nn::ModelParams& params);
nn::ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace lethe
