#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pban/image.hpp"
#include "pban/model.hpp"

namespace pban {

/// "image before PBA" -> "image_before_pba"
std::string stage_slug(const std::string& stage);

/// Writes one 8-bit grayscale PNG per (block, branch, stage): the channel
/// mean of every patch, stitched in patch-grid order and min-max scaled to
/// 0..255 (a constant map is written as zeros). Files are named
/// block{b}_{branch}_{stage index}_{slug}.png. IoError if out_dir cannot be
/// created or written.
std::vector<std::filesystem::path> dump_features(const ImageRGB& hr, const ImageRGB& sr,
                                                 const NamedWeights<float>& weights, const PbanConfig& config,
                                                 const std::filesystem::path& out_dir);

}  // namespace pban
