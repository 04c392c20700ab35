#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "calora/world.hpp"

namespace calora {

/// 8-bit RGB PNG of an HWC image in [0,1].
void write_png_rgb(const std::filesystem::path& path, const std::vector<double>& image,
                   int width = kImageSize, int height = kImageSize);
std::vector<double> read_png_rgb(const std::filesystem::path& path);
/// Single-channel PNG whose pixel values are class ids.
void write_png_mask(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask);
std::vector<std::uint8_t> read_png_mask(const std::filesystem::path& path);

/// Tiles images row-major into one PNG with a 1-pixel gap.
void write_image_grid(const std::filesystem::path& path, const std::vector<std::vector<double>>& images,
                      int columns);

nlohmann::json scene_to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& j);

/// Writes <dir>/NNNNNN.png, NNNNNN_mask.png and manifest.json. `entries`, when
/// non-empty, supplies extra per-item fields (prompt, seeds, model id).
void export_dataset(const std::filesystem::path& dir, const std::vector<LabeledImage>& pairs,
                    const std::vector<nlohmann::json>& entries);
std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir);

}  // namespace calora
