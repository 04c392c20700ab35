#pragma once

#include <filesystem>

#include "calora/diffusion.hpp"
#include "json.hpp"

namespace calora {

struct Checkpoint {
  TinyDenoiser model;
  NoiseSchedule schedule;
};

/// Writes config, schedule, vocabulary, parameters and buffers (magic "CALORACK").
void save_checkpoint(const std::filesystem::path& path, const TinyDenoiser& model,
                     const NoiseSchedule& schedule);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json config_to_json(const DenoiserConfig& c);
DenoiserConfig config_from_json(const nlohmann::json& j);

}  // namespace calora
