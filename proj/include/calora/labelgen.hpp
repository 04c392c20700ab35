#pragma once

#include <filesystem>
#include <vector>

#include "calora/diffusion.hpp"

namespace calora {

struct LabelGenConfig {
  int proj_width = 16;
  int hidden = 32;
  int iterations = 1500;
  int batch = 8;
  double lr = 3e-3;
  int t_feat = 16;
  int feature_draws = 2;  // noise draws cached per training image
  std::uint64_t seed = 0;
};

/// Attention channels per block: style slot, viewpoint slot, one per class
/// token (building, vehicle, pedestrian), NULL slots.
constexpr int kAttnChannels = 6;

/// (kPixels × cells) half-pixel bilinear interpolation matrix from a
/// grid×grid map to the image grid, edges clamped.
Tensor upsample_matrix(int grid);

class LabelGenerator {
 public:
  LabelGenerator(int blocks, int width, int grid, LabelGenConfig config);

  const LabelGenConfig& config() const { return config_; }
  int blocks() const { return blocks_; }
  int width() const { return width_; }
  int grid() const { return grid_; }

  /// Constant network inputs for one image: per block the normalized tokens
  /// (cells × width) and the attention channels (cells × kAttnChannels).
  struct Inputs {
    std::vector<Tensor> tokens;
    std::vector<Tensor> attn;
  };
  Inputs prepare(const GenerativeFeatures& f, const PromptTokens& prompt) const;

  Tensor cell_logits(const Inputs& in) const;  // cells × K
  Tensor logits(const Inputs& in) const;       // kPixels × K
  std::vector<std::uint8_t> predict(const GenerativeFeatures& f, const PromptTokens& prompt) const;

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;

  void save(const std::filesystem::path& path) const;
  static LabelGenerator load(const std::filesystem::path& path);

 private:
  const Tensor& p(const std::string& name) const;

  int blocks_, width_, grid_;
  LabelGenConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
  Tensor upsample_;
  std::vector<std::int64_t> neighbor_index_;
};

struct LabelGenResult {
  std::vector<double> loss_curve;
};

/// Trains on features of noised source images. The denoiser is not touched.
LabelGenResult train_label_generator(const TinyDenoiser& model, const NoiseSchedule& sched,
                                     const std::vector<LabeledImage>& pairs, LabelGenerator& generator);

std::vector<std::uint8_t> predict_label(const TinyDenoiser& model, const LabelGenerator& generator,
                                        const NoiseSchedule& sched, std::span<const double> image01, int t_feat,
                                        std::uint64_t eps_seed, const PromptTokens& prompt);

/// Samples an image from the prompt and labels it from freshly noised features.
LabeledImage generate_pair(const TinyDenoiser& model, const LabelGenerator& generator, const NoiseSchedule& sched,
                           const PromptTokens& prompt, const SampleConfig& sample, std::uint64_t sample_seed);

}  // namespace calora
