#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calora/projection.hpp"
#include "calora/rng.hpp"
#include "calora/tensor.hpp"
#include "calora/world.hpp"

namespace calora {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1] for t in 1..T
  std::vector<double> alpha_bar;  // alpha_bar[t-1]

  double ab(int t) const;  // ᾱ_t, t in [1,T]
};

NoiseSchedule make_schedule(int T);

/// x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps
std::vector<double> add_noise(std::span<const double> x0, std::span<const double> eps, int t,
                              const NoiseSchedule& sched);

/// Images are stored in [0,1]; the denoiser works in [-1,1].
std::vector<double> to_model_space(std::span<const double> image01);
std::vector<double> from_model_space(std::span<const double> x);

/// Anything that predicts ε from (x_t, t, prompt). x_t is (batch × kImageValues).
class EpsPredictor {
 public:
  virtual ~EpsPredictor() = default;
  virtual Tensor predict(const Tensor& x_t, std::span<const int> t,
                         std::span<const PromptTokens> prompts) const = 0;
};

/// Additive hook on attention projections (used by adapters). Returns the
/// projection output to use given the input and the base output.
class ProjectionDelta {
 public:
  virtual ~ProjectionDelta() = default;
  virtual Tensor apply(const ProjectionId& id, const Tensor& x, const Tensor& base_out) const = 0;
};

struct DenoiserConfig {
  int width = 32;
  int heads = 4;
  int blocks = 2;
  int ffn = 64;
  int patch = 4;
  int T = 200;  // schedule the ε skip path is evaluated on
  std::uint64_t seed = 0;

  int dim_head() const { return width / heads; }
  int tokens() const { return (kImageSize / patch) * (kImageSize / patch); }
  int grid() const { return kImageSize / patch; }
  int patch_values() const { return patch * patch * kChannels; }
  void validate() const;
};

struct BlockCapture {
  Tensor tokens;                   // (batch·tokens × width), after the block
  std::vector<double> cross_probs; // batch × heads × tokens × kPromptLength
};

struct DenoiserOutput {
  Tensor eps;
  std::vector<BlockCapture> blocks;  // filled when capture is requested
};

class TinyDenoiser : public EpsPredictor {
 public:
  explicit TinyDenoiser(DenoiserConfig config);

  const DenoiserConfig& config() const { return config_; }

  DenoiserOutput forward(const Tensor& x_t, std::span<const int> t,
                         std::span<const PromptTokens> prompts, bool capture = false) const;
  Tensor predict(const Tensor& x_t, std::span<const int> t,
                 std::span<const PromptTokens> prompts) const override;

  /// Ordered (name, tensor) list. Tensors share storage with the model.
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  void set_trainable(bool on);

  /// Fixed (non-trainable) arrays: the per-patch Gaussian prior behind the
  /// linear ε skip path.
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }
  Tensor& buffer(const std::string& name);
  /// Fits the patch mean/covariance eigenbasis used by the skip path.
  void fit_prior(const std::vector<std::vector<double>>& images01);

  std::vector<ProjectionId> projections() const;
  Tensor& projection_weight(const ProjectionId& id);
  const Tensor& projection_weight(const ProjectionId& id) const;
  ProjectionShape projection_shape(const ProjectionId& id) const;
  static std::string projection_param(const ProjectionId& id);

  void set_adapters(const ProjectionDelta* delta) { delta_ = delta; }
  const ProjectionDelta* adapters() const { return delta_; }

  /// Per-block (heads × kPromptLength) 0/1 table restricting which prompt
  /// slots each cross-attention head may attend to. Empty clears it.
  void set_cross_key_mask(int block, std::vector<std::uint8_t> mask);
  /// Per-head output multipliers for one attention layer. Empty clears it.
  void set_head_gate(int block, AttentionKind kind, std::vector<double> gate);

  /// Deep copy of parameters and buffers; hooks (adapters, masks, gates) are not copied.
  TinyDenoiser clone() const;

 private:
  Tensor project(const ProjectionId& id, const Tensor& x) const;
  Tensor prior_eps(const Tensor& patches, std::span<const int> t) const;

  DenoiserConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::vector<double> alpha_bar_;
  const ProjectionDelta* delta_ = nullptr;
  std::vector<std::vector<std::uint8_t>> cross_mask_;
  std::map<std::pair<int, int>, std::vector<double>> head_gate_;
};

/// Sinusoidal timestep embedding, (t.size() × dim).
Tensor timestep_embedding(std::span<const int> t, int dim);

// ---------------------------------------------------------------------------
// Training

struct TrainingSet {
  std::vector<std::vector<double>> images;  // [0,1] HWC
  std::vector<PromptTokens> prompts;

  std::size_t size() const { return images.size(); }
};

TrainingSet training_set_of(const std::vector<LabeledImage>& pairs);

struct DiffusionBatch {
  Tensor x0;   // model space
  Tensor eps;
  Tensor x_t;
  std::vector<int> t;
  std::vector<PromptTokens> prompts;
};

struct TrainConfig {
  int iterations = 2000;
  int batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double null_prompt_dropout = 0.1;
  bool cosine_decay = true;  // lr follows a half cosine down to 5% of lr
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;
  std::size_t prompts_seen = 0;
  std::size_t prompts_nulled = 0;
};

/// Draws one training batch: images with replacement, t ~ U{1..T}, ε ~ N(0,1),
/// prompts replaced by NULL with the dropout probability.
DiffusionBatch draw_batch(const TrainingSet& data, const NoiseSchedule& sched, int batch,
                          double null_dropout, Rng& rng);

/// Mean squared error between predicted and true ε.
Tensor diffusion_loss(const EpsPredictor& model, const DiffusionBatch& batch);

/// Adam on `params` against the diffusion loss. Throws NumericalError when the
/// loss becomes non-finite.
TrainResult train_diffusion(const EpsPredictor& model, std::vector<Tensor> params,
                            const TrainingSet& data, const NoiseSchedule& sched,
                            const TrainConfig& config,
                            const std::function<void(int, double)>& on_step = {});
TrainResult train_diffusion(TinyDenoiser& model, const TrainingSet& data,
                            const NoiseSchedule& sched, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Sampling and features

struct SampleConfig {
  int steps = 25;
  double guidance = 5.0;
};

/// Deterministic DDIM (eta = 0) with classifier-free guidance; returns an
/// image in [0,1].
std::vector<double> sample_cfg(const EpsPredictor& model, const NoiseSchedule& sched,
                               const PromptTokens& prompt, const SampleConfig& config,
                               std::uint64_t seed);
/// Same loop driven by the NULL-prompt prediction alone.
std::vector<double> sample_unconditional(const EpsPredictor& model, const NoiseSchedule& sched,
                                         int steps, std::uint64_t seed);

struct GenerativeFeatures {
  int grid = 8;
  std::vector<std::vector<double>> feature_maps;  // per block: tokens × width (row-major 8×8)
  std::vector<std::vector<double>> cross_attn;    // per block: heads × tokens × kPromptLength
  int width = 0;
  int heads = 0;

  /// Per block and prompt slot, the map averaged over heads: kPromptLength × tokens.
  std::vector<double> slot_maps(int block) const;
};

GenerativeFeatures extract_features(const TinyDenoiser& model, const NoiseSchedule& sched,
                                    std::span<const double> image01, int t_feat,
                                    const PromptTokens& prompt, std::uint64_t eps_seed);

}  // namespace calora
