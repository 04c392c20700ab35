#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <vector>

#include "calora/diffusion.hpp"
#include "calora/units.hpp"

namespace calora {

/// Low-rank factors for one projection, restricted to the selected heads.
///  IN kind (Q/K/V):  ΔW[idx, :] = α·B·A, A: r×d_in (shared), B: |idx|×r
///  OUT kind:         ΔW[:, idx] = α·B·A, A: r×|idx|, B: d_out×r (shared)
struct ProjectionAdapter {
  ProjectionId id;
  ProjectionShape shape;
  std::vector<std::size_t> heads;
  std::vector<std::size_t> indices;
  int rank = 1;
  double alpha = 1.0;
  Tensor A;
  Tensor B;

  bool in_kind() const { return id.projection != ProjectionKind::OUT; }
  void validate() const;
};

/// Concatenation over sorted heads of [dim_head·h, dim_head·(h+1)).
std::vector<std::size_t> head_indices(const std::vector<std::size_t>& heads, std::size_t dim_head);

ProjectionAdapter make_adapter(const ProjectionId& id, const ProjectionShape& shape,
                               std::vector<std::size_t> heads, int rank, double alpha, Rng& rng);

/// y = base_out + α·(routed low-rank contribution).
Tensor adapted_projection_forward(const Tensor& x, const Tensor& base_out, const ProjectionAdapter& a);
/// y = x·W₀ᵀ (+ bias) + α·(routed low-rank contribution).
Tensor adapted_projection_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                                  const ProjectionAdapter& a);

/// Dense (d_out × d_in) ΔW including α.
Tensor merge_delta(const ProjectionAdapter& a);

class CALoRA : public ProjectionDelta {
 public:
  CALoRA() = default;

  Tensor apply(const ProjectionId& id, const Tensor& x, const Tensor& base_out) const override;

  std::map<ProjectionId, ProjectionAdapter>& adapters() { return adapters_; }
  const std::map<ProjectionId, ProjectionAdapter>& adapters() const { return adapters_; }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  bool empty() const { return adapters_.empty(); }

 private:
  std::map<ProjectionId, ProjectionAdapter> adapters_;
};

/// A frozen base model (sharing its weights) plus owned adapters routed into it.
struct AdaptedModel {
  TinyDenoiser model;
  std::unique_ptr<CALoRA> lora;

  AdaptedModel(const TinyDenoiser& base, std::unique_ptr<CALoRA> adapters);
  AdaptedModel(AdaptedModel&&) noexcept = default;
  AdaptedModel& operator=(AdaptedModel&&) noexcept = default;
};

struct LoraConfig {
  int rank = 4;             // the paper's default is 64; 4 fits dim_head 8
  double alpha = 1.0;
  int iterations = 2000;    // the paper trains 10k iterations
  int batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double null_prompt_dropout = 0.1;
  std::uint64_t seed = 0;
};

/// Builds adapters for every head implied by the mask (B = 0, A ~ N(0, 1/r²)).
/// The base model is frozen; its weights are shared, not copied.
AdaptedModel attach_adapters(const TinyDenoiser& base, const SelectionMask& mask, int rank,
                             double alpha, std::uint64_t seed);

/// Trains only adapter factors on the diffusion loss. Throws InvariantError if
/// any base parameter picks up a gradient.
TrainResult finetune_lora(AdaptedModel& adapted, const TrainingSet& data, const NoiseSchedule& sched,
                          const LoraConfig& config);

void save_adapters(const std::filesystem::path& path, const CALoRA& lora);
std::unique_ptr<CALoRA> load_adapters(const std::filesystem::path& path);

}  // namespace calora
