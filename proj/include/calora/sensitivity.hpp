#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "calora/diffusion.hpp"
#include "calora/units.hpp"
#include "json.hpp"

namespace calora {

enum class Concept { style = 0, viewpoint };

const char* concept_name(Concept c);
Concept parse_concept(const std::string& name);
std::size_t concept_slot(Concept c);

struct ConceptSpec {
  Concept kind = Concept::style;
  PromptTokens base;
  std::vector<PromptTokens> augmentations;

  /// Augmentations may differ from base only in the concept slot.
  void validate() const;
};

/// style: slot 0 -> {sketch, foggy, night}; viewpoint: slot 1 -> {topdown, closeup, NULL}.
std::vector<PromptTokens> build_augmented_prompts(Concept kind, const PromptTokens& base);
std::vector<PromptTokens> build_augmented_prompts(Concept kind, const PromptTokens& base,
                                                  const std::vector<std::int64_t>& replacement_tokens);
ConceptSpec make_concept_spec(Concept kind, const PromptTokens& base);

/// ‖ε(x_t, c) − sg[ε(x_t, c_aug)]‖², averaged over elements.
Tensor concept_loss(const EpsPredictor& model, const Tensor& x_t, std::span<const int> t,
                    std::span<const PromptTokens> c, std::span<const PromptTokens> c_aug);

using UnitScores = std::map<UnitId, double>;

/// RMS of the accumulated projection-weight gradients per unit.
UnitScores grad_rms_per_unit(const TinyDenoiser& model, Granularity g);

/// concept / diffusion per unit. A diffusion RMS below `floor` is an error
/// unless the concept RMS is exactly zero, in which case the ratio is 0.
UnitScores sensitivity_ratio(const UnitScores& concept_rms, const UnitScores& diffusion_rms, double floor);

struct SensitivityConfig {
  int t = 16;  // 81 of 1000 scaled to T = 200
  int n_images = 4;
  int n_noise = 4;
  Granularity granularity = Granularity::head;
  double floor = 1e-12;
  SampleConfig sample;
  std::uint64_t seed = 0;
};

struct SensitivityMap {
  Granularity granularity = Granularity::head;
  UnitScores scores;
  int t = 0;
  int n_images = 0;
  int n_noise = 0;
  Concept kind = Concept::style;
  std::vector<PromptTokens> augmentations;

  void validate(int blocks, int heads) const;
  nlohmann::json meta() const;
};

/// Images used as x₀: generated by the model from the base prompt.
std::vector<std::vector<double>> sensitivity_images(const TinyDenoiser& model, const NoiseSchedule& sched,
                                                    const ConceptSpec& spec, const SensitivityConfig& cfg);

SensitivityMap concept_sensitivity(TinyDenoiser& model, const NoiseSchedule& sched, const ConceptSpec& spec,
                                   const SensitivityConfig& cfg);
/// Same with the x₀ set supplied.
SensitivityMap concept_sensitivity(TinyDenoiser& model, const NoiseSchedule& sched, const ConceptSpec& spec,
                                   const std::vector<std::vector<double>>& images, const SensitivityConfig& cfg);

std::vector<SensitivityMap> sweep_timesteps(TinyDenoiser& model, const NoiseSchedule& sched,
                                            const ConceptSpec& spec, const std::vector<int>& t_list,
                                            const SensitivityConfig& cfg);

/// Sorted by score descending, ties in canonical unit order;
/// count = ceil(proportion · total).
SelectionMask select_top_k(const SensitivityMap& map, double proportion);
SelectionMask select_top_k(const UnitScores& scores, Granularity g, double proportion);

double jaccard(const std::vector<UnitId>& a, const std::vector<UnitId>& b);
/// Spearman rank correlation over the shared units (average ranks for ties).
double rank_correlation(const UnitScores& a, const UnitScores& b);

/// Pairwise Jaccard overlap of top-`proportion` sets built from one
/// augmentation at a time.
std::vector<std::vector<double>> augmentation_robustness(TinyDenoiser& model, const NoiseSchedule& sched,
                                                         const ConceptSpec& spec, const SensitivityConfig& cfg,
                                                         double proportion = 0.10);
std::vector<std::vector<double>> overlap_matrix(const std::vector<UnitScores>& maps, Granularity g,
                                                double proportion);

void write_sensitivity_csv(const std::filesystem::path& path, const SensitivityMap& map);
void write_sensitivity(const std::filesystem::path& csv_path, const SensitivityMap& map);  // csv + .json sidecar
SensitivityMap read_sensitivity(const std::filesystem::path& csv_path);

nlohmann::json mask_to_json(const SelectionMask& mask);
SelectionMask mask_from_json(const nlohmann::json& j);

}  // namespace calora
