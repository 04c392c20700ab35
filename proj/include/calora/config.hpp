#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "calora/diffusion.hpp"
#include "calora/error.hpp"
#include "calora/labelgen.hpp"
#include "calora/lora.hpp"
#include "calora/segmenter.hpp"
#include "calora/sensitivity.hpp"
#include "json.hpp"

namespace calora {

/// Invalid configuration; `path` names the offending field ("finetune.rank").
class ConfigError : public ContractError {
 public:
  ConfigError(std::string path, const std::string& what)
      : ContractError(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct Condition {
  Style style = Style::clearday;
  Viewpoint viewpoint = Viewpoint::driving;
  std::string name() const;
};

struct WorldParams {
  std::uint64_t seed = 7;
  int pretrain_per_condition = 64;
  bool exclude_source_from_pretrain = true;
  Condition source;
  int source_train = 64;
  int few_shot = 10;
  int source_test = 200;
  int shifted_test = 100;
  std::vector<Condition> shifted;  // DG test domains
  int oracle_per_condition = 64;
};

struct PretrainParams {
  DenoiserConfig model;
  TrainConfig train;
};

struct MethodSpec {
  std::string name;
  std::string kind;  // "pretrained", "ca-lora" or "lora"
  Concept concept_kind = Concept::style;
  double proportion = 0.0;
};

struct FinetuneParams {
  LoraConfig lora;
  int paper_rank = 64;
  int paper_iterations = 10000;
  std::vector<MethodSpec> methods;
};

struct GenerateParams {
  std::vector<Style> conditions;
  Viewpoint viewpoint = Viewpoint::driving;
  int per_condition = 100;
  bool class_augmentation = true;
  SampleConfig sample;
};

struct EvaluateParams {
  int mmd_samples = 100;
  std::vector<Style> adherence_styles;
  std::vector<Style> dg_conditions;
  SegmenterConfig segmenter;
  double extra_fraction = 1.0 / 3.0;
  SegmenterConfig oracle;
  StyleClassifierConfig classifier;
  int label_alignment_samples = 25;  // per DG condition
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  WorldParams world;
  PretrainParams pretrain;
  SensitivityConfig sensitivity;
  std::vector<int> sweep_t;
  PromptTokens base_prompt;
  FinetuneParams finetune;
  LabelGenConfig labelgen;
  GenerateParams generate;
  EvaluateParams evaluate;

  /// Resolved configuration (defaults merged) as canonical JSON.
  nlohmann::json json;

  const MethodSpec& method(const std::string& name) const;
};

/// Defaults for every field.
nlohmann::json default_config_json();

/// Merges `user` over the defaults. Unknown keys, type mismatches and
/// out-of-range values throw ConfigError naming the field path.
ExperimentConfig parse_config(const nlohmann::json& user);
ExperimentConfig load_config(const std::filesystem::path& path);

/// 64-bit FNV-1a over the canonical serialization.
std::uint64_t fnv1a(std::string_view bytes);
std::string content_id(const nlohmann::json& j);

}  // namespace calora
