#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "calora/config.hpp"
#include "json.hpp"

namespace calora {

/// An upstream artifact the requested stage depends on has not been produced.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(std::string stage, const std::string& what)
      : std::runtime_error(what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

inline constexpr const char* kStages[] = {"world", "pretrain", "sensitivity", "finetune",
                                          "labelgen", "generate", "evaluate"};

/// $CALORA_RUN_ROOT, or ./runs.
std::filesystem::path default_run_root();

struct RunOptions {
  std::filesystem::path root;
  bool sweep = false;
  std::ostream* log = nullptr;  // progress lines; null is silent
};

class Pipeline {
 public:
  Pipeline(ExperimentConfig config, RunOptions options);

  const ExperimentConfig& config() const { return config_; }
  /// Content-addressed artifact id of a stage ("<stage>-<16 hex>").
  const std::string& id(const std::string& stage) const;
  std::filesystem::path dir(const std::string& stage) const;
  bool complete(const std::string& stage) const;

  /// Runs one stage; upstream artifacts must already exist.
  void run(const std::string& stage);
  /// Runs every stage in order, reusing completed upstream artifacts.
  void run_all();

  nlohmann::json report() const;

 private:
  void require_done(const std::string& stage) const;
  void finish(const std::string& stage, nlohmann::json extra) const;
  std::ostream& log() const;

  void stage_world();
  void stage_pretrain();
  void stage_sensitivity();
  void stage_finetune();
  void stage_labelgen();
  void stage_generate();
  void stage_evaluate();

  ExperimentConfig config_;
  RunOptions options_;
  std::map<std::string, std::string> ids_;
  std::map<std::string, nlohmann::json> keys_;
};

/// One row per (run, method). Throws ContractError when the runs use
/// different world configurations and MissingArtifact when a run has no
/// evaluation report.
struct ComparisonRow {
  std::string run;
  std::uint64_t seed = 0;
  std::string method;
  nlohmann::json metrics;
};

std::vector<ComparisonRow> compare_runs(const std::vector<ExperimentConfig>& configs, const RunOptions& options);
std::string comparison_csv(const std::vector<ComparisonRow>& rows);

}  // namespace calora
