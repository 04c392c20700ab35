#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "calora/config.hpp"
#include "calora/pipeline.hpp"

namespace {

calora::ExperimentConfig read_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  std::ifstream in(path);
  if (!in) throw calora::ConfigError("<file>", "cannot open " + path);
  nlohmann::json user;
  try {
    user = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw calora::ConfigError("<file>", std::string("parse error: ") + e.what());
  }
  if (seed) user["seed"] = *seed;
  return calora::parse_config(user);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calora: concept-aware adapters on a toy diffusion model"};
  app.require_subcommand(1);

  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  bool sweep = false;
  std::string out;
  bool quiet = false;

  std::vector<std::string> stages(std::begin(calora::kStages), std::end(calora::kStages));
  stages.push_back("all");
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s, "run the " + s + " stage");
    sub->add_option("--config", configs, "experiment configuration (JSON)")->required()->expected(1);
    sub->add_option("--seed", seed, "override the master seed");
    sub->add_flag("--sweep", sweep, "also emit per-timestep sensitivity maps");
    sub->add_option("--out", out, "run root (default $CALORA_RUN_ROOT or ./runs)");
    sub->add_flag("--quiet", quiet, "no progress output");
  }
  auto* cmp = app.add_subcommand("compare", "tabulate evaluation reports of completed runs");
  cmp->add_option("--config", configs, "one configuration per run")->required();
  cmp->add_option("--out", out, "run root");
  std::string csv_path;
  cmp->add_option("--csv", csv_path, "also write the table to this file");

  CLI11_PARSE(app, argc, argv);

  calora::RunOptions options;
  options.root = out.empty() ? calora::default_run_root() : std::filesystem::path(out);
  options.sweep = sweep;
  options.log = quiet ? nullptr : &std::cerr;

  try {
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "compare") {
      std::vector<calora::ExperimentConfig> parsed;
      for (const auto& c : configs) parsed.push_back(read_config(c, std::nullopt));
      const std::string table = calora::comparison_csv(calora::compare_runs(parsed, options));
      std::cout << table;
      if (!csv_path.empty()) std::ofstream(csv_path) << table;
      return 0;
    }
    calora::Pipeline p(read_config(configs.front(), seed), options);
    if (name == "all")
      p.run_all();
    else
      p.run(name);
    std::cout << p.dir(name == "all" ? "evaluate" : name).string() << '\n';
    return 0;
  } catch (const calora::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const calora::MissingArtifact& e) {
    std::cerr << "missing artifact (" << e.stage() << "): " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
