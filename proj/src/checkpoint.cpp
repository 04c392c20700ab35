#include "calora/checkpoint.hpp"

#include "calora/binary.hpp"
#include "calora/error.hpp"

namespace calora {

using nlohmann::json;

json config_to_json(const DenoiserConfig& c) {
  return {{"width", c.width}, {"heads", c.heads}, {"blocks", c.blocks}, {"ffn", c.ffn},
          {"patch", c.patch}, {"T", c.T},         {"seed", c.seed}};
}

DenoiserConfig config_from_json(const json& j) {
  DenoiserConfig c;
  c.width = j.at("width").get<int>();
  c.heads = j.at("heads").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.patch = j.at("patch").get<int>();
  c.T = j.at("T").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const TinyDenoiser& model,
                     const NoiseSchedule& schedule) {
  BinaryWriter w("CALORACK", 1);
  w.header()["config"] = config_to_json(model.config());
  w.header()["schedule"] = {{"T", schedule.T}, {"kind", "linear"}, {"beta", schedule.beta}};
  w.header()["vocabulary"] = vocabulary();
  json params = json::array(), buffers = json::array();
  for (const auto& [name, t] : model.parameters()) params.push_back(w.add_array(name, t));
  for (const auto& [name, t] : model.buffers()) buffers.push_back(w.add_array(name, t));
  w.header()["parameters"] = params;
  w.header()["buffers"] = buffers;
  w.write(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path, "CALORACK", 1);
  const json& h = r.header();
  const auto vocab = h.at("vocabulary").get<std::vector<std::string>>();
  if (vocab != vocabulary()) throw ContractError(path.string() + ": vocabulary mismatch");
  Checkpoint ck{TinyDenoiser(config_from_json(h.at("config"))), {}};
  ck.schedule.T = h.at("schedule").at("T").get<int>();
  ck.schedule.beta = h.at("schedule").at("beta").get<std::vector<double>>();
  require(static_cast<int>(ck.schedule.beta.size()) == ck.schedule.T, path.string() + ": bad schedule");
  double prod = 1.0;
  for (double b : ck.schedule.beta) ck.schedule.alpha_bar.push_back(prod *= 1.0 - b);
  auto copy_into = [&](Tensor& dst, const std::string& name) {
    const Tensor src = r.array(name);
    if (src.shape() != dst.shape())
      throw DimensionError(path.string() + ": array '" + name + "' has shape " + to_string(src.shape()) +
                           ", model expects " + to_string(dst.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.data_mut().begin());
  };
  for (const auto& [name, t] : ck.model.parameters()) copy_into(ck.model.param(name), name);
  for (const auto& [name, t] : ck.model.buffers()) copy_into(ck.model.buffer(name), name);
  return ck;
}

}  // namespace calora
