#include "calora/lora.hpp"

#include <algorithm>
#include <cmath>

#include "calora/binary.hpp"
#include "calora/error.hpp"

namespace calora {

using nlohmann::json;

void ProjectionAdapter::validate() const {
  shape.validate(id.projection);
  require(rank >= 1, "adapter " + id.str() + ": rank must be at least 1");
  require(!indices.empty(), "adapter " + id.str() + ": no indices");
  const std::size_t split = in_kind() ? shape.d_out : shape.d_in;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < split, "adapter " + id.str() + ": index out of range");
    require(i == 0 || indices[i] > indices[i - 1], "adapter " + id.str() + ": indices must be sorted and disjoint");
  }
  require(static_cast<std::size_t>(rank) <= indices.size(),
          "adapter " + id.str() + ": rank " + std::to_string(rank) + " exceeds restricted dimension " +
              std::to_string(indices.size()));
  const std::size_t r = rank, n = indices.size();
  const Shape a_shape = in_kind() ? Shape{r, shape.d_in} : Shape{r, n};
  const Shape b_shape = in_kind() ? Shape{n, r} : Shape{shape.d_out, r};
  if (A.shape() != a_shape || B.shape() != b_shape)
    throw DimensionError("adapter " + id.str() + ": factor shapes " + to_string(A.shape()) + ", " +
                         to_string(B.shape()) + " expected " + to_string(a_shape) + ", " + to_string(b_shape));
}

std::vector<std::size_t> head_indices(const std::vector<std::size_t>& heads, std::size_t dim_head) {
  std::vector<std::size_t> sorted = heads;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<std::size_t> idx;
  for (std::size_t h : sorted)
    for (std::size_t j = dim_head * h; j < dim_head * (h + 1); ++j) idx.push_back(j);
  return idx;
}

ProjectionAdapter make_adapter(const ProjectionId& id, const ProjectionShape& shape,
                               std::vector<std::size_t> heads, int rank, double alpha, Rng& rng) {
  shape.validate(id.projection);
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  for (std::size_t h : heads) require(h < shape.heads, "adapter " + id.str() + ": head out of range");
  const std::size_t dim_head = (id.projection == ProjectionKind::OUT ? shape.d_in : shape.d_out) / shape.heads;
  ProjectionAdapter a;
  a.id = id;
  a.shape = shape;
  a.heads = heads;
  a.indices = head_indices(heads, dim_head);
  a.rank = rank;
  a.alpha = alpha;
  require(rank >= 1 && static_cast<std::size_t>(rank) <= a.indices.size(),
          "adapter " + id.str() + ": rank " + std::to_string(rank) + " exceeds restricted dimension " +
              std::to_string(a.indices.size()));
  const std::size_t r = rank, n = a.indices.size();
  const Shape a_shape = a.in_kind() ? Shape{r, shape.d_in} : Shape{r, n};
  const Shape b_shape = a.in_kind() ? Shape{n, r} : Shape{shape.d_out, r};
  a.A = Tensor(a_shape, rng.normal_vector(numel_of(a_shape), 1.0 / rank), true);
  a.B = Tensor::zeros(b_shape, true);
  a.validate();
  return a;
}

Tensor adapted_projection_forward(const Tensor& x, const Tensor& base_out, const ProjectionAdapter& a) {
  if (a.in_kind()) {
    Tensor low = scale(linear(linear(x, a.A), a.B), a.alpha);
    return add(base_out, scatter_cols(low, a.indices, a.shape.d_out));
  }
  Tensor low = scale(linear(linear(gather_cols(x, a.indices), a.A), a.B), a.alpha);
  return add(base_out, low);
}

Tensor adapted_projection_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                                  const ProjectionAdapter& a) {
  return adapted_projection_forward(x, linear(x, weight, bias), a);
}

Tensor merge_delta(const ProjectionAdapter& a) {
  a.validate();
  NoGradGuard guard;
  Tensor ba = scale(matmul(a.B, a.A), a.alpha);
  if (a.in_kind()) {
    // rows of ΔW at the indices: transpose trick through scatter_cols
    std::vector<double> out(a.shape.d_out * a.shape.d_in, 0.0);
    for (std::size_t i = 0; i < a.indices.size(); ++i)
      for (std::size_t j = 0; j < a.shape.d_in; ++j)
        out[a.indices[i] * a.shape.d_in + j] = ba.data()[i * a.shape.d_in + j];
    return Tensor({a.shape.d_out, a.shape.d_in}, std::move(out));
  }
  return scatter_cols(ba, a.indices, a.shape.d_in);
}

Tensor CALoRA::apply(const ProjectionId& id, const Tensor& x, const Tensor& base_out) const {
  auto it = adapters_.find(id);
  if (it == adapters_.end()) return base_out;
  return adapted_projection_forward(x, base_out, it->second);
}

std::vector<Tensor> CALoRA::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [id, a] : adapters_) {
    out.push_back(a.A);
    out.push_back(a.B);
  }
  return out;
}

std::size_t CALoRA::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [id, a] : adapters_) n += a.A.numel() + a.B.numel();
  return n;
}

AdaptedModel::AdaptedModel(const TinyDenoiser& base, std::unique_ptr<CALoRA> adapters)
    : model(base), lora(std::move(adapters)) {
  model.set_adapters(lora && !lora->empty() ? lora.get() : nullptr);
}

AdaptedModel attach_adapters(const TinyDenoiser& base, const SelectionMask& mask, int rank,
                             double alpha, std::uint64_t seed) {
  const auto& cfg = base.config();
  auto lora = std::make_unique<CALoRA>();
  Rng rng(derive_seed(seed, "lora-init"));
  for (const auto& [id, heads] : heads_per_projection(mask, cfg.blocks, cfg.heads))
    lora->adapters().emplace(id, make_adapter(id, base.projection_shape(id), heads, rank, alpha, rng));
  AdaptedModel out(base, std::move(lora));
  out.model.set_trainable(false);
  return out;
}

TrainResult finetune_lora(AdaptedModel& adapted, const TrainingSet& data, const NoiseSchedule& sched,
                          const LoraConfig& config) {
  require(data.size() > 0, "finetune_lora: empty dataset");
  for (const auto& [name, t] : adapted.model.parameters())
    require(!t.requires_grad(), "finetune_lora: base parameter '" + name + "' is not frozen");
  TrainResult result;
  if (!adapted.lora || adapted.lora->empty() || config.iterations <= 0) return result;
  TrainConfig tc;
  tc.iterations = config.iterations;
  tc.batch = config.batch;
  tc.lr = config.lr;
  tc.weight_decay = config.weight_decay;
  tc.null_prompt_dropout = config.null_prompt_dropout;
  tc.seed = derive_seed(config.seed, "lora-train");
  const auto& base = adapted.model.parameters();
  return train_diffusion(adapted.model, adapted.lora->parameters(), data, sched, tc, [&](int it, double) {
    for (const auto& [name, t] : base)
      if (t.has_grad())
        for (double g : t.grad())
          if (g != 0.0)
            throw InvariantError("finetune_lora: base parameter '" + name + "' received a gradient at step " +
                                 std::to_string(it));
  });
}

void save_adapters(const std::filesystem::path& path, const CALoRA& lora) {
  BinaryWriter w("CALORAAD", 1);
  json units = json::array();
  for (const auto& [id, a] : lora.adapters()) {
    units.push_back({{"projection", id.str()},
                     {"kind", a.in_kind() ? "in" : "out"},
                     {"shape", {a.shape.d_out, a.shape.d_in, a.shape.heads, a.shape.dim_head}},
                     {"heads", a.heads},
                     {"indices", a.indices},
                     {"rank", a.rank},
                     {"alpha", a.alpha},
                     {"A", w.add_array(id.str() + ".A", a.A)},
                     {"B", w.add_array(id.str() + ".B", a.B)}});
  }
  w.header()["units"] = units;
  w.write(path);
}

namespace {

ProjectionId parse_projection_id(const std::string& s) {
  const UnitId u = UnitId::parse(s);
  require(u.granularity() == Granularity::projection, "adapter file: bad projection id '" + s + "'");
  return {u.block, static_cast<AttentionKind>(u.attention), static_cast<ProjectionKind>(u.projection)};
}

}  // namespace

std::unique_ptr<CALoRA> load_adapters(const std::filesystem::path& path) {
  BinaryReader r(path, "CALORAAD", 1);
  auto lora = std::make_unique<CALoRA>();
  for (const auto& u : r.header().at("units")) {
    ProjectionAdapter a;
    a.id = parse_projection_id(u.at("projection").get<std::string>());
    const auto sh = u.at("shape").get<std::vector<std::size_t>>();
    require(sh.size() == 4, "adapter file: bad shape");
    a.shape = {sh[0], sh[1], sh[2], sh[3]};
    a.heads = u.at("heads").get<std::vector<std::size_t>>();
    a.indices = u.at("indices").get<std::vector<std::size_t>>();
    a.rank = u.at("rank").get<int>();
    a.alpha = u.at("alpha").get<double>();
    a.A = r.array(a.id.str() + ".A", true);
    a.B = r.array(a.id.str() + ".B", true);
    a.validate();
    lora->adapters().emplace(a.id, std::move(a));
  }
  return lora;
}

}  // namespace calora
