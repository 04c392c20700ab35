#include "calora/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "calora/error.hpp"

namespace calora {

using nlohmann::json;

const char* concept_name(Concept c) { return c == Concept::style ? "style" : "viewpoint"; }

Concept parse_concept(const std::string& name) {
  if (name == "style") return Concept::style;
  if (name == "viewpoint") return Concept::viewpoint;
  throw ContractError("unknown concept '" + name + "'");
}

std::size_t concept_slot(Concept c) { return c == Concept::style ? kStyleSlot : kViewpointSlot; }

namespace {

bool slot_holds_concept(Concept c, std::int64_t tok) {
  if (c == Concept::style) return tok >= token::style_base && tok < token::style_base + kNumStyles;
  return tok >= token::viewpoint_base && tok < token::viewpoint_base + kNumViewpoints;
}

}  // namespace

void ConceptSpec::validate() const {
  base.validate();
  const std::size_t slot = concept_slot(kind);
  require(slot_holds_concept(kind, base.ids[slot]),
          std::string("concept spec: base prompt has no ") + concept_name(kind) + " token");
  for (const auto& aug : augmentations) {
    aug.validate();
    // An augmentation equal to the base is the degenerate zero-loss case.
    for (std::size_t i = 0; i < kPromptLength; ++i)
      require(i == slot || aug.ids[i] == base.ids[i],
              "concept spec: augmentation " + aug.str() + " must differ from the base only in the " +
                  concept_name(kind) + " slot");
  }
}

std::vector<PromptTokens> build_augmented_prompts(Concept kind, const PromptTokens& base,
                                                  const std::vector<std::int64_t>& replacement_tokens) {
  const std::size_t slot = concept_slot(kind);
  require(slot_holds_concept(kind, base.ids[slot]),
          std::string("build_augmented_prompts: base prompt has no ") + concept_name(kind) + " token");
  std::vector<PromptTokens> out;
  for (std::int64_t tok : replacement_tokens) {
    PromptTokens p = base;
    p.ids[slot] = tok;
    require(!(p == base), "build_augmented_prompts: augmentation identical to the base prompt");
    out.push_back(p);
  }
  ConceptSpec{kind, base, out}.validate();
  return out;
}

std::vector<PromptTokens> build_augmented_prompts(Concept kind, const PromptTokens& base) {
  if (kind == Concept::style)
    return build_augmented_prompts(kind, base,
                                   {style_token(Style::sketch), style_token(Style::foggy), style_token(Style::night)});
  return build_augmented_prompts(kind, base,
                                 {viewpoint_token(Viewpoint::topdown), viewpoint_token(Viewpoint::closeup), token::null});
}

ConceptSpec make_concept_spec(Concept kind, const PromptTokens& base) {
  return {kind, base, build_augmented_prompts(kind, base)};
}

Tensor concept_loss(const EpsPredictor& model, const Tensor& x_t, std::span<const int> t,
                    std::span<const PromptTokens> c, std::span<const PromptTokens> c_aug) {
  Tensor target;
  {
    NoGradGuard guard;
    target = model.predict(x_t, t, c_aug);
  }
  return mse(model.predict(x_t, t, c), stop_gradient(target));
}

UnitScores grad_rms_per_unit(const TinyDenoiser& model, Granularity g) {
  const int heads = model.config().heads;
  std::map<UnitId, std::pair<double, std::size_t>> acc;
  for (const ProjectionId& id : model.projections()) {
    const Tensor& w = model.projection_weight(id);
    if (!w.has_grad()) throw ContractError("grad_rms_per_unit: projection " + id.str() + " has no gradient");
    const Tensor grad(w.shape(), std::vector<double>(w.grad().begin(), w.grad().end()));
    auto add_sq = [&](const UnitId& u, std::span<const double> v) {
      auto& [s, n] = acc[u];
      for (double x : v) s += x * x;
      n += v.size();
    };
    if (g == Granularity::head) {
      const auto chunks = chunk_per_head(grad, model.projection_shape(id), id.projection);
      for (int h = 0; h < heads; ++h) add_sq(head_unit(id, h), chunks[h].data());
      continue;
    }
    UnitId u = projection_unit(id);
    if (g != Granularity::projection) u.projection = -1;
    if (g == Granularity::block) u.attention = -1;
    add_sq(u, grad.data());
  }
  UnitScores out;
  for (const auto& [u, sn] : acc) out[u] = sn.second ? std::sqrt(sn.first / static_cast<double>(sn.second)) : 0.0;
  return out;
}

UnitScores sensitivity_ratio(const UnitScores& concept_rms, const UnitScores& diffusion_rms, double floor) {
  UnitScores out;
  for (const auto& [u, c] : concept_rms) {
    auto it = diffusion_rms.find(u);
    if (it == diffusion_rms.end()) throw ContractError("sensitivity: unit " + u.str() + " missing diffusion RMS");
    const double d = it->second;
    if (c == 0.0) {
      out[u] = 0.0;
    } else if (d < floor) {
      throw NumericalError("sensitivity: diffusion gradient RMS " + std::to_string(d) + " below floor at unit " +
                           u.str() + " while the concept gradient is nonzero");
    } else {
      out[u] = c / d;
    }
  }
  return out;
}

void SensitivityMap::validate(int blocks, int heads) const {
  const auto units = enumerate_units(blocks, heads, granularity);
  require(units.size() == scores.size(), "sensitivity map does not cover the unit set");
  for (const UnitId& u : units) {
    auto it = scores.find(u);
    require(it != scores.end(), "sensitivity map is missing unit " + u.str());
    require(std::isfinite(it->second) && it->second >= 0.0, "sensitivity score at " + u.str() + " is invalid");
  }
}

json SensitivityMap::meta() const {
  json augs = json::array();
  for (const auto& p : augmentations) augs.push_back(p.ids);
  return {{"granularity", granularity_name(granularity)},
          {"concept", concept_name(kind)},
          {"t", t},
          {"n_images", n_images},
          {"n_noise", n_noise},
          {"augmentations", augs},
          {"units", scores.size()}};
}

namespace {

// Enables gradients on the projection weights for the lifetime of the guard.
class ProjectionGradScope {
 public:
  explicit ProjectionGradScope(TinyDenoiser& model) : model_(model) {
    for (const ProjectionId& id : model_.projections()) {
      Tensor& w = model_.projection_weight(id);
      previous_.push_back(w.requires_grad());
      w.set_requires_grad(true);
      w.zero_grad();
    }
  }
  ~ProjectionGradScope() {
    std::size_t i = 0;
    for (const ProjectionId& id : model_.projections()) {
      Tensor& w = model_.projection_weight(id);
      w.zero_grad();
      w.set_requires_grad(previous_[i++]);
    }
  }
  void zero() {
    for (const ProjectionId& id : model_.projections()) model_.projection_weight(id).zero_grad();
  }

 private:
  TinyDenoiser& model_;
  std::vector<bool> previous_;
};

}  // namespace

std::vector<std::vector<double>> sensitivity_images(const TinyDenoiser& model, const NoiseSchedule& sched,
                                                    const ConceptSpec& spec, const SensitivityConfig& cfg) {
  require(cfg.n_images >= 1, "sensitivity: n_images must be at least 1");
  const std::uint64_t root = derive_seed(cfg.seed, "sensitivity-images");
  std::vector<std::vector<double>> images;
  for (int i = 0; i < cfg.n_images; ++i)
    images.push_back(sample_cfg(model, sched, spec.base, cfg.sample, derive_seed(root, static_cast<std::uint64_t>(i))));
  return images;
}

SensitivityMap concept_sensitivity(TinyDenoiser& model, const NoiseSchedule& sched, const ConceptSpec& spec,
                                   const std::vector<std::vector<double>>& images, const SensitivityConfig& cfg) {
  spec.validate();
  require(cfg.t >= 1 && cfg.t <= sched.T, "sensitivity: t must be in [1,T]");
  require(cfg.n_noise >= 1, "sensitivity: n_noise must be at least 1");
  require(!images.empty(), "sensitivity: no images");
  const auto& mc = model.config();
  SensitivityMap map;
  map.granularity = cfg.granularity;
  map.t = cfg.t;
  map.n_images = static_cast<int>(images.size());
  map.n_noise = cfg.n_noise;
  map.kind = spec.kind;
  map.augmentations = spec.augmentations;
  for (const UnitId& u : enumerate_units(mc.blocks, mc.heads, cfg.granularity)) map.scores[u] = 0.0;
  if (spec.augmentations.empty()) return map;

  ProjectionGradScope scope(model);
  const std::uint64_t noise_root = derive_seed(cfg.seed, "sensitivity-noise");
  const std::array<int, 1> t{cfg.t};
  const std::array<PromptTokens, 1> c{spec.base};
  std::size_t samples = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto x0 = to_model_space(images[i]);
    for (int j = 0; j < cfg.n_noise; ++j) {
      Rng rng(derive_seed(derive_seed(noise_root, static_cast<std::uint64_t>(i)), static_cast<std::uint64_t>(j)));
      Tensor eps({1, static_cast<std::size_t>(kImageValues)}, rng.normal_vector(kImageValues, 1.0));
      const Tensor x_t({1, static_cast<std::size_t>(kImageValues)}, add_noise(x0, eps.data(), cfg.t, sched));

      scope.zero();
      backward(mse(model.predict(x_t, t, c), eps));
      const UnitScores diffusion = grad_rms_per_unit(model, cfg.granularity);

      for (const PromptTokens& aug : spec.augmentations) {
        scope.zero();
        const std::array<PromptTokens, 1> ca{aug};
        backward(concept_loss(model, x_t, t, c, ca));
        const UnitScores ratio = sensitivity_ratio(grad_rms_per_unit(model, cfg.granularity), diffusion, cfg.floor);
        for (const auto& [u, r] : ratio) map.scores[u] += r;
        ++samples;
      }
    }
  }
  for (auto& [u, s] : map.scores) s /= static_cast<double>(samples);
  map.validate(mc.blocks, mc.heads);
  return map;
}

SensitivityMap concept_sensitivity(TinyDenoiser& model, const NoiseSchedule& sched, const ConceptSpec& spec,
                                   const SensitivityConfig& cfg) {
  spec.validate();
  return concept_sensitivity(model, sched, spec, sensitivity_images(model, sched, spec, cfg), cfg);
}

std::vector<SensitivityMap> sweep_timesteps(TinyDenoiser& model, const NoiseSchedule& sched,
                                            const ConceptSpec& spec, const std::vector<int>& t_list,
                                            const SensitivityConfig& cfg) {
  for (int t : t_list) require(t >= 1 && t <= sched.T, "sweep: t must be in [1,T]");
  const auto images = sensitivity_images(model, sched, spec, cfg);
  std::vector<SensitivityMap> out;
  for (int t : t_list) {
    SensitivityConfig c = cfg;
    c.t = t;
    out.push_back(concept_sensitivity(model, sched, spec, images, c));
  }
  return out;
}

SelectionMask select_top_k(const UnitScores& scores, Granularity g, double proportion) {
  require(proportion > 0.0 && proportion <= 1.0, "select_top_k: proportion must be in (0,1]");
  std::vector<std::pair<UnitId, double>> items(scores.begin(), scores.end());
  // map order is canonical, so a stable sort keeps ties canonical
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t count =
      std::min(items.size(), static_cast<std::size_t>(std::ceil(proportion * static_cast<double>(items.size()) - 1e-9)));
  SelectionMask mask;
  mask.granularity = g;
  mask.proportion = proportion;
  mask.total = items.size();
  for (std::size_t i = 0; i < count; ++i) mask.selected.push_back(items[i].first);
  return mask;
}

SelectionMask select_top_k(const SensitivityMap& map, double proportion) {
  return select_top_k(map.scores, map.granularity, proportion);
}

double jaccard(const std::vector<UnitId>& a, const std::vector<UnitId>& b) {
  std::vector<UnitId> sa = a, sb = b, inter, uni;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double rank_correlation(const UnitScores& a, const UnitScores& b) {
  std::vector<double> va, vb;
  for (const auto& [u, s] : a) {
    auto it = b.find(u);
    if (it == b.end()) continue;
    va.push_back(s);
    vb.push_back(it->second);
  }
  require(va.size() >= 2, "rank_correlation: fewer than two shared units");
  const auto ra = average_ranks(va), rb = average_ranks(vb);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return saa == sbb ? 1.0 : 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::vector<std::vector<double>> overlap_matrix(const std::vector<UnitScores>& maps, Granularity g,
                                                double proportion) {
  std::vector<std::vector<UnitId>> sets;
  for (const auto& m : maps) sets.push_back(select_top_k(m, g, proportion).selected);
  std::vector<std::vector<double>> out(sets.size(), std::vector<double>(sets.size()));
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (std::size_t j = 0; j < sets.size(); ++j) out[i][j] = jaccard(sets[i], sets[j]);
  return out;
}

std::vector<std::vector<double>> augmentation_robustness(TinyDenoiser& model, const NoiseSchedule& sched,
                                                         const ConceptSpec& spec, const SensitivityConfig& cfg,
                                                         double proportion) {
  require(spec.augmentations.size() >= 2, "augmentation_robustness: needs at least two variants");
  const auto images = sensitivity_images(model, sched, spec, cfg);
  std::vector<UnitScores> maps;
  for (const auto& aug : spec.augmentations) {
    ConceptSpec single{spec.kind, spec.base, {aug}};
    maps.push_back(concept_sensitivity(model, sched, single, images, cfg).scores);
  }
  return overlap_matrix(maps, cfg.granularity, proportion);
}

void write_sensitivity_csv(const std::filesystem::path& path, const SensitivityMap& map) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "unit,block,attention,projection,head,score\n";
  for (const auto& [u, s] : map.scores) {
    out << u.str() << ',' << u.block << ','
        << (u.attention >= 0 ? attention_name(static_cast<AttentionKind>(u.attention)) : "") << ','
        << (u.projection >= 0 ? projection_name(static_cast<ProjectionKind>(u.projection)) : "") << ','
        << (u.head >= 0 ? std::to_string(u.head) : "") << ',' << s << '\n';
  }
}

void write_sensitivity(const std::filesystem::path& csv_path, const SensitivityMap& map) {
  write_sensitivity_csv(csv_path, map);
  std::filesystem::path meta = csv_path;
  meta.replace_extension(".json");
  std::ofstream(meta) << map.meta().dump(2) << '\n';
}

SensitivityMap read_sensitivity(const std::filesystem::path& csv_path) {
  std::filesystem::path meta_path = csv_path;
  meta_path.replace_extension(".json");
  std::ifstream mf(meta_path);
  if (!mf) throw ContractError("missing sensitivity sidecar " + meta_path.string());
  const json meta = json::parse(mf);
  SensitivityMap map;
  map.granularity = parse_granularity(meta.at("granularity").get<std::string>());
  map.kind = parse_concept(meta.at("concept").get<std::string>());
  map.t = meta.at("t").get<int>();
  map.n_images = meta.at("n_images").get<int>();
  map.n_noise = meta.at("n_noise").get<int>();
  for (const auto& a : meta.at("augmentations")) {
    PromptTokens p;
    p.ids = a.get<std::array<std::int64_t, kPromptLength>>();
    map.augmentations.push_back(p);
  }
  std::ifstream in(csv_path);
  if (!in) throw ContractError("cannot read " + csv_path.string());
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto first = line.find(','), last = line.rfind(',');
    map.scores[UnitId::parse(line.substr(0, first))] = std::stod(line.substr(last + 1));
  }
  return map;
}

json mask_to_json(const SelectionMask& mask) {
  json units = json::array();
  for (const auto& u : mask.selected) units.push_back(u.str());
  return {{"granularity", granularity_name(mask.granularity)},
          {"proportion", mask.proportion},
          {"total", mask.total},
          {"selected", units}};
}

SelectionMask mask_from_json(const json& j) {
  SelectionMask m;
  m.granularity = parse_granularity(j.at("granularity").get<std::string>());
  m.proportion = j.at("proportion").get<double>();
  m.total = j.at("total").get<std::size_t>();
  for (const auto& s : j.at("selected")) {
    m.selected.push_back(UnitId::parse(s.get<std::string>()));
    require(m.selected.back().granularity() == m.granularity, "selection mask: mixed granularity");
  }
  return m;
}

}  // namespace calora
