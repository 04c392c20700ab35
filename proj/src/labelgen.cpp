#include "calora/labelgen.hpp"

#include <algorithm>
#include <cmath>

#include "calora/binary.hpp"
#include "calora/error.hpp"
#include "calora/optim.hpp"

namespace calora {

using nlohmann::json;

Tensor upsample_matrix(int grid) {
  require(grid >= 1 && kImageSize % grid == 0, "upsample_matrix: grid must divide the image size");
  const double s = static_cast<double>(grid) / kImageSize;
  std::vector<double> u(static_cast<std::size_t>(kPixels) * grid * grid, 0.0);
  auto axis = [&](int p, int& i0, int& i1, double& w1) {
    const double c = std::clamp((p + 0.5) * s - 0.5, 0.0, static_cast<double>(grid - 1));
    i0 = static_cast<int>(std::floor(c));
    i1 = std::min(i0 + 1, grid - 1);
    w1 = c - i0;
  };
  for (int y = 0; y < kImageSize; ++y) {
    int y0, y1;
    double wy;
    axis(y, y0, y1, wy);
    for (int x = 0; x < kImageSize; ++x) {
      int x0, x1;
      double wx;
      axis(x, x0, x1, wx);
      double* row = &u[static_cast<std::size_t>(y * kImageSize + x) * grid * grid];
      row[y0 * grid + x0] += (1 - wy) * (1 - wx);
      row[y0 * grid + x1] += (1 - wy) * wx;
      row[y1 * grid + x0] += wy * (1 - wx);
      row[y1 * grid + x1] += wy * wx;
    }
  }
  return Tensor({static_cast<std::size_t>(kPixels), static_cast<std::size_t>(grid * grid)}, std::move(u));
}

LabelGenerator::LabelGenerator(int blocks, int width, int grid, LabelGenConfig config)
    : blocks_(blocks), width_(width), grid_(grid), config_(config), upsample_(upsample_matrix(grid)) {
  require(blocks >= 1 && width >= 1, "LabelGenerator: bad feature layout");
  require(config.proj_width >= 1 && config.hidden >= 1, "LabelGenerator: bad widths");
  Rng rng(derive_seed(config.seed, "labelgen-init"));
  auto add = [&](const std::string& name, Shape shape, double sigma) {
    const std::size_t n = numel_of(shape);
    params_.emplace_back(name, Tensor(shape, sigma > 0 ? rng.normal_vector(n, sigma) : std::vector<double>(n, 0.0), true));
  };
  const std::size_t pw = config.proj_width, hid = config.hidden;
  for (int b = 0; b < blocks; ++b) {
    add("proj." + std::to_string(b) + ".w", {pw, static_cast<std::size_t>(width)}, 1.0 / std::sqrt(width));
    add("proj." + std::to_string(b) + ".b", {pw}, 0.0);
  }
  const std::size_t in = static_cast<std::size_t>(blocks) * (pw + kAttnChannels);
  add("fuse.l1.w", {hid, in}, 1.0 / std::sqrt(static_cast<double>(in)));
  add("fuse.l1.b", {hid}, 0.0);
  add("fuse.l2.w", {hid, 9 * hid}, 1.0 / std::sqrt(9.0 * hid));
  add("fuse.l2.b", {hid}, 0.0);
  add("head.w", {static_cast<std::size_t>(kNumClasses), hid}, 1.0 / std::sqrt(static_cast<double>(hid)));
  add("head.b", {static_cast<std::size_t>(kNumClasses)}, 0.0);
  // 3×3 neighborhood, zero outside the grid
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const bool inside = yy >= 0 && yy < grid && xx >= 0 && xx < grid;
          for (std::size_t c = 0; c < hid; ++c)
            neighbor_index_.push_back(inside ? static_cast<std::int64_t>((yy * grid + xx) * hid + c) : -1);
        }
}

const Tensor& LabelGenerator::p(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ContractError("LabelGenerator: no parameter '" + name + "'");
}

std::vector<Tensor> LabelGenerator::parameter_tensors() const {
  std::vector<Tensor> out;
  for (const auto& [n, t] : params_) out.push_back(t);
  return out;
}

LabelGenerator::Inputs LabelGenerator::prepare(const GenerativeFeatures& f, const PromptTokens& prompt) const {
  require(static_cast<int>(f.feature_maps.size()) == blocks_ && f.width == width_ && f.grid == grid_,
          "LabelGenerator: features do not match the generator layout");
  NoGradGuard guard;
  const std::size_t cells = static_cast<std::size_t>(grid_ * grid_);
  Inputs in;
  const Tensor ones = Tensor::full({static_cast<std::size_t>(width_)}, 1.0);
  const Tensor zeros = Tensor::zeros({static_cast<std::size_t>(width_)});
  for (int b = 0; b < blocks_; ++b) {
    in.tokens.push_back(layer_norm(Tensor({cells, static_cast<std::size_t>(width_)}, f.feature_maps[b]), ones, zeros));
    const auto slots = f.slot_maps(b);  // kPromptLength × cells
    std::vector<double> a(cells * kAttnChannels, 0.0);
    for (std::size_t s = 0; s < kPromptLength; ++s) {
      int ch;
      const std::int64_t tok = prompt.ids[s];
      if (s == kStyleSlot) ch = 0;
      else if (s == kViewpointSlot) ch = 1;
      else if (tok == token::null) ch = 5;
      else ch = 2 + static_cast<int>(tok - token::class_base);
      for (std::size_t c = 0; c < cells; ++c) a[c * kAttnChannels + ch] += kPromptLength * slots[s * cells + c];
    }
    in.attn.push_back(Tensor({cells, static_cast<std::size_t>(kAttnChannels)}, std::move(a)));
  }
  return in;
}

Tensor LabelGenerator::cell_logits(const Inputs& in) const {
  std::vector<Tensor> parts;
  for (int b = 0; b < blocks_; ++b) {
    const std::string k = "proj." + std::to_string(b);
    parts.push_back(linear(in.tokens[b], p(k + ".w"), p(k + ".b")));
    parts.push_back(in.attn[b]);
  }
  const std::size_t cells = static_cast<std::size_t>(grid_ * grid_), hid = config_.hidden;
  Tensor h = gelu(linear(concat(parts, 1), p("fuse.l1.w"), p("fuse.l1.b")));
  Tensor nb = gather(h, neighbor_index_, {cells, 9 * hid});
  h = add(h, gelu(linear(nb, p("fuse.l2.w"), p("fuse.l2.b"))));
  return linear(h, p("head.w"), p("head.b"));
}

Tensor LabelGenerator::logits(const Inputs& in) const { return matmul(upsample_, cell_logits(in)); }

std::vector<std::uint8_t> LabelGenerator::predict(const GenerativeFeatures& f, const PromptTokens& prompt) const {
  NoGradGuard guard;
  const Tensor l = logits(prepare(f, prompt));
  std::vector<std::uint8_t> mask(kPixels);
  const auto d = l.data();
  for (int i = 0; i < kPixels; ++i) {
    const double* row = d.data() + static_cast<std::size_t>(i) * kNumClasses;
    mask[i] = static_cast<std::uint8_t>(std::max_element(row, row + kNumClasses) - row);
  }
  return mask;
}

void LabelGenerator::save(const std::filesystem::path& path) const {
  BinaryWriter w("CALORALG", 1);
  w.header()["layout"] = {{"blocks", blocks_}, {"width", width_}, {"grid", grid_}};
  w.header()["config"] = {{"proj_width", config_.proj_width}, {"hidden", config_.hidden},
                          {"iterations", config_.iterations}, {"batch", config_.batch},
                          {"lr", config_.lr},                 {"t_feat", config_.t_feat},
                          {"feature_draws", config_.feature_draws}, {"seed", config_.seed}};
  for (const auto& [n, t] : params_) w.add_array(n, t);
  w.write(path);
}

LabelGenerator LabelGenerator::load(const std::filesystem::path& path) {
  BinaryReader r(path, "CALORALG", 1);
  const json& h = r.header();
  LabelGenConfig c;
  const json& jc = h.at("config");
  c.proj_width = jc.at("proj_width");
  c.hidden = jc.at("hidden");
  c.iterations = jc.at("iterations");
  c.batch = jc.at("batch");
  c.lr = jc.at("lr");
  c.t_feat = jc.at("t_feat");
  c.feature_draws = jc.at("feature_draws");
  c.seed = jc.at("seed");
  LabelGenerator g(h.at("layout").at("blocks"), h.at("layout").at("width"), h.at("layout").at("grid"), c);
  for (auto& [n, t] : g.params_) {
    const Tensor src = r.array(n);
    if (src.shape() != t.shape()) throw DimensionError(path.string() + ": array '" + n + "' has the wrong shape");
    std::copy(src.data().begin(), src.data().end(), t.data_mut().begin());
  }
  return g;
}

LabelGenResult train_label_generator(const TinyDenoiser& model, const NoiseSchedule& sched,
                                     const std::vector<LabeledImage>& pairs, LabelGenerator& generator) {
  require(!pairs.empty(), "train_label_generator: empty dataset");
  const LabelGenConfig& cfg = generator.config();
  require(cfg.feature_draws >= 1 && cfg.batch >= 1, "train_label_generator: bad config");
  const std::uint64_t feat_root = derive_seed(cfg.seed, "labelgen-features");
  std::vector<LabelGenerator::Inputs> inputs;
  std::vector<const std::vector<std::uint8_t>*> targets;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PromptTokens prompt = prompt_of(pairs[i]);
    for (int d = 0; d < cfg.feature_draws; ++d) {
      const auto f = extract_features(model, sched, pairs[i].image, cfg.t_feat, prompt,
                                      derive_seed(derive_seed(feat_root, i), static_cast<std::uint64_t>(d)));
      inputs.push_back(generator.prepare(f, prompt));
      targets.push_back(&pairs[i].mask);
    }
  }
  Adam opt(generator.parameter_tensors(), {.lr = cfg.lr});
  Rng rng(derive_seed(cfg.seed, "labelgen-batches"));
  LabelGenResult result;
  std::vector<int> tgt;
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<Tensor> outs;
    tgt.clear();
    for (int b = 0; b < cfg.batch; ++b) {
      const std::size_t k = rng.below(inputs.size());
      outs.push_back(generator.logits(inputs[k]));
      tgt.insert(tgt.end(), targets[k]->begin(), targets[k]->end());
    }
    Tensor loss = cross_entropy(concat(outs, 0), tgt);
    if (!std::isfinite(loss.item()))
      throw NumericalError("train_label_generator: non-finite loss at iteration " + std::to_string(it));
    result.loss_curve.push_back(loss.item());
    backward(loss);
    opt.step();
  }
  return result;
}

std::vector<std::uint8_t> predict_label(const TinyDenoiser& model, const LabelGenerator& generator,
                                        const NoiseSchedule& sched, std::span<const double> image01, int t_feat,
                                        std::uint64_t eps_seed, const PromptTokens& prompt) {
  return generator.predict(extract_features(model, sched, image01, t_feat, prompt, eps_seed), prompt);
}

LabeledImage generate_pair(const TinyDenoiser& model, const LabelGenerator& generator, const NoiseSchedule& sched,
                           const PromptTokens& prompt, const SampleConfig& sample, std::uint64_t sample_seed) {
  LabeledImage pair;
  pair.image = sample_cfg(model, sched, prompt, sample, sample_seed);
  pair.mask = predict_label(model, generator, sched, pair.image, generator.config().t_feat,
                            derive_seed(sample_seed, "label-noise"), prompt);
  return pair;
}

}  // namespace calora
