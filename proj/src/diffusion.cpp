#include "calora/diffusion.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numbers>

#include "calora/error.hpp"
#include "calora/optim.hpp"
#include "calora/rng.hpp"

namespace calora {

double NoiseSchedule::ab(int t) const {
  if (t < 1 || t > T)
    throw ContractError("timestep " + std::to_string(t) + " outside [1," + std::to_string(T) + "]");
  return alpha_bar[t - 1];
}

NoiseSchedule make_schedule(int T) {
  require(T >= 2, "make_schedule: T must be at least 2");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    s.beta[i] = 1e-4 + (0.02 - 1e-4) * static_cast<double>(i) / (T - 1);
    prod *= 1.0 - s.beta[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

std::vector<double> add_noise(std::span<const double> x0, std::span<const double> eps, int t,
                              const NoiseSchedule& sched) {
  if (x0.size() != eps.size()) throw DimensionError("add_noise: x0 and eps sizes differ");
  const double ab = sched.ab(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

std::vector<double> to_model_space(std::span<const double> image01) {
  std::vector<double> out(image01.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * image01[i] - 1.0;
  return out;
}

std::vector<double> from_model_space(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(0.5 * (x[i] + 1.0), 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------

void DenoiserConfig::validate() const {
  require(width > 0 && heads > 0 && width % heads == 0, "denoiser: heads must divide width");
  require(blocks >= 1, "denoiser: need at least one block");
  require(ffn > 0, "denoiser: ffn width must be positive");
  require(patch > 0 && kImageSize % patch == 0, "denoiser: patch must divide the image size");
  require(T >= 2, "denoiser: T must be at least 2");
}

namespace {

std::vector<std::int64_t> patchify_index(int batch, int patch) {
  const int g = kImageSize / patch, pv = patch * patch * kChannels;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(batch) * g * g * pv);
  std::size_t o = 0;
  for (int b = 0; b < batch; ++b)
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        for (int dy = 0; dy < patch; ++dy)
          for (int dx = 0; dx < patch; ++dx)
            for (int ch = 0; ch < kChannels; ++ch)
              idx[o++] = static_cast<std::int64_t>(b) * kImageValues +
                         ((gy * patch + dy) * kImageSize + gx * patch + dx) * kChannels + ch;
  return idx;
}

std::vector<std::int64_t> unpatchify_index(int batch, int patch) {
  const auto fwd = patchify_index(batch, patch);
  std::vector<std::int64_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = static_cast<std::int64_t>(i);
  return inv;
}

const std::vector<std::int64_t>& cached_index(int batch, int patch, bool forward) {
  thread_local std::map<std::tuple<int, int, bool>, std::vector<std::int64_t>> cache;
  auto key = std::make_tuple(batch, patch, forward);
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, forward ? patchify_index(batch, patch) : unpatchify_index(batch, patch)).first;
  return it->second;
}

std::string block_prefix(int b) { return "blocks." + std::to_string(b) + "."; }

}  // namespace

Tensor timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  std::vector<double> out(t.size() * static_cast<std::size_t>(dim), 0.0);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      out[i * dim + j] = std::sin(t[i] * freq);
      out[i * dim + half + j] = std::cos(t[i] * freq);
    }
  return Tensor({t.size(), static_cast<std::size_t>(dim)}, std::move(out));
}

TinyDenoiser::TinyDenoiser(DenoiserConfig config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(config_.seed, "denoiser-init"));
  const std::size_t W = config_.width, F = config_.ffn, PV = config_.patch_values(),
                    N = config_.tokens();
  auto add = [&](const std::string& name, Shape shape, double sigma, double fill = 0.0) {
    const std::size_t n = numel_of(shape);
    std::vector<double> v = sigma > 0 ? rng.normal_vector(n, sigma) : std::vector<double>(n, fill);
    index_[name] = params_.size();
    params_.emplace_back(name, Tensor(std::move(shape), std::move(v), true));
  };
  auto lin = [&](const std::string& name, std::size_t out, std::size_t in, bool bias) {
    add(name + ".w", {out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
    if (bias) add(name + ".b", {out}, 0.0);
  };
  auto ln = [&](const std::string& name) {
    add(name + ".g", {W}, 0.0, 1.0);
    add(name + ".b", {W}, 0.0, 0.0);
  };
  lin("patch", W, PV, true);
  add("pos", {N, W}, 0.1);
  lin("temb.l1", W, W, true);
  lin("temb.l2", W, W, true);
  add("prompt.emb", {static_cast<std::size_t>(token::vocab_size), W}, 1.0);
  add("prompt.pos", {kPromptLength, W}, 0.1);
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = block_prefix(b);
    for (const char* attn : {"self", "cross"}) {
      ln(p + attn + ".ln");
      for (const char* proj : {"q", "k", "v"}) lin(p + attn + "." + proj, W, W, false);
      lin(p + attn + ".out", W, W, true);
    }
    ln(p + "ff.ln");
    lin(p + "ff.l1", F, W, true);
    lin(p + "ff.l2", W, F, true);
  }
  ln("final.ln");
  add("final.w", {PV, W}, 0.02);
  add("final.b", {PV}, 0.0);
  cross_mask_.resize(config_.blocks);

  auto buf = [&](const std::string& name, Shape shape, std::vector<double> v) {
    buffers_.emplace_back(name, Tensor(std::move(shape), std::move(v), false));
  };
  std::vector<double> eye(N * PV * PV, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t i = 0; i < PV; ++i) eye[(n * PV + i) * PV + i] = 1.0;
  buf("prior.mean", {N, PV}, std::vector<double>(N * PV, 0.0));
  buf("prior.basis", {N, PV, PV}, std::move(eye));
  buf("prior.eig", {N, PV}, std::vector<double>(N * PV, 1.0));
  alpha_bar_ = make_schedule(config_.T).alpha_bar;
}

Tensor& TinyDenoiser::buffer(const std::string& name) {
  for (auto& [n, t] : buffers_)
    if (n == name) return t;
  throw ContractError("denoiser has no buffer '" + name + "'");
}

void TinyDenoiser::fit_prior(const std::vector<std::vector<double>>& images01) {
  require(images01.size() >= 2, "fit_prior: need at least two images");
  const int PV = config_.patch_values(), N = config_.tokens();
  const auto idx = patchify_index(1, config_.patch);
  const double count = static_cast<double>(images01.size());
  auto mean = buffer("prior.mean").data_mut();
  auto basis = buffer("prior.basis").data_mut();
  auto eig = buffer("prior.eig").data_mut();
  for (int n = 0; n < N; ++n) {
    Eigen::MatrixXd P(images01.size(), PV);
    for (std::size_t r = 0; r < images01.size(); ++r) {
      require(images01[r].size() == static_cast<std::size_t>(kImageValues), "fit_prior: bad image size");
      for (int j = 0; j < PV; ++j) P(r, j) = 2.0 * images01[r][idx[n * PV + j]] - 1.0;
    }
    const Eigen::RowVectorXd mu = P.colwise().mean();
    const Eigen::MatrixXd D = P.rowwise() - mu;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(D.transpose() * D / count);
    for (int i = 0; i < PV; ++i) {
      mean[n * PV + i] = mu(i);
      eig[n * PV + i] = std::max(es.eigenvalues()(i), 0.0);
      for (int j = 0; j < PV; ++j) basis[(n * PV + i) * PV + j] = es.eigenvectors()(i, j);
    }
  }
}

// Linear-Gaussian ε estimate per patch position: sqrt(1-ᾱ)·Σ_t⁻¹·(x - sqrt(ᾱ)μ)
// with Σ_t = ᾱΣ₀ + (1-ᾱ)I, evaluated in Σ₀'s eigenbasis.
Tensor TinyDenoiser::prior_eps(const Tensor& patches, std::span<const int> t) const {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const int PV = config_.patch_values(), N = config_.tokens();
  const auto mean = buffers_[0].second.data();
  const auto basis = buffers_[1].second.data();
  const auto eig = buffers_[2].second.data();
  std::vector<double> out(patches.numel());
  Eigen::VectorXd d(PV), g(PV);
  for (std::size_t b = 0; b < t.size(); ++b) {
    require(t[b] >= 1 && t[b] <= config_.T, "denoiser: timestep outside [1,T]");
    const double ab = alpha_bar_[t[b] - 1], sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    for (int n = 0; n < N; ++n) {
      const Eigen::Map<const RowMat> V(basis.data() + static_cast<std::size_t>(n) * PV * PV, PV, PV);
      for (int i = 0; i < PV; ++i) g(i) = sb / (ab * eig[n * PV + i] + 1.0 - ab);
      const std::size_t row = (b * N + n) * PV;
      for (int i = 0; i < PV; ++i) d(i) = patches.data()[row + i] - sa * mean[n * PV + i];
      const Eigen::VectorXd e = V * (g.asDiagonal() * (V.transpose() * d));
      for (int i = 0; i < PV; ++i) out[row + i] = e(i);
    }
  }
  return Tensor(patches.shape(), std::move(out));
}

std::vector<Tensor> TinyDenoiser::parameter_tensors() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

Tensor& TinyDenoiser::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("denoiser has no parameter '" + name + "'");
  return params_[it->second].second;
}

const Tensor& TinyDenoiser::param(const std::string& name) const {
  return const_cast<TinyDenoiser*>(this)->param(name);
}

void TinyDenoiser::set_trainable(bool on) {
  for (auto& [name, t] : params_) t.set_requires_grad(on);
}

std::vector<ProjectionId> TinyDenoiser::projections() const {
  std::vector<ProjectionId> ids;
  for (int b = 0; b < config_.blocks; ++b)
    for (auto a : {AttentionKind::self_attn, AttentionKind::cross_attn})
      for (auto p : {ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V, ProjectionKind::OUT})
        ids.push_back({b, a, p});
  return ids;
}

std::string TinyDenoiser::projection_param(const ProjectionId& id) {
  return block_prefix(id.block) + attention_name(id.attention) + "." +
         projection_name(id.projection) + ".w";
}

Tensor& TinyDenoiser::projection_weight(const ProjectionId& id) {
  require(id.block >= 0 && id.block < config_.blocks, "projection block out of range");
  return param(projection_param(id));
}

const Tensor& TinyDenoiser::projection_weight(const ProjectionId& id) const {
  return const_cast<TinyDenoiser*>(this)->projection_weight(id);
}

ProjectionShape TinyDenoiser::projection_shape(const ProjectionId& id) const {
  const Tensor& w = projection_weight(id);
  return {w.dim(0), w.dim(1), static_cast<std::size_t>(config_.heads),
          static_cast<std::size_t>(config_.dim_head())};
}

void TinyDenoiser::set_cross_key_mask(int block, std::vector<std::uint8_t> mask) {
  require(block >= 0 && block < config_.blocks, "set_cross_key_mask: block out of range");
  require(mask.empty() || mask.size() == static_cast<std::size_t>(config_.heads) * kPromptLength,
          "set_cross_key_mask: mask must be heads x prompt length");
  cross_mask_[block] = std::move(mask);
}

void TinyDenoiser::set_head_gate(int block, AttentionKind kind, std::vector<double> gate) {
  require(block >= 0 && block < config_.blocks, "set_head_gate: block out of range");
  require(gate.empty() || gate.size() == static_cast<std::size_t>(config_.heads),
          "set_head_gate: one gate per head");
  const auto key = std::make_pair(block, static_cast<int>(kind));
  if (gate.empty()) head_gate_.erase(key);
  else head_gate_[key] = std::move(gate);
}

TinyDenoiser TinyDenoiser::clone() const {
  TinyDenoiser copy(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) copy.params_[i].second = params_[i].second.clone();
  for (std::size_t i = 0; i < buffers_.size(); ++i) copy.buffers_[i].second = buffers_[i].second.clone();
  return copy;
}

Tensor TinyDenoiser::project(const ProjectionId& id, const Tensor& x) const {
  const std::string base = block_prefix(id.block) + attention_name(id.attention) + "." +
                           projection_name(id.projection);
  Tensor y = id.projection == ProjectionKind::OUT
                 ? linear(x, param(base + ".w"), param(base + ".b"))
                 : linear(x, param(base + ".w"));
  return delta_ ? delta_->apply(id, x, y) : y;
}

DenoiserOutput TinyDenoiser::forward(const Tensor& x_t, std::span<const int> t,
                                     std::span<const PromptTokens> prompts, bool capture) const {
  if (x_t.rank() != 2 || x_t.dim(1) != static_cast<std::size_t>(kImageValues))
    throw DimensionError("denoiser: x_t must be batch x " + std::to_string(kImageValues) + ", got " +
                         to_string(x_t.shape()));
  const std::size_t B = x_t.dim(0);
  if (t.size() != B || prompts.size() != B)
    throw DimensionError("denoiser: batch of " + std::to_string(B) + " needs as many timesteps and prompts");
  const int Bi = static_cast<int>(B);
  const std::size_t W = config_.width, N = config_.tokens(), PV = config_.patch_values();

  std::vector<std::int64_t> ids;
  ids.reserve(B * kPromptLength);
  for (const auto& p : prompts) {
    p.validate();
    ids.insert(ids.end(), p.ids.begin(), p.ids.end());
  }

  Tensor patches = gather(x_t, cached_index(Bi, config_.patch, true), {B * N, PV});
  Tensor x = linear(patches, param("patch.w"), param("patch.b"));
  x = reshape(add(reshape(x, {B, N * W}), reshape(param("pos"), {N * W})), {B * N, W});
  Tensor te = timestep_embedding(t, config_.width);
  te = linear(gelu(linear(te, param("temb.l1.w"), param("temb.l1.b"))), param("temb.l2.w"),
              param("temb.l2.b"));
  x = add(x, repeat_rows(te, N));

  Tensor ctx = embed_lookup(param("prompt.emb"), ids);
  ctx = reshape(add(reshape(ctx, {B, kPromptLength * W}), reshape(param("prompt.pos"), {kPromptLength * W})),
                {B * kPromptLength, W});

  DenoiserOutput out;
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string p = block_prefix(b);
    for (auto kind : {AttentionKind::self_attn, AttentionKind::cross_attn}) {
      const std::string a = p + attention_name(kind);
      Tensor h = layer_norm(x, param(a + ".ln.g"), param(a + ".ln.b"));
      const Tensor& kv_in = kind == AttentionKind::self_attn ? h : ctx;
      Tensor q = project({b, kind, ProjectionKind::Q}, h);
      Tensor k = project({b, kind, ProjectionKind::K}, kv_in);
      Tensor v = project({b, kind, ProjectionKind::V}, kv_in);
      AttentionOptions opt;
      opt.batch = B;
      opt.heads = config_.heads;
      if (kind == AttentionKind::cross_attn) opt.key_mask = cross_mask_[b];
      if (auto g = head_gate_.find({b, static_cast<int>(kind)}); g != head_gate_.end())
        opt.head_gate = g->second;
      AttentionResult att = attention(q, k, v, opt);
      x = add(x, project({b, kind, ProjectionKind::OUT}, att.out));
      if (capture && kind == AttentionKind::cross_attn) {
        out.blocks.emplace_back();
        out.blocks.back().cross_probs = std::move(att.probs);
      }
    }
    Tensor h = layer_norm(x, param(p + "ff.ln.g"), param(p + "ff.ln.b"));
    h = linear(gelu(linear(h, param(p + "ff.l1.w"), param(p + "ff.l1.b"))), param(p + "ff.l2.w"),
               param(p + "ff.l2.b"));
    x = add(x, h);
    if (capture) out.blocks.back().tokens = x;
  }
  Tensor h = layer_norm(x, param("final.ln.g"), param("final.ln.b"));
  h = add(linear(h, param("final.w"), param("final.b")), prior_eps(patches, t));
  out.eps = gather(h, cached_index(Bi, config_.patch, false), {B, static_cast<std::size_t>(kImageValues)});
  return out;
}

Tensor TinyDenoiser::predict(const Tensor& x_t, std::span<const int> t,
                             std::span<const PromptTokens> prompts) const {
  return forward(x_t, t, prompts, false).eps;
}

// ---------------------------------------------------------------------------

TrainingSet training_set_of(const std::vector<LabeledImage>& pairs) {
  TrainingSet s;
  for (const auto& p : pairs) {
    s.images.push_back(p.image);
    s.prompts.push_back(prompt_of(p));
  }
  return s;
}

DiffusionBatch draw_batch(const TrainingSet& data, const NoiseSchedule& sched, int batch,
                          double null_dropout, Rng& rng) {
  require(data.size() > 0, "draw_batch: empty training set");
  require(batch >= 1, "draw_batch: batch must be positive");
  const std::size_t B = batch, V = kImageValues;
  std::vector<double> x0(B * V), eps(B * V), xt(B * V);
  DiffusionBatch out;
  for (std::size_t i = 0; i < B; ++i) {
    const std::size_t j = rng.below(data.size());
    const auto img = to_model_space(data.images[j]);
    const int t = 1 + static_cast<int>(rng.below(sched.T));
    auto e = rng.normal_vector(V);
    const auto noisy = add_noise(img, e, t, sched);
    std::copy(img.begin(), img.end(), x0.begin() + i * V);
    std::copy(e.begin(), e.end(), eps.begin() + i * V);
    std::copy(noisy.begin(), noisy.end(), xt.begin() + i * V);
    out.t.push_back(t);
    out.prompts.push_back(rng.bernoulli(null_dropout) ? null_prompt() : data.prompts[j]);
  }
  out.x0 = Tensor({B, V}, std::move(x0));
  out.eps = Tensor({B, V}, std::move(eps));
  out.x_t = Tensor({B, V}, std::move(xt));
  return out;
}

Tensor diffusion_loss(const EpsPredictor& model, const DiffusionBatch& batch) {
  require(!batch.t.empty(), "diffusion_loss: empty batch");
  return mse(model.predict(batch.x_t, batch.t, batch.prompts), batch.eps);
}

TrainResult train_diffusion(const EpsPredictor& model, std::vector<Tensor> params,
                            const TrainingSet& data, const NoiseSchedule& sched,
                            const TrainConfig& config, const std::function<void(int, double)>& on_step) {
  require(data.size() > 0, "train_diffusion: empty dataset");
  TrainResult result;
  if (config.iterations <= 0) return result;
  Adam opt(std::move(params), {config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng rng(derive_seed(config.seed, "diffusion-train"));
  for (int it = 0; it < config.iterations; ++it) {
    if (config.cosine_decay) {
      const double frac = static_cast<double>(it) / config.iterations;
      opt.set_lr(config.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac))));
    }
    DiffusionBatch batch = draw_batch(data, sched, config.batch, config.null_prompt_dropout, rng);
    for (const auto& p : batch.prompts) {
      ++result.prompts_seen;
      if (p.is_null()) ++result.prompts_nulled;
    }
    Tensor loss = diffusion_loss(model, batch);
    const double v = loss.item();
    if (!std::isfinite(v))
      throw NumericalError("diffusion training diverged at iteration " + std::to_string(it) +
                           " (loss " + std::to_string(v) + ")");
    backward(loss);
    opt.step();
    result.loss_curve.push_back(v);
    if (on_step) on_step(it, v);
  }
  return result;
}

TrainResult train_diffusion(TinyDenoiser& model, const TrainingSet& data, const NoiseSchedule& sched,
                            const TrainConfig& config) {
  model.set_trainable(true);
  return train_diffusion(model, model.parameter_tensors(), data, sched, config);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<int> ddim_timesteps(int T, int steps) {
  require(steps >= 1 && steps <= T, "sampler: steps must be in [1,T]");
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i)
    ts.push_back(static_cast<int>(std::lround(static_cast<double>(steps - i) * T / steps)));
  return ts;
}

std::vector<double> predict_one(const EpsPredictor& model, const std::vector<double>& x, int t,
                                const PromptTokens& prompt) {
  NoGradGuard guard;
  Tensor xt({1, static_cast<std::size_t>(kImageValues)}, x);
  const int ts[1] = {t};
  const PromptTokens ps[1] = {prompt};
  Tensor e = model.predict(xt, ts, ps);
  return {e.data().begin(), e.data().end()};
}

template <typename EpsFn>
std::vector<double> ddim_loop(const NoiseSchedule& sched, int steps,
                              std::uint64_t seed, EpsFn eps_fn) {
  Rng rng(derive_seed(seed, "sample-init"));
  const auto ts = ddim_timesteps(sched.T, steps);
  std::vector<double> x = rng.normal_vector(kImageValues);
  std::vector<double> x0(kImageValues);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double ab = sched.ab(t);
    const double ab_prev = i + 1 < ts.size() ? sched.ab(ts[i + 1]) : 1.0;
    const std::vector<double> eps = eps_fn(x, t);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    for (int j = 0; j < kImageValues; ++j) x0[j] = std::clamp((x[j] - sb * eps[j]) / sa, -1.0, 1.0);
    const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
    for (int j = 0; j < kImageValues; ++j) x[j] = pa * x0[j] + pb * eps[j];
  }
  return from_model_space(x0);
}

}  // namespace

std::vector<double> sample_cfg(const EpsPredictor& model, const NoiseSchedule& sched,
                               const PromptTokens& prompt, const SampleConfig& config,
                               std::uint64_t seed) {
  if (config.guidance < 0) throw ContractError("sample_cfg: guidance must be non-negative");
  prompt.validate();
  const PromptTokens null = null_prompt();
  return ddim_loop(sched, config.steps, seed, [&](const std::vector<double>& x, int t) {
    const auto eu = predict_one(model, x, t, null);
    const auto ec = predict_one(model, x, t, prompt);
    std::vector<double> e(eu.size());
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = eu[j] + config.guidance * (ec[j] - eu[j]);
    return e;
  });
}

std::vector<double> sample_unconditional(const EpsPredictor& model, const NoiseSchedule& sched,
                                         int steps, std::uint64_t seed) {
  const PromptTokens null = null_prompt();
  return ddim_loop(sched, steps, seed,
                   [&](const std::vector<double>& x, int t) { return predict_one(model, x, t, null); });
}

std::vector<double> GenerativeFeatures::slot_maps(int block) const {
  const auto& probs = cross_attn.at(block);
  const std::size_t N = static_cast<std::size_t>(grid) * grid;
  std::vector<double> out(kPromptLength * N, 0.0);
  for (int h = 0; h < heads; ++h)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t s = 0; s < kPromptLength; ++s)
        out[s * N + n] += probs[(h * N + n) * kPromptLength + s] / heads;
  return out;
}

GenerativeFeatures extract_features(const TinyDenoiser& model, const NoiseSchedule& sched,
                                    std::span<const double> image01, int t_feat,
                                    const PromptTokens& prompt, std::uint64_t eps_seed) {
  require(image01.size() == static_cast<std::size_t>(kImageValues), "extract_features: bad image size");
  sched.ab(t_feat);
  Rng rng(derive_seed(eps_seed, "feature-noise"));
  const auto eps = rng.normal_vector(kImageValues);
  const auto xt = add_noise(to_model_space(image01), eps, t_feat, sched);
  NoGradGuard guard;
  const int ts[1] = {t_feat};
  const PromptTokens ps[1] = {prompt};
  DenoiserOutput out = model.forward(Tensor({1, static_cast<std::size_t>(kImageValues)}, xt), ts, ps, true);
  GenerativeFeatures f;
  f.grid = model.config().grid();
  f.width = model.config().width;
  f.heads = model.config().heads;
  for (auto& b : out.blocks) {
    f.feature_maps.emplace_back(b.tokens.data().begin(), b.tokens.data().end());
    f.cross_attn.push_back(std::move(b.cross_probs));
  }
  return f;
}

}  // namespace calora
