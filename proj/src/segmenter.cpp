#include "calora/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "calora/binary.hpp"
#include "calora/error.hpp"
#include "calora/optim.hpp"
#include "calora/rng.hpp"

namespace calora {

namespace {

constexpr int kPatch = 4;
constexpr int kGrid = kImageSize / kPatch;
constexpr int kCells = kGrid * kGrid;
constexpr int kPatchValues = kPatch * kPatch * kChannels;

// Flat index into a stacked (B × kImageValues) batch: cell-major patch rows.
const std::vector<std::int64_t>& patch_index(std::size_t batch) {
  thread_local std::vector<std::vector<std::int64_t>> cache;
  if (cache.size() <= batch) cache.resize(batch + 1);
  auto& idx = cache[batch];
  if (!idx.empty()) return idx;
  for (std::size_t b = 0; b < batch; ++b)
    for (int gy = 0; gy < kGrid; ++gy)
      for (int gx = 0; gx < kGrid; ++gx)
        for (int py = 0; py < kPatch; ++py)
          for (int px = 0; px < kPatch; ++px)
            for (int c = 0; c < kChannels; ++c) {
              const int y = gy * kPatch + py, x = gx * kPatch + px;
              idx.push_back(static_cast<std::int64_t>(b * kImageValues + (y * kImageSize + x) * kChannels + c));
            }
  return idx;
}

// Per-image pixel order of the per-patch pixel logits (B·cells × 16·K) → (B·kPixels × K).
const std::vector<std::int64_t>& unpatch_index(std::size_t batch) {
  thread_local std::vector<std::vector<std::int64_t>> cache;
  if (cache.size() <= batch) cache.resize(batch + 1);
  auto& idx = cache[batch];
  if (!idx.empty()) return idx;
  const int per_cell = kPatch * kPatch * kNumClasses;
  for (std::size_t b = 0; b < batch; ++b)
    for (int y = 0; y < kImageSize; ++y)
      for (int x = 0; x < kImageSize; ++x)
        for (int k = 0; k < kNumClasses; ++k) {
          const int cell = (y / kPatch) * kGrid + x / kPatch, pix = (y % kPatch) * kPatch + x % kPatch;
          idx.push_back(static_cast<std::int64_t>((b * kCells + cell) * per_cell + pix * kNumClasses + k));
        }
  return idx;
}

std::vector<std::int64_t> neighbor_index(std::size_t batch, std::size_t width) {
  std::vector<std::int64_t> idx;
  for (std::size_t b = 0; b < batch; ++b)
    for (int y = 0; y < kGrid; ++y)
      for (int x = 0; x < kGrid; ++x)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            const bool inside = yy >= 0 && yy < kGrid && xx >= 0 && xx < kGrid;
            for (std::size_t c = 0; c < width; ++c)
              idx.push_back(inside ? static_cast<std::int64_t>((b * kCells + yy * kGrid + xx) * width + c) : -1);
          }
  return idx;
}

Tensor neighborhood(const Tensor& h, std::size_t batch) {
  const std::size_t width = h.dim(1);
  thread_local std::map<std::pair<std::size_t, std::size_t>, std::vector<std::int64_t>> cache;
  auto& idx = cache[{batch, width}];
  if (idx.empty()) idx = neighbor_index(batch, width);
  return gather(h, idx, {batch * kCells, 9 * width});
}

Tensor stack_images(const std::vector<const std::vector<double>*>& images) {
  std::vector<double> flat;
  flat.reserve(images.size() * kImageValues);
  for (const auto* im : images) {
    require(im->size() == static_cast<std::size_t>(kImageValues), "image has the wrong size");
    for (double v : *im) flat.push_back(2.0 * v - 1.0);
  }
  return Tensor({images.size(), static_cast<std::size_t>(kImageValues)}, std::move(flat));
}

Tensor patches_of(const std::vector<const std::vector<double>*>& images) {
  const std::size_t b = images.size();
  return gather(stack_images(images), patch_index(b), {b * kCells, static_cast<std::size_t>(kPatchValues)});
}

Tensor param(Rng& rng, Shape shape, double sigma) {
  const std::size_t n = numel_of(shape);
  return Tensor(shape, sigma > 0 ? rng.normal_vector(n, sigma) : std::vector<double>(n, 0.0), true);
}

}  // namespace

ToySegmenter::ToySegmenter(SegmenterConfig config) : config_(config) {
  require(config.width >= 1 && config.hidden >= 1, "ToySegmenter: bad widths");
  Rng rng(derive_seed(config.seed, "segmenter-init"));
  const std::size_t w = config.width, h = config.hidden, out = kPatch * kPatch * kNumClasses;
  params_ = {param(rng, {w, kPatchValues}, 1.0 / std::sqrt(kPatchValues)), param(rng, {w}, 0),
             param(rng, {h, 9 * w}, 1.0 / std::sqrt(9.0 * w)),             param(rng, {h}, 0),
             param(rng, {h, 9 * h}, 1.0 / std::sqrt(9.0 * h)),             param(rng, {h}, 0),
             param(rng, {out, w + h}, 1.0 / std::sqrt(static_cast<double>(w + h))), param(rng, {out}, 0)};
}

std::vector<Tensor> ToySegmenter::parameters() const { return params_; }

ToySegmenter ToySegmenter::clone() const {
  ToySegmenter c(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) c.params_[i] = params_[i].clone();
  return c;
}

namespace {

void save_params(const std::filesystem::path& path, const char* magic, const nlohmann::json& config,
                 const std::vector<Tensor>& params) {
  BinaryWriter w(magic, 1);
  w.header()["config"] = config;
  for (std::size_t i = 0; i < params.size(); ++i) w.add_array("p" + std::to_string(i), params[i]);
  w.write(path);
}

void load_params(const BinaryReader& r, const std::filesystem::path& path, std::vector<Tensor>& params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor src = r.array("p" + std::to_string(i));
    if (src.shape() != params[i].shape()) throw DimensionError(path.string() + ": parameter shape mismatch");
    std::copy(src.data().begin(), src.data().end(), params[i].data_mut().begin());
  }
}

}  // namespace

void ToySegmenter::save(const std::filesystem::path& path) const {
  save_params(path, "CALORASG",
              {{"width", config_.width}, {"hidden", config_.hidden}, {"iterations", config_.iterations},
               {"batch", config_.batch}, {"lr", config_.lr}, {"seed", config_.seed}},
              params_);
}

ToySegmenter ToySegmenter::load(const std::filesystem::path& path) {
  BinaryReader r(path, "CALORASG", 1);
  const auto& j = r.header().at("config");
  SegmenterConfig c;
  c.width = j.at("width");
  c.hidden = j.at("hidden");
  c.iterations = j.at("iterations");
  c.batch = j.at("batch");
  c.lr = j.at("lr");
  c.seed = j.at("seed");
  ToySegmenter seg(c);
  load_params(r, path, seg.params_);
  return seg;
}

Tensor ToySegmenter::logits(const std::vector<const std::vector<double>*>& images) const {
  const std::size_t b = images.size();
  const auto& p = params_;
  Tensor e = gelu(linear(patches_of(images), p[0], p[1]));
  Tensor h = gelu(linear(neighborhood(e, b), p[2], p[3]));
  h = add(h, gelu(linear(neighborhood(h, b), p[4], p[5])));
  Tensor cell = linear(concat({e, h}, 1), p[6], p[7]);
  return gather(cell, unpatch_index(b), {b * kPixels, static_cast<std::size_t>(kNumClasses)});
}

namespace {

std::vector<std::uint8_t> argmax_rows(std::span<const double> d, std::size_t rows, std::size_t offset) {
  std::vector<std::uint8_t> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = d.data() + (offset + i) * kNumClasses;
    out[i] = static_cast<std::uint8_t>(std::max_element(r, r + kNumClasses) - r);
  }
  return out;
}

}  // namespace

std::vector<std::uint8_t> ToySegmenter::predict(const std::vector<double>& image01) const {
  NoGradGuard guard;
  return argmax_rows(logits({&image01}).data(), kPixels, 0);
}

std::vector<std::vector<std::uint8_t>> ToySegmenter::predict(const std::vector<std::vector<double>>& images) const {
  NoGradGuard guard;
  std::vector<std::vector<std::uint8_t>> out;
  constexpr std::size_t chunk = 32;
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    std::vector<const std::vector<double>*> ptrs;
    for (std::size_t i = s; i < std::min(images.size(), s + chunk); ++i) ptrs.push_back(&images[i]);
    const Tensor l = logits(ptrs);
    for (std::size_t i = 0; i < ptrs.size(); ++i) out.push_back(argmax_rows(l.data(), kPixels, i * kPixels));
  }
  return out;
}

SegmenterTraining train_segmenter(ToySegmenter& seg, const std::vector<LabeledImage>& real,
                                  const std::vector<LabeledImage>* generated, int iterations,
                                  std::uint64_t seed, bool mix) {
  require(!real.empty(), "train_segmenter: empty real set");
  if (mix) {
    require(generated && !generated->empty(), "train_segmenter: mixing requested without generated data");
    require(seg.config().batch % 2 == 0, "train_segmenter: mixing needs an even batch");
  }
  Adam opt(seg.parameters(), {.lr = seg.config().lr});
  Rng rng(derive_seed(seed, "segmenter-batches"));
  SegmenterTraining log;
  const int batch = seg.config().batch;
  for (int it = 0; it < iterations; ++it) {
    std::vector<const std::vector<double>*> images;
    std::vector<int> targets;
    for (int b = 0; b < batch; ++b) {
      const bool from_gen = mix && b >= batch / 2;
      const auto& set = from_gen ? *generated : real;
      const auto& pair = set[rng.below(set.size())];
      images.push_back(&pair.image);
      targets.insert(targets.end(), pair.mask.begin(), pair.mask.end());
      ++(from_gen ? log.generated_samples : log.real_samples);
    }
    Tensor loss = cross_entropy(seg.logits(images), targets);
    if (!std::isfinite(loss.item())) throw NumericalError("train_segmenter: non-finite loss");
    log.loss_curve.push_back(loss.item());
    backward(loss);
    opt.step();
  }
  return log;
}

ToySegmenter train_toy_segmenter(const std::vector<LabeledImage>& real, const std::vector<LabeledImage>* generated,
                                 const SegmenterConfig& config, bool mix, SegmenterTraining* log) {
  ToySegmenter seg(config);
  auto l = train_segmenter(seg, real, generated, config.iterations, config.seed, mix);
  if (log) *log = std::move(l);
  return seg;
}

double evaluate_segmenter(const ToySegmenter& seg, const std::vector<LabeledImage>& pairs) {
  std::vector<std::vector<double>> images;
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& p : pairs) {
    images.push_back(p.image);
    masks.push_back(p.mask);
  }
  return mean_iou(seg.predict(images), masks);
}

double image_label_alignment(const std::vector<LabeledImage>& pairs, const ToySegmenter& oracle) {
  std::vector<std::vector<double>> images;
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& p : pairs) {
    images.push_back(p.image);
    masks.push_back(p.mask);
  }
  return mean_iou(masks, oracle.predict(images));
}

std::vector<DomainResult> dg_evaluation(const ToySegmenter& seg, const std::vector<DomainSet>& domains) {
  std::vector<DomainResult> out;
  for (const auto& d : domains) {
    std::vector<std::vector<double>> images;
    std::vector<std::vector<std::uint8_t>> masks;
    for (const auto& p : d.pairs) {
      images.push_back(p.image);
      masks.push_back(p.mask);
    }
    DomainResult r;
    r.name = d.name;
    r.iou = class_iou(seg.predict(images), masks);
    r.miou = mean_iou(r.iou);
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------

ToyStyleClassifier::ToyStyleClassifier(StyleClassifierConfig config) : config_(config) {
  Rng rng(derive_seed(config.seed, "style-classifier-init"));
  const std::size_t w = config.width;
  params_ = {param(rng, {w, kPatchValues}, 1.0 / std::sqrt(kPatchValues)), param(rng, {w}, 0),
             param(rng, {w, 9 * w}, 1.0 / std::sqrt(9.0 * w)),             param(rng, {w}, 0),
             param(rng, {kNumStyles, 2 * w}, 1.0 / std::sqrt(2.0 * w)),     param(rng, {kNumStyles}, 0)};
}

std::vector<Tensor> ToyStyleClassifier::parameters() const { return params_; }

void ToyStyleClassifier::save(const std::filesystem::path& path) const {
  save_params(path, "CALORASC",
              {{"width", config_.width}, {"iterations", config_.iterations}, {"batch", config_.batch},
               {"lr", config_.lr}, {"seed", config_.seed}, {"trained", trained_}},
              params_);
}

ToyStyleClassifier ToyStyleClassifier::load(const std::filesystem::path& path) {
  BinaryReader r(path, "CALORASC", 1);
  const auto& j = r.header().at("config");
  StyleClassifierConfig c;
  c.width = j.at("width");
  c.iterations = j.at("iterations");
  c.batch = j.at("batch");
  c.lr = j.at("lr");
  c.seed = j.at("seed");
  ToyStyleClassifier clf(c);
  load_params(r, path, clf.params_);
  clf.trained_ = j.at("trained");
  return clf;
}

Tensor ToyStyleClassifier::logits(const std::vector<const std::vector<double>*>& images) const {
  const std::size_t b = images.size();
  const auto& p = params_;
  Tensor e = gelu(linear(patches_of(images), p[0], p[1]));
  Tensor h = gelu(linear(neighborhood(e, b), p[2], p[3]));
  std::vector<double> pool(b * b * kCells, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (int c = 0; c < kCells; ++c) pool[i * b * kCells + i * kCells + c] = 1.0 / kCells;
  Tensor pooled = matmul(Tensor({b, b * kCells}, std::move(pool)), concat({e, h}, 1));
  return linear(pooled, p[4], p[5]);
}

std::vector<std::array<double, kNumStyles>> ToyStyleClassifier::log_probs(
    const std::vector<std::vector<double>>& images) const {
  NoGradGuard guard;
  std::vector<std::array<double, kNumStyles>> out;
  constexpr std::size_t chunk = 32;
  for (std::size_t s = 0; s < images.size(); s += chunk) {
    std::vector<const std::vector<double>*> ptrs;
    for (std::size_t i = s; i < std::min(images.size(), s + chunk); ++i) ptrs.push_back(&images[i]);
    const Tensor l = logits(ptrs);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      std::array<double, kNumStyles> row;
      double mx = -INFINITY;
      for (int k = 0; k < kNumStyles; ++k) mx = std::max(mx, row[k] = l.data()[i * kNumStyles + k]);
      double z = 0.0;
      for (double v : row) z += std::exp(v - mx);
      for (double& v : row) v = v - mx - std::log(z);
      out.push_back(row);
    }
  }
  return out;
}

std::vector<Style> ToyStyleClassifier::predict(const std::vector<std::vector<double>>& images) const {
  std::vector<Style> out;
  for (const auto& row : log_probs(images))
    out.push_back(static_cast<Style>(std::max_element(row.begin(), row.end()) - row.begin()));
  return out;
}

ToyStyleClassifier train_style_classifier(const std::vector<LabeledImage>& pairs, const StyleClassifierConfig& config) {
  require(!pairs.empty(), "train_style_classifier: empty dataset");
  for (const auto& p : pairs) require(p.spec.has_value(), "train_style_classifier: pairs need a scene spec");
  ToyStyleClassifier clf(config);
  Adam opt(clf.parameters(), {.lr = config.lr});
  Rng rng(derive_seed(config.seed, "style-classifier-batches"));
  for (int it = 0; it < config.iterations; ++it) {
    std::vector<const std::vector<double>*> images;
    std::vector<int> targets;
    for (int b = 0; b < config.batch; ++b) {
      const auto& p = pairs[rng.below(pairs.size())];
      images.push_back(&p.image);
      targets.push_back(static_cast<int>(p.spec->style));
    }
    Tensor loss = cross_entropy(clf.logits(images), targets);
    backward(loss);
    opt.step();
  }
  clf.mark_trained();
  return clf;
}

double style_accuracy(const ToyStyleClassifier& clf, const std::vector<LabeledImage>& pairs) {
  std::vector<std::vector<double>> images;
  for (const auto& p : pairs) images.push_back(p.image);
  const auto pred = clf.predict(images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) hit += pred[i] == pairs[i].spec.value().style;
  return static_cast<double>(hit) / static_cast<double>(pairs.size());
}

AdherenceResult prompt_adherence(const std::vector<std::vector<double>>& images, const std::vector<Style>& intended,
                                 const ToyStyleClassifier& clf) {
  require(clf.trained(), "prompt_adherence: classifier is untrained");
  require(images.size() == intended.size() && !images.empty(), "prompt_adherence: need one intended style per image");
  const auto lp = clf.log_probs(images);
  AdherenceResult r;
  r.n = images.size();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const int want = static_cast<int>(intended[i]);
    hit += std::max_element(lp[i].begin(), lp[i].end()) - lp[i].begin() == want;
    r.mean_log_prob += lp[i][want];
  }
  r.accuracy = static_cast<double>(hit) / static_cast<double>(r.n);
  r.mean_log_prob /= static_cast<double>(r.n);
  return r;
}

}  // namespace calora
