#include "calora/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calora/error.hpp"
#include "calora/rng.hpp"

namespace calora {

namespace {

constexpr const char* kStyleNames[] = {"clearday", "foggy", "night", "snowy", "sketch"};
constexpr const char* kViewNames[] = {"driving", "topdown", "closeup"};
constexpr const char* kClassNames[] = {"sky", "road", "building", "vehicle", "pedestrian"};

constexpr int kDrivingHorizon = 16;
constexpr int kCloseupHorizon = 12;

struct Rgb {
  double r, g, b;
};

Rgb lerp(Rgb a, Rgb b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

struct Canvas {
  std::vector<Rgb> color = std::vector<Rgb>(kPixels);
  std::vector<double> depth = std::vector<double>(kPixels, 1.0);
  std::vector<std::uint8_t> mask = std::vector<std::uint8_t>(kPixels, 0);

  void set(int r, int c, Rgb col, double d, ClassId cls) {
    const int i = r * kImageSize + c;
    color[i] = col;
    depth[i] = d;
    mask[i] = static_cast<std::uint8_t>(cls);
  }
};

void paint_background(Canvas& cv, Viewpoint view, Rng& rng) {
  const Rgb sky_top{0.30, 0.52, 0.90}, sky_low{0.70, 0.82, 0.97};
  const Rgb road{0.40, 0.40, 0.43};
  const int horizon = view == Viewpoint::driving   ? kDrivingHorizon
                      : view == Viewpoint::closeup ? kCloseupHorizon
                                                   : 0;
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c) {
      if (r < horizon) {
        cv.set(r, c, lerp(sky_top, sky_low, static_cast<double>(r) / horizon), 1.0, ClassId::sky);
        continue;
      }
      double d = 0.3;
      if (horizon > 0) d = 1.0 - (r - horizon + 0.5) / (kImageSize - horizon);
      const double grain = 0.03 * (rng.uniform() - 0.5);
      Rgb col{road.r + grain, road.g + grain, road.b + grain};
      // lane markings: pixel decoration only
      if (view == Viewpoint::driving && std::abs(c - 15.5) < 0.6 + 0.06 * (r - horizon) &&
          (r / 3) % 2 == 0)
        col = {0.85, 0.85, 0.80};
      if (view == Viewpoint::topdown && (c == 10 || c == 21) && (r / 2) % 2 == 0)
        col = {0.80, 0.80, 0.76};
      cv.set(r, c, col, d, ClassId::road);
    }
}

void paint_object(Canvas& cv, const SceneObject& o, Viewpoint view, Rng& rng) {
  const double x0 = o.x - o.w / 2, x1 = o.x + o.w / 2;
  const double y0 = o.y - o.h / 2, y1 = o.y + o.h / 2;
  Rgb base{};
  switch (o.class_id) {
    case ClassId::building:
      base = lerp({0.62, 0.46, 0.34}, {0.80, 0.74, 0.62}, rng.uniform());
      break;
    case ClassId::vehicle: {
      const Rgb palette[] = {{0.80, 0.12, 0.12}, {0.15, 0.25, 0.75}, {0.92, 0.85, 0.20},
                             {0.20, 0.60, 0.30}};
      base = palette[rng.below(4)];
      break;
    }
    case ClassId::pedestrian:
      base = lerp({0.10, 0.70, 0.25}, {0.85, 0.30, 0.65}, rng.uniform());
      break;
    default:
      throw InvariantError("paint_object: non-object class");
  }
  for (int r = 0; r < kImageSize; ++r) {
    const double py = r + 0.5;
    if (py < y0 || py > y1) continue;
    const double fy = (py - y0) / std::max(o.h, 1e-9);
    for (int c = 0; c < kImageSize; ++c) {
      const double px = c + 0.5;
      if (px < x0 || px > x1) continue;
      const double fx = (px - x0) / std::max(o.w, 1e-9);
      Rgb col = base;
      if (o.class_id == ClassId::building) {
        if (view != Viewpoint::topdown && (r % 3 == 1) && (c % 3 == 1) && fy > 0.12)
          col = {0.95, 0.90, 0.55};
        if (view == Viewpoint::topdown && (fx < 0.12 || fx > 0.88 || fy < 0.12 || fy > 0.88))
          col = lerp(base, {0.2, 0.2, 0.2}, 0.5);
      } else if (o.class_id == ClassId::vehicle) {
        if (view == Viewpoint::topdown) {
          if (fy > 0.25 && fy < 0.45) col = {0.15, 0.18, 0.25};
        } else {
          if (fy > 0.78) col = {0.06, 0.06, 0.06};
          else if (fy < 0.38 && fx > 0.2 && fx < 0.8) col = {0.55, 0.75, 0.90};
        }
      } else {
        const double head = view == Viewpoint::topdown ? 0.5 : 0.28;
        if (fy < head || (view == Viewpoint::topdown && fx > 0.3 && fx < 0.7 && fy < 0.7))
          col = {0.93, 0.76, 0.62};
      }
      const double grain = 0.04 * (rng.uniform() - 0.5);
      cv.set(r, c, {col.r + grain, col.g + grain, col.b + grain}, o.depth, o.class_id);
    }
  }
}

std::vector<double> to_values(const Canvas& cv) {
  std::vector<double> v(kImageValues);
  for (int i = 0; i < kPixels; ++i) {
    v[i * 3 + 0] = clamp01(cv.color[i].r);
    v[i * 3 + 1] = clamp01(cv.color[i].g);
    v[i * 3 + 2] = clamp01(cv.color[i].b);
  }
  return v;
}

void apply_style(std::vector<double>& img, const std::vector<double>& depth, Style style,
                 std::uint64_t seed) {
  switch (style) {
    case Style::clearday:
      return;
    case Style::foggy: {
      const double fog[3] = {0.78, 0.80, 0.83};
      for (int i = 0; i < kPixels; ++i) {
        const double f = 0.25 + 0.7 * (1.0 - std::exp(-2.5 * depth[i]));
        for (int ch = 0; ch < 3; ++ch) img[i * 3 + ch] = img[i * 3 + ch] * (1 - f) + fog[ch] * f;
      }
      return;
    }
    case Style::night: {
      const double tint[3] = {0.75, 0.85, 1.25};
      for (int i = 0; i < kPixels; ++i)
        for (int ch = 0; ch < 3; ++ch)
          img[i * 3 + ch] = clamp01(0.32 * std::pow(img[i * 3 + ch], 1.6) * tint[ch] + 0.02);
      return;
    }
    case Style::snowy: {
      Rng rng(derive_seed(seed, "snow"));
      for (int i = 0; i < kPixels; ++i) {
        const bool flake = rng.uniform() < 0.08;
        for (int ch = 0; ch < 3; ++ch) {
          double v = 0.55 * img[i * 3 + ch] + 0.42 + (ch == 2 ? 0.03 : 0.0);
          if (flake) v = 1.0;
          img[i * 3 + ch] = clamp01(v);
        }
      }
      return;
    }
    case Style::sketch: {
      std::vector<double> lum(kPixels);
      for (int i = 0; i < kPixels; ++i)
        lum[i] = 0.299 * img[i * 3] + 0.587 * img[i * 3 + 1] + 0.114 * img[i * 3 + 2];
      auto at = [&](int r, int c) {
        r = std::clamp(r, 0, kImageSize - 1);
        c = std::clamp(c, 0, kImageSize - 1);
        return lum[r * kImageSize + c];
      };
      for (int r = 0; r < kImageSize; ++r)
        for (int c = 0; c < kImageSize; ++c) {
          const double gx = at(r - 1, c + 1) + 2 * at(r, c + 1) + at(r + 1, c + 1) -
                            at(r - 1, c - 1) - 2 * at(r, c - 1) - at(r + 1, c - 1);
          const double gy = at(r + 1, c - 1) + 2 * at(r + 1, c) + at(r + 1, c + 1) -
                            at(r - 1, c - 1) - 2 * at(r - 1, c) - at(r - 1, c + 1);
          const double v = 1.0 - 0.9 * clamp01(2.2 * (std::sqrt(gx * gx + gy * gy) - 0.15));
          const int i = r * kImageSize + c;
          img[i * 3] = img[i * 3 + 1] = img[i * 3 + 2] = v;
        }
      return;
    }
  }
}

template <std::size_t N>
int find_name(const char* const (&names)[N], const std::string& name, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (name == names[i]) return static_cast<int>(i);
  throw ContractError(std::string("unknown ") + what + " '" + name + "'");
}

}  // namespace

const char* style_name(Style s) { return kStyleNames[static_cast<int>(s)]; }
const char* viewpoint_name(Viewpoint v) { return kViewNames[static_cast<int>(v)]; }
const char* class_name(ClassId c) { return kClassNames[static_cast<int>(c)]; }
Style parse_style(const std::string& n) { return static_cast<Style>(find_name(kStyleNames, n, "style")); }
Viewpoint parse_viewpoint(const std::string& n) {
  return static_cast<Viewpoint>(find_name(kViewNames, n, "viewpoint"));
}
ClassId parse_class(const std::string& n) { return static_cast<ClassId>(find_name(kClassNames, n, "class")); }

void SceneSpec::validate() const {
  for (const SceneObject& o : objects) {
    if (o.class_id != ClassId::building && o.class_id != ClassId::vehicle &&
        o.class_id != ClassId::pedestrian)
      throw ContractError("scene object class must be building, vehicle or pedestrian");
    if (!(o.x >= 0 && o.x < kImageSize && o.y >= 0 && o.y < kImageSize))
      throw ContractError("scene object position outside the image");
    if (!(o.depth >= 0 && o.depth <= 1)) throw ContractError("scene object depth outside [0,1]");
    if (!(o.w > 0 && o.h > 0)) throw ContractError("scene object size must be positive");
  }
}

LabeledImage render_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, "texture"));
  Canvas cv;
  paint_background(cv, spec.viewpoint, rng);
  std::vector<std::size_t> order(spec.objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return spec.objects[a].depth > spec.objects[b].depth;
  });
  for (std::size_t i : order) {
    Rng obj_rng(derive_seed(spec.seed, 1000 + i));
    paint_object(cv, spec.objects[i], spec.viewpoint, obj_rng);
  }
  LabeledImage out;
  out.image = to_values(cv);
  apply_style(out.image, cv.depth, spec.style, spec.seed);
  out.mask = cv.mask;
  out.spec = spec;
  return out;
}

SceneSpec sample_scene(Style style, Viewpoint viewpoint, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "content"));
  SceneSpec s;
  s.style = style;
  s.viewpoint = viewpoint;
  s.seed = seed;
  auto add = [&](ClassId cls, double x, double y, double w, double h, double depth) {
    s.objects.push_back({cls, std::clamp(x, 0.0, kImageSize - 1e-6),
                         std::clamp(y, 0.0, kImageSize - 1e-6), w, h, std::clamp(depth, 0.0, 1.0)});
  };
  switch (viewpoint) {
    case Viewpoint::driving: {
      const int buildings = static_cast<int>(rng.below(4));
      for (int i = 0; i < buildings; ++i) {
        const double h = rng.uniform(5, 13), w = rng.uniform(5, 11);
        const double bottom = kDrivingHorizon + rng.uniform(0, 3);
        add(ClassId::building, rng.uniform(2, 30), bottom - h / 2, w, h, rng.uniform(0.75, 0.95));
      }
      const int vehicles = static_cast<int>(rng.below(4));
      for (int i = 0; i < vehicles; ++i) {
        const double bottom = rng.uniform(19, 31.5);
        const double depth = std::clamp(1.0 - (bottom - kDrivingHorizon) / 16.0, 0.02, 0.98);
        const double w = 3 + 10 * (1 - depth), h = 0.55 * w + 1;
        add(ClassId::vehicle, rng.uniform(w / 2, kImageSize - w / 2), bottom - h / 2, w, h, depth);
      }
      const int peds = static_cast<int>(rng.below(3));
      for (int i = 0; i < peds; ++i) {
        const double bottom = rng.uniform(19, 31.5);
        const double depth = std::clamp(1.0 - (bottom - kDrivingHorizon) / 16.0, 0.02, 0.98);
        const double h = 3 + 8 * (1 - depth), w = std::max(1.6, 0.35 * h);
        add(ClassId::pedestrian, rng.uniform(2, 30), bottom - h / 2, w, h, depth);
      }
      break;
    }
    case Viewpoint::topdown: {
      const int buildings = 1 + static_cast<int>(rng.below(3));
      for (int i = 0; i < buildings; ++i)
        add(ClassId::building, rng.uniform(3, 29), rng.uniform(3, 29), rng.uniform(6, 12),
            rng.uniform(6, 12), 0.2);
      const int vehicles = static_cast<int>(rng.below(5));
      for (int i = 0; i < vehicles; ++i) {
        const bool vertical = rng.bernoulli(0.5);
        add(ClassId::vehicle, rng.uniform(2, 30), rng.uniform(2, 30), vertical ? 3.2 : 5.2,
            vertical ? 5.2 : 3.2, 0.15);
      }
      const int peds = static_cast<int>(rng.below(4));
      for (int i = 0; i < peds; ++i)
        add(ClassId::pedestrian, rng.uniform(1, 31), rng.uniform(1, 31), 2.2, 2.2, 0.1);
      break;
    }
    case Viewpoint::closeup: {
      if (rng.bernoulli(0.5)) {
        const double w = rng.uniform(6, 12), h = rng.uniform(6, 11);
        add(ClassId::building, rng.uniform(3, 29), kCloseupHorizon + 1 - h / 2, w, h, 0.9);
      }
      switch (rng.below(3)) {
        case 0: {
          const double w = rng.uniform(16, 26), h = rng.uniform(10, 16);
          add(ClassId::vehicle, rng.uniform(10, 22), rng.uniform(24, 31) - h / 2, w, h, 0.2);
          break;
        }
        case 1: {
          const double h = rng.uniform(16, 24), w = rng.uniform(6, 9);
          add(ClassId::pedestrian, rng.uniform(6, 26), rng.uniform(26, 31.5) - h / 2, w, h, 0.15);
          break;
        }
        default: {
          const double w = rng.uniform(14, 24), h = rng.uniform(14, 22);
          add(ClassId::building, rng.uniform(8, 24), kCloseupHorizon + rng.uniform(2, 6) - h / 2, w,
              h, 0.3);
        }
      }
      break;
    }
  }
  return s;
}

std::vector<LabeledImage> sample_dataset(Style style, Viewpoint viewpoint, std::size_t n,
                                         std::uint64_t seed) {
  require(n >= 1, "sample_dataset: n must be at least 1");
  std::vector<LabeledImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(render_scene(sample_scene(style, viewpoint, derive_seed(seed, i))));
  return out;
}

std::array<double, kNumClasses> class_histogram(const std::vector<std::vector<std::uint8_t>>& masks) {
  require(!masks.empty(), "class_histogram: empty mask list");
  std::array<std::size_t, kNumClasses> counts{};
  std::size_t total = 0;
  for (const auto& m : masks)
    for (std::uint8_t v : m) {
      require(v < kNumClasses, "class_histogram: invalid class id");
      ++counts[v];
      ++total;
    }
  require(total > 0, "class_histogram: masks contain no pixels");
  std::array<double, kNumClasses> p{};
  for (int k = 0; k < kNumClasses; ++k) p[k] = static_cast<double>(counts[k]) / total;
  return p;
}

std::array<double, kNumClasses> class_histogram(const std::vector<LabeledImage>& pairs) {
  std::vector<std::vector<std::uint8_t>> masks;
  masks.reserve(pairs.size());
  for (const auto& p : pairs) masks.push_back(p.mask);
  return class_histogram(masks);
}

// ---------------------------------------------------------------------------

std::int64_t style_token(Style s) { return token::style_base + static_cast<int>(s); }
std::int64_t viewpoint_token(Viewpoint v) { return token::viewpoint_base + static_cast<int>(v); }

std::int64_t class_token(ClassId c) {
  if (c == ClassId::sky || c == ClassId::road)
    throw ContractError(std::string("class '") + class_name(c) + "' has no prompt token");
  return token::class_base + (static_cast<int>(c) - static_cast<int>(ClassId::building));
}

std::optional<ClassId> class_of_token(std::int64_t tok) {
  if (tok < token::class_base || tok >= token::vocab_size) return std::nullopt;
  return static_cast<ClassId>(tok - token::class_base + static_cast<int>(ClassId::building));
}

std::string token_name(std::int64_t tok) {
  if (tok == token::null) return "NULL";
  if (tok >= token::style_base && tok < token::viewpoint_base)
    return std::string("STY_") + kStyleNames[tok - token::style_base];
  if (tok >= token::viewpoint_base && tok < token::class_base)
    return std::string("VIEW_") + kViewNames[tok - token::viewpoint_base];
  if (auto c = class_of_token(tok)) return std::string("CLS_") + class_name(*c);
  throw ContractError("token id " + std::to_string(tok) + " outside the vocabulary");
}

std::vector<std::string> vocabulary() {
  std::vector<std::string> v;
  for (std::int64_t t = 0; t < token::vocab_size; ++t) v.push_back(token_name(t));
  return v;
}

void PromptTokens::validate() const {
  const std::int64_t s = ids[kStyleSlot], v = ids[kViewpointSlot];
  if (s != token::null && !(s >= token::style_base && s < token::viewpoint_base))
    throw ContractError("prompt: style slot holds " + token_name(s));
  if (v != token::null && !(v >= token::viewpoint_base && v < token::class_base))
    throw ContractError("prompt: viewpoint slot holds " + token_name(v));
  for (std::size_t i = 2; i < kPromptLength; ++i)
    if (ids[i] != token::null && !class_of_token(ids[i]))
      throw ContractError("prompt: slot " + std::to_string(i) + " holds " + token_name(ids[i]));
}

bool PromptTokens::is_null() const {
  return std::all_of(ids.begin(), ids.end(), [](std::int64_t t) { return t == token::null; });
}

std::string PromptTokens::str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < kPromptLength; ++i) s += (i ? "," : "") + token_name(ids[i]);
  return s + "]";
}

PromptTokens null_prompt() { return PromptTokens{}; }

PromptTokens prompt_of(Style style, Viewpoint viewpoint, const std::vector<ClassId>& classes) {
  if (classes.size() > kPromptLength - 2)
    throw ContractError("prompt_of: at most " + std::to_string(kPromptLength - 2) + " class tokens");
  std::vector<std::int64_t> toks;
  for (ClassId c : classes) toks.push_back(class_token(c));
  std::sort(toks.begin(), toks.end());
  PromptTokens p;
  p.ids[kStyleSlot] = style_token(style);
  p.ids[kViewpointSlot] = viewpoint_token(viewpoint);
  std::copy(toks.begin(), toks.end(), p.ids.begin() + 2);
  return p;
}

PromptTokens prompt_of(Style style, Viewpoint viewpoint, const std::vector<std::string>& classes) {
  std::vector<ClassId> ids;
  for (const auto& n : classes) ids.push_back(parse_class(n));
  return prompt_of(style, viewpoint, ids);
}

PromptTokens prompt_of_mask(Style style, Viewpoint viewpoint, const std::vector<std::uint8_t>& mask) {
  bool present[kNumClasses] = {};
  for (std::uint8_t v : mask) {
    require(v < kNumClasses, "prompt_of: invalid class id in mask");
    present[v] = true;
  }
  std::vector<ClassId> classes;
  for (ClassId c : {ClassId::building, ClassId::vehicle, ClassId::pedestrian})
    if (present[static_cast<int>(c)]) classes.push_back(c);
  return prompt_of(style, viewpoint, classes);
}

PromptTokens prompt_of(const LabeledImage& pair) {
  require(pair.spec.has_value(), "prompt_of: pair has no scene spec; pass style and viewpoint");
  return prompt_of_mask(pair.spec->style, pair.spec->viewpoint, pair.mask);
}

}  // namespace calora
