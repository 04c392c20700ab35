#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "calora/error.hpp"
#include "calora/sensitivity.hpp"
#include "test_util.hpp"

using namespace calora;

namespace {

// ε(x, c) = w · s(c) · x with a scalar weight and per-prompt scale.
class LinearPredictor : public EpsPredictor {
 public:
  LinearPredictor(double w, double a, double b, PromptTokens base)
      : w_(Shape{1}, std::vector<double>{w}, true), a_(a), b_(b), base_(base) {}
  Tensor predict(const Tensor& x, std::span<const int>, std::span<const PromptTokens> c) const override {
    const double s = c[0] == base_ ? a_ : b_;
    const Tensor wide = repeat_rows(reshape(w_, {1, 1}), x.numel());
    return mul(scale(reshape(wide, x.shape()), s), x);
  }
  Tensor& weight() { return w_; }

 private:
  Tensor w_;
  double a_, b_;
  PromptTokens base_;
};

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.width = 16;
  c.heads = 4;
  c.ffn = 32;
  c.seed = 8;
  return c;
}

SensitivityConfig quick_config() {
  SensitivityConfig c;
  c.n_images = 2;
  c.n_noise = 2;
  c.sample.steps = 4;
  c.seed = 5;
  return c;
}

// Brute-force top-k: every subset of size k whose minimum beats every
// outsider, with ties broken by canonical order.
std::vector<UnitId> enumerate_top(const UnitScores& s, std::size_t k) {
  std::vector<UnitId> units;
  for (const auto& [u, v] : s) units.push_back(u);
  const std::size_t n = units.size();
  std::vector<UnitId> best;
  for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
    if (static_cast<std::size_t>(__builtin_popcount(bits)) != k) continue;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i)
      for (std::size_t j = 0; j < n && ok; ++j) {
        const bool in_i = bits >> i & 1, in_j = bits >> j & 1;
        if (!in_i || in_j) continue;
        const double si = s.at(units[i]), sj = s.at(units[j]);
        if (si < sj || (si == sj && j < i)) ok = false;
      }
    if (!ok) continue;
    for (std::size_t i = 0; i < n; ++i)
      if (bits >> i & 1) best.push_back(units[i]);
    break;
  }
  return best;
}

}  // namespace

TEST_CASE("augmented prompts") {
  const PromptTokens base = prompt_of(Style::clearday, Viewpoint::driving, std::vector<ClassId>{ClassId::vehicle});
  const auto style = build_augmented_prompts(Concept::style, base);
  REQUIRE(style.size() == 3);
  CHECK(style[0].ids[0] == style_token(Style::sketch));
  CHECK(style[1].ids[0] == style_token(Style::foggy));
  CHECK(style[2].ids[0] == style_token(Style::night));
  for (const auto& p : style)
    for (std::size_t i = 1; i < kPromptLength; ++i) CHECK(p.ids[i] == base.ids[i]);
  const auto vp = build_augmented_prompts(Concept::viewpoint, base);
  REQUIRE(vp.size() == 3);
  for (const auto& p : vp) {
    CHECK(p.ids[0] == base.ids[0]);
    CHECK_FALSE(p == base);
  }
  CHECK(vp[2].ids[1] == token::null);
  CHECK_THROWS_AS(build_augmented_prompts(Concept::style, base, {style_token(Style::clearday)}), ContractError);
  CHECK_THROWS_AS(build_augmented_prompts(Concept::style, null_prompt()), ContractError);

  ConceptSpec bad{Concept::viewpoint, base, {style[0]}};
  CHECK_THROWS_AS(bad.validate(), ContractError);
  ConceptSpec degenerate{Concept::viewpoint, base, {base}};
  CHECK_NOTHROW(degenerate.validate());
}

TEST_CASE("concept loss of a linear denoiser") {
  const PromptTokens base = prompt_of(Style::clearday, Viewpoint::driving, std::vector<ClassId>{});
  const PromptTokens aug = build_augmented_prompts(Concept::style, base)[1];
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const double w = rng.normal(), a = rng.normal(), b = rng.normal();
    LinearPredictor m(w, a, b, base);
    const Tensor x({1, 12}, rng.normal_vector(12));
    double mx2 = 0.0;
    for (double v : x.data()) mx2 += v * v / 12.0;
    const int t[1] = {5};
    const PromptTokens c[1] = {base}, ca[1] = {aug};
    const Tensor loss = concept_loss(m, x, t, c, ca);
    CHECK(loss.item() == doctest::Approx(w * w * mx2 * (a - b) * (a - b)).epsilon(1e-12));
    backward(loss);
    CHECK(m.weight().grad()[0] == doctest::Approx(2 * w * mx2 * a * (a - b)).epsilon(1e-12));
  }
}

TEST_CASE("gradient RMS aggregation") {
  TinyDenoiser model(small_config());
  for (const ProjectionId& id : model.projections()) model.projection_weight(id).set_requires_grad(true);
  CHECK_THROWS_AS(grad_rms_per_unit(model, Granularity::head), ContractError);

  Rng rng(2);
  Tensor x({2, static_cast<std::size_t>(kImageValues)}, rng.normal_vector(2 * kImageValues));
  const int t[2] = {16, 40};
  const PromptTokens p[2] = {prompt_of(Style::night, Viewpoint::driving, std::vector<ClassId>{ClassId::pedestrian}),
                             prompt_of(Style::foggy, Viewpoint::topdown, std::vector<ClassId>{})};
  backward(mean(mul(model.predict(x, t, p), x)));
  const auto head = grad_rms_per_unit(model, Granularity::head);
  const auto proj = grad_rms_per_unit(model, Granularity::projection);
  const auto layer = grad_rms_per_unit(model, Granularity::layer);
  const auto block = grad_rms_per_unit(model, Granularity::block);
  CHECK(head.size() == 64);
  CHECK(proj.size() == 16);
  for (const auto& [u, r] : proj) {
    double s = 0.0;
    for (int h = 0; h < 4; ++h) s += std::pow(head.at(UnitId{u.block, u.attention, u.projection, h}), 2) / 4.0;
    CHECK(r * r == doctest::Approx(s).epsilon(1e-12));
  }
  for (const auto& [u, r] : block) {
    double ss = 0.0, n = 0.0;
    for (const ProjectionId& id : model.projections()) {
      if (static_cast<int>(id.block) != u.block) continue;
      const double numel = static_cast<double>(model.projection_weight(id).numel());
      ss += std::pow(proj.at(projection_unit(id)), 2) * numel;
      n += numel;
    }
    CHECK(r * r == doctest::Approx(ss / n).epsilon(1e-12));
  }
  CHECK(layer.size() == 4);

  for (const ProjectionId& id : model.projections()) {
    auto& g = model.projection_weight(id).node()->grad;
    g.assign(g.size(), 1.0);
  }
  for (const auto& [u, r] : grad_rms_per_unit(model, Granularity::head)) CHECK(r == 1.0);
  for (const ProjectionId& id : model.projections()) {
    auto& g = model.projection_weight(id).node()->grad;
    g.assign(g.size(), 0.0);
  }
  for (const auto& [u, r] : grad_rms_per_unit(model, Granularity::layer)) CHECK(r == 0.0);
}

TEST_CASE("sensitivity ratio rules") {
  const UnitId a{0, 0, 0, 0}, b{0, 0, 0, 1};
  const UnitScores r = sensitivity_ratio({{a, 2.0}, {b, 0.0}}, {{a, 4.0}, {b, 0.0}}, 1e-12);
  CHECK(r.at(a) == 0.5);
  CHECK(r.at(b) == 0.0);
  CHECK_THROWS_AS(sensitivity_ratio({{a, 1.0}}, {{a, 1e-13}}, 1e-12), NumericalError);
  CHECK_THROWS_AS(sensitivity_ratio({{a, 1.0}}, {{b, 1.0}}, 1e-12), ContractError);
  // scale covariance: common factors cancel
  Rng rng(3);
  UnitScores c, d;
  for (int h = 0; h < 4; ++h) {
    c[UnitId{1, 1, 2, h}] = rng.uniform() + 0.1;
    d[UnitId{1, 1, 2, h}] = rng.uniform() + 0.1;
  }
  UnitScores c7 = c, d7 = d;
  for (auto& [u, v] : c7) v *= 7.0;
  for (auto& [u, v] : d7) v *= 7.0;
  const auto r1 = sensitivity_ratio(c, d, 1e-12), r2 = sensitivity_ratio(c7, d7, 1e-12);
  for (const auto& [u, v] : r1) CHECK(r2.at(u) == doctest::Approx(v).epsilon(1e-14));
}

TEST_CASE("concept sensitivity maps") {
  TinyDenoiser model(small_config());
  const NoiseSchedule sched = make_schedule(200);
  const PromptTokens base = prompt_of(Style::clearday, Viewpoint::driving, std::vector<ClassId>{ClassId::vehicle});
  const SensitivityConfig cfg = quick_config();

  const ConceptSpec same{Concept::style, base, {base}};
  const SensitivityMap zero = concept_sensitivity(model, sched, same, cfg);
  CHECK(zero.scores.size() == 64);
  for (const auto& [u, s] : zero.scores) CHECK(s == 0.0);

  const ConceptSpec spec = make_concept_spec(Concept::style, base);
  const SensitivityMap m1 = concept_sensitivity(model, sched, spec, cfg);
  const SensitivityMap m2 = concept_sensitivity(model, sched, spec, cfg);
  CHECK(m1.scores == m2.scores);
  double total = 0.0;
  for (const auto& [u, s] : m1.scores) {
    CHECK(std::isfinite(s));
    CHECK(s >= 0.0);
    total += s;
  }
  CHECK(total > 0.0);
  // grad flags restored and no gradients left behind
  for (const ProjectionId& id : model.projections()) {
    CHECK(model.projection_weight(id).requires_grad());
    CHECK_FALSE(model.projection_weight(id).has_grad());
  }
  for (const ProjectionId& id : model.projections()) model.projection_weight(id).set_requires_grad(false);
  CHECK(concept_sensitivity(model, sched, spec, cfg).scores == m1.scores);
  for (const ProjectionId& id : model.projections()) CHECK_FALSE(model.projection_weight(id).requires_grad());

  const auto sweep = sweep_timesteps(model, sched, spec, {cfg.t, 60}, cfg);
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].scores == m1.scores);
  CHECK(sweep[1].t == 60);
  CHECK_THROWS_AS(sweep_timesteps(model, sched, spec, {0}, cfg), ContractError);

  const auto rob = augmentation_robustness(model, sched, spec, cfg, 0.1);
  REQUIRE(rob.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(rob[i][i] == 1.0);
    for (std::size_t j = 0; j < 3; ++j) CHECK(rob[i][j] == rob[j][i]);
  }
}

TEST_CASE("top-k selection") {
  const UnitId a{0, 0, 0, 0}, b{0, 0, 0, 1}, c{0, 0, 0, 2};
  const UnitScores s{{a, 3.0}, {b, 2.0}, {c, 1.0}};
  const auto m = select_top_k(s, Granularity::head, 0.34);
  CHECK(m.selected == std::vector<UnitId>{a, b});
  CHECK(m.total == 3);
  CHECK(select_top_k(s, Granularity::head, 1.0).selected == std::vector<UnitId>{a, b, c});
  CHECK(select_top_k(s, Granularity::head, 1.0 / 3.0).selected == std::vector<UnitId>{a});
  CHECK_THROWS_AS(select_top_k(s, Granularity::head, 0.0), ContractError);
  CHECK_THROWS_AS(select_top_k(s, Granularity::head, 1.5), ContractError);

  Rng rng(4);
  const auto units = enumerate_units(1, 4, Granularity::head);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + rng.below(10);
    UnitScores sc;
    for (std::size_t i = 0; i < n; ++i) sc[units[i]] = static_cast<double>(rng.below(4));  // many ties
    const double p = 0.05 + 0.95 * rng.uniform();
    const std::size_t k = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
    auto got = select_top_k(sc, Granularity::head, p).selected;
    CHECK(got.size() == k);
    auto want = enumerate_top(sc, k);
    std::sort(got.begin(), got.end());
    CHECK(got == want);
  }
}

TEST_CASE("overlap and rank statistics") {
  const UnitId a{0, 0, 0, 0}, b{0, 0, 0, 1}, c{0, 0, 0, 2}, d{0, 0, 0, 3};
  CHECK(jaccard({a, b}, {b, a}) == 1.0);
  CHECK(jaccard({a, b}, {c, d}) == 0.0);
  CHECK(jaccard({a, b, c}, {b, c, d}) == 0.5);
  CHECK(jaccard({}, {}) == 1.0);
  const UnitScores s1{{a, 1}, {b, 2}, {c, 3}, {d, 4}}, s2{{a, 10}, {b, 20}, {c, 30}, {d, 40}};
  const UnitScores s3{{a, 4}, {b, 3}, {c, 2}, {d, 1}};
  CHECK(rank_correlation(s1, s2) == doctest::Approx(1.0));
  CHECK(rank_correlation(s1, s3) == doctest::Approx(-1.0));
  // ties: ranks of {1,1,2,3} are {0.5,0.5,2,3}
  const UnitScores tied{{a, 1}, {b, 1}, {c, 2}, {d, 3}};
  const double mr = 1.5;
  const std::vector<double> r{0.5, 0.5, 2, 3}, q{0, 1, 2, 3};
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 4; ++i) {
    sab += (r[i] - mr) * (q[i] - mr);
    saa += (r[i] - mr) * (r[i] - mr);
    sbb += (q[i] - mr) * (q[i] - mr);
  }
  CHECK(rank_correlation(tied, s1) == doctest::Approx(sab / std::sqrt(saa * sbb)).epsilon(1e-14));

  Rng rng(5);
  std::vector<UnitScores> maps(4);
  for (auto& m : maps)
    for (const auto& u : enumerate_units(2, 4, Granularity::head)) m[u] = rng.uniform();
  const auto om = overlap_matrix(maps, Granularity::head, 0.1);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<UnitScores> permuted;
  for (std::size_t i : perm) permuted.push_back(maps[i]);
  const auto op = overlap_matrix(permuted, Granularity::head, 0.1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(op[i][j] == om[perm[i]][perm[j]]);
}

TEST_CASE("sensitivity and mask files") {
  calora::testing::TempDir tmp("sensitivity");
  SensitivityMap map;
  map.granularity = Granularity::head;
  map.t = 16;
  map.n_images = 3;
  map.n_noise = 2;
  map.kind = Concept::viewpoint;
  const PromptTokens base = prompt_of(Style::clearday, Viewpoint::driving, std::vector<ClassId>{});
  map.augmentations = build_augmented_prompts(Concept::viewpoint, base);
  Rng rng(6);
  for (const auto& u : enumerate_units(2, 4, Granularity::head)) map.scores[u] = rng.uniform() / 3.0;
  write_sensitivity(tmp.path() / "v.csv", map);
  const SensitivityMap back = read_sensitivity(tmp.path() / "v.csv");
  CHECK(back.scores == map.scores);
  CHECK(back.kind == Concept::viewpoint);
  CHECK(back.t == 16);
  CHECK(back.augmentations.size() == 3);
  CHECK(back.augmentations[2] == map.augmentations[2]);
  CHECK_THROWS_AS(read_sensitivity(tmp.path() / "missing.csv"), ContractError);

  const SelectionMask m = select_top_k(map, 0.1);
  CHECK(m.selected.size() == 7);
  const SelectionMask mb = mask_from_json(mask_to_json(m));
  CHECK(mb.selected == m.selected);
  CHECK(mb.total == 64);
  CHECK(mb.proportion == m.proportion);
}
