#include <set>

#include "doctest.h"
#include "calora/binary.hpp"
#include "calora/error.hpp"
#include "calora/lora.hpp"
#include "calora/sensitivity.hpp"
#include "test_util.hpp"

using namespace calora;
using calora::testing::random_tensor;

namespace {

// Naive dense reference: y = x·(W + ΔW)ᵀ + b
std::vector<double> dense_forward(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& delta) {
  const std::size_t n = x.dim(0), din = w.dim(1), dout = w.dim(0);
  std::vector<double> y(n * dout, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < dout; ++o) {
      double s = b.numel() ? b.data()[o] : 0.0;
      for (std::size_t i = 0; i < din; ++i) s += x.data()[r * din + i] * (w.data()[o * din + i] + delta.data()[o * din + i]);
      y[r * dout + o] = s;
    }
  return y;
}

std::vector<double> naive_product(const Tensor& b, const Tensor& a, double alpha) {
  const std::size_t m = b.dim(0), r = b.dim(1), n = a.dim(1);
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < r; ++k) s += b.data()[i * r + k] * a.data()[k * n + j];
      out[i * n + j] = alpha * s;
    }
  return out;
}

void randomize(Tensor& t, Rng& rng) {
  for (double& v : t.data_mut()) v = rng.normal();
}

TrainingSet source_set(std::size_t n) { return training_set_of(sample_dataset(Style::clearday, Viewpoint::driving, n, 21)); }

DenoiserConfig small_config() {
  DenoiserConfig c;
  c.width = 16;
  c.heads = 4;
  c.ffn = 32;
  c.seed = 4;
  return c;
}

}  // namespace

TEST_CASE("unit ids") {
  const UnitId h{1, 1, 2, 3};
  CHECK(h.str() == "b1.cross.v.h3");
  CHECK(UnitId::parse("b1.cross.v.h3") == h);
  CHECK(UnitId::parse("b0.self.out") == UnitId{0, 0, 3, -1});
  CHECK(UnitId::parse("b1.cross") == UnitId{1, 1, -1, -1});
  CHECK(UnitId::parse("b0") == UnitId{0, -1, -1, -1});
  CHECK(h.granularity() == Granularity::head);
  CHECK_THROWS_AS(UnitId::parse("b0.sideways.q"), ContractError);
  CHECK(enumerate_units(2, 4, Granularity::head).size() == 64);
  CHECK(enumerate_units(2, 4, Granularity::projection).size() == 16);
  CHECK(enumerate_units(2, 4, Granularity::layer).size() == 4);
  CHECK(enumerate_units(2, 4, Granularity::block).size() == 2);
  const auto units = enumerate_units(2, 4, Granularity::head);
  CHECK(std::is_sorted(units.begin(), units.end()));
  for (const auto& u : units) CHECK(UnitId::parse(u.str()) == u);
}

TEST_CASE("heads per projection at every granularity") {
  SelectionMask m;
  m.selected = {UnitId{0, 1, 0, 2}, UnitId{0, 1, 0, 0}, UnitId{1, 0, -1, -1}};
  const auto hp = heads_per_projection(m, 2, 4);
  CHECK(hp.size() == 5);
  CHECK(hp.at(ProjectionId{0, AttentionKind::cross_attn, ProjectionKind::Q}) == std::vector<std::size_t>{0, 2});
  CHECK(hp.at(ProjectionId{1, AttentionKind::self_attn, ProjectionKind::OUT}) == std::vector<std::size_t>{0, 1, 2, 3});
  m.selected = {UnitId{2, -1, -1, -1}};
  CHECK_THROWS_AS(heads_per_projection(m, 2, 4), ContractError);
}

TEST_CASE("adapter construction") {
  Rng rng(1);
  const ProjectionShape shape{8, 8, 2, 4};
  const ProjectionId q{0, AttentionKind::self_attn, ProjectionKind::Q};
  const ProjectionId o{0, AttentionKind::self_attn, ProjectionKind::OUT};
  const auto a = make_adapter(q, shape, {1}, 2, 1.0, rng);
  CHECK(a.indices == std::vector<std::size_t>{4, 5, 6, 7});
  CHECK(a.A.shape() == Shape{2, 8});
  CHECK(a.B.shape() == Shape{4, 2});
  for (double v : a.B.data()) CHECK(v == 0.0);
  const auto b = make_adapter(o, shape, {0}, 2, 1.0, rng);
  CHECK(b.A.shape() == Shape{2, 4});
  CHECK(b.B.shape() == Shape{8, 2});
  CHECK(head_indices({2, 0}, 3) == std::vector<std::size_t>{0, 1, 2, 6, 7, 8});
  CHECK_THROWS_AS(make_adapter(q, shape, {1}, 5, 1.0, rng), ContractError);
  CHECK_THROWS_AS(make_adapter(q, shape, {2}, 1, 1.0, rng), ContractError);
  // A ~ N(0, 1/r) in standard deviation
  Rng big(2);
  const auto wide = make_adapter(q, ProjectionShape{64, 512, 8, 8}, {0, 1, 2, 3, 4, 5, 6, 7}, 4, 1.0, big);
  double ss = 0.0;
  for (double v : wide.A.data()) ss += v * v;
  CHECK(std::sqrt(ss / wide.A.numel()) == doctest::Approx(0.25).epsilon(0.03));
}

TEST_CASE("merge/forward equivalence over randomized projections") {
  Rng rng(3);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t heads = 1 + rng.below(4), dh = 1 + rng.below(4);
    const std::size_t width = heads * dh;
    const auto kind = static_cast<ProjectionKind>(rng.below(4));
    const ProjectionShape shape{width, width, heads, dh};
    std::vector<std::size_t> chosen;
    for (std::size_t h = 0; h < heads; ++h)
      if (rng.bernoulli(0.5)) chosen.push_back(h);
    if (chosen.empty()) chosen.push_back(rng.below(heads));
    const int rank = 1 + static_cast<int>(rng.below(chosen.size() * dh));
    auto a = make_adapter({0, AttentionKind::cross_attn, kind}, shape, chosen, rank, 0.5 + rng.uniform(), rng);
    randomize(a.B, rng);
    const Tensor w = random_tensor({width, width}, rng, false);
    const Tensor b = random_tensor({width}, rng, false);
    const Tensor x = random_tensor({3, width}, rng, false);
    const Tensor delta = merge_delta(a);
    const Tensor y = adapted_projection_forward(x, w, b, a);
    worst = std::max(worst, calora::testing::max_abs_diff(y.data(), dense_forward(x, w, b, delta)));
    // locality: ΔW support is confined to the selected heads
    const std::set<std::size_t> idx(a.indices.begin(), a.indices.end());
    for (std::size_t r = 0; r < width; ++r)
      for (std::size_t c = 0; c < width; ++c) {
        const bool inside = splits_rows(kind) ? idx.count(r) > 0 : idx.count(c) > 0;
        if (!inside) CHECK(delta.data()[r * width + c] == 0.0);
      }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("routing by construction") {
  Rng rng(4);
  const ProjectionShape shape{8, 8, 2, 4};
  auto a = make_adapter({0, AttentionKind::self_attn, ProjectionKind::K}, shape, {1}, 2, 1.0, rng);
  randomize(a.B, rng);
  const Tensor x = random_tensor({2, 8}, rng, false), w = random_tensor({8, 8}, rng, false);
  const Tensor base = linear(x, w), y = adapted_projection_forward(x, w, Tensor(), a);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(y.data()[r * 8 + c] == base.data()[r * 8 + c]);
  auto o = make_adapter({0, AttentionKind::self_attn, ProjectionKind::OUT}, shape, {0}, 2, 1.0, rng);
  randomize(o.B, rng);
  Tensor xz = random_tensor({2, 8}, rng, false);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) xz.data_mut()[r * 8 + c] = 0.0;
  const Tensor yz = adapted_projection_forward(xz, w, Tensor(), o), lz = linear(xz, w);
  CHECK(std::vector<double>(yz.data().begin(), yz.data().end()) == std::vector<double>(lz.data().begin(), lz.data().end()));
}

TEST_CASE("all heads selected reduces to plain LoRA") {
  Rng rng(5);
  for (ProjectionKind kind : {ProjectionKind::Q, ProjectionKind::V, ProjectionKind::OUT}) {
    const ProjectionShape shape{12, 12, 3, 4};
    auto a = make_adapter({1, AttentionKind::cross_attn, kind}, shape, {0, 1, 2}, 3, 2.0, rng);
    randomize(a.B, rng);
    const Tensor d = merge_delta(a);
    CHECK(calora::testing::max_abs_diff(d.data(), naive_product(a.B, a.A, 2.0)) < 1e-12);
  }
  auto z = make_adapter({0, AttentionKind::self_attn, ProjectionKind::Q}, {8, 8, 2, 4}, {0}, 2, 1.0, rng);
  const Tensor dz = merge_delta(z);
  for (double v : dz.data()) CHECK(v == 0.0);
}

TEST_CASE("zero-init transparency and empty mask") {
  TinyDenoiser base(small_config());
  Rng rng(6);
  Tensor x({2, static_cast<std::size_t>(kImageValues)}, rng.normal_vector(2 * kImageValues));
  const int t[2] = {3, 90};
  const PromptTokens p[2] = {prompt_of(Style::foggy, Viewpoint::driving, std::vector<ClassId>{}), null_prompt()};
  const Tensor ref = base.predict(x, t, p);
  SelectionMask m;
  m.selected = {UnitId{0, 1, 2, 1}, UnitId{1, 0, 3, 0}, UnitId{1, 1, 0, 3}};
  const AdaptedModel am = attach_adapters(base, m, 2, 1.0, 9);
  CHECK(am.lora->adapters().size() == 3);
  const Tensor y = am.model.predict(x, t, p);
  CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>(ref.data().begin(), ref.data().end()));
  const AdaptedModel empty = attach_adapters(base, SelectionMask{}, 2, 1.0, 9);
  CHECK(empty.lora->empty());
  const Tensor e = empty.model.predict(x, t, p);
  CHECK(std::vector<double>(e.data().begin(), e.data().end()) == std::vector<double>(ref.data().begin(), ref.data().end()));
}

TEST_CASE("fine-tuning trains adapters only") {
  TinyDenoiser base(small_config());
  const TrainingSet data = source_set(8);
  base.fit_prior(data.images);
  std::vector<std::vector<double>> snapshot;
  for (const auto& [n, t] : base.parameters()) snapshot.emplace_back(t.data().begin(), t.data().end());
  const AdaptedModel probe = attach_adapters(base, select_top_k(UnitScores{{UnitId{0, 1, 0, 0}, 1.0}}, Granularity::head, 1.0), 2, 1.0, 1);
  SelectionMask all;
  all.selected = enumerate_units(2, 4, Granularity::projection);
  AdaptedModel am = attach_adapters(base, all, 2, 1.0, 3);
  LoraConfig cfg;
  cfg.iterations = 80;
  cfg.batch = 8;
  cfg.lr = 5e-3;
  cfg.seed = 2;
  const auto r = finetune_lora(am, data, make_schedule(200), cfg);
  REQUIRE(r.loss_curve.size() == 80);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += r.loss_curve[i];
    tail += r.loss_curve[60 + i];
  }
  CHECK(tail < head);
  for (std::size_t i = 0; i < base.parameters().size(); ++i) {
    const auto& t = base.parameters()[i].second;
    CHECK(std::vector<double>(t.data().begin(), t.data().end()) == snapshot[i]);
  }
  bool moved = false;
  for (const auto& [id, a] : am.lora->adapters())
    for (double v : a.B.data()) moved |= v != 0.0;
  CHECK(moved);
  CHECK(probe.lora->adapters().size() == 1);
}

TEST_CASE("fine-tuning refuses an unfrozen base") {
  TinyDenoiser base(small_config());
  SelectionMask m;
  m.selected = {UnitId{0, 1, 2, 1}};
  AdaptedModel am = attach_adapters(base, m, 2, 1.0, 1);
  am.model.param("final.w").set_requires_grad(true);
  LoraConfig cfg;
  cfg.iterations = 2;
  CHECK_THROWS_AS(finetune_lora(am, source_set(2), make_schedule(200), cfg), ContractError);
}

TEST_CASE("adapter file round trip") {
  calora::testing::TempDir tmp("adapters");
  TinyDenoiser base(small_config());
  SelectionMask m;
  m.selected = {UnitId{0, 1, 2, 1}, UnitId{1, 0, 3, 0}, UnitId{1, 1, -1, -1}};
  AdaptedModel am = attach_adapters(base, m, 2, 1.5, 4);
  Rng rng(7);
  for (auto& [id, a] : am.lora->adapters()) randomize(a.B, rng);
  save_adapters(tmp.path() / "a.bin", *am.lora);
  const AdaptedModel back(base, load_adapters(tmp.path() / "a.bin"));
  REQUIRE(back.lora->adapters().size() == am.lora->adapters().size());
  for (const auto& [id, a] : am.lora->adapters()) {
    const auto& b = back.lora->adapters().at(id);
    CHECK(b.indices == a.indices);
    CHECK(b.alpha == a.alpha);
    CHECK(std::vector<double>(b.A.data().begin(), b.A.data().end()) == std::vector<double>(a.A.data().begin(), a.A.data().end()));
    CHECK(std::vector<double>(b.B.data().begin(), b.B.data().end()) == std::vector<double>(a.B.data().begin(), a.B.data().end()));
  }
  Tensor x({1, static_cast<std::size_t>(kImageValues)}, rng.normal_vector(kImageValues));
  const int t[1] = {50};
  const PromptTokens p[1] = {prompt_of(Style::night, Viewpoint::driving, std::vector<ClassId>{})};
  const Tensor y1 = am.model.predict(x, t, p), y2 = back.model.predict(x, t, p);
  CHECK(std::vector<double>(y1.data().begin(), y1.data().end()) == std::vector<double>(y2.data().begin(), y2.data().end()));
  CHECK_THROWS_AS(BinaryReader(tmp.path() / "a.bin", "CALORACK", 1), ContractError);
}
