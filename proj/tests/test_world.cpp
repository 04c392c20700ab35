#include <set>

#include "doctest.h"
#include "calora/error.hpp"
#include "calora/image_io.hpp"
#include "calora/world.hpp"
#include "test_util.hpp"

using namespace calora;

namespace {

const Style kStyles[] = {Style::clearday, Style::foggy, Style::night, Style::snowy, Style::sketch};
const Viewpoint kViews[] = {Viewpoint::driving, Viewpoint::topdown, Viewpoint::closeup};

std::size_t count_class(const std::vector<std::uint8_t>& mask, ClassId c) {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), static_cast<std::uint8_t>(c)));
}

}  // namespace

TEST_CASE("render is deterministic and masks are valid") {
  for (Viewpoint v : kViews) {
    const SceneSpec spec = sample_scene(Style::night, v, 42);
    const LabeledImage a = render_scene(spec), b = render_scene(spec);
    CHECK(a.image == b.image);
    CHECK(a.mask == b.mask);
    REQUIRE(a.image.size() == static_cast<std::size_t>(kImageValues));
    REQUIRE(a.mask.size() == static_cast<std::size_t>(kPixels));
    for (std::uint8_t m : a.mask) CHECK(m < kNumClasses);
    for (double p : a.image) CHECK((p >= 0.0 && p <= 1.0));
  }
}

TEST_CASE("empty driving scene holds only sky and road") {
  SceneSpec spec;
  spec.viewpoint = Viewpoint::driving;
  spec.seed = 3;
  const auto pair = render_scene(spec);
  for (std::uint8_t m : pair.mask)
    CHECK((m == static_cast<std::uint8_t>(ClassId::sky) || m == static_cast<std::uint8_t>(ClassId::road)));
}

TEST_CASE("style changes pixels but never labels") {
  for (Viewpoint v : kViews)
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      SceneSpec spec = sample_scene(Style::clearday, v, seed);
      const LabeledImage base = render_scene(spec);
      for (Style s : kStyles) {
        spec.style = s;
        const LabeledImage r = render_scene(spec);
        CHECK(r.mask == base.mask);
        if (s != Style::clearday) CHECK(r.image != base.image);
      }
    }
}

TEST_CASE("viewpoint layout") {
  for (const auto& p : sample_dataset(Style::clearday, Viewpoint::driving, 20, 5))
    for (int y = 0; y < kImageSize / 2; ++y)
      for (int x = 0; x < kImageSize; ++x) CHECK(p.mask[y * kImageSize + x] != static_cast<std::uint8_t>(ClassId::road));
  for (const auto& p : sample_dataset(Style::snowy, Viewpoint::topdown, 20, 5))
    CHECK(count_class(p.mask, ClassId::sky) == 0);
}

TEST_CASE("sample_dataset: distinct, reproducible, fixed condition") {
  const auto a = sample_dataset(Style::foggy, Viewpoint::closeup, 10, 7);
  const auto b = sample_dataset(Style::foggy, Viewpoint::closeup, 10, 7);
  std::set<std::vector<std::uint8_t>> masks;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].mask == b[i].mask);
    REQUIRE(a[i].spec);
    CHECK(a[i].spec->style == Style::foggy);
    CHECK(a[i].spec->viewpoint == Viewpoint::closeup);
    masks.insert(a[i].mask);
  }
  CHECK(masks.size() == 10);
}

TEST_CASE("scene invariants are enforced") {
  SceneSpec spec;
  spec.objects.push_back({ClassId::vehicle, 10, 10, 3, 3, 0.5});
  CHECK_NOTHROW(spec.validate());
  spec.objects[0].x = kImageSize;
  CHECK_THROWS_AS(spec.validate(), ContractError);
  spec.objects[0].x = 10;
  spec.objects[0].depth = 1.5;
  CHECK_THROWS_AS(spec.validate(), ContractError);
  spec.objects[0].depth = 0.5;
  spec.objects[0].class_id = ClassId::road;
  CHECK_THROWS_AS(render_scene(spec), ContractError);
}

TEST_CASE("prompt encoding") {
  const PromptTokens p = prompt_of(Style::clearday, Viewpoint::driving, std::vector<std::string>{"vehicle"});
  CHECK(p.ids[0] == style_token(Style::clearday));
  CHECK(p.ids[1] == viewpoint_token(Viewpoint::driving));
  CHECK(p.ids[2] == class_token(ClassId::vehicle));
  for (std::size_t i = 3; i < kPromptLength; ++i) CHECK(p.ids[i] == token::null);
  // canonical order regardless of request order; repeats kept
  const auto q = prompt_of(Style::night, Viewpoint::topdown,
                           std::vector<std::string>{"pedestrian", "building", "pedestrian"});
  CHECK(q.ids[2] == class_token(ClassId::building));
  CHECK(q.ids[3] == class_token(ClassId::pedestrian));
  CHECK(q.ids[4] == class_token(ClassId::pedestrian));
  CHECK_THROWS_AS(prompt_of(Style::night, Viewpoint::topdown, std::vector<std::string>{"tree"}), ContractError);
  CHECK_THROWS_AS(prompt_of(Style::night, Viewpoint::topdown, std::vector<std::string>(7, "vehicle")), ContractError);
  PromptTokens bad = p;
  bad.ids[0] = viewpoint_token(Viewpoint::closeup);
  CHECK_THROWS_AS(bad.validate(), ContractError);
  CHECK(null_prompt().is_null());
  CHECK(vocabulary().size() == static_cast<std::size_t>(token::vocab_size));
}

TEST_CASE("prompt classes come from the label map") {
  std::vector<std::uint8_t> mask(kPixels, static_cast<std::uint8_t>(ClassId::road));
  mask[3] = static_cast<std::uint8_t>(ClassId::vehicle);
  mask[9] = static_cast<std::uint8_t>(ClassId::pedestrian);
  const auto p = prompt_of_mask(Style::foggy, Viewpoint::driving, mask);
  CHECK(p.ids[2] == class_token(ClassId::vehicle));
  CHECK(p.ids[3] == class_token(ClassId::pedestrian));
  CHECK(p.ids[4] == token::null);
  for (const auto& pair : sample_dataset(Style::clearday, Viewpoint::closeup, 10, 11)) {
    const auto q = prompt_of(pair);
    for (ClassId c : {ClassId::building, ClassId::vehicle, ClassId::pedestrian}) {
      const bool in_prompt = std::find(q.ids.begin(), q.ids.end(), class_token(c)) != q.ids.end();
      CHECK(in_prompt == (count_class(pair.mask, c) > 0));
    }
  }
}

TEST_CASE("class histogram") {
  const std::vector<std::uint8_t> sky(16, 0);
  CHECK(class_histogram(std::vector<std::vector<std::uint8_t>>{sky})[0] == 1.0);
  // 4x4 toy masks: 32 cells total
  std::vector<std::uint8_t> a(16, 1), b(16, 0);
  a[0] = 3;
  a[1] = 3;
  b[5] = 4;
  b[6] = 2;
  b[7] = 2;
  const auto h = class_histogram(std::vector<std::vector<std::uint8_t>>{a, b});
  CHECK(h[0] == 13.0 / 32.0);
  CHECK(h[1] == 14.0 / 32.0);
  CHECK(h[2] == 2.0 / 32.0);
  CHECK(h[3] == 2.0 / 32.0);
  CHECK(h[4] == 1.0 / 32.0);
  CHECK_THROWS_AS(class_histogram(std::vector<std::vector<std::uint8_t>>{}), ContractError);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto hs = class_histogram(sample_dataset(kStyles[seed], kViews[seed % 3], 4, seed));
    double total = 0.0;
    for (double v : hs) total += v;
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("dataset export round trip") {
  calora::testing::TempDir tmp("world-io");
  const auto pairs = sample_dataset(Style::sketch, Viewpoint::driving, 5, 9);
  export_dataset(tmp.path() / "ds", pairs, {});
  const auto back = load_dataset(tmp.path() / "ds");
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].mask == pairs[i].mask);
    REQUIRE(back[i].spec);
    CHECK(render_scene(*back[i].spec).mask == pairs[i].mask);
    CHECK(calora::testing::max_abs_diff(back[i].image, pairs[i].image) <= 0.5 / 255.0 + 1e-12);
  }
  std::vector<double> img(kImageValues);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i % 256) / 255.0;
  write_png_rgb(tmp.path() / "x.png", img);
  CHECK(read_png_rgb(tmp.path() / "x.png") == img);
}
