#include <cmath>

#include "doctest.h"
#include "calora/error.hpp"
#include "calora/metrics.hpp"
#include "calora/rng.hpp"

using namespace calora;

namespace {

std::vector<std::vector<double>> points(std::initializer_list<double> xs) {
  std::vector<std::vector<double>> out;
  for (double x : xs) out.push_back({x});
  return out;
}

}  // namespace

TEST_CASE("mmd closed forms") {
  const double k1 = std::exp(-0.5), k2 = std::exp(-2.0), k3 = std::exp(-4.5);
  const auto eq = mmd_alignment(points({0, 1}), points({2, 3}), 1.0);
  CHECK(eq.raw == doctest::Approx(k1 - k3).epsilon(1e-14));
  const auto neq = mmd_alignment(points({0, 1}), points({0, 1, 3}), 1.0);
  const double px = k1, py = (k1 + k3 + k2) / 3.0, pxy = (2.0 + 2.0 * k1 + k3 + k2) / 6.0;
  CHECK(neq.raw == doctest::Approx(px + py - 2.0 * pxy).epsilon(1e-14));
  CHECK(neq.m == 2);
  CHECK(neq.n == 3);
  // median heuristic over pooled distances {1,2,3,1,2,1}
  CHECK(mmd_alignment(points({0, 1}), points({2, 3})).bandwidth == doctest::Approx(1.5));
  CHECK_THROWS_AS(mmd_alignment(points({0}), points({1, 2})), ContractError);
  CHECK_THROWS_AS(mmd_alignment({{0.0, 1.0}, {1.0, 1.0}}, points({1, 2})), ContractError);
}

TEST_CASE("mmd properties") {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 3 + rng.below(6), d = 1 + rng.below(5);
    std::vector<std::vector<double>> x(n, std::vector<double>(d)), y(n, std::vector<double>(d));
    for (auto& v : x)
      for (double& e : v) e = rng.normal();
    for (auto& v : y)
      for (double& e : v) e = rng.normal();
    CHECK(mmd_alignment(x, x).raw == 0.0);
    auto xr = x;
    std::reverse(xr.begin(), xr.end());
    const double base = mmd_alignment(x, y, 1.0).raw;
    CHECK(mmd_alignment(xr, y, 1.0).raw == doctest::Approx(base).epsilon(1e-12));
    CHECK(mmd_alignment(y, x, 1.0).raw == doctest::Approx(base).epsilon(1e-12));
    const auto r = mmd_alignment(x, y);
    CHECK(r.value >= 0.0);
    CHECK(r.value == std::max(r.raw, 0.0));
  }
  // a shifted copy drifts further away as the shift grows
  std::vector<std::vector<double>> x(12, std::vector<double>(3));
  for (auto& v : x)
    for (double& e : v) e = rng.normal();
  double last = -1.0;
  for (double shift : {0.5, 1.0, 2.0, 4.0}) {
    auto y = x;
    for (auto& v : y) v[0] += shift;
    const double m = mmd_alignment(x, y, 1.0).raw;
    CHECK(m > last);
    last = m;
  }
}

TEST_CASE("class iou") {
  const std::vector<std::uint8_t> pred{0, 0, 1, 1}, target{0, 1, 1, 1};
  const ClassIou iou = class_iou(pred, target);
  CHECK(*iou[0] == doctest::Approx(0.5));
  CHECK(*iou[1] == doctest::Approx(2.0 / 3.0));
  for (int c = 2; c < kNumClasses; ++c) CHECK_FALSE(iou[c].has_value());
  CHECK(mean_iou(pred, target) == doctest::Approx(7.0 / 12.0));
  CHECK(mean_iou(target, target) == 1.0);
  CHECK(mean_iou(std::vector<std::uint8_t>{2, 2}, std::vector<std::uint8_t>{3, 3}) == 0.0);
  // pooled over masks, not averaged per mask
  const std::vector<std::vector<std::uint8_t>> ps{{0, 0}, {1, 1}}, ts{{0, 0}, {1, 0}};
  const ClassIou pooled = class_iou(ps, ts);
  CHECK(*pooled[0] == doctest::Approx(2.0 / 3.0));
  CHECK(*pooled[1] == doctest::Approx(1.0 / 2.0));
  CHECK_THROWS_AS(class_iou(std::vector<std::uint8_t>{9}, std::vector<std::uint8_t>{0}), ContractError);
  CHECK_THROWS_AS(class_iou(std::vector<std::uint8_t>{0, 1}, std::vector<std::uint8_t>{0}), ContractError);
}

TEST_CASE("memorization distance") {
  const std::vector<std::vector<double>> train{{0, 0, 0, 0}, {4, 4, 4, 4}};
  const auto r = memorization_distance({{0.5, 0.5, 0.5, 0.5}, {1, 1, 1, 1}, {4, 4, 4, 4}}, train);
  REQUIRE(r.distances.size() == 3);
  CHECK(r.distances[0] == doctest::Approx(1.0));
  CHECK(r.distances[1] == doctest::Approx(2.0));
  CHECK(r.distances[2] == 0.0);
  CHECK(r.mean == doctest::Approx(1.0));
  CHECK(r.p5 == doctest::Approx(0.1));
  CHECK_THROWS_AS(memorization_distance({}, train), ContractError);
}

TEST_CASE("percentile and summary statistics") {
  CHECK(percentile({4, 1, 3, 2}, 50) == doctest::Approx(2.5));
  CHECK(percentile({4, 1, 3, 2}, 5) == doctest::Approx(1.15));
  CHECK(percentile({7}, 90) == 7.0);
  CHECK(percentile({1, 2}, 0) == 1.0);
  CHECK(percentile({1, 2}, 100) == 2.0);
  CHECK_THROWS_AS(percentile({}, 5), ContractError);
  CHECK_THROWS_AS(percentile({1}, 101), ContractError);
  const MeanStd ms = mean_std({2, 4, 4, 4, 5, 5, 7, 9});
  CHECK(ms.mean == 5.0);
  CHECK(ms.std == doctest::Approx(std::sqrt(32.0 / 7.0)));
  CHECK(mean_std({3}).std == 0.0);
  CHECK(l2_distance(std::vector<double>{0, 3}, std::vector<double>{4, 0}) == 5.0);
}
