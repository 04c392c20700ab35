#include "calora/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calora/error.hpp"

namespace calora {

double l2_distance(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "l2_distance: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

void check_set(const std::vector<std::vector<double>>& s, std::size_t dim, const char* name) {
  require(s.size() >= 2, std::string("mmd: set ") + name + " needs at least 2 samples");
  for (const auto& v : s) require(v.size() == dim, "mmd: samples differ in dimension");
}

}  // namespace

double median_pairwise_distance(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& y) {
  std::vector<const std::vector<double>*> pool;
  for (const auto& v : x) pool.push_back(&v);
  for (const auto& v : y) pool.push_back(&v);
  std::vector<double> d;
  for (std::size_t i = 0; i < pool.size(); ++i)
    for (std::size_t j = i + 1; j < pool.size(); ++j) d.push_back(std::sqrt(sq_dist(*pool[i], *pool[j])));
  require(!d.empty(), "median_pairwise_distance: fewer than two samples");
  return percentile(std::move(d), 50.0);
}

MmdResult mmd_alignment(const std::vector<std::vector<double>>& x_in, const std::vector<std::vector<double>>& y_in,
                        double bandwidth) {
  require(!x_in.empty() && !y_in.empty(), "mmd: empty set");
  const std::size_t dim = x_in.front().size();
  check_set(x_in, dim, "x");
  check_set(y_in, dim, "y");
  MmdResult r;
  r.m = x_in.size();
  r.n = y_in.size();
  r.bandwidth = bandwidth > 0.0 ? bandwidth : median_pairwise_distance(x_in, y_in);
  if (r.bandwidth <= 0.0) r.bandwidth = 1.0;  // every sample identical
  const double inv = 1.0 / (2.0 * r.bandwidth * r.bandwidth);
  auto k = [&](const std::vector<double>& a, const std::vector<double>& b) { return std::exp(-sq_dist(a, b) * inv); };

  if (r.m == r.n) {
    auto x = x_in, y = y_in;
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    double s = 0.0;
    for (std::size_t i = 0; i < r.m; ++i)
      for (std::size_t j = 0; j < r.m; ++j) {
        if (i == j) continue;
        s += (k(x[i], x[j]) + k(y[i], y[j])) - (k(x[i], y[j]) + k(x[j], y[i]));
      }
    r.raw = s / static_cast<double>(r.m * (r.m - 1));
  } else {
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < r.m; ++i)
      for (std::size_t j = 0; j < r.m; ++j)
        if (i != j) sxx += k(x_in[i], x_in[j]);
    for (std::size_t i = 0; i < r.n; ++i)
      for (std::size_t j = 0; j < r.n; ++j)
        if (i != j) syy += k(y_in[i], y_in[j]);
    for (const auto& a : x_in)
      for (const auto& b : y_in) sxy += k(a, b);
    const double px = sxx / static_cast<double>(r.m * (r.m - 1));
    const double py = syy / static_cast<double>(r.n * (r.n - 1));
    r.raw = (px + py) - 2.0 * sxy / static_cast<double>(r.m * r.n);
  }
  r.value = std::max(r.raw, 0.0);
  return r;
}

ClassIou class_iou(const std::vector<std::vector<std::uint8_t>>& pred,
                   const std::vector<std::vector<std::uint8_t>>& target) {
  require(pred.size() == target.size(), "class_iou: mask count mismatch");
  std::array<std::size_t, kNumClasses> inter{}, uni{};
  for (std::size_t m = 0; m < pred.size(); ++m) {
    require(pred[m].size() == target[m].size(), "class_iou: mask size mismatch");
    for (std::size_t i = 0; i < pred[m].size(); ++i) {
      const int p = pred[m][i], t = target[m][i];
      require(p < kNumClasses && t < kNumClasses, "class_iou: class id out of range");
      if (p == t) {
        ++inter[p];
        ++uni[p];
      } else {
        ++uni[p];
        ++uni[t];
      }
    }
  }
  ClassIou out;
  for (int c = 0; c < kNumClasses; ++c)
    if (uni[c] > 0) out[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
  return out;
}

ClassIou class_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target) {
  return class_iou(std::vector<std::vector<std::uint8_t>>{pred}, std::vector<std::vector<std::uint8_t>>{target});
}

double mean_iou(const ClassIou& iou) {
  double s = 0.0;
  int n = 0;
  for (const auto& v : iou)
    if (v) {
      s += *v;
      ++n;
    }
  return n ? s / n : 0.0;
}

double mean_iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target) {
  return mean_iou(class_iou(pred, target));
}

double mean_iou(const std::vector<std::vector<std::uint8_t>>& pred,
                const std::vector<std::vector<std::uint8_t>>& target) {
  return mean_iou(class_iou(pred, target));
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), "percentile: empty input");
  require(q >= 0.0 && q <= 100.0, "percentile: q must be in [0,100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

MemorizationResult memorization_distance(const std::vector<std::vector<double>>& gen,
                                         const std::vector<std::vector<double>>& train) {
  require(!gen.empty() && !train.empty(), "memorization_distance: empty set");
  MemorizationResult r;
  for (const auto& g : gen) {
    double best = INFINITY;
    for (const auto& t : train) best = std::min(best, sq_dist(g, t));
    r.distances.push_back(std::sqrt(best));
  }
  r.mean = std::accumulate(r.distances.begin(), r.distances.end(), 0.0) / static_cast<double>(r.distances.size());
  r.p5 = percentile(r.distances, 5.0);
  return r;
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return r;
}

}  // namespace calora
