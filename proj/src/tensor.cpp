#include "calora/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "calora/error.hpp"

namespace calora {

using detail::Buffer;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;
using StrideMapC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using StrideMapM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

thread_local bool g_grad_enabled = true;

[[noreturn]] void dim_error(const std::string& op, const std::vector<const Tensor*>& ins,
                            const std::string& detail = {}) {
  std::ostringstream os;
  os << op << ": shape mismatch";
  for (const Tensor* t : ins) os << ' ' << to_string(t->shape());
  if (!detail.empty()) os << " (" << detail << ')';
  throw DimensionError(os.str());
}

bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

bool any_requires_grad(const std::vector<Tensor>& ins) {
  if (!g_grad_enabled) return false;
  for (const Tensor& t : ins)
    if (t.requires_grad()) return true;
  return false;
}

// Builds the output node; attaches parents + backward only when recording.
Tensor make_result(Shape shape, Buffer value, bool record,
                   std::vector<std::shared_ptr<detail::Node>> parents,
                   std::function<void(detail::Node&)> fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (record) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return Tensor::from_node(std::move(node));
}

void accumulate(detail::Node& parent, std::span<const double> delta) {
  if (!parent.requires_grad) return;
  auto& g = parent.grad_buffer();
  for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
}

struct AxisSplit {
  std::size_t outer = 1, axis = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.axis = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

double gelu_value(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_deriv(double x) {
  constexpr double c = 0.7978845608028654;
  const double u = c * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

detail::Buffer& detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {
  node_->shape = {};
  node_->value = {0.0};
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : Tensor(from_buffer(std::move(shape), Buffer(data.begin(), data.end()), requires_grad)) {}

Tensor Tensor::from_buffer(Shape shape, Buffer data, bool requires_grad) {
  if (numel_of(shape) != data.size())
    throw DimensionError("tensor: shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return from_node(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from_buffer(std::move(shape), Buffer(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  return from_buffer(std::move(shape), Buffer(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("dim: axis out of range for " + to_string(shape()));
  return node_->shape[axis];
}

std::span<double> Tensor::data_mut() {
  if (!node_->is_leaf()) throw ContractError("data_mut: tensor is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor " + to_string(shape()) + " is not a scalar");
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw ContractError("set_requires_grad: tensor is not a leaf");
  node_->requires_grad = on;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::clone() const {
  return from_buffer(node_->shape, node_->value, node_->requires_grad);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got " + to_string(loss.shape()));
  detail::Node* root = loss.node();
  if (!root->requires_grad) throw ContractError("backward: loss is not on a recorded tape");

  // Iterative post-order DFS → topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
}

Tensor stop_gradient(const Tensor& x) {
  return Tensor::from_buffer(x.shape(), Buffer(x.data().begin(), x.data().end()), false);
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) dim_error("matmul", {&a, &b});
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  MapM(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  const bool rec = any_requires_grad({&a, &b});
  return make_result({m, n}, std::move(out), rec, {a.node_ptr(), b.node_ptr()},
                     [m, k, n](detail::Node& self) {
                       auto& A = *self.parents[0];
                       auto& B = *self.parents[1];
                       MapC G(self.grad.data(), m, n);
                       if (A.requires_grad)
                         MapM(A.grad_buffer().data(), m, k).noalias() +=
                             G * MapC(B.value.data(), k, n).transpose();
                       if (B.requires_grad)
                         MapM(B.grad_buffer().data(), k, n).noalias() +=
                             MapC(A.value.data(), m, k).transpose() * G;
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) dim_error("matmul_nt", {&a, &b});
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Buffer out(m * n);
  MapM(out.data(), m, n).noalias() =
      MapC(a.data().data(), m, k) * MapC(b.data().data(), n, k).transpose();
  const bool rec = any_requires_grad({&a, &b});
  return make_result({m, n}, std::move(out), rec, {a.node_ptr(), b.node_ptr()},
                     [m, k, n](detail::Node& self) {
                       auto& A = *self.parents[0];
                       auto& B = *self.parents[1];
                       MapC G(self.grad.data(), m, n);
                       if (A.requires_grad)
                         MapM(A.grad_buffer().data(), m, k).noalias() +=
                             G * MapC(B.value.data(), n, k);
                       if (B.requires_grad)
                         MapM(B.grad_buffer().data(), n, k).noalias() +=
                             G.transpose() * MapC(A.value.data(), m, k);
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const bool has_bias = bias.rank() > 0;
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1) ||
      (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))))
    dim_error("linear", {&x, &weight, &bias});
  const auto n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  Buffer out(n * dout);
  MapM Y(out.data(), n, dout);
  Y.noalias() = MapC(x.data().data(), n, din) * MapC(weight.data().data(), dout, din).transpose();
  if (has_bias) Y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), dout);
  const bool rec = has_bias ? any_requires_grad({&x, &weight, &bias})
                            : any_requires_grad({&x, &weight});
  std::vector<std::shared_ptr<detail::Node>> parents{x.node_ptr(), weight.node_ptr()};
  if (has_bias) parents.push_back(bias.node_ptr());
  return make_result({n, dout}, std::move(out), rec, std::move(parents),
                     [n, din, dout, has_bias](detail::Node& self) {
                       auto& X = *self.parents[0];
                       auto& W = *self.parents[1];
                       MapC G(self.grad.data(), n, dout);
                       if (X.requires_grad)
                         MapM(X.grad_buffer().data(), n, din).noalias() +=
                             G * MapC(W.value.data(), dout, din);
                       if (W.requires_grad)
                         MapM(W.grad_buffer().data(), dout, din).noalias() +=
                             G.transpose() * MapC(X.value.data(), n, din);
                       if (has_bias && self.parents[2]->requires_grad) {
                         auto& gb = self.parents[2]->grad_buffer();
                         Eigen::Map<Eigen::RowVectorXd>(gb.data(), dout) += G.colwise().sum();
                       }
                     });
}

namespace {

// Broadcast kind: 0 = same shape, 1 = b is a row vector over a's last dim.
int broadcast_kind(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return 0;
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return 1;
  dim_error(op, {&a, &b});
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const int kind = broadcast_kind("add", a, b);
  const auto av = a.data(), bv = b.data();
  Buffer out(av.size());
  const std::size_t w = bv.size();
  if (kind == 0)
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  else
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % w];
  const bool rec = any_requires_grad({&a, &b});
  return make_result(a.shape(), std::move(out), rec, {a.node_ptr(), b.node_ptr()},
                     [kind, w](detail::Node& self) {
                       accumulate(*self.parents[0], self.grad);
                       auto& B = *self.parents[1];
                       if (!B.requires_grad) return;
                       auto& g = B.grad_buffer();
                       if (kind == 0)
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                       else
                         for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % w] += self.grad[i];
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) dim_error("sub", {&a, &b});
  const auto av = a.data(), bv = b.data();
  Buffer out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  const bool rec = any_requires_grad({&a, &b});
  return make_result(a.shape(), std::move(out), rec, {a.node_ptr(), b.node_ptr()},
                     [](detail::Node& self) {
                       accumulate(*self.parents[0], self.grad);
                       auto& B = *self.parents[1];
                       if (!B.requires_grad) return;
                       auto& g = B.grad_buffer();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const int kind = broadcast_kind("mul", a, b);
  const auto av = a.data(), bv = b.data();
  const std::size_t w = bv.size();
  Buffer out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[kind == 0 ? i : i % w];
  const bool rec = any_requires_grad({&a, &b});
  return make_result(a.shape(), std::move(out), rec, {a.node_ptr(), b.node_ptr()},
                     [kind, w](detail::Node& self) {
                       auto& A = *self.parents[0];
                       auto& B = *self.parents[1];
                       const auto& G = self.grad;
                       if (A.requires_grad) {
                         auto& g = A.grad_buffer();
                         for (std::size_t i = 0; i < G.size(); ++i)
                           g[i] += G[i] * B.value[kind == 0 ? i : i % w];
                       }
                       if (B.requires_grad) {
                         auto& g = B.grad_buffer();
                         for (std::size_t i = 0; i < G.size(); ++i)
                           g[kind == 0 ? i : i % w] += G[i] * A.value[i];
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  const bool rec = any_requires_grad({&x});
  return make_result(x.shape(), std::move(out), rec, {x.node_ptr()},
                     [factor](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
                     });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) dim_error("softmax_lastdim", {&x});
  const std::size_t w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * w;
    double* o = out.data() + r * w;
    const double mx = *std::max_element(in, in + w);
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < w; ++j) o[j] /= s;
  }
  const bool rec = any_requires_grad({&x});
  return make_result(x.shape(), std::move(out), rec, {x.node_ptr()},
                     [rows, w](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * w;
                         const double* gy = self.grad.data() + r * w;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < w; ++j) dot += y[j] * gy[j];
                         for (std::size_t j = 0; j < w; ++j) g[r * w + j] += y[j] * (gy[j] - dot);
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.shape().back() || beta.dim(0) != x.shape().back())
    dim_error("layer_norm", {&x, &gamma, &beta});
  const std::size_t w = x.shape().back();
  const std::size_t rows = x.numel() / w;
  const auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  Buffer out(xv.size());
  Buffer xhat(xv.size());
  Buffer rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * w;
    double mu = 0.0;
    for (std::size_t j = 0; j < w; ++j) mu += in[j];
    mu /= static_cast<double>(w);
    double var = 0.0;
    for (std::size_t j = 0; j < w; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(w);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < w; ++j) {
      xhat[r * w + j] = (in[j] - mu) * rstd[r];
      out[r * w + j] = xhat[r * w + j] * gv[j] + bv[j];
    }
  }
  const bool rec = any_requires_grad({&x, &gamma, &beta});
  return make_result(
      x.shape(), std::move(out), rec, {x.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [rows, w, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        auto& X = *self.parents[0];
        auto& Gm = *self.parents[1];
        auto& Bt = *self.parents[2];
        const auto& G = self.grad;
        if (Gm.requires_grad) {
          auto& g = Gm.grad_buffer();
          for (std::size_t i = 0; i < G.size(); ++i) g[i % w] += G[i] * xhat[i];
        }
        if (Bt.requires_grad) {
          auto& g = Bt.grad_buffer();
          for (std::size_t i = 0; i < G.size(); ++i) g[i % w] += G[i];
        }
        if (X.requires_grad) {
          auto& g = X.grad_buffer();
          const double inv_w = 1.0 / static_cast<double>(w);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < w; ++j) {
              const double gh = G[r * w + j] * Gm.value[j];
              s1 += gh;
              s2 += gh * xhat[r * w + j];
            }
            for (std::size_t j = 0; j < w; ++j) {
              const double gh = G[r * w + j] * Gm.value[j];
              g[r * w + j] += rstd[r] * (gh - inv_w * s1 - xhat[r * w + j] * inv_w * s2);
            }
          }
        }
      });
}

Tensor gelu(const Tensor& x) {
  const auto xv = x.data();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = gelu_value(xv[i]);
  const bool rec = any_requires_grad({&x});
  return make_result(x.shape(), std::move(out), rec, {x.node_ptr()}, [](detail::Node& self) {
    auto& X = *self.parents[0];
    auto& g = X.grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * gelu_deriv(X.value[i]);
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) dim_error("reshape", {&x}, "target " + to_string(shape));
  const bool rec = any_requires_grad({&x});
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), rec, {x.node_ptr()},
                     [](detail::Node& self) { accumulate(*self.parents[0], self.grad); });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) dim_error("concat", {&parts[0]}, "axis out of range");
  std::vector<const Tensor*> ptrs;
  std::vector<std::size_t> lens;
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    ptrs.push_back(&p);
    if (p.rank() != s0.size()) dim_error("concat", ptrs);
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.shape()[i] != s0[i]) dim_error("concat", ptrs);
    lens.push_back(p.shape()[axis]);
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit sp = split_axis(out_shape, axis);
  Buffer out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].data();
    const std::size_t chunk = lens[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(v.data() + o * chunk, chunk, out.data() + o * sp.axis * sp.inner + offset * sp.inner);
    offset += lens[p];
  }
  std::vector<std::shared_ptr<detail::Node>> parents;
  for (const Tensor& p : parts) parents.push_back(p.node_ptr());
  const bool rec = any_requires_grad(parts);
  return make_result(std::move(out_shape), std::move(out), rec, std::move(parents),
                     [sp, lens](detail::Node& self) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < lens.size(); ++p) {
                         auto& P = *self.parents[p];
                         const std::size_t chunk = lens[p] * sp.inner;
                         if (P.requires_grad) {
                           auto& g = P.grad_buffer();
                           for (std::size_t o = 0; o < sp.outer; ++o)
                             for (std::size_t i = 0; i < chunk; ++i)
                               g[o * chunk + i] += self.grad[o * sp.axis * sp.inner + off * sp.inner + i];
                         }
                         off += lens[p];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis))
    dim_error("slice", {&x},
              "axis " + std::to_string(axis) + " range [" + std::to_string(begin) + "," +
                  std::to_string(end) + ")");
  const AxisSplit sp = split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * sp.inner;
  Buffer out(numel_of(out_shape));
  const auto v = x.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(v.data() + o * sp.axis * sp.inner + begin * sp.inner, chunk, out.data() + o * chunk);
  const bool rec = any_requires_grad({&x});
  return make_result(std::move(out_shape), std::move(out), rec, {x.node_ptr()},
                     [sp, begin, chunk](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t i = 0; i < chunk; ++i)
                           g[o * sp.axis * sp.inner + begin * sp.inner + i] += self.grad[o * chunk + i];
                     });
}

Tensor embed_lookup(const Tensor& table, std::span<const std::int64_t> ids) {
  if (table.rank() != 2) dim_error("embed_lookup", {&table});
  const std::size_t V = table.dim(0), D = table.dim(1);
  Buffer out(ids.size() * D);
  std::vector<std::int64_t> idv(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= V)
      dim_error("embed_lookup", {&table}, "id " + std::to_string(idv[i]) + " out of range");
    std::copy_n(table.data().data() + idv[i] * D, D, out.data() + i * D);
  }
  const bool rec = any_requires_grad({&table});
  const std::size_t n = idv.size();
  return make_result({n, D}, std::move(out), rec, {table.node_ptr()},
                     [idv = std::move(idv), D](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < idv.size(); ++i)
                         for (std::size_t j = 0; j < D; ++j) g[idv[i] * D + j] += self.grad[i * D + j];
                     });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.numel() == 0) dim_error("mse", {&a, &b});
  const auto av = a.data(), bv = b.data();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const bool rec = any_requires_grad({&a, &b});
  return make_result({}, {s / n}, rec, {a.node_ptr(), b.node_ptr()}, [n](detail::Node& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    const double g0 = self.grad[0] * 2.0 / n;
    if (A.requires_grad) {
      auto& g = A.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (A.value[i] - B.value[i]);
    }
    if (B.requires_grad) {
      auto& g = B.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (A.value[i] - B.value[i]);
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const bool rec = any_requires_grad({&x});
  return make_result({}, {s}, rec, {x.node_ptr()}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) dim_error("mean", {&x});
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor gather(const Tensor& x, std::span<const std::int64_t> index, Shape out_shape) {
  if (numel_of(out_shape) != index.size()) dim_error("gather", {&x}, "index/out shape mismatch");
  std::vector<std::int64_t> idx(index.begin(), index.end());
  const auto v = x.data();
  Buffer out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= static_cast<std::int64_t>(v.size()))
      dim_error("gather", {&x}, "index " + std::to_string(idx[i]) + " out of range");
    out[i] = idx[i] < 0 ? 0.0 : v[idx[i]];
  }
  const bool rec = any_requires_grad({&x});
  return make_result(std::move(out_shape), std::move(out), rec, {x.node_ptr()},
                     [idx = std::move(idx)](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         if (idx[i] >= 0) g[idx[i]] += self.grad[i];
                     });
}

Tensor repeat_rows(const Tensor& x, std::size_t times) {
  if (x.rank() != 2) dim_error("repeat_rows", {&x});
  const std::size_t n = x.dim(0), d = x.dim(1);
  Buffer out(n * times * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(x.data().data() + r * d, d, out.data() + (r * times + t) * d);
  const bool rec = any_requires_grad({&x});
  return make_result({n * times, d}, std::move(out), rec, {x.node_ptr()},
                     [n, d, times](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t t = 0; t < times; ++t)
                           for (std::size_t j = 0; j < d; ++j)
                             g[r * d + j] += self.grad[(r * times + t) * d + j];
                     });
}

Tensor gather_cols(const Tensor& x, std::span<const std::size_t> cols) {
  if (x.rank() != 2) dim_error("gather_cols", {&x});
  const std::size_t n = x.dim(0), w = x.dim(1), m = cols.size();
  std::vector<std::size_t> cv(cols.begin(), cols.end());
  for (std::size_t c : cv)
    if (c >= w) dim_error("gather_cols", {&x}, "column " + std::to_string(c) + " out of range");
  Buffer out(n * m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = x.data()[r * w + cv[j]];
  const bool rec = any_requires_grad({&x});
  return make_result({n, m}, std::move(out), rec, {x.node_ptr()},
                     [n, w, m, cv = std::move(cv)](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < m; ++j) g[r * w + cv[j]] += self.grad[r * m + j];
                     });
}

Tensor scatter_cols(const Tensor& x, std::span<const std::size_t> cols, std::size_t width) {
  if (x.rank() != 2 || x.dim(1) != cols.size()) dim_error("scatter_cols", {&x});
  const std::size_t n = x.dim(0), m = cols.size();
  std::vector<std::size_t> cv(cols.begin(), cols.end());
  for (std::size_t c : cv)
    if (c >= width) dim_error("scatter_cols", {&x}, "column " + std::to_string(c) + " out of range");
  Buffer out(n * width, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < m; ++j) out[r * width + cv[j]] += x.data()[r * m + j];
  const bool rec = any_requires_grad({&x});
  return make_result({n, width}, std::move(out), rec, {x.node_ptr()},
                     [n, width, m, cv = std::move(cv)](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < m; ++j) g[r * m + j] += self.grad[r * width + cv[j]];
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size() || targets.empty())
    dim_error("cross_entropy", {&logits}, std::to_string(targets.size()) + " targets");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> tv(targets.begin(), targets.end());
  Buffer probs(n * k);
  double loss = 0.0;
  const auto v = logits.data();
  for (std::size_t r = 0; r < n; ++r) {
    if (tv[r] < 0 || static_cast<std::size_t>(tv[r]) >= k)
      dim_error("cross_entropy", {&logits}, "target " + std::to_string(tv[r]) + " out of range");
    const double* in = v.data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (probs[r * k + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= s;
    loss -= (in[tv[r]] - mx) - std::log(s);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  const bool rec = any_requires_grad({&logits});
  return make_result({}, {loss * inv_n}, rec, {logits.node_ptr()},
                     [n, k, inv_n, tv = std::move(tv), probs = std::move(probs)](detail::Node& self) {
                       auto& g = self.parents[0]->grad_buffer();
                       const double g0 = self.grad[0] * inv_n;
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t j = 0; j < k; ++j)
                           g[r * k + j] += g0 * (probs[r * k + j] - (static_cast<int>(j) == tv[r] ? 1.0 : 0.0));
                     });
}

AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionOptions& opt) {
  const std::size_t B = opt.batch, H = opt.heads;
  if (B == 0 || H == 0 || q.rank() != 2 || k.rank() != 2 || v.rank() != 2 ||
      k.shape() != v.shape() || q.dim(1) != k.dim(1) || q.dim(0) % B || k.dim(0) % B ||
      q.dim(1) % H)
    dim_error("attention", {&q, &k, &v},
              "batch " + std::to_string(B) + " heads " + std::to_string(H));
  const std::size_t Lq = q.dim(0) / B, Lk = k.dim(0) / B, D = q.dim(1), dh = D / H;
  if (!opt.key_mask.empty() && opt.key_mask.size() != H * Lk)
    dim_error("attention", {&q, &k}, "key_mask must be heads x keys");
  if (!opt.head_gate.empty() && opt.head_gate.size() != H)
    dim_error("attention", {&q}, "head_gate must have one entry per head");
  std::vector<std::uint8_t> mask(opt.key_mask.begin(), opt.key_mask.end());
  Buffer gate(opt.head_gate.begin(), opt.head_gate.end());
  if (!mask.empty())
    for (std::size_t h = 0; h < H; ++h)
      if (std::all_of(mask.begin() + h * Lk, mask.begin() + (h + 1) * Lk,
                      [](std::uint8_t m) { return m == 0; }))
        throw ContractError("attention: key_mask leaves head " + std::to_string(h) + " without keys");

  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Buffer probs(B * H * Lq * Lk);
  Buffer out(B * Lq * D, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) {
      StrideMapC Q(q.data().data() + b * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
      StrideMapC K(k.data().data() + b * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
      StrideMapC V(v.data().data() + b * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
      MapM P(probs.data() + (b * H + h) * Lq * Lk, Lq, Lk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < Lq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Lk; ++j)
          if (mask.empty() || mask[h * Lk + j]) mx = std::max(mx, P(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          const double e = (mask.empty() || mask[h * Lk + j]) ? std::exp(P(i, j) - mx) : 0.0;
          P(i, j) = e;
          s += e;
        }
        for (std::size_t j = 0; j < Lk; ++j) P(i, j) /= s;
      }
      StrideMapM O(out.data() + b * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
      O.noalias() = P * V;
      if (!gate.empty()) O *= gate[h];
    }

  const bool rec = any_requires_grad({&q, &k, &v});
  Buffer saved = rec ? probs : Buffer{};
  Tensor result = make_result(
      {B * Lq, D}, std::move(out), rec, {q.node_ptr(), k.node_ptr(), v.node_ptr()},
      [B, H, Lq, Lk, D, dh, sc, gate = std::move(gate), P_all = std::move(saved)](detail::Node& self) {
        auto& Qn = *self.parents[0];
        auto& Kn = *self.parents[1];
        auto& Vn = *self.parents[2];
        double* gq = Qn.requires_grad ? Qn.grad_buffer().data() : nullptr;
        double* gk = Kn.requires_grad ? Kn.grad_buffer().data() : nullptr;
        double* gv = Vn.requires_grad ? Vn.grad_buffer().data() : nullptr;
        RowMat dP(Lq, Lk), dS(Lq, Lk);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < H; ++h) {
            const double g_h = gate.empty() ? 1.0 : gate[h];
            MapC P(P_all.data() + (b * H + h) * Lq * Lk, Lq, Lk);
            StrideMapC dO(self.grad.data() + b * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
            StrideMapC Q(Qn.value.data() + b * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
            StrideMapC K(Kn.value.data() + b * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
            StrideMapC V(Vn.value.data() + b * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
            if (gv) {
              StrideMapM GV(gv + b * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
              GV.noalias() += (P.transpose() * dO) * g_h;
            }
            if (!gq && !gk) continue;
            dP.noalias() = (dO * V.transpose()) * g_h;
            for (std::size_t i = 0; i < Lq; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < Lk; ++j) dot += dP(i, j) * P(i, j);
              for (std::size_t j = 0; j < Lk; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
            }
            if (gq) {
              StrideMapM GQ(gq + b * Lq * D + h * dh, Lq, dh, Eigen::OuterStride<>(D));
              GQ.noalias() += dS * K;
            }
            if (gk) {
              StrideMapM GK(gk + b * Lk * D + h * dh, Lk, dh, Eigen::OuterStride<>(D));
              GK.noalias() += dS.transpose() * Q;
            }
          }
      });
  return {std::move(result), std::vector<double>(probs.begin(), probs.end())};
}

}  // namespace calora
