#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace calora {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

// 64-byte alignment keeps vectorized reductions independent of where a
// buffer happens to land, so results are bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  Buffer& grad_buffer();
};

}  // namespace detail

/// Dense row-major array of doubles with optional reverse-mode gradient
/// tracking. Copies share the underlying node (reference semantics), so a
/// parameter handed to an optimizer and to a forward pass is the same value.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor from_buffer(Shape shape, detail::Buffer data, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  /// Mutable access to a leaf's values (parameter updates, initialization).
  std::span<double> data_mut();
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf(); }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  /// Deep copy into a fresh leaf with the same requires_grad flag.
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
/// calls; interior gradients are recomputed each call.
void backward(const Tensor& loss);

/// Same value, no gradient path to the input.
Tensor stop_gradient(const Tensor& x);

// ---------------------------------------------------------------------------
// Primitives. All throw DimensionError on non-conforming shapes.

/// (m×k)·(k×n) → m×n
Tensor matmul(const Tensor& a, const Tensor& b);
/// (m×k)·(n×k)ᵀ → m×n
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x·Wᵀ + bias, x: n×d_in, W: d_out×d_in, bias: d_out or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor());

/// Elementwise sum. `b` may also be a vector matching a's last dimension
/// (row broadcast).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor softmax_lastdim(const Tensor& x);
/// Normalizes over the last dimension, then applies gamma/beta (last-dim
/// vectors).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
/// tanh-approximation GELU.
Tensor gelu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Rows of `table` (V×D) selected by ids → (ids.size()×D).
Tensor embed_lookup(const Tensor& table, std::span<const std::int64_t> ids);

/// Mean squared error, scalar.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// out.flat[i] = x.flat[index[i]], or 0 where index[i] < 0.
Tensor gather(const Tensor& x, std::span<const std::int64_t> index, Shape out_shape);
/// Each row of an (n×d) tensor repeated `times` times consecutively.
Tensor repeat_rows(const Tensor& x, std::size_t times);
/// Columns of a 2D tensor at `cols` → (n × cols.size()).
Tensor gather_cols(const Tensor& x, std::span<const std::size_t> cols);
/// Inverse routing of gather_cols: places x's columns at `cols` of a zero
/// (n × width) tensor.
Tensor scatter_cols(const Tensor& x, std::span<const std::size_t> cols, std::size_t width);

/// Mean cross-entropy of row-wise logits (n×k) against class ids.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

struct AttentionOptions {
  std::size_t batch = 1;
  std::size_t heads = 1;
  /// Optional (heads × keys) 0/1 table; keys with 0 receive zero weight for
  /// that head. Every head must keep at least one key.
  std::span<const std::uint8_t> key_mask{};
  /// Optional per-head output multipliers (ablation), length == heads.
  std::span<const double> head_gate{};
};

struct AttentionResult {
  Tensor out;                  // (batch·Lq × heads·dh)
  std::vector<double> probs;   // batch × heads × Lq × Lk
};

/// Multi-head scaled dot-product attention over batched token rows.
/// q: (batch·Lq × heads·dh), k,v: (batch·Lk × heads·dh).
AttentionResult attention(const Tensor& q, const Tensor& k, const Tensor& v,
                          const AttentionOptions& options);

}  // namespace calora
