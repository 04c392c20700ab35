#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "calora/tensor.hpp"

namespace calora {

enum class ProjectionKind { Q = 0, K = 1, V = 2, OUT = 3 };

const char* projection_name(ProjectionKind kind);
ProjectionKind parse_projection(const std::string& name);

enum class AttentionKind { self_attn = 0, cross_attn = 1 };

const char* attention_name(AttentionKind kind);
AttentionKind parse_attention(const std::string& name);

/// One attention projection matrix of the denoiser.
struct ProjectionId {
  int block = 0;
  AttentionKind attention = AttentionKind::self_attn;
  ProjectionKind projection = ProjectionKind::Q;

  auto operator<=>(const ProjectionId&) const = default;
  std::string str() const;
};

/// Q/K/V split their output rows by head; OUT splits its input columns.
inline bool splits_rows(ProjectionKind kind) { return kind != ProjectionKind::OUT; }

struct ProjectionShape {
  std::size_t d_out = 0;
  std::size_t d_in = 0;
  std::size_t heads = 1;
  std::size_t dim_head = 0;

  /// Throws ContractError when the head layout does not fit the kind.
  void validate(ProjectionKind kind) const;
};

/// Per-head blocks of a (d_out × d_in) gradient, h blocks along the split
/// axis of `kind`.
std::vector<Tensor> chunk_per_head(const Tensor& weight_grad, const ProjectionShape& shape,
                                   ProjectionKind kind);

/// Inverse of chunk_per_head.
Tensor unchunk_heads(const std::vector<Tensor>& blocks, ProjectionKind kind);

/// sqrt(mean(g²)) over all elements; 0 for an empty block.
double rms(std::span<const double> values);

}  // namespace calora
