#include "calora/projection.hpp"

#include <cmath>

#include "calora/error.hpp"

namespace calora {

const char* projection_name(ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::Q: return "q";
    case ProjectionKind::K: return "k";
    case ProjectionKind::V: return "v";
    case ProjectionKind::OUT: return "out";
  }
  return "?";
}

ProjectionKind parse_projection(const std::string& name) {
  if (name == "q") return ProjectionKind::Q;
  if (name == "k") return ProjectionKind::K;
  if (name == "v") return ProjectionKind::V;
  if (name == "out") return ProjectionKind::OUT;
  throw ContractError("unknown projection kind '" + name + "'");
}

const char* attention_name(AttentionKind kind) {
  return kind == AttentionKind::self_attn ? "self" : "cross";
}

AttentionKind parse_attention(const std::string& name) {
  if (name == "self") return AttentionKind::self_attn;
  if (name == "cross") return AttentionKind::cross_attn;
  throw ContractError("unknown attention kind '" + name + "'");
}

std::string ProjectionId::str() const {
  return "b" + std::to_string(block) + "." + attention_name(attention) + "." +
         projection_name(projection);
}

void ProjectionShape::validate(ProjectionKind kind) const {
  const std::size_t split = splits_rows(kind) ? d_out : d_in;
  if (heads == 0 || split % heads != 0)
    throw ContractError("projection " + std::string(projection_name(kind)) + ": " +
                        std::to_string(heads) + " heads do not divide " + std::to_string(split));
  if (dim_head != 0 && heads * dim_head != split)
    throw ContractError("projection " + std::string(projection_name(kind)) +
                        ": heads * dim_head != " + std::to_string(split));
}

std::vector<Tensor> chunk_per_head(const Tensor& weight_grad, const ProjectionShape& shape,
                                   ProjectionKind kind) {
  if (weight_grad.rank() != 2 || weight_grad.dim(0) != shape.d_out ||
      weight_grad.dim(1) != shape.d_in)
    throw DimensionError("chunk_per_head: grad " + to_string(weight_grad.shape()) +
                         " does not match projection " + std::to_string(shape.d_out) + "x" +
                         std::to_string(shape.d_in));
  shape.validate(kind);
  NoGradGuard guard;
  const std::size_t axis = splits_rows(kind) ? 0 : 1;
  const std::size_t width = weight_grad.dim(axis) / shape.heads;
  std::vector<Tensor> blocks;
  blocks.reserve(shape.heads);
  for (std::size_t h = 0; h < shape.heads; ++h)
    blocks.push_back(slice(weight_grad, axis, h * width, (h + 1) * width));
  return blocks;
}

Tensor unchunk_heads(const std::vector<Tensor>& blocks, ProjectionKind kind) {
  NoGradGuard guard;
  return concat(blocks, splits_rows(kind) ? 0 : 1);
}

double rms(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double s = 0.0;
  for (double v : values) s += v * v;
  return std::sqrt(s / static_cast<double>(values.size()));
}

}  // namespace calora
