#pragma once

#include <compare>
#include <map>
#include <string>
#include <vector>

#include "calora/projection.hpp"

namespace calora {

enum class Granularity { head = 0, projection, layer, block };

const char* granularity_name(Granularity g);
Granularity parse_granularity(const std::string& name);

/// Address of a weight group. Fields coarser than the granularity are -1.
/// Ordering is the canonical (block, attention, projection, head) order.
struct UnitId {
  int block = 0;
  int attention = -1;
  int projection = -1;
  int head = -1;

  auto operator<=>(const UnitId&) const = default;
  std::string str() const;
  static UnitId parse(const std::string& s);
  Granularity granularity() const;
  /// True when `id` (a projection) belongs to this unit.
  bool covers(const ProjectionId& id) const;
};

UnitId head_unit(const ProjectionId& id, int head);
UnitId projection_unit(const ProjectionId& id);

/// Every unit of the given granularity, canonical order.
std::vector<UnitId> enumerate_units(int blocks, int heads, Granularity g);

struct SelectionMask {
  Granularity granularity = Granularity::head;
  std::vector<UnitId> selected;  // score order
  double proportion = 0.0;
  std::size_t total = 0;
};

/// Selected heads per projection implied by a mask at any granularity; a
/// coarse unit selects every head underneath it.
std::map<ProjectionId, std::vector<std::size_t>> heads_per_projection(const SelectionMask& mask,
                                                                      int blocks, int heads);

}  // namespace calora
