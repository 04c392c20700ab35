#include "calora/units.hpp"

#include <algorithm>
#include <sstream>

#include "calora/error.hpp"

namespace calora {

const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::head: return "head";
    case Granularity::projection: return "projection";
    case Granularity::layer: return "layer";
    case Granularity::block: return "block";
  }
  return "?";
}

Granularity parse_granularity(const std::string& name) {
  for (auto g : {Granularity::head, Granularity::projection, Granularity::layer, Granularity::block})
    if (name == granularity_name(g)) return g;
  throw ContractError("unknown granularity '" + name + "'");
}

std::string UnitId::str() const {
  std::string s = "b" + std::to_string(block);
  if (attention >= 0) s += std::string(".") + attention_name(static_cast<AttentionKind>(attention));
  if (projection >= 0) s += std::string(".") + projection_name(static_cast<ProjectionKind>(projection));
  if (head >= 0) s += ".h" + std::to_string(head);
  return s;
}

UnitId UnitId::parse(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.empty() || parts.size() > 4 || parts[0].size() < 2 || parts[0][0] != 'b')
    throw ContractError("malformed unit id '" + s + "'");
  UnitId u;
  u.block = std::stoi(parts[0].substr(1));
  if (parts.size() > 1) u.attention = static_cast<int>(parse_attention(parts[1]));
  if (parts.size() > 2) u.projection = static_cast<int>(parse_projection(parts[2]));
  if (parts.size() > 3) {
    if (parts[3].size() < 2 || parts[3][0] != 'h') throw ContractError("malformed unit id '" + s + "'");
    u.head = std::stoi(parts[3].substr(1));
  }
  return u;
}

Granularity UnitId::granularity() const {
  if (head >= 0) return Granularity::head;
  if (projection >= 0) return Granularity::projection;
  if (attention >= 0) return Granularity::layer;
  return Granularity::block;
}

bool UnitId::covers(const ProjectionId& id) const {
  return id.block == block && (attention < 0 || attention == static_cast<int>(id.attention)) &&
         (projection < 0 || projection == static_cast<int>(id.projection));
}

UnitId head_unit(const ProjectionId& id, int head) {
  return {id.block, static_cast<int>(id.attention), static_cast<int>(id.projection), head};
}

UnitId projection_unit(const ProjectionId& id) {
  return {id.block, static_cast<int>(id.attention), static_cast<int>(id.projection), -1};
}

std::vector<UnitId> enumerate_units(int blocks, int heads, Granularity g) {
  std::vector<UnitId> out;
  for (int b = 0; b < blocks; ++b) {
    if (g == Granularity::block) {
      out.push_back({b, -1, -1, -1});
      continue;
    }
    for (int a = 0; a < 2; ++a) {
      if (g == Granularity::layer) {
        out.push_back({b, a, -1, -1});
        continue;
      }
      for (int p = 0; p < 4; ++p) {
        if (g == Granularity::projection) {
          out.push_back({b, a, p, -1});
          continue;
        }
        for (int h = 0; h < heads; ++h) out.push_back({b, a, p, h});
      }
    }
  }
  return out;
}

std::map<ProjectionId, std::vector<std::size_t>> heads_per_projection(const SelectionMask& mask,
                                                                      int blocks, int heads) {
  std::map<ProjectionId, std::vector<std::size_t>> out;
  for (const UnitId& u : mask.selected) {
    require(u.block >= 0 && u.block < blocks, "selection unit " + u.str() + " outside the model");
    require(u.head < heads, "selection unit " + u.str() + " names a missing head");
    for (int a = 0; a < 2; ++a)
      for (int p = 0; p < 4; ++p) {
        const ProjectionId id{u.block, static_cast<AttentionKind>(a), static_cast<ProjectionKind>(p)};
        if (!u.covers(id)) continue;
        auto& hs = out[id];
        if (u.head >= 0) hs.push_back(u.head);
        else
          for (int h = 0; h < heads; ++h) hs.push_back(h);
      }
  }
  for (auto& [id, hs] : out) {
    std::sort(hs.begin(), hs.end());
    hs.erase(std::unique(hs.begin(), hs.end()), hs.end());
  }
  return out;
}

}  // namespace calora
