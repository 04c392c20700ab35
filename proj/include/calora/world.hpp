#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace calora {

constexpr int kImageSize = 32;
constexpr int kChannels = 3;
constexpr int kPixels = kImageSize * kImageSize;
constexpr int kImageValues = kPixels * kChannels;
constexpr int kNumClasses = 5;

enum class Style { clearday = 0, foggy, night, snowy, sketch };
enum class Viewpoint { driving = 0, topdown, closeup };
enum class ClassId : std::uint8_t { sky = 0, road, building, vehicle, pedestrian };

constexpr int kNumStyles = 5;
constexpr int kNumViewpoints = 3;

const char* style_name(Style s);
const char* viewpoint_name(Viewpoint v);
const char* class_name(ClassId c);
Style parse_style(const std::string& name);
Viewpoint parse_viewpoint(const std::string& name);
ClassId parse_class(const std::string& name);

struct SceneObject {
  ClassId class_id = ClassId::vehicle;
  double x = 0.0, y = 0.0;  // center, pixels
  double w = 1.0, h = 1.0;  // extent, pixels
  double depth = 0.5;       // 0 near, 1 far
};

struct SceneSpec {
  Style style = Style::clearday;
  Viewpoint viewpoint = Viewpoint::driving;
  std::vector<SceneObject> objects;
  std::uint64_t seed = 0;

  /// Throws ContractError if a field violates the scene invariants.
  void validate() const;
};

struct LabeledImage {
  std::vector<double> image;        // HWC, kImageValues entries in [0,1]
  std::vector<std::uint8_t> mask;   // kPixels class ids
  std::optional<SceneSpec> spec;    // absent for generated pairs
};

LabeledImage render_scene(const SceneSpec& spec);

/// Content factors drawn for a viewpoint; style is applied by the caller.
SceneSpec sample_scene(Style style, Viewpoint viewpoint, std::uint64_t seed);

std::vector<LabeledImage> sample_dataset(Style style, Viewpoint viewpoint, std::size_t n,
                                         std::uint64_t seed);

/// Per-class pixel proportions over all masks.
std::array<double, kNumClasses> class_histogram(const std::vector<std::vector<std::uint8_t>>& masks);
std::array<double, kNumClasses> class_histogram(const std::vector<LabeledImage>& pairs);

// ---------------------------------------------------------------------------
// Prompt vocabulary

namespace token {
constexpr std::int64_t null = 0;
constexpr std::int64_t style_base = 1;      // 1..5
constexpr std::int64_t viewpoint_base = 6;  // 6..8
constexpr std::int64_t class_base = 9;      // building, vehicle, pedestrian
constexpr std::int64_t vocab_size = 12;
}  // namespace token

constexpr std::size_t kPromptLength = 8;
constexpr std::size_t kStyleSlot = 0;
constexpr std::size_t kViewpointSlot = 1;

std::int64_t style_token(Style s);
std::int64_t viewpoint_token(Viewpoint v);
/// Only building, vehicle and pedestrian carry tokens.
std::int64_t class_token(ClassId c);
std::optional<ClassId> class_of_token(std::int64_t tok);
std::string token_name(std::int64_t tok);
std::vector<std::string> vocabulary();

struct PromptTokens {
  std::array<std::int64_t, kPromptLength> ids{};  // all NULL by default

  void validate() const;
  bool is_null() const;
  bool operator==(const PromptTokens&) const = default;
  std::string str() const;
};

PromptTokens null_prompt();
/// Canonical encoding: style, viewpoint, sorted class tokens, NULL padding.
/// Repeated class names are kept (emphasis).
PromptTokens prompt_of(Style style, Viewpoint viewpoint, const std::vector<std::string>& classes);
PromptTokens prompt_of(Style style, Viewpoint viewpoint, const std::vector<ClassId>& classes);
/// Class tokens extracted from the pair's mask; style/viewpoint from its spec
/// or from the explicit overrides.
PromptTokens prompt_of(const LabeledImage& pair);
PromptTokens prompt_of_mask(Style style, Viewpoint viewpoint, const std::vector<std::uint8_t>& mask);

}  // namespace calora
