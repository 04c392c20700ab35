#include "calora/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "calora/error.hpp"

namespace calora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_png(const fs::path& path, const std::vector<std::uint8_t>& bytes, int w, int h,
               png_uint_32 format) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = format;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw std::runtime_error("png write failed for " + path.string() + ": " + img.message);
}

std::vector<std::uint8_t> read_png(const fs::path& path, png_uint_32 format, int& w, int& h) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw std::runtime_error("png read failed for " + path.string() + ": " + img.message);
  img.format = format;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr))
    throw std::runtime_error("png decode failed for " + path.string() + ": " + img.message);
  w = static_cast<int>(img.width);
  h = static_cast<int>(img.height);
  return bytes;
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string stem(std::size_t i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

void write_png_rgb(const fs::path& path, const std::vector<double>& image, int width, int height) {
  require(image.size() == static_cast<std::size_t>(width * height * 3), "write_png_rgb: size mismatch");
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = quantize(image[i]);
  write_png(path, bytes, width, height, PNG_FORMAT_RGB);
}

std::vector<double> read_png_rgb(const fs::path& path) {
  int w = 0, h = 0;
  const auto bytes = read_png(path, PNG_FORMAT_RGB, w, h);
  std::vector<double> out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = bytes[i] / 255.0;
  return out;
}

void write_png_mask(const fs::path& path, const std::vector<std::uint8_t>& mask) {
  require(mask.size() == static_cast<std::size_t>(kPixels), "write_png_mask: size mismatch");
  write_png(path, mask, kImageSize, kImageSize, PNG_FORMAT_GRAY);
}

std::vector<std::uint8_t> read_png_mask(const fs::path& path) {
  int w = 0, h = 0;
  auto bytes = read_png(path, PNG_FORMAT_GRAY, w, h);
  require(w == kImageSize && h == kImageSize, "read_png_mask: unexpected size");
  return bytes;
}

void write_image_grid(const fs::path& path, const std::vector<std::vector<double>>& images,
                      int columns) {
  require(!images.empty() && columns > 0, "write_image_grid: nothing to write");
  const int n = static_cast<int>(images.size());
  const int rows = (n + columns - 1) / columns;
  const int W = columns * (kImageSize + 1) + 1, H = rows * (kImageSize + 1) + 1;
  std::vector<double> canvas(static_cast<std::size_t>(W * H * 3), 1.0);
  for (int i = 0; i < n; ++i) {
    require(images[i].size() == static_cast<std::size_t>(kImageValues), "write_image_grid: bad image");
    const int oy = 1 + (i / columns) * (kImageSize + 1), ox = 1 + (i % columns) * (kImageSize + 1);
    for (int r = 0; r < kImageSize; ++r)
      for (int c = 0; c < kImageSize; ++c)
        for (int ch = 0; ch < 3; ++ch)
          canvas[((oy + r) * W + ox + c) * 3 + ch] = images[i][(r * kImageSize + c) * 3 + ch];
  }
  write_png_rgb(path, canvas, W, H);
}

json scene_to_json(const SceneSpec& spec) {
  json objs = json::array();
  for (const auto& o : spec.objects)
    objs.push_back({{"class", class_name(o.class_id)}, {"x", o.x}, {"y", o.y}, {"w", o.w},
                    {"h", o.h}, {"depth", o.depth}});
  return {{"style", style_name(spec.style)}, {"viewpoint", viewpoint_name(spec.viewpoint)},
          {"seed", spec.seed}, {"objects", objs}};
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.style = parse_style(j.at("style").get<std::string>());
  s.viewpoint = parse_viewpoint(j.at("viewpoint").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& o : j.at("objects"))
    s.objects.push_back({parse_class(o.at("class").get<std::string>()), o.at("x").get<double>(),
                         o.at("y").get<double>(), o.at("w").get<double>(), o.at("h").get<double>(),
                         o.at("depth").get<double>()});
  s.validate();
  return s;
}

void export_dataset(const fs::path& dir, const std::vector<LabeledImage>& pairs,
                    const std::vector<json>& entries) {
  require(entries.empty() || entries.size() == pairs.size(), "export_dataset: entries/pairs mismatch");
  fs::create_directories(dir);
  json items = json::array();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    const std::string name = stem(i);
    write_png_rgb(dir / (name + ".png"), p.image);
    write_png_mask(dir / (name + "_mask.png"), p.mask);
    json item = {{"file", name + ".png"}, {"mask", name + "_mask.png"}};
    if (p.spec) {
      item["style"] = style_name(p.spec->style);
      item["viewpoint"] = viewpoint_name(p.spec->viewpoint);
      item["seed"] = p.spec->seed;
      item["spec"] = scene_to_json(*p.spec);
    } else {
      item["spec"] = nullptr;
    }
    if (!entries.empty()) item.update(entries[i]);
    items.push_back(std::move(item));
  }
  std::ofstream(dir / "manifest.json") << json{{"format", "calora-dataset"}, {"version", 1},
                                               {"items", items}}.dump(2)
                                       << '\n';
}

std::vector<LabeledImage> load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("load_dataset: no manifest in " + dir.string());
  const json m = json::parse(in);
  std::vector<LabeledImage> out;
  for (const auto& item : m.at("items")) {
    LabeledImage p;
    p.image = read_png_rgb(dir / item.at("file").get<std::string>());
    p.mask = read_png_mask(dir / item.at("mask").get<std::string>());
    if (!item.at("spec").is_null()) p.spec = scene_from_json(item.at("spec"));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace calora
