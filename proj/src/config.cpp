#include "calora/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "calora/error.hpp"

namespace calora {

using nlohmann::json;

std::string Condition::name() const { return std::string(style_name(style)) + "-" + viewpoint_name(viewpoint); }

const MethodSpec& ExperimentConfig::method(const std::string& name) const {
  for (const auto& m : finetune.methods)
    if (m.name == name) return m;
  throw ContractError("no method named '" + name + "' in the configuration");
}

json default_config_json() {
  json methods = json::array({{{"name", "pretrained"}, {"kind", "pretrained"}}});
  for (const char* c : {"style", "viewpoint"})
    for (int p : {1, 2, 3, 5, 10})
      methods.push_back({{"name", std::string(c) + "-" + std::to_string(p)},
                         {"kind", "ca-lora"},
                         {"concept", c},
                         {"proportion", p / 100.0}});
  methods.push_back({{"name", "lora-100"}, {"kind", "lora"}, {"proportion", 1.0}});

  return {
      {"seed", 0},
      {"world",
       {{"seed", 7},
        {"pretrain_per_condition", 64},
        {"exclude_source_from_pretrain", true},
        {"source", {{"style", "clearday"}, {"viewpoint", "driving"}}},
        {"source_train", 64},
        {"few_shot", 10},
        {"source_test", 200},
        {"shifted_test", 100},
        {"shifted",
         json::array({{{"style", "foggy"}, {"viewpoint", "driving"}},
                      {{"style", "night"}, {"viewpoint", "driving"}},
                      {{"style", "snowy"}, {"viewpoint", "driving"}},
                      {{"style", "clearday"}, {"viewpoint", "closeup"}}})},
        {"oracle_per_condition", 64}}},
      {"pretrain",
       {{"seed", 0},
        {"width", 32},
        {"heads", 4},
        {"blocks", 2},
        {"ffn", 64},
        {"patch", 4},
        {"T", 200},
        {"iterations", 10000},
        {"batch", 16},
        {"lr", 2e-3},
        {"weight_decay", 0.0},
        {"null_prompt_dropout", 0.1},
        {"cosine_decay", true}}},
      {"sensitivity",
       {{"t", 16},
        {"n_images", 4},
        {"n_noise", 4},
        {"granularity", "head"},
        {"floor", 1e-12},
        {"sweep_t", json::array({96, 40, 16, 1})},
        {"base_prompt", {{"style", "clearday"}, {"viewpoint", "driving"}}}}},
      {"finetune",
       {{"rank", 4},
        {"paper_rank", 64},
        {"alpha", 1.0},
        {"iterations", 2000},
        {"paper_iterations", 10000},
        {"batch", 16},
        {"lr", 1e-3},
        {"null_prompt_dropout", 0.1},
        {"methods", methods}}},
      {"labelgen",
       {{"proj_width", 16}, {"hidden", 32}, {"iterations", 1500}, {"batch", 8}, {"lr", 3e-3}, {"t_feat", 16},
        {"feature_draws", 2}}},
      {"generate",
       {{"conditions", json::array({"clearday", "foggy", "night", "snowy", "sketch"})},
        {"viewpoint", "driving"},
        {"per_condition", 100},
        {"class_augmentation", true},
        {"steps", 25},
        {"guidance", 5.0}}},
      {"evaluate",
       {{"mmd_samples", 100},
        {"adherence_styles", json::array({"foggy", "night", "snowy", "sketch"})},
        {"dg_conditions", json::array({"clearday", "foggy", "night", "snowy"})},
        {"label_alignment_samples", 25},
        {"extra_fraction", 1.0 / 3.0},
        {"segmenter", {{"iterations", 1500}, {"batch", 16}, {"lr", 3e-3}, {"width", 32}, {"hidden", 64}}},
        {"oracle", {{"iterations", 3000}, {"batch", 16}, {"lr", 3e-3}, {"width", 32}, {"hidden", 64}}},
        {"classifier", {{"iterations", 600}, {"batch", 32}, {"lr", 3e-3}, {"width", 32}}}}},
  };
}

namespace {

const char* type_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Objects merge key by key; everything else is replaced after a type check.
// Arrays of objects (methods, shifted) are taken as a whole and checked later.
void merge_into(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(p, "unknown field");
    json& dst = base[it.key()];
    const json& src = it.value();
    if (dst.is_object()) {
      merge_into(dst, src, p);
    } else {
      const bool both_numbers = dst.is_number() && src.is_number();
      if (!both_numbers && std::string(type_name(dst)) != type_name(src))
        throw ConfigError(p, std::string("expected ") + type_name(dst) + ", got " + type_name(src));
      dst = src;
    }
  }
}

struct Reader {
  const json& root;

  const json& at(const std::string& path) const {
    const json* j = &root;
    std::size_t start = 0;
    while (start <= path.size()) {
      const std::size_t dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!j->is_object() || !j->contains(key)) throw ConfigError(path, "missing field");
      j = &(*j)[key];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    return *j;
  }

  double number(const std::string& path, double lo, double hi) const {
    const json& j = at(path);
    if (!j.is_number()) throw ConfigError(path, "expected a number");
    const double v = j.get<double>();
    if (!(v >= lo && v <= hi))
      throw ConfigError(path, "value " + j.dump() + " outside [" + json(lo).dump() + ", " + json(hi).dump() + "]");
    return v;
  }

  int integer(const std::string& path, long long lo, long long hi) const {
    const json& j = at(path);
    if (!j.is_number_integer()) throw ConfigError(path, "expected an integer");
    const long long v = j.get<long long>();
    if (v < lo || v > hi)
      throw ConfigError(path, "value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + "]");
    return static_cast<int>(v);
  }

  std::uint64_t u64(const std::string& path) const {
    const json& j = at(path);
    if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0))
      throw ConfigError(path, "expected a non-negative integer");
    return j.get<std::uint64_t>();
  }

  bool boolean(const std::string& path) const {
    const json& j = at(path);
    if (!j.is_boolean()) throw ConfigError(path, "expected a boolean");
    return j.get<bool>();
  }

  std::string string(const std::string& path) const {
    const json& j = at(path);
    if (!j.is_string()) throw ConfigError(path, "expected a string");
    return j.get<std::string>();
  }
};

template <class F>
auto parse_enum(const std::string& path, const std::string& value, F parse) {
  try {
    return parse(value);
  } catch (const ContractError& e) {
    throw ConfigError(path, e.what());
  }
}

Style style_value(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path, "expected a string");
  return parse_enum(path, j.get<std::string>(), parse_style);
}

Condition condition_at(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "style" && it.key() != "viewpoint") throw ConfigError(path + "." + it.key(), "unknown field");
  auto field = [&](const char* k) {
    if (!j.contains(k) || !j[k].is_string()) throw ConfigError(path + "." + k, "expected a string");
    return j[k].get<std::string>();
  };
  Condition c;
  c.style = parse_enum(path + ".style", field("style"), parse_style);
  c.viewpoint = parse_enum(path + ".viewpoint", field("viewpoint"), parse_viewpoint);
  return c;
}

std::vector<Style> styles_at(const Reader& r, const std::string& path) {
  const json& j = r.at(path);
  if (!j.is_array() || j.empty()) throw ConfigError(path, "expected a non-empty array of style names");
  std::vector<Style> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(style_value(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

SegmenterConfig segmenter_at(const Reader& r, const std::string& p) {
  SegmenterConfig s;
  s.iterations = r.integer(p + ".iterations", 0, 10000000);
  s.batch = r.integer(p + ".batch", 2, 4096);
  s.lr = r.number(p + ".lr", 0.0, 10.0);
  s.width = r.integer(p + ".width", 1, 4096);
  s.hidden = r.integer(p + ".hidden", 1, 4096);
  if (s.batch % 2) throw ConfigError(p + ".batch", "must be even for 1:1 real/generated mixing");
  return s;
}

}  // namespace

ExperimentConfig parse_config(const json& user) {
  json merged = default_config_json();
  merge_into(merged, user, "");
  const Reader r{merged};
  ExperimentConfig c;
  c.json = merged;
  c.seed = r.u64("seed");

  auto& w = c.world;
  w.seed = r.u64("world.seed");
  w.pretrain_per_condition = r.integer("world.pretrain_per_condition", 1, 100000);
  w.exclude_source_from_pretrain = r.boolean("world.exclude_source_from_pretrain");
  w.source = condition_at(r.at("world.source"), "world.source");
  w.source_train = r.integer("world.source_train", 1, 100000);
  w.few_shot = r.integer("world.few_shot", 1, 100000);
  w.source_test = r.integer("world.source_test", 1, 100000);
  w.shifted_test = r.integer("world.shifted_test", 1, 100000);
  w.oracle_per_condition = r.integer("world.oracle_per_condition", 1, 100000);
  if (w.few_shot > w.source_train) throw ConfigError("world.few_shot", "cannot exceed world.source_train");
  {
    const json& s = r.at("world.shifted");
    if (!s.is_array() || s.empty()) throw ConfigError("world.shifted", "expected a non-empty array");
    for (std::size_t i = 0; i < s.size(); ++i)
      w.shifted.push_back(condition_at(s[i], "world.shifted[" + std::to_string(i) + "]"));
  }

  auto& m = c.pretrain.model;
  m.seed = r.u64("pretrain.seed");
  m.width = r.integer("pretrain.width", 1, 4096);
  m.heads = r.integer("pretrain.heads", 1, 256);
  m.blocks = r.integer("pretrain.blocks", 1, 64);
  m.ffn = r.integer("pretrain.ffn", 1, 65536);
  m.patch = r.integer("pretrain.patch", 1, kImageSize);
  m.T = r.integer("pretrain.T", 2, 100000);
  try {
    m.validate();
  } catch (const ContractError& e) {
    throw ConfigError("pretrain", e.what());
  }
  auto& t = c.pretrain.train;
  t.seed = m.seed;
  t.iterations = r.integer("pretrain.iterations", 0, 100000000);
  t.batch = r.integer("pretrain.batch", 1, 4096);
  t.lr = r.number("pretrain.lr", 0.0, 10.0);
  t.weight_decay = r.number("pretrain.weight_decay", 0.0, 10.0);
  t.null_prompt_dropout = r.number("pretrain.null_prompt_dropout", 0.0, 1.0);
  t.cosine_decay = r.boolean("pretrain.cosine_decay");

  auto& s = c.sensitivity;
  s.t = r.integer("sensitivity.t", 1, m.T);
  s.n_images = r.integer("sensitivity.n_images", 1, 100000);
  s.n_noise = r.integer("sensitivity.n_noise", 1, 100000);
  s.granularity = parse_enum("sensitivity.granularity", r.string("sensitivity.granularity"), parse_granularity);
  s.floor = r.number("sensitivity.floor", 0.0, 1.0);
  {
    const json& st = r.at("sensitivity.sweep_t");
    if (!st.is_array() || st.empty()) throw ConfigError("sensitivity.sweep_t", "expected a non-empty array");
    for (std::size_t i = 0; i < st.size(); ++i) {
      const std::string p = "sensitivity.sweep_t[" + std::to_string(i) + "]";
      if (!st[i].is_number_integer() || st[i].get<int>() < 1 || st[i].get<int>() > m.T)
        throw ConfigError(p, "must be an integer timestep in [1, T]");
      c.sweep_t.push_back(st[i].get<int>());
    }
  }
  {
    const Condition b = condition_at(r.at("sensitivity.base_prompt"), "sensitivity.base_prompt");
    c.base_prompt = prompt_of(b.style, b.viewpoint, std::vector<ClassId>{});
  }

  auto& f = c.finetune;
  f.lora.rank = r.integer("finetune.rank", 1, 4096);
  f.paper_rank = r.integer("finetune.paper_rank", 1, 4096);
  f.lora.alpha = r.number("finetune.alpha", -1e6, 1e6);
  f.lora.iterations = r.integer("finetune.iterations", 0, 100000000);
  f.paper_iterations = r.integer("finetune.paper_iterations", 0, 100000000);
  f.lora.batch = r.integer("finetune.batch", 1, 4096);
  f.lora.lr = r.number("finetune.lr", 0.0, 10.0);
  f.lora.null_prompt_dropout = r.number("finetune.null_prompt_dropout", 0.0, 1.0);
  if (f.lora.rank > m.width / m.heads)
    throw ConfigError("finetune.rank", "rank " + std::to_string(f.lora.rank) + " exceeds the per-head dimension " +
                                           std::to_string(m.width / m.heads));
  {
    const json& ms = r.at("finetune.methods");
    if (!ms.is_array() || ms.empty()) throw ConfigError("finetune.methods", "expected a non-empty array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < ms.size(); ++i) {
      const std::string p = "finetune.methods[" + std::to_string(i) + "]";
      if (!ms[i].is_object()) throw ConfigError(p, "expected an object");
      for (auto it = ms[i].begin(); it != ms[i].end(); ++it)
        if (it.key() != "name" && it.key() != "kind" && it.key() != "concept" && it.key() != "proportion")
          throw ConfigError(p + "." + it.key(), "unknown field");
      auto field = [&](const std::string& k) -> const json& {
        if (!ms[i].contains(k)) throw ConfigError(p + "." + k, "missing field");
        return ms[i][k];
      };
      MethodSpec spec;
      if (!field("name").is_string() || field("name").get<std::string>().empty())
        throw ConfigError(p + ".name", "expected a non-empty string");
      spec.name = field("name").get<std::string>();
      if (!names.insert(spec.name).second) throw ConfigError(p + ".name", "duplicate method name");
      if (!field("kind").is_string()) throw ConfigError(p + ".kind", "expected a string");
      spec.kind = field("kind").get<std::string>();
      if (spec.kind == "pretrained") {
        spec.proportion = 0.0;
      } else if (spec.kind == "lora") {
        spec.proportion = 1.0;
      } else if (spec.kind == "ca-lora") {
        if (!field("concept").is_string()) throw ConfigError(p + ".concept", "expected a string");
        spec.concept_kind = parse_enum(p + ".concept", field("concept").get<std::string>(), parse_concept);
        const json& pr = field("proportion");
        if (!pr.is_number() || !(pr.get<double>() > 0.0 && pr.get<double>() <= 1.0))
          throw ConfigError(p + ".proportion", "must be in (0, 1]");
        spec.proportion = pr.get<double>();
      } else {
        throw ConfigError(p + ".kind", "expected one of pretrained, ca-lora, lora");
      }
      f.methods.push_back(spec);
    }
  }

  auto& l = c.labelgen;
  l.proj_width = r.integer("labelgen.proj_width", 1, 4096);
  l.hidden = r.integer("labelgen.hidden", 1, 4096);
  l.iterations = r.integer("labelgen.iterations", 0, 100000000);
  l.batch = r.integer("labelgen.batch", 1, 4096);
  l.lr = r.number("labelgen.lr", 0.0, 10.0);
  l.t_feat = r.integer("labelgen.t_feat", 1, m.T);
  l.feature_draws = r.integer("labelgen.feature_draws", 1, 1000);

  auto& g = c.generate;
  g.conditions = styles_at(r, "generate.conditions");
  g.viewpoint = parse_enum("generate.viewpoint", r.string("generate.viewpoint"), parse_viewpoint);
  g.per_condition = r.integer("generate.per_condition", 1, 1000000);
  g.class_augmentation = r.boolean("generate.class_augmentation");
  g.sample.steps = r.integer("generate.steps", 1, m.T);
  g.sample.guidance = r.number("generate.guidance", 0.0, 1000.0);

  auto& e = c.evaluate;
  e.mmd_samples = r.integer("evaluate.mmd_samples", 2, 1000000);
  e.adherence_styles = styles_at(r, "evaluate.adherence_styles");
  e.dg_conditions = styles_at(r, "evaluate.dg_conditions");
  e.label_alignment_samples = r.integer("evaluate.label_alignment_samples", 1, 1000000);
  e.extra_fraction = r.number("evaluate.extra_fraction", 0.0, 100.0);
  e.segmenter = segmenter_at(r, "evaluate.segmenter");
  e.oracle = segmenter_at(r, "evaluate.oracle");
  e.classifier.iterations = r.integer("evaluate.classifier.iterations", 0, 100000000);
  e.classifier.batch = r.integer("evaluate.classifier.batch", 1, 4096);
  e.classifier.lr = r.number("evaluate.classifier.lr", 0.0, 10.0);
  e.classifier.width = r.integer("evaluate.classifier.width", 1, 4096);

  auto generated = [&](Style st) {
    return std::find(g.conditions.begin(), g.conditions.end(), st) != g.conditions.end();
  };
  for (std::size_t i = 0; i < e.adherence_styles.size(); ++i)
    if (!generated(e.adherence_styles[i]))
      throw ConfigError("evaluate.adherence_styles[" + std::to_string(i) + "]", "style is not in generate.conditions");
  for (std::size_t i = 0; i < e.dg_conditions.size(); ++i)
    if (!generated(e.dg_conditions[i]))
      throw ConfigError("evaluate.dg_conditions[" + std::to_string(i) + "]", "style is not in generate.conditions");
  if (!generated(w.source.style)) throw ConfigError("generate.conditions", "must include the source style");
  if (e.mmd_samples > g.per_condition) throw ConfigError("evaluate.mmd_samples", "exceeds generate.per_condition");
  if (e.label_alignment_samples > g.per_condition)
    throw ConfigError("evaluate.label_alignment_samples", "exceeds generate.per_condition");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string content_id(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace calora
