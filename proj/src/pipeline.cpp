#include "calora/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "calora/checkpoint.hpp"
#include "calora/error.hpp"
#include "calora/image_io.hpp"
#include "calora/metrics.hpp"

namespace calora {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "calora 1.0";

struct NullBuffer : std::streambuf {
  int overflow(int c) override { return c; }
};

std::ostream& null_stream() {
  static NullBuffer buf;
  static std::ostream os(&buf);
  return os;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

void write_curve(const fs::path& path, const std::vector<double>& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "iteration,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) os << i << ',' << curve[i] << '\n';
  write_text(path, os.str());
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::vector<std::vector<double>> images_of(const std::vector<LabeledImage>& pairs, std::size_t limit = SIZE_MAX) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < pairs.size() && i < limit; ++i) out.push_back(pairs[i].image);
  return out;
}

std::uint64_t parameter_digest(const TinyDenoiser& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : m.parameters()) {
    const auto d = t.data();
    const std::string_view bytes(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    h ^= fnv1a(bytes);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct GeneratedItem {
  LabeledImage pair;
  PromptTokens prompt;
  std::uint64_t sample_seed = 0;
};

std::vector<GeneratedItem> load_generated(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  const auto pairs = load_dataset(dir);
  std::vector<GeneratedItem> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    GeneratedItem g;
    g.pair = pairs[i];
    const auto& item = m.at("items").at(i);
    g.prompt.ids = item.at("prompt_ids").get<std::array<std::int64_t, kPromptLength>>();
    g.sample_seed = item.at("sample_seed").get<std::uint64_t>();
    out.push_back(std::move(g));
  }
  return out;
}

AdaptedModel load_method(const TinyDenoiser& base, const fs::path& finetune_dir, const MethodSpec& m) {
  if (m.kind == "pretrained") return AdaptedModel(base, nullptr);
  return AdaptedModel(base, load_adapters(finetune_dir / m.name / "adapters.bin"));
}

}  // namespace

fs::path default_run_root() {
  const char* env = std::getenv("CALORA_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

Pipeline::Pipeline(ExperimentConfig config, RunOptions options)
    : config_(std::move(config)), options_(std::move(options)) {
  if (options_.root.empty()) options_.root = default_run_root();
  const json& j = config_.json;
  const std::uint64_t seed = config_.seed;
  keys_["world"] = {{"world", j.at("world")}};
  auto add = [&](const std::string& stage, const std::string& upstream, json key) {
    key["upstream"] = ids_.at(upstream);
    keys_[stage] = key;
    ids_[stage] = stage + "-" + content_id(key);
  };
  ids_["world"] = "world-" + content_id(keys_["world"]);
  add("pretrain", "world", {{"pretrain", j.at("pretrain")}});
  add("sensitivity", "pretrain", {{"sensitivity", j.at("sensitivity")}, {"seed", seed}});
  add("finetune", "sensitivity", {{"finetune", j.at("finetune")}, {"seed", seed}});
  add("labelgen", "finetune", {{"labelgen", j.at("labelgen")}, {"seed", seed}});
  add("generate", "labelgen", {{"generate", j.at("generate")}, {"seed", seed}});
  add("evaluate", "generate", {{"evaluate", j.at("evaluate")}, {"seed", seed}});
  const json oracle_key = {{"oracle", j.at("evaluate").at("oracle")},
                           {"classifier", j.at("evaluate").at("classifier")},
                           {"upstream", ids_.at("world")}};
  keys_["oracle"] = oracle_key;
  ids_["oracle"] = "oracle-" + content_id(oracle_key);
}

const std::string& Pipeline::id(const std::string& stage) const {
  auto it = ids_.find(stage);
  if (it == ids_.end()) throw ContractError("unknown stage '" + stage + "'");
  return it->second;
}

fs::path Pipeline::dir(const std::string& stage) const { return options_.root / id(stage); }

bool Pipeline::complete(const std::string& stage) const {
  const fs::path m = dir(stage) / "manifest.json";
  if (!fs::exists(m)) return false;
  try {
    return read_json(m).value("status", "") == "complete";
  } catch (const std::exception&) {
    return false;
  }
}

std::ostream& Pipeline::log() const { return options_.log ? *options_.log : null_stream(); }

void Pipeline::require_done(const std::string& stage) const {
  if (!complete(stage))
    throw MissingArtifact(stage, "missing upstream artifact: stage '" + stage + "' (" + id(stage) +
                                     ") has not been run under " + options_.root.string());
}

void Pipeline::finish(const std::string& stage, json extra) const {
  json m = {{"stage", stage},
            {"id", id(stage)},
            {"key", keys_.at(stage)},
            {"seed", config_.seed},
            {"version", kVersion},
            {"status", "complete"}};
  m.update(extra);
  write_text(dir(stage) / "manifest.json", m.dump(2) + "\n");
}

void Pipeline::run(const std::string& stage) {
  const auto start = std::chrono::steady_clock::now();
  log() << "[" << stage << "] " << id(stage) << '\n';
  if (stage == "world") stage_world();
  else if (stage == "pretrain") stage_pretrain();
  else if (stage == "sensitivity") stage_sensitivity();
  else if (stage == "finetune") stage_finetune();
  else if (stage == "labelgen") stage_labelgen();
  else if (stage == "generate") stage_generate();
  else if (stage == "evaluate") stage_evaluate();
  else throw ContractError("unknown stage '" + stage + "'");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << secs;
  log() << "[" << stage << "] done in " << os.str() << " s\n";
}

void Pipeline::run_all() {
  for (const char* stage : kStages) {
    if (complete(stage) && !(options_.sweep && std::strcmp(stage, "sensitivity") == 0)) {
      log() << "[" << stage << "] reusing " << id(stage) << '\n';
      continue;
    }
    run(stage);
  }
}

json Pipeline::report() const {
  require_done("evaluate");
  return read_json(dir("evaluate") / "report.json");
}

// ---------------------------------------------------------------------------

void Pipeline::stage_world() {
  const auto& w = config_.world;
  const fs::path d = dir("world");
  fs::remove_all(d);
  fs::create_directories(d);
  auto render = [&](const Condition& c, int n, const std::string& tag) {
    return sample_dataset(c.style, c.viewpoint, n, derive_seed(w.seed, tag + "/" + c.name()));
  };
  std::vector<LabeledImage> pretrain, oracle, holdout;
  for (int s = 0; s < kNumStyles; ++s)
    for (int v = 0; v < kNumViewpoints; ++v) {
      const Condition c{static_cast<Style>(s), static_cast<Viewpoint>(v)};
      if (!(w.exclude_source_from_pretrain && c.style == w.source.style && c.viewpoint == w.source.viewpoint)) {
        auto part = render(c, w.pretrain_per_condition, "pretrain");
        pretrain.insert(pretrain.end(), part.begin(), part.end());
      }
      auto o = render(c, w.oracle_per_condition, "oracle");
      oracle.insert(oracle.end(), o.begin(), o.end());
      auto h = render(c, 20, "holdout");
      holdout.insert(holdout.end(), h.begin(), h.end());
    }
  export_dataset(d / "pretrain_corpus", pretrain, {});
  export_dataset(d / "oracle_corpus", oracle, {});
  export_dataset(d / "classifier_holdout", holdout, {});
  const auto train = render(w.source, w.source_train, "source-train");
  export_dataset(d / "source_train", train, {});
  export_dataset(d / "source_test", render(w.source, w.source_test, "source-test"), {});
  json shifted = json::array();
  for (const auto& c : w.shifted) {
    export_dataset(d / ("test_" + c.name()), render(c, w.shifted_test, "test"), {});
    shifted.push_back(c.name());
  }
  std::vector<std::vector<double>> preview;
  for (std::size_t i = 0; i < pretrain.size(); i += std::max<std::size_t>(1, pretrain.size() / 40)) preview.push_back(pretrain[i].image);
  write_image_grid(d / "pretrain_preview.png", preview, 10);
  finish("world", {{"pretrain_items", pretrain.size()},
                   {"source", w.source.name()},
                   {"few_shot", w.few_shot},
                   {"shifted", shifted}});
}

void Pipeline::stage_pretrain() {
  require_done("world");
  const fs::path d = dir("pretrain");
  fs::create_directories(d);
  const auto corpus = load_dataset(dir("world") / "pretrain_corpus");
  const TrainingSet data = training_set_of(corpus);
  TinyDenoiser model(config_.pretrain.model);
  model.fit_prior(data.images);
  const NoiseSchedule sched = make_schedule(config_.pretrain.model.T);
  model.set_trainable(true);
  const auto& tc = config_.pretrain.train;
  double window = 0.0;
  const auto r = train_diffusion(model, model.parameter_tensors(), data, sched, tc, [&](int it, double loss) {
    window += loss;
    if ((it + 1) % 500 == 0) {
      log() << "[pretrain] iteration " << it + 1 << "/" << tc.iterations << " loss " << window / 500.0 << '\n';
      window = 0.0;
    }
  });
  model.set_trainable(false);
  save_checkpoint(d / "model.ckpt", model, sched);
  write_curve(d / "loss.csv", r.loss_curve);
  std::vector<std::vector<double>> grid;
  for (int v = 0; v < kNumViewpoints; ++v)
    for (int s = 0; s < kNumStyles; ++s)
      for (std::uint64_t k = 0; k < 2; ++k)
        grid.push_back(sample_cfg(model, sched, prompt_of(static_cast<Style>(s), static_cast<Viewpoint>(v), std::vector<ClassId>{}),
                                  config_.generate.sample, derive_seed(tc.seed, 1000 + k)));
  write_image_grid(d / "samples.png", grid, 10);
  finish("pretrain", {{"iterations", tc.iterations},
                      {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()},
                      {"prompts_nulled", r.prompts_nulled},
                      {"prompts_seen", r.prompts_seen}});
}

void Pipeline::stage_sensitivity() {
  require_done("pretrain");
  const fs::path d = dir("sensitivity");
  fs::create_directories(d);
  Checkpoint ck = load_checkpoint(dir("pretrain") / "model.ckpt");
  std::map<Concept, SensitivityMap> maps;
  for (Concept kind : {Concept::style, Concept::viewpoint}) {
    const ConceptSpec spec = make_concept_spec(kind, config_.base_prompt);
    SensitivityConfig sc = config_.sensitivity;
    sc.sample = config_.generate.sample;
    sc.seed = derive_seed(config_.seed, std::string("sensitivity/") + concept_name(kind));
    maps[kind] = concept_sensitivity(ck.model, ck.schedule, spec, sc);
    write_sensitivity(d / (std::string(concept_name(kind)) + ".csv"), maps[kind]);
    log() << "[sensitivity] " << concept_name(kind) << " top unit "
          << select_top_k(maps[kind], 1.0 / static_cast<double>(maps[kind].scores.size())).selected.front().str()
          << '\n';
  }
  json extra = {{"granularity", granularity_name(config_.sensitivity.granularity)},
                {"style_viewpoint_rank_correlation",
                 rank_correlation(maps[Concept::style].scores, maps[Concept::viewpoint].scores)}};
  if (options_.sweep) {
    fs::create_directories(d / "sweep");
    std::map<Concept, std::vector<SensitivityMap>> sweeps;
    for (Concept kind : {Concept::style, Concept::viewpoint}) {
      const ConceptSpec spec = make_concept_spec(kind, config_.base_prompt);
      SensitivityConfig sc = config_.sensitivity;
      sc.sample = config_.generate.sample;
      sc.seed = derive_seed(config_.seed, std::string("sensitivity/") + concept_name(kind));
      sweeps[kind] = sweep_timesteps(ck.model, ck.schedule, spec, config_.sweep_t, sc);
      for (const auto& m : sweeps[kind])
        write_sensitivity(d / "sweep" / (std::string(concept_name(kind)) + "_t" + std::to_string(m.t) + ".csv"), m);
      const auto overlap = augmentation_robustness(ck.model, ck.schedule, spec, sc);
      std::ostringstream os;
      os << "augmentation";
      for (const auto& a : spec.augmentations) os << ',' << a.str();
      os << '\n';
      for (std::size_t i = 0; i < overlap.size(); ++i) {
        os << spec.augmentations[i].str();
        for (double v : overlap[i]) os << ',' << fmt(v);
        os << '\n';
      }
      write_text(d / "sweep" / (std::string("robustness_") + concept_name(kind) + ".csv"), os.str());
    }
    std::ostringstream os;
    os << "t,rank_correlation,disagreement,top10_jaccard\n";
    for (std::size_t i = 0; i < config_.sweep_t.size(); ++i) {
      const auto& a = sweeps[Concept::style][i];
      const auto& b = sweeps[Concept::viewpoint][i];
      const double rc = rank_correlation(a.scores, b.scores);
      os << a.t << ',' << fmt(rc) << ',' << fmt(1.0 - rc) << ','
         << fmt(jaccard(select_top_k(a, 0.1).selected, select_top_k(b, 0.1).selected)) << '\n';
    }
    write_text(d / "sweep" / "disagreement.csv", os.str());
    extra["sweep_t"] = config_.sweep_t;
  }
  finish("sensitivity", extra);
}

void Pipeline::stage_finetune() {
  require_done("sensitivity");
  require_done("world");
  const fs::path d = dir("finetune");
  fs::create_directories(d);
  Checkpoint ck = load_checkpoint(dir("pretrain") / "model.ckpt");
  const TrainingSet data = training_set_of(load_dataset(dir("world") / "source_train"));
  std::map<Concept, SensitivityMap> maps;
  for (Concept kind : {Concept::style, Concept::viewpoint})
    maps[kind] = read_sensitivity(dir("sensitivity") / (std::string(concept_name(kind)) + ".csv"));
  const auto& mc = ck.model.config();
  json methods = json::object();
  for (const auto& m : config_.finetune.methods) {
    const fs::path md = d / m.name;
    fs::create_directories(md);
    SelectionMask mask;
    if (m.kind == "pretrained") {
      mask.granularity = config_.sensitivity.granularity;
      mask.total = enumerate_units(mc.blocks, mc.heads, mask.granularity).size();
    } else if (m.kind == "lora") {
      mask = select_top_k(maps[Concept::style], 1.0);
    } else {
      mask = select_top_k(maps[m.concept_kind], m.proportion);
    }
    write_text(md / "mask.json", mask_to_json(mask).dump(2) + "\n");
    json info = {{"kind", m.kind}, {"proportion", m.proportion}, {"units", mask.selected.size()}};
    if (m.kind == "pretrained") {
      save_adapters(md / "adapters.bin", CALoRA());
      write_curve(md / "loss.csv", {});
    } else {
      const std::uint64_t before = parameter_digest(ck.model);
      AdaptedModel am = attach_adapters(ck.model, mask, config_.finetune.lora.rank, config_.finetune.lora.alpha,
                                        derive_seed(config_.seed, "finetune-init/" + m.name));
      LoraConfig lc = config_.finetune.lora;
      lc.seed = derive_seed(config_.seed, "finetune/" + m.name);
      const auto r = finetune_lora(am, data, ck.schedule, lc);
      if (parameter_digest(ck.model) != before)
        throw InvariantError("finetune: base parameters changed while training " + m.name);
      save_adapters(md / "adapters.bin", *am.lora);
      write_curve(md / "loss.csv", r.loss_curve);
      info["adapter_parameters"] = am.lora->parameter_count();
      info["final_loss"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
      log() << "[finetune] " << m.name << " units " << mask.selected.size() << " params "
            << am.lora->parameter_count() << " final loss " << info["final_loss"].get<double>() << '\n';
    }
    methods[m.name] = info;
  }
  finish("finetune", {{"methods", methods},
                      {"rank", config_.finetune.lora.rank},
                      {"paper_rank", config_.finetune.paper_rank}});
}

void Pipeline::stage_labelgen() {
  require_done("finetune");
  const fs::path d = dir("labelgen");
  fs::create_directories(d);
  Checkpoint ck = load_checkpoint(dir("pretrain") / "model.ckpt");
  const auto source = load_dataset(dir("world") / "source_train");
  const auto& mc = ck.model.config();
  json methods = json::object();
  for (const auto& m : config_.finetune.methods) {
    AdaptedModel am = load_method(ck.model, dir("finetune"), m);
    LabelGenConfig lg = config_.labelgen;
    lg.seed = derive_seed(config_.seed, "labelgen/" + m.name);
    LabelGenerator gen(mc.blocks, mc.width, mc.grid(), lg);
    const auto r = train_label_generator(am.model, ck.schedule, source, gen);
    fs::create_directories(d / m.name);
    gen.save(d / m.name / "generator.bin");
    write_curve(d / m.name / "loss.csv", r.loss_curve);
    const double final_loss = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
    methods[m.name] = {{"final_loss", final_loss}};
    log() << "[labelgen] " << m.name << " final loss " << final_loss << '\n';
  }
  finish("labelgen", {{"methods", methods}});
}

void Pipeline::stage_generate() {
  require_done("labelgen");
  const fs::path d = dir("generate");
  fs::create_directories(d);
  Checkpoint ck = load_checkpoint(dir("pretrain") / "model.ckpt");
  const auto source = load_dataset(dir("world") / "source_train");
  const auto& g = config_.generate;
  for (const auto& m : config_.finetune.methods) {
    AdaptedModel am = load_method(ck.model, dir("finetune"), m);
    const LabelGenerator gen = LabelGenerator::load(dir("labelgen") / m.name / "generator.bin");
    std::vector<std::vector<double>> grid;
    for (Style style : g.conditions) {
      std::vector<LabeledImage> pairs;
      std::vector<json> entries;
      const std::uint64_t root = derive_seed(config_.seed, "generate/" + m.name + "/" + style_name(style));
      for (int i = 0; i < g.per_condition; ++i) {
        const PromptTokens prompt = g.class_augmentation
                                        ? prompt_of_mask(style, g.viewpoint, source[i % source.size()].mask)
                                        : prompt_of(style, g.viewpoint, std::vector<ClassId>{});
        const std::uint64_t seed = derive_seed(root, static_cast<std::uint64_t>(i));
        pairs.push_back(generate_pair(am.model, gen, ck.schedule, prompt, g.sample, seed));
        entries.push_back({{"prompt", prompt.str()},
                           {"prompt_ids", prompt.ids},
                           {"sample_seed", seed},
                           {"style", style_name(style)},
                           {"viewpoint", viewpoint_name(g.viewpoint)},
                           {"model", id("finetune") + "/" + m.name},
                           {"checkpoint", id("pretrain")}});
        if (i < 8) grid.push_back(pairs.back().image);
      }
      export_dataset(d / m.name / style_name(style), pairs, entries);
    }
    write_image_grid(d / m.name / "grid.png", grid, 8);
    log() << "[generate] " << m.name << " done\n";
  }
  finish("generate", {{"per_condition", g.per_condition}});
}

void Pipeline::stage_evaluate() {
  require_done("generate");
  const auto& e = config_.evaluate;
  const auto& w = config_.world;
  const fs::path wd = dir("world");

  // Oracle segmenter and style classifier depend only on the world.
  const fs::path od = dir("oracle");
  if (!complete("oracle")) {
    fs::create_directories(od);
    const auto corpus = load_dataset(wd / "oracle_corpus");
    SegmenterConfig oc = e.oracle;
    oc.seed = derive_seed(w.seed, "oracle");
    log() << "[evaluate] training oracle segmenter on " << corpus.size() << " pairs\n";
    const ToySegmenter oracle = train_toy_segmenter(corpus, nullptr, oc);
    oracle.save(od / "oracle.bin");
    StyleClassifierConfig cc = e.classifier;
    cc.seed = derive_seed(w.seed, "classifier");
    const ToyStyleClassifier clf = train_style_classifier(corpus, cc);
    clf.save(od / "classifier.bin");
    const auto holdout = load_dataset(wd / "classifier_holdout");
    const double acc = style_accuracy(clf, holdout);
    const double oracle_miou = evaluate_segmenter(oracle, holdout);
    json m = {{"stage", "oracle"}, {"id", id("oracle")},    {"key", keys_.at("oracle")}, {"version", kVersion},
              {"status", "complete"}, {"classifier_holdout_accuracy", acc}, {"oracle_holdout_miou", oracle_miou}};
    write_text(od / "manifest.json", m.dump(2) + "\n");
  }
  const json oracle_manifest = read_json(od / "manifest.json");
  const double clf_acc = oracle_manifest.at("classifier_holdout_accuracy").get<double>();
  if (clf_acc < 0.95)
    throw NumericalError("evaluate: style classifier holdout accuracy " + fmt(clf_acc) + " is below 0.95");
  const ToySegmenter oracle = ToySegmenter::load(od / "oracle.bin");
  const ToyStyleClassifier clf = ToyStyleClassifier::load(od / "classifier.bin");

  const fs::path d = dir("evaluate");
  fs::create_directories(d);
  Checkpoint ck = load_checkpoint(dir("pretrain") / "model.ckpt");
  const auto source_train = load_dataset(wd / "source_train");
  const std::vector<LabeledImage> few_shot(source_train.begin(), source_train.begin() + w.few_shot);
  const auto source_test = load_dataset(wd / "source_test");
  std::vector<DomainSet> domains{{w.source.name(), source_test}};
  for (const auto& c : w.shifted) domains.push_back({c.name(), load_dataset(wd / ("test_" + c.name()))});

  const auto& methods = config_.finetune.methods;
  std::map<std::string, std::map<Style, std::vector<GeneratedItem>>> gen;
  for (const auto& m : methods)
    for (Style s : config_.generate.conditions)
      gen[m.name][s] = load_generated(dir("generate") / m.name / style_name(s));
  auto pairs_of = [&](const std::string& method, const std::vector<Style>& styles) {
    std::vector<LabeledImage> out;
    for (Style s : styles)
      for (const auto& g : gen[method][s]) out.push_back(g.pair);
    return out;
  };

  json rows = json::object();
  const auto real_src = images_of(source_test, e.mmd_samples);
  const auto train_images = images_of(source_train);
  for (const auto& m : methods) {
    json r;
    const auto src_pairs = pairs_of(m.name, {w.source.style});
    const auto src_images = images_of(src_pairs);
    const MmdResult mmd = mmd_alignment(images_of(src_pairs, e.mmd_samples), real_src);
    r["mmd"] = mmd.value;
    r["mmd_raw"] = mmd.raw;
    r["mmd_bandwidth"] = mmd.bandwidth;
    r["mmd_samples"] = {mmd.m, mmd.n};
    std::vector<std::vector<double>> adv_images;
    std::vector<Style> intended;
    json per_style = json::object();
    for (Style s : e.adherence_styles) {
      std::vector<std::vector<double>> ims;
      for (const auto& g : gen[m.name][s]) ims.push_back(g.pair.image);
      const auto a = prompt_adherence(ims, std::vector<Style>(ims.size(), s), clf);
      per_style[style_name(s)] = a.accuracy;
      for (auto& im : ims) {
        adv_images.push_back(std::move(im));
        intended.push_back(s);
      }
    }
    const auto adh = prompt_adherence(adv_images, intended, clf);
    r["adherence"] = adh.accuracy;
    r["adherence_log_prob"] = adh.mean_log_prob;
    r["adherence_per_style"] = per_style;
    r["adherence_samples"] = adh.n;
    const auto mem = memorization_distance(src_images, train_images);
    r["memorization_mean"] = mem.mean;
    r["memorization_p5"] = mem.p5;
    r["alignment"] = image_label_alignment(pairs_of(m.name, e.dg_conditions), oracle);
    rows[m.name] = r;
    log() << "[evaluate] " << m.name << " mmd " << mmd.value << " adherence " << adh.accuracy << " memorization "
          << mem.mean << '\n';
  }

  // Denoiser d paired with the label generator trained on denoiser g.
  std::vector<LabelGenerator> generators;
  for (const auto& m : methods) generators.push_back(LabelGenerator::load(dir("labelgen") / m.name / "generator.bin"));
  std::vector<std::vector<double>> align(methods.size(), std::vector<double>(methods.size()));
  for (std::size_t di = 0; di < methods.size(); ++di) {
    AdaptedModel am = load_method(ck.model, dir("finetune"), methods[di]);
    std::vector<const GeneratedItem*> items;
    for (Style s : e.dg_conditions)
      for (int i = 0; i < e.label_alignment_samples && i < static_cast<int>(gen[methods[di].name][s].size()); ++i)
        items.push_back(&gen[methods[di].name][s][i]);
    std::vector<std::vector<double>> ims;
    for (const auto* it : items) ims.push_back(it->pair.image);
    const auto reference = oracle.predict(ims);
    for (std::size_t gi = 0; gi < methods.size(); ++gi) {
      std::vector<std::vector<std::uint8_t>> masks;
      for (const auto* it : items)
        masks.push_back(predict_label(am.model, generators[gi], ck.schedule, it->pair.image,
                                      generators[gi].config().t_feat, derive_seed(it->sample_seed, "label-noise"),
                                      it->prompt));
      align[di][gi] = mean_iou(masks, reference);
    }
  }
  double matched = 0.0, mismatched = 0.0;
  for (std::size_t i = 0; i < methods.size(); ++i)
    for (std::size_t j = 0; j < methods.size(); ++j) (i == j ? matched : mismatched) += align[i][j];
  matched /= static_cast<double>(methods.size());
  if (methods.size() > 1) mismatched /= static_cast<double>(methods.size() * (methods.size() - 1));

  // Few-shot and domain-generalization protocols: a shared baseline phase, then
  // extra iterations either on real data alone or mixed 1:1 with generated pairs.
  const int extra = static_cast<int>(std::lround(e.segmenter.iterations * e.extra_fraction));
  auto protocol = [&](const std::string& tag, const std::vector<LabeledImage>& real,
                      const std::vector<Style>& gen_styles, const std::function<json(const ToySegmenter&)>& score) {
    SegmenterConfig sc = e.segmenter;
    sc.seed = derive_seed(config_.seed, tag + "-init");
    ToySegmenter base(sc);
    train_segmenter(base, real, nullptr, e.segmenter.iterations, derive_seed(config_.seed, tag + "-phase1"));
    json out = json::object();
    {
      ToySegmenter s = base.clone();
      train_segmenter(s, real, nullptr, extra, derive_seed(config_.seed, tag + "-phase2"));
      out["baseline"] = score(s);
    }
    for (const auto& m : methods) {
      ToySegmenter s = base.clone();
      const auto g = pairs_of(m.name, gen_styles);
      const auto log_mix = train_segmenter(s, real, &g, extra, derive_seed(config_.seed, tag + "-phase2"), true);
      json sj = score(s);
      sj["real_fraction"] = log_mix.real_samples + log_mix.generated_samples
                                ? static_cast<double>(log_mix.real_samples) /
                                      static_cast<double>(log_mix.real_samples + log_mix.generated_samples)
                                : 0.0;
      out[m.name] = sj;
    }
    return out;
  };

  log() << "[evaluate] few-shot protocol\n";
  const json fewshot = protocol("fewshot", few_shot, {w.source.style}, [&](const ToySegmenter& s) {
    return json{{"miou", evaluate_segmenter(s, source_test)}};
  });
  log() << "[evaluate] domain-generalization protocol\n";
  const json dg = protocol("dg", source_train, e.dg_conditions, [&](const ToySegmenter& s) {
    json per = json::object();
    double shifted = 0.0;
    for (const auto& r : dg_evaluation(s, domains)) {
      per[r.name] = r.miou;
      if (r.name != w.source.name()) shifted += r.miou;
    }
    return json{{"domains", per}, {"shifted_mean", shifted / static_cast<double>(domains.size() - 1)}};
  });
  for (const auto& m : methods) {
    rows[m.name]["fewshot_miou"] = fewshot[m.name]["miou"];
    rows[m.name]["fewshot_delta"] = fewshot[m.name]["miou"].get<double>() - fewshot["baseline"]["miou"].get<double>();
    rows[m.name]["dg_shifted_mean"] = dg[m.name]["shifted_mean"];
    rows[m.name]["dg_delta"] =
        dg[m.name]["shifted_mean"].get<double>() - dg["baseline"]["shifted_mean"].get<double>();
  }

  json align_j = json::object();
  for (std::size_t i = 0; i < methods.size(); ++i) {
    json row = json::object();
    for (std::size_t j = 0; j < methods.size(); ++j) row[methods[j].name] = align[i][j];
    align_j[methods[i].name] = row;
  }
  const json report = {{"seed", config_.seed},
                       {"ids", ids_},
                       {"classifier_holdout_accuracy", clf_acc},
                       {"oracle_holdout_miou", oracle_manifest.at("oracle_holdout_miou")},
                       {"methods", rows},
                       {"fewshot", fewshot},
                       {"dg", dg},
                       {"alignment_matrix", align_j},
                       {"alignment_matched", matched},
                       {"alignment_mismatched", mismatched}};
  write_text(d / "report.json", report.dump(2) + "\n");

  std::ostringstream mcsv;
  mcsv << "method,mmd,adherence,alignment,memorization_mean,memorization_p5,fewshot_miou,fewshot_delta,"
          "dg_shifted_mean,dg_delta\n";
  for (const auto& m : methods) {
    const json& r = rows[m.name];
    mcsv << m.name << ',' << fmt(r["mmd"]) << ',' << fmt(r["adherence"]) << ',' << fmt(r["alignment"]) << ','
         << fmt(r["memorization_mean"]) << ',' << fmt(r["memorization_p5"]) << ',' << fmt(r["fewshot_miou"]) << ','
         << fmt(r["fewshot_delta"]) << ',' << fmt(r["dg_shifted_mean"]) << ',' << fmt(r["dg_delta"]) << '\n';
  }
  write_text(d / "methods.csv", mcsv.str());
  std::ostringstream dcsv;
  dcsv << "data";
  for (const auto& dom : domains) dcsv << ',' << dom.name;
  dcsv << ",shifted_mean\n";
  std::vector<std::string> names{"baseline"};
  for (const auto& m : methods) names.push_back(m.name);
  for (const auto& n : names) {
    dcsv << n;
    for (const auto& dom : domains) dcsv << ',' << fmt(dg[n]["domains"][dom.name]);
    dcsv << ',' << fmt(dg[n]["shifted_mean"]) << '\n';
  }
  write_text(d / "dg.csv", dcsv.str());
  std::ostringstream acsv;
  acsv << "denoiser\\generator";
  for (const auto& m : methods) acsv << ',' << m.name;
  acsv << '\n';
  for (std::size_t i = 0; i < methods.size(); ++i) {
    acsv << methods[i].name;
    for (double v : align[i]) acsv << ',' << fmt(v);
    acsv << '\n';
  }
  write_text(d / "alignment.csv", acsv.str());
  finish("evaluate", {{"report", "report.json"}});
}

// ---------------------------------------------------------------------------

std::vector<ComparisonRow> compare_runs(const std::vector<ExperimentConfig>& configs, const RunOptions& options) {
  require(!configs.empty(), "compare: no runs given");
  std::vector<ComparisonRow> rows;
  std::vector<Pipeline> runs;
  for (const auto& c : configs) {
    runs.emplace_back(c, options);
    const std::string& world = runs.front().id("world");
    if (runs.back().id("world") != world)
      throw ContractError("compare: runs use different world configurations (" + world + " vs " +
                          runs.back().id("world") + ")");
  }
  for (const Pipeline& p : runs) {
    const ExperimentConfig& c = p.config();
    const json report = p.report();
    for (const auto& m : c.finetune.methods) {
      const json& r = report.at("methods").at(m.name);
      rows.push_back({p.id("evaluate"), c.seed, m.name,
                      {{"mmd", r.at("mmd")},
                       {"adherence", r.at("adherence")},
                       {"alignment", r.at("alignment")},
                       {"memorization", r.at("memorization_mean")},
                       {"fewshot_delta", r.at("fewshot_delta")},
                       {"dg_delta", r.at("dg_delta")}}});
    }
  }
  return rows;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "run,seed,method,mmd,adherence,alignment,memorization,fewshot_delta,dg_delta\n";
  for (const auto& r : rows) {
    os << r.run << ',' << r.seed << ',' << r.method;
    for (const char* k : {"mmd", "adherence", "alignment", "memorization", "fewshot_delta", "dg_delta"})
      os << ',' << fmt(r.metrics.at(k).get<double>());
    os << '\n';
  }
  return os.str();
}

}  // namespace calora
