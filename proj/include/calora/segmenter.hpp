#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "calora/metrics.hpp"
#include "calora/tensor.hpp"
#include "calora/world.hpp"

namespace calora {

struct SegmenterConfig {
  int width = 32;
  int hidden = 64;
  int iterations = 1500;
  int batch = 16;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

/// Stand-alone per-pixel classifier: 4×4 patch tokens, two 3×3 token
/// neighborhood layers, per-patch pixel logits.
class ToySegmenter {
 public:
  explicit ToySegmenter(SegmenterConfig config);

  const SegmenterConfig& config() const { return config_; }
  Tensor logits(const std::vector<const std::vector<double>*>& images) const;  // (B·kPixels × K)
  std::vector<std::uint8_t> predict(const std::vector<double>& image01) const;
  std::vector<std::vector<std::uint8_t>> predict(const std::vector<std::vector<double>>& images) const;
  std::vector<Tensor> parameters() const;
  ToySegmenter clone() const;

  void save(const std::filesystem::path& path) const;
  static ToySegmenter load(const std::filesystem::path& path);

 private:
  SegmenterConfig config_;
  std::vector<Tensor> params_;
};

struct SegmenterTraining {
  std::vector<double> loss_curve;
  std::size_t real_samples = 0;
  std::size_t generated_samples = 0;
};

/// Continues training `seg` for `iterations` steps. With generated data each
/// batch is half real, half generated (batch must be even). The default
/// optimizer state starts fresh.
SegmenterTraining train_segmenter(ToySegmenter& seg, const std::vector<LabeledImage>& real,
                                  const std::vector<LabeledImage>* generated, int iterations,
                                  std::uint64_t seed, bool mix = false);

ToySegmenter train_toy_segmenter(const std::vector<LabeledImage>& real, const std::vector<LabeledImage>* generated,
                                 const SegmenterConfig& config, bool mix = false, SegmenterTraining* log = nullptr);

/// Mean IoU of the segmenter's predictions against the pairs' masks.
double evaluate_segmenter(const ToySegmenter& seg, const std::vector<LabeledImage>& pairs);

/// Pseudo-ground-truth alignment: mean IoU of pair masks against the
/// oracle's prediction on the pair images.
double image_label_alignment(const std::vector<LabeledImage>& pairs, const ToySegmenter& oracle);

struct DomainResult {
  std::string name;
  double miou = 0.0;
  ClassIou iou;
};

struct DomainSet {
  std::string name;
  std::vector<LabeledImage> pairs;
};

std::vector<DomainResult> dg_evaluation(const ToySegmenter& seg, const std::vector<DomainSet>& domains);

// ---------------------------------------------------------------------------

struct StyleClassifierConfig {
  int width = 32;
  int iterations = 600;
  int batch = 32;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

class ToyStyleClassifier {
 public:
  explicit ToyStyleClassifier(StyleClassifierConfig config);

  Tensor logits(const std::vector<const std::vector<double>*>& images) const;  // (B × kNumStyles)
  /// Log-probabilities per style for each image.
  std::vector<std::array<double, kNumStyles>> log_probs(const std::vector<std::vector<double>>& images) const;
  std::vector<Style> predict(const std::vector<std::vector<double>>& images) const;
  std::vector<Tensor> parameters() const;

  bool trained() const { return trained_; }
  void mark_trained() { trained_ = true; }

  void save(const std::filesystem::path& path) const;
  static ToyStyleClassifier load(const std::filesystem::path& path);

 private:
  StyleClassifierConfig config_;
  std::vector<Tensor> params_;
  bool trained_ = false;
};

ToyStyleClassifier train_style_classifier(const std::vector<LabeledImage>& pairs, const StyleClassifierConfig& config);
/// Accuracy of the classifier against the pairs' spec styles.
double style_accuracy(const ToyStyleClassifier& clf, const std::vector<LabeledImage>& pairs);

struct AdherenceResult {
  double accuracy = 0.0;
  double mean_log_prob = 0.0;
  std::size_t n = 0;
};

AdherenceResult prompt_adherence(const std::vector<std::vector<double>>& images, const std::vector<Style>& intended,
                                 const ToyStyleClassifier& clf);

}  // namespace calora
