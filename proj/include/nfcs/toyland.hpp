#pragma once

#include <array>
#include <string>
#include <vector>

#include "nfcs/decoder_graph.hpp"
#include "nfcs/tensor.hpp"

namespace nfcs {

// Synthetic detection proxy task: seeded shape images, FCOS-style pyramid
// target encoding, the three-term detection loss, the negative-loss reward,
// and a single-threshold AP evaluator.

struct ObjectAnnotation {
  int class_id = 0;
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // pixel box, x2/y2 exclusive

  float area() const { return (x2 - x1) * (y2 - y1); }
};

struct SynthImage {
  Tensor pixels;  // (3,H,W) in [0,1]
  std::vector<ObjectAnnotation> objects;
};

constexpr int kDefaultImageSize = 128;
constexpr int kDefaultClasses = 3;  // disc, square, triangle

std::vector<SynthImage> generate_dataset(uint64_t seed, int n_images,
                                         int image_size = kDefaultImageSize,
                                         int num_classes = kDefaultClasses);

// versioned binary cache (magic NFDS) plus a JSON view of the annotations
void save_dataset(const std::vector<SynthImage>& data, const std::string& path);
std::vector<SynthImage> load_dataset(const std::string& path);
std::string annotations_json(const std::vector<SynthImage>& data);

// Per-level assignment interval for max(l,t,r,b), half-open (lo, hi].
struct LevelRange {
  float lo = 0, hi = 0;
};
std::array<LevelRange, kNumLevels> toy_level_ranges();

struct PyramidTargets {
  struct Level {
    Tensor cls;  // (K,H,W) one-hot
    Tensor reg;  // (4,H,W) distances l,t,r,b in pixels
    Tensor ctr;  // (1,H,W)
    Tensor pos;  // (1,H,W) positive-location mask
    int stride = 0;
  };
  std::array<Level, kNumLevels> levels;
  int num_pos = 0;
};

PyramidTargets encode_targets(const SynthImage& image,
                              const std::array<FeatureSpec, kNumLevels>& levels,
                              const std::array<LevelRange, kNumLevels>& ranges,
                              int num_classes = kDefaultClasses);

struct LossConfig {
  float focal_alpha = 0.25f;
  float focal_gamma = 2.0f;
  float prob_eps = 1e-6f;  // probability clamp guard
};

struct LossTerms {
  double cls = 0, reg = 0, ctr = 0;
  double total() const { return cls + reg + ctr; }
  bool finite() const {
    return std::isfinite(cls) && std::isfinite(reg) && std::isfinite(ctr);
  }
};

struct LossValues {
  TapeF::Value cls = nullptr, reg = nullptr, ctr = nullptr, total = nullptr;
  LossTerms terms() const {
    return {static_cast<double>(cls->value[0]), static_cast<double>(reg->value[0]),
            static_cast<double>(ctr->value[0])};
  }
};

// Loss graph for one image of the prediction batch. Focal classification over
// every location, IoU regression and centerness BCE over positives; all terms
// divided by the positive count (1 for an all-negative image).
LossValues build_losses(TapeF& tape,
                        const std::array<LevelPrediction, kNumLevels>& preds,
                        int batch_index, const PyramidTargets& targets,
                        const LossConfig& cfg = {});

// Negative loss sum over a validation set. Strictly non-positive; doubling
// the set doubles the magnitude.
inline double reward_from_losses(const std::vector<LossTerms>& per_image) {
  double acc = 0;
  for (const LossTerms& t : per_image) acc += t.total();
  return -acc;
}

// ---- toy AP ----

struct Detection {
  int image_id = 0;
  int class_id = 0;
  float score = 0;
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

float box_iou(float ax1, float ay1, float ax2, float ay2, float bx1, float by1,
              float bx2, float by2);

// Decode one image's predictions: score = cls_prob * ctr_prob, per-class
// greedy NMS, boxes clipped to the image.
std::vector<Detection> decode_detections(
    const std::array<LevelPrediction, kNumLevels>& preds, int batch_index,
    int image_id, float score_thresh, float nms_iou, int image_size);

struct ApResult {
  std::vector<double> per_class;  // -1 for classes with no ground truth
  double mean = 0;
};

// 101-point interpolated AP at a single IoU threshold; mean over classes that
// have ground-truth objects.
ApResult evaluate_ap(std::vector<Detection> detections,
                     const std::vector<const SynthImage*>& images,
                     int num_classes, float iou_thresh = 0.5f);

}  // namespace nfcs
