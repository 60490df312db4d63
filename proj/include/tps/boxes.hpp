#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tps/dataset.hpp"
#include "tps/tensor.hpp"

namespace tps {

enum class DetectionSource { ground_truth, simulated, external };

struct Detection {
  BoundingBox box;
  double score = 1.0;  // mirrored into box.score by every producer here
  DetectionSource source = DetectionSource::ground_truth;
};

// Intersection over union on continuous (x, y, w, h) areas.
double iou(const BoundingBox& a, const BoundingBox& b);

// Greedy score-descending suppression. Survivors are pairwise below the
// threshold; ties break by (score desc, x, y, w, h, input order).
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold);

// Order-preserving filter keeping score >= min_score.
std::vector<Detection> filter_detections(const std::vector<Detection>& dets, double min_score);

// Bilinear resample of the box region of a channels-first image to
// (out_h, out_w). Output values are convex combinations of the region's
// pixels; cropping the full image at its own size is the identity.
Tensor crop_resize(const Tensor& image, const BoundingBox& box, std::size_t out_h,
                   std::size_t out_w);
Tensor crop_resize(const SceneImage& scene, const BoundingBox& box, std::size_t out_h,
                   std::size_t out_w);

// Detector noise model: drops, center/scale jitter, score degradation tied
// to the induced misalignment, and spurious false boxes.
struct JitterParams {
  double translation_sigma = 0.0;  // fraction of box width/height
  double scale_sigma = 0.0;        // log-scale std
  double drop_prob = 0.0;          // in [0,1)
  double spurious_rate = 0.0;      // expected false boxes per scene
  double score_noise = 0.0;        // score perturbation std
};

// Simulated detector: perturbs ground-truth boxes per `p`. Scores follow
// clamp01(1 - misalignment - noise) so heavier jitter reads as lower
// confidence. Deterministic in (seed, scene id).
std::vector<Detection> jitter_detect(const SceneImage& scene, const std::vector<BoundingBox>& gts,
                                     const JitterParams& p, std::uint64_t seed);

using Detector = std::function<std::vector<Detection>(const SceneImage&,
                                                      const std::vector<BoundingBox>& gts)>;

Detector oracle_detector();
Detector jittered_detector(const JitterParams& p, std::uint64_t seed);

// detections.json: object scene_id -> list of [x, y, w, h, score].
void save_detections(const std::filesystem::path& path,
                     const std::map<std::string, std::vector<Detection>>& per_scene);
std::map<std::string, std::vector<Detection>> load_detections(const std::filesystem::path& path);

}  // namespace tps
