#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tps/boxes.hpp"
#include "tps/dataset.hpp"
#include "tps/tensor.hpp"

namespace tps {

struct EvalConfig {
  double iou_thresh = 0.5;
  double score_thresh = 0.5;
  double nms_thresh = 0.7;
  std::size_t crop_h = 48;
  std::size_t crop_w = 16;
  std::array<std::size_t, 3> ranks{1, 5, 10};
};

struct GalleryEntry {
  std::size_t scene_index = 0;
  std::string scene_id;
  Detection det;
  Tensor embedding;  // unit-norm
};

using ImageEmbedder = std::function<Tensor(const Tensor& patch)>;
using TextEmbedder = std::function<Tensor(const Caption& caption)>;

// detect -> NMS -> score filter -> crop -> embed, per scene, in scene order.
std::vector<GalleryEntry> build_gallery(const Dataset& data, const Detector& detect,
                                        const ImageEmbedder& embed, const EvalConfig& cfg);

struct QueryResult {
  std::size_t query_index = 0;              // caption index in the dataset
  std::vector<std::size_t> ranking;         // gallery indices, best first
  std::vector<double> similarity;           // aligned with ranking
  std::vector<char> correct;                // aligned with ranking
  std::size_t num_relevant = 0;             // GT boxes of the identity in gallery scenes
};

// Similarity-descending permutation with index tie-break.
std::vector<std::size_t> rank_descending(const std::vector<double>& sims);

// Greedy matching down the ranking: a box is correct iff it overlaps a
// not-yet-claimed GT box of the query identity in its own scene at
// IoU >= iou_thresh. Fills `correct` and `num_relevant`.
void match_ranked_boxes(QueryResult& r, const std::vector<GalleryEntry>& gallery,
                        const Dataset& data, int identity, double iou_thresh);

bool is_valid_query(const QueryResult& r);
double average_precision(const QueryResult& r);
// Fraction of valid queries with a hit in the top k, per requested rank.
std::vector<double> cmc(const std::vector<QueryResult>& results,
                        const std::vector<std::size_t>& ranks);
double mean_ap(const std::vector<QueryResult>& results);

struct EvalReport {
  double map = 0.0;
  double cmc1 = 0.0, cmc5 = 0.0, cmc10 = 0.0;
  std::size_t num_queries = 0;   // valid (scored) queries
  std::size_t num_excluded = 0;  // queries with no GT in gallery scenes
  std::size_t gallery_size = 0;  // boxes kept after NMS + score filter
  std::size_t num_gt_boxes = 0;  // labeled GT boxes across gallery scenes
  double iou_thresh = 0.0, score_thresh = 0.0, nms_thresh = 0.0;
  std::vector<QueryResult> results;    // one per caption, in caption order
  std::vector<double> per_query_ap;    // aligned with results; -1 for excluded
  std::vector<GalleryEntry> gallery;
};

EvalReport evaluate(const Dataset& data, const Detector& detect, const ImageEmbedder& embed_image,
                    const TextEmbedder& embed_text, const EvalConfig& cfg);

void write_eval_report(const std::filesystem::path& path, const EvalReport& report);
// Columns: query, rank, scene, box (x:y:w:h), similarity, correct.
void write_rankings_csv(const std::filesystem::path& path, const EvalReport& report);

}  // namespace tps
