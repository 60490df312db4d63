#include "tps/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace tps {

using nlohmann::json;

std::vector<GalleryEntry> build_gallery(const Dataset& data, const Detector& detect,
                                        const ImageEmbedder& embed, const EvalConfig& cfg) {
  std::vector<GalleryEntry> gallery;
  for (std::size_t si = 0; si < data.scenes.size(); ++si) {
    const auto& scene = data.scenes[si];
    try {
      auto dets = detect(scene, data.boxes[si]);
      dets = nms(dets, cfg.nms_thresh);
      dets = filter_detections(dets, cfg.score_thresh);
      for (const auto& det : dets) {
        GalleryEntry entry;
        entry.scene_index = si;
        entry.scene_id = scene.id;
        entry.det = det;
        entry.embedding = embed(crop_resize(scene, det.box, cfg.crop_h, cfg.crop_w));
        require(std::abs(l2_norm(entry.embedding) - 1.0) < 1e-6,
                "gallery embedding is not unit-norm");
        gallery.push_back(std::move(entry));
      }
    } catch (const Error& e) {
      fail("scene '" + scene.id + "': " + e.what());
    }
  }
  return gallery;
}

std::vector<std::size_t> rank_descending(const std::vector<double>& sims) {
  std::vector<std::size_t> order(sims.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  return order;
}

void match_ranked_boxes(QueryResult& r, const std::vector<GalleryEntry>& gallery,
                        const Dataset& data, int identity, double iou_thresh) {
  r.num_relevant = 0;
  std::vector<std::vector<char>> claimed(data.boxes.size());
  for (std::size_t si = 0; si < data.boxes.size(); ++si)
    claimed[si].assign(data.boxes[si].size(), 0);
  for (const auto& scene_boxes : data.boxes)
    for (const auto& b : scene_boxes)
      if (b.identity == identity) ++r.num_relevant;

  r.correct.assign(r.ranking.size(), 0);
  for (std::size_t pos = 0; pos < r.ranking.size(); ++pos) {
    const auto& entry = gallery[r.ranking[pos]];
    const auto& gts = data.boxes[entry.scene_index];
    for (std::size_t bi = 0; bi < gts.size(); ++bi) {
      if (gts[bi].identity != identity || claimed[entry.scene_index][bi]) continue;
      if (iou(entry.det.box, gts[bi]) >= iou_thresh) {
        claimed[entry.scene_index][bi] = 1;
        r.correct[pos] = 1;
        break;
      }
    }
  }
}

bool is_valid_query(const QueryResult& r) { return r.num_relevant > 0; }

double average_precision(const QueryResult& r) {
  require(r.num_relevant > 0, "average_precision: query has no relevant boxes");
  double ap = 0.0;
  std::size_t hits = 0;
  for (std::size_t pos = 0; pos < r.correct.size(); ++pos) {
    if (!r.correct[pos]) continue;
    ++hits;
    ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
  }
  return ap / static_cast<double>(r.num_relevant);
}

std::vector<double> cmc(const std::vector<QueryResult>& results,
                        const std::vector<std::size_t>& ranks) {
  std::size_t valid = 0;
  std::vector<double> out(ranks.size(), 0.0);
  for (const auto& r : results) {
    if (!is_valid_query(r)) continue;
    ++valid;
    // A query with no correct entry has no hit at any rank; the sentinel
    // must stay above every cutoff even when the gallery itself is small.
    std::size_t first_hit = std::numeric_limits<std::size_t>::max();
    for (std::size_t pos = 0; pos < r.correct.size(); ++pos)
      if (r.correct[pos]) {
        first_hit = pos;
        break;
      }
    for (std::size_t k = 0; k < ranks.size(); ++k)
      if (first_hit < ranks[k]) out[k] += 1.0;
  }
  require(valid > 0, "cmc: no valid queries");
  for (double& v : out) v /= static_cast<double>(valid);
  return out;
}

double mean_ap(const std::vector<QueryResult>& results) {
  double acc = 0.0;
  std::size_t valid = 0;
  for (const auto& r : results) {
    if (!is_valid_query(r)) continue;
    ++valid;
    acc += average_precision(r);
  }
  require(valid > 0, "mean_ap: no valid queries");
  return acc / static_cast<double>(valid);
}

EvalReport evaluate(const Dataset& data, const Detector& detect, const ImageEmbedder& embed_image,
                    const TextEmbedder& embed_text, const EvalConfig& cfg) {
  EvalReport report;
  report.iou_thresh = cfg.iou_thresh;
  report.score_thresh = cfg.score_thresh;
  report.nms_thresh = cfg.nms_thresh;
  report.gallery = build_gallery(data, detect, embed_image, cfg);
  report.gallery_size = report.gallery.size();
  for (const auto& scene_boxes : data.boxes)
    for (const auto& b : scene_boxes)
      if (b.identity != kUnlabeled) ++report.num_gt_boxes;

  for (std::size_t ci = 0; ci < data.captions.size(); ++ci) {
    const auto& caption = data.captions[ci];
    Tensor e_t = embed_text(caption);
    std::vector<double> sims(report.gallery.size());
    for (std::size_t gi = 0; gi < report.gallery.size(); ++gi)
      sims[gi] = dot(e_t, report.gallery[gi].embedding);
    QueryResult r;
    r.query_index = ci;
    r.ranking = rank_descending(sims);
    r.similarity.resize(r.ranking.size());
    for (std::size_t pos = 0; pos < r.ranking.size(); ++pos)
      r.similarity[pos] = sims[r.ranking[pos]];
    match_ranked_boxes(r, report.gallery, data, caption.identity, cfg.iou_thresh);
    report.per_query_ap.push_back(is_valid_query(r) ? average_precision(r) : -1.0);
    report.results.push_back(std::move(r));
  }

  for (const auto& r : report.results)
    is_valid_query(r) ? ++report.num_queries : ++report.num_excluded;
  const std::vector<std::size_t> ranks(cfg.ranks.begin(), cfg.ranks.end());
  const auto c = cmc(report.results, ranks);
  report.cmc1 = c[0];
  report.cmc5 = c[1];
  report.cmc10 = c[2];
  report.map = mean_ap(report.results);
  return report;
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  json doc;
  doc["map"] = report.map;
  doc["cmc"] = {{"rank1", report.cmc1}, {"rank5", report.cmc5}, {"rank10", report.cmc10}};
  doc["num_queries"] = report.num_queries;
  doc["num_excluded"] = report.num_excluded;
  doc["gallery_size"] = report.gallery_size;
  doc["num_gt_boxes"] = report.num_gt_boxes;
  doc["protocol"] = {{"iou_thresh", report.iou_thresh},
                     {"score_thresh", report.score_thresh},
                     {"nms_thresh", report.nms_thresh}};
  json per_query = json::array();
  for (std::size_t i = 0; i < report.per_query_ap.size(); ++i) {
    json q;
    q["query"] = report.results[i].query_index;
    q["num_relevant"] = report.results[i].num_relevant;
    if (report.per_query_ap[i] >= 0.0)
      q["ap"] = report.per_query_ap[i];
    else
      q["excluded"] = true;
    per_query.push_back(std::move(q));
  }
  doc["queries"] = std::move(per_query);
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os << doc.dump(2) << "\n";
  require(os.good(), "failed writing " + path.string());
}

void write_rankings_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os.precision(17);
  os << "query,rank,scene,box,similarity,correct\n";
  for (const auto& r : report.results)
    for (std::size_t pos = 0; pos < r.ranking.size(); ++pos) {
      const auto& entry = report.gallery[r.ranking[pos]];
      os << r.query_index << "," << (pos + 1) << "," << entry.scene_id << "," << entry.det.box.x
         << ":" << entry.det.box.y << ":" << entry.det.box.w << ":" << entry.det.box.h << ","
         << r.similarity[pos] << "," << static_cast<int>(r.correct[pos]) << "\n";
    }
  require(os.good(), "failed writing " + path.string());
}

}  // namespace tps
