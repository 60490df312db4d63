#include "tps/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "tps/rng.hpp"

namespace tps {

using nlohmann::json;

namespace {

// Overlap of [ax, ax+aw] and [bx, bx+bw]. Phrased relative to the leftmost
// interval so coincident intervals overlap by exactly their own extent.
double axis_overlap(double ax, double aw, double bx, double bw) {
  if (ax > bx) {
    std::swap(ax, bx);
    std::swap(aw, bw);
  }
  return std::min(aw - (bx - ax), bw);
}

}  // namespace

double iou(const BoundingBox& a, const BoundingBox& b) {
  require(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0, "iou: invalid box extent");
  const double ix = axis_overlap(a.x, a.w, b.x, b.w);
  const double iy = axis_overlap(a.y, a.h, b.y, b.h);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  require(iou_threshold > 0 && iou_threshold <= 1, "nms: threshold must lie in (0,1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t ia, std::size_t ib) {
    const auto& a = dets[ia];
    const auto& b = dets[ib];
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    if (a.box.y != b.box.y) return a.box.y < b.box.y;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    if (a.box.h != b.box.h) return a.box.h < b.box.h;
    return ia < ib;
  });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(dets[i].box, k.box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

std::vector<Detection> filter_detections(const std::vector<Detection>& dets, double min_score) {
  std::vector<Detection> kept;
  for (const auto& d : dets)
    if (d.score >= min_score) kept.push_back(d);
  return kept;
}

Tensor crop_resize(const Tensor& image, const BoundingBox& box, std::size_t out_h,
                   std::size_t out_w) {
  require(image.rank() == 3, "crop_resize: image must be channels x h x w");
  require(out_h > 0 && out_w > 0, "crop_resize: empty output size");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  BoundingBox b = box;
  b.x = std::max(b.x, 0.0);
  b.y = std::max(b.y, 0.0);
  b.w = std::min(box.x + box.w, static_cast<double>(W)) - b.x;
  b.h = std::min(box.y + box.h, static_cast<double>(H)) - b.y;
  require(b.w > 0 && b.h > 0, "crop_resize: degenerate box after clamping");

  // Pixel-center coordinates of the region covered by the box; sampling is
  // clamped inside so every output is a convex combination of region pixels.
  const double lo_x = std::max(std::floor(b.x), 0.0);
  const double hi_x = std::min(std::ceil(b.x + b.w) - 1.0, static_cast<double>(W - 1));
  const double lo_y = std::max(std::floor(b.y), 0.0);
  const double hi_y = std::min(std::ceil(b.y + b.h) - 1.0, static_cast<double>(H - 1));

  Tensor out({C, out_h, out_w});
  for (std::size_t i = 0; i < out_h; ++i) {
    double sy = b.y + (static_cast<double>(i) + 0.5) * b.h / static_cast<double>(out_h) - 0.5;
    sy = std::clamp(sy, lo_y, hi_y);
    const std::size_t y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, static_cast<std::size_t>(hi_y));
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t j = 0; j < out_w; ++j) {
      double sx = b.x + (static_cast<double>(j) + 0.5) * b.w / static_cast<double>(out_w) - 0.5;
      sx = std::clamp(sx, lo_x, hi_x);
      const std::size_t x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, static_cast<std::size_t>(hi_x));
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < C; ++c) {
        const double v00 = image.data[image.idx3(c, y0, x0)];
        const double v01 = image.data[image.idx3(c, y0, x1)];
        const double v10 = image.data[image.idx3(c, y1, x0)];
        const double v11 = image.data[image.idx3(c, y1, x1)];
        out.data[out.idx3(c, i, j)] = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                      fy * ((1 - fx) * v10 + fx * v11);
      }
    }
  }
  return out;
}

Tensor crop_resize(const SceneImage& scene, const BoundingBox& box, std::size_t out_h,
                   std::size_t out_w) {
  return crop_resize(scene.pixels, box, out_h, out_w);
}

std::vector<Detection> jitter_detect(const SceneImage& scene, const std::vector<BoundingBox>& gts,
                                     const JitterParams& p, std::uint64_t seed) {
  require(p.translation_sigma >= 0 && p.scale_sigma >= 0 && p.spurious_rate >= 0 &&
              p.score_noise >= 0,
          "jitter_detect: negative noise parameter");
  require(p.drop_prob >= 0 && p.drop_prob < 1, "jitter_detect: drop_prob must lie in [0,1)");
  Rng rng(derive_seed(seed, scene.id));
  const double sw = static_cast<double>(scene.pixels.dim(2));
  const double sh = static_cast<double>(scene.pixels.dim(1));

  std::vector<Detection> dets;
  for (const auto& gt : gts) {
    if (p.drop_prob > 0 && rng.uniform() < p.drop_prob) continue;
    BoundingBox b = gt;
    if (p.translation_sigma > 0 || p.scale_sigma > 0 || p.score_noise > 0) {
      const double dx = p.translation_sigma > 0 ? rng.normal() * p.translation_sigma * gt.w : 0.0;
      const double dy = p.translation_sigma > 0 ? rng.normal() * p.translation_sigma * gt.h : 0.0;
      const double fw = p.scale_sigma > 0 ? std::exp(rng.normal() * p.scale_sigma) : 1.0;
      const double fh = p.scale_sigma > 0 ? std::exp(rng.normal() * p.scale_sigma) : 1.0;
      const double cx = gt.x + gt.w / 2 + dx;
      const double cy = gt.y + gt.h / 2 + dy;
      b.w = gt.w * fw;
      b.h = gt.h * fh;
      b.x = cx - b.w / 2;
      b.y = cy - b.h / 2;
      const double x0 = std::max(b.x, 0.0), y0 = std::max(b.y, 0.0);
      const double x1 = std::min(b.x + b.w, sw), y1 = std::min(b.y + b.h, sh);
      if (x1 <= x0 || y1 <= y0) continue;  // jittered clean out of the image
      b.x = x0;
      b.y = y0;
      b.w = x1 - x0;
      b.h = y1 - y0;
    }
    const double misalignment = 1.0 - iou(gt, b);
    const double noise = p.score_noise > 0 ? rng.normal() * p.score_noise : 0.0;
    Detection det;
    det.box = b;
    det.score = std::clamp(1.0 - misalignment - noise, 0.0, 1.0);
    det.box.score = det.score;
    det.source = DetectionSource::simulated;
    dets.push_back(det);
  }

  const std::uint64_t spurious = p.spurious_rate > 0 ? rng.poisson(p.spurious_rate) : 0;
  for (std::uint64_t i = 0; i < spurious; ++i) {
    BoundingBox b;
    b.h = (0.3 + 0.3 * rng.uniform()) * sh;
    b.w = b.h / 3.0 * (0.8 + 0.4 * rng.uniform());
    b.w = std::min(b.w, sw);
    b.x = rng.uniform() * (sw - b.w);
    b.y = rng.uniform() * (sh - b.h);
    b.identity = kUnlabeled;
    Detection det;
    det.box = b;
    det.score = 0.25 + 0.5 * rng.uniform();
    det.box.score = det.score;
    det.source = DetectionSource::simulated;
    dets.push_back(det);
  }
  return dets;
}

Detector oracle_detector() {
  return [](const SceneImage&, const std::vector<BoundingBox>& gts) {
    std::vector<Detection> dets;
    for (const auto& gt : gts) {
      Detection d;
      d.box = gt;
      d.box.score = 1.0;
      d.score = 1.0;
      d.source = DetectionSource::ground_truth;
      dets.push_back(d);
    }
    return dets;
  };
}

Detector jittered_detector(const JitterParams& p, std::uint64_t seed) {
  return [p, seed](const SceneImage& scene, const std::vector<BoundingBox>& gts) {
    return jitter_detect(scene, gts, p, seed);
  };
}

void save_detections(const std::filesystem::path& path,
                     const std::map<std::string, std::vector<Detection>>& per_scene) {
  json doc = json::object();
  for (const auto& [scene_id, dets] : per_scene) {
    json list = json::array();
    for (const auto& d : dets)
      list.push_back(json::array({d.box.x, d.box.y, d.box.w, d.box.h, d.score}));
    doc[scene_id] = std::move(list);
  }
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os << doc.dump(2) << "\n";
  require(os.good(), "failed writing " + path.string());
}

std::map<std::string, std::vector<Detection>> load_detections(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), "missing detections file: " + path.string());
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    fail("malformed detections file " + path.string() + ": " + e.what());
  }
  std::map<std::string, std::vector<Detection>> out;
  try {
    for (const auto& [scene_id, list] : doc.items()) {
      std::vector<Detection> dets;
      for (const auto& jd : list) {
        require(jd.is_array() && jd.size() == 5,
                "malformed detection record in scene '" + scene_id + "' (want [x,y,w,h,score])");
        Detection d;
        d.box.x = jd[0].get<double>();
        d.box.y = jd[1].get<double>();
        d.box.w = jd[2].get<double>();
        d.box.h = jd[3].get<double>();
        d.score = jd[4].get<double>();
        require(d.score >= 0 && d.score <= 1, "detection score outside [0,1] in scene '" + scene_id + "'");
        require(d.box.w > 0 && d.box.h > 0, "invalid box extent in scene '" + scene_id + "'");
        d.box.identity = kUnlabeled;
        d.box.score = d.score;
        d.source = DetectionSource::external;
        dets.push_back(d);
      }
      out.emplace(scene_id, std::move(dets));
    }
  } catch (const json::exception& e) {
    fail("malformed detections file " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace tps
