#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <vector>

#include <json.hpp>

#include "tps/eval.hpp"
#include "tps/rng.hpp"

using namespace tps;

namespace {

BoundingBox bb(double x, double y, double w, double h, int identity = kUnlabeled) {
  BoundingBox b;
  b.x = x;
  b.y = y;
  b.w = w;
  b.h = h;
  b.identity = identity;
  return b;
}

Caption make_caption(int identity, std::size_t scene_index = 0, std::size_t box_index = 0) {
  Caption c;
  c.tokens = {0};
  c.language = Language::synthetic;
  c.identity = identity;
  c.scene_index = scene_index;
  c.box_index = box_index;
  return c;
}

// Deterministic pseudo-embedder: hashes the tensor bytes into a seed and
// draws a unit vector from it.
Tensor hashed_unit(const std::vector<double>& values, std::size_t dim, std::uint64_t salt) {
  std::uint64_t h = 1469598103934665603ULL ^ salt;
  for (double v : values) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(bits));
    h = (h ^ bits) * 1099511628211ULL;
  }
  Rng rng(h);
  Tensor e({dim});
  for (double& x : e.data) x = rng.normal();
  const double n = l2_norm(e);
  for (double& x : e.data) x /= n;
  return e;
}

ImageEmbedder make_image_embedder(std::size_t dim, std::uint64_t salt) {
  return [dim, salt](const Tensor& patch) { return hashed_unit(patch.data, dim, salt); };
}

TextEmbedder make_text_embedder(std::size_t dim, std::uint64_t salt) {
  return [dim, salt](const Caption& c) {
    std::vector<double> key = {static_cast<double>(c.identity),
                               static_cast<double>(c.scene_index),
                               static_cast<double>(c.box_index)};
    for (int t : c.tokens) key.push_back(static_cast<double>(t));
    return hashed_unit(key, dim, salt ^ 0x9e3779b97f4a7c15ULL);
  };
}

// Straight-line re-implementation of the whole protocol, structured
// differently from the library (selection-style suppression, explicit
// comparator sort, per-caption loops).
struct TwinReport {
  double map = 0.0, c1 = 0.0, c5 = 0.0, c10 = 0.0;
  std::size_t gallery_size = 0;
  std::vector<double> aps;  // -1 for excluded queries
};

TwinReport twin_evaluate(const Dataset& d, const Detector& detect, const ImageEmbedder& ei,
                         const TextEmbedder& et, const EvalConfig& cfg) {
  struct Entry {
    std::size_t scene = 0;
    BoundingBox box;
    Tensor emb;
  };
  std::vector<Entry> gal;
  for (std::size_t si = 0; si < d.scenes.size(); ++si) {
    std::vector<Detection> pool = detect(d.scenes[si], d.boxes[si]);
    std::vector<char> alive(pool.size(), 1);
    auto better = [&](std::size_t a, std::size_t b) {
      const Detection& x = pool[a];
      const Detection& y = pool[b];
      if (x.score != y.score) return x.score > y.score;
      if (x.box.x != y.box.x) return x.box.x < y.box.x;
      if (x.box.y != y.box.y) return x.box.y < y.box.y;
      if (x.box.w != y.box.w) return x.box.w < y.box.w;
      if (x.box.h != y.box.h) return x.box.h < y.box.h;
      return a < b;
    };
    while (true) {
      std::size_t best = std::numeric_limits<std::size_t>::max();
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (alive[i] && (best == std::numeric_limits<std::size_t>::max() || better(i, best)))
          best = i;
      if (best == std::numeric_limits<std::size_t>::max()) break;
      alive[best] = 0;
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (alive[i] && iou(pool[i].box, pool[best].box) >= cfg.nms_thresh) alive[i] = 0;
      if (pool[best].score < cfg.score_thresh) continue;
      Entry e;
      e.scene = si;
      e.box = pool[best].box;
      e.emb = ei(crop_resize(d.scenes[si], pool[best].box, cfg.crop_h, cfg.crop_w));
      gal.push_back(std::move(e));
    }
  }
  // Restore scene-order, score-descending gallery order (suppression order
  // above already emits scenes in order and scores descending within one).
  TwinReport rep;
  rep.gallery_size = gal.size();

  std::size_t valid = 0;
  for (const auto& cap : d.captions) {
    const Tensor q = et(cap);
    std::vector<double> sims(gal.size());
    for (std::size_t g = 0; g < gal.size(); ++g) sims[g] = dot(q, gal[g].emb);
    std::vector<std::size_t> order(gal.size());
    for (std::size_t g = 0; g < gal.size(); ++g) order[g] = g;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (sims[a] != sims[b]) return sims[a] > sims[b];
      return a < b;
    });
    std::size_t relevant = 0;
    for (const auto& scene_boxes : d.boxes)
      for (const auto& gt : scene_boxes)
        if (gt.identity == cap.identity) ++relevant;
    if (relevant == 0) {
      rep.aps.push_back(-1.0);
      continue;
    }
    ++valid;
    std::vector<std::vector<char>> claimed(d.boxes.size());
    for (std::size_t si = 0; si < d.boxes.size(); ++si) claimed[si].assign(d.boxes[si].size(), 0);
    double ap = 0.0;
    std::size_t hits = 0;
    std::size_t first_hit = std::numeric_limits<std::size_t>::max();
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const Entry& e = gal[order[pos]];
      bool hit = false;
      for (std::size_t bi = 0; bi < d.boxes[e.scene].size(); ++bi) {
        const auto& gt = d.boxes[e.scene][bi];
        if (gt.identity != cap.identity || claimed[e.scene][bi]) continue;
        if (iou(e.box, gt) >= cfg.iou_thresh) {
          claimed[e.scene][bi] = 1;
          hit = true;
          break;
        }
      }
      if (hit) {
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
        if (first_hit == std::numeric_limits<std::size_t>::max()) first_hit = pos;
      }
    }
    ap /= static_cast<double>(relevant);
    rep.aps.push_back(ap);
    rep.map += ap;
    if (first_hit < 1) rep.c1 += 1.0;
    if (first_hit < 5) rep.c5 += 1.0;
    if (first_hit < 10) rep.c10 += 1.0;
  }
  rep.map /= static_cast<double>(valid);
  rep.c1 /= static_cast<double>(valid);
  rep.c5 /= static_cast<double>(valid);
  rep.c10 /= static_cast<double>(valid);
  return rep;
}

// Three scenes, one box each, pixel level encodes the identity.
Dataset identity_coded_dataset() {
  Dataset d;
  d.num_identities = 3;
  for (int k = 0; k < 3; ++k) {
    SceneImage s;
    s.id = "scene" + std::to_string(k);
    s.camera_id = 0;
    s.pixels = Tensor({3, 32, 32}, 0.1 * static_cast<double>(k + 1));
    d.scenes.push_back(std::move(s));
    d.boxes.push_back({bb(4, 4, 10, 20, k)});
    d.captions.push_back(make_caption(k, static_cast<std::size_t>(k), 0));
  }
  return d;
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("ranking is similarity-descending with index tie-break") {
  const auto order = rank_descending({0.5, 0.7, 0.5});
  REQUIRE(order.size() == 3);
  CHECK(order[0] == 1);
  CHECK(order[1] == 0);
  CHECK(order[2] == 2);

  std::vector<double> sims = {0.1, -0.4, 0.9, 0.3};
  auto base = rank_descending(sims);
  for (double& s : sims) s *= 3.7;  // positive scaling keeps the order
  CHECK(rank_descending(sims) == base);
  CHECK(rank_descending({}).empty());
}

TEST_CASE("average precision worked examples") {
  QueryResult r;
  r.ranking = {0, 1, 2};
  r.correct = {1, 0, 1};
  r.num_relevant = 2;
  CHECK(average_precision(r) == (1.0 + 2.0 / 3.0) / 2.0);

  QueryResult s;
  s.ranking = {0, 1, 2, 3};
  s.correct = {0, 0, 0, 1};
  s.num_relevant = 1;
  CHECK(average_precision(s) == 0.25);

  QueryResult perfect;
  perfect.ranking = {0, 1, 2};
  perfect.correct = {1, 1, 0};
  perfect.num_relevant = 2;
  CHECK(average_precision(perfect) == 1.0);

  QueryResult none;
  none.ranking = {0};
  none.correct = {0};
  none.num_relevant = 0;
  CHECK_THROWS_AS(average_precision(none), Error);
}

TEST_CASE("cmc counts first hits under each rank cut") {
  QueryResult r;
  r.ranking = {0, 1, 2, 3, 4, 5};
  r.correct = {0, 0, 1, 0, 1, 0};
  r.num_relevant = 2;
  const auto c = cmc({r}, {1, 5, 10});
  REQUIRE(c.size() == 3);
  CHECK(c[0] == 0.0);
  CHECK(c[1] == 1.0);
  CHECK(c[2] == 1.0);

  QueryResult excluded;
  excluded.num_relevant = 0;
  CHECK_THROWS_AS(cmc({excluded}, {1, 5, 10}), Error);
  CHECK_THROWS_AS(mean_ap({excluded}), Error);
}

TEST_CASE("each ground-truth box is claimed at most once") {
  Dataset d;
  d.num_identities = 1;
  SceneImage s;
  s.id = "s";
  s.camera_id = 0;
  d.scenes.push_back(s);
  d.boxes.push_back({bb(0, 0, 10, 10, 0)});

  std::vector<GalleryEntry> gallery(2);
  gallery[0].scene_index = 0;
  gallery[0].det.box = bb(0, 0, 10, 10);
  gallery[1].scene_index = 0;
  gallery[1].det.box = bb(1, 0, 10, 10);  // also above the overlap threshold
  REQUIRE(iou(gallery[1].det.box, d.boxes[0][0]) >= 0.5);

  QueryResult r;
  r.ranking = {0, 1};
  match_ranked_boxes(r, gallery, d, 0, 0.5);
  CHECK(r.num_relevant == 1);
  CHECK(r.correct == std::vector<char>{1, 0});

  QueryResult rev;
  rev.ranking = {1, 0};
  match_ranked_boxes(rev, gallery, d, 0, 0.5);
  CHECK(rev.correct == std::vector<char>{1, 0});  // lower-quality box claims first
}

TEST_CASE("gallery construction suppresses and thresholds detections") {
  Dataset d;
  d.num_identities = 1;
  SceneImage s;
  s.id = "s";
  s.camera_id = 0;
  s.pixels = Tensor({3, 40, 40}, 0.5);
  d.scenes.push_back(std::move(s));
  d.boxes.push_back({bb(0, 0, 10, 10, 0)});

  Detector detect = [](const SceneImage&, const std::vector<BoundingBox>&) {
    std::vector<Detection> dets(3);
    dets[0].box = bb(0, 0, 10, 10);
    dets[0].score = 0.9;
    dets[1].box = bb(0, 0, 10, 10);  // duplicate, lower score
    dets[1].score = 0.8;
    dets[2].box = bb(20, 20, 5, 5);  // separate but low confidence
    dets[2].score = 0.3;
    for (auto& det : dets) det.box.score = det.score;
    return dets;
  };
  EvalConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 8;
  const auto gallery = build_gallery(d, detect, make_image_embedder(4, 1), cfg);
  REQUIRE(gallery.size() == 1);
  CHECK(gallery[0].det.score == 0.9);
  CHECK(gallery[0].scene_id == "s");

  ImageEmbedder bad = [](const Tensor&) { return Tensor({4}, 0.4); };  // norm 0.8
  CHECK_THROWS_AS(build_gallery(d, detect, bad, cfg), Error);
}

TEST_CASE("identity-coded corpus retrieves perfectly") {
  const Dataset d = identity_coded_dataset();
  ImageEmbedder ei = [](const Tensor& patch) {
    Tensor e({3});
    const int k = static_cast<int>(std::lround(patch.data[0] / 0.1)) - 1;
    e.data[static_cast<std::size_t>(k)] = 1.0;
    return e;
  };
  TextEmbedder et = [](const Caption& c) {
    Tensor e({3});
    e.data[static_cast<std::size_t>(c.identity)] = 1.0;
    return e;
  };
  EvalConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 8;
  const EvalReport rep = evaluate(d, oracle_detector(), ei, et, cfg);
  CHECK(rep.map == 1.0);
  CHECK(rep.cmc1 == 1.0);
  CHECK(rep.cmc5 == 1.0);
  CHECK(rep.num_queries == 3);
  CHECK(rep.num_excluded == 0);
  CHECK(rep.gallery_size == 3);
  CHECK(rep.num_gt_boxes == 3);
}

TEST_CASE("queries without ground truth are excluded but reported") {
  Dataset d = identity_coded_dataset();
  d.captions.push_back(make_caption(7));  // no identity-7 boxes anywhere
  ImageEmbedder ei = make_image_embedder(4, 2);
  TextEmbedder et = make_text_embedder(4, 2);
  EvalConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 8;
  const EvalReport rep = evaluate(d, oracle_detector(), ei, et, cfg);
  CHECK(rep.num_queries == 3);
  CHECK(rep.num_excluded == 1);
  REQUIRE(rep.per_query_ap.size() == 4);
  CHECK(rep.per_query_ap[3] == -1.0);
  CHECK(rep.results[3].num_relevant == 0);
}

TEST_CASE("pipeline agrees with an independent re-implementation") {
  for (int t = 0; t < 25; ++t) {
    SynthConfig sc;
    sc.num_identities = 3 + (t % 3);
    sc.scenes = 5 + (t % 3);  // always at least one person slot per identity
    sc.persons_per_scene = 1 + (t % 2);
    sc.captions_per_box = 1 + ((t / 2) % 2);
    sc.scene_h = 48;
    sc.scene_w = 48;
    const Dataset d = generate_synthetic(sc, 1000 + static_cast<std::uint64_t>(t));

    JitterParams jp;
    jp.translation_sigma = 0.05;
    jp.scale_sigma = 0.05;
    jp.drop_prob = 0.1;
    jp.spurious_rate = 0.7;
    jp.score_noise = 0.05;
    const Detector detect = jittered_detector(jp, 500 + static_cast<std::uint64_t>(t));
    const ImageEmbedder ei = make_image_embedder(4, static_cast<std::uint64_t>(t));
    const TextEmbedder et = make_text_embedder(4, static_cast<std::uint64_t>(t));
    EvalConfig cfg;
    cfg.crop_h = 12;
    cfg.crop_w = 8;

    const EvalReport rep = evaluate(d, detect, ei, et, cfg);
    const TwinReport twin = twin_evaluate(d, detect, ei, et, cfg);
    CHECK(rep.gallery_size == twin.gallery_size);
    CHECK(rep.map == doctest::Approx(twin.map).epsilon(1e-12));
    CHECK(rep.cmc1 == doctest::Approx(twin.c1).epsilon(1e-12));
    CHECK(rep.cmc5 == doctest::Approx(twin.c5).epsilon(1e-12));
    CHECK(rep.cmc10 == doctest::Approx(twin.c10).epsilon(1e-12));
    REQUIRE(rep.per_query_ap.size() == twin.aps.size());
    for (std::size_t i = 0; i < twin.aps.size(); ++i)
      CHECK(rep.per_query_ap[i] == doctest::Approx(twin.aps[i]).epsilon(1e-12));
  }
}

TEST_CASE("random rankings score at the analytic expectation") {
  // Twenty singleton scenes, two identities; embeddings are i.i.d. random,
  // so each query's ranking is uniform over the gallery.
  Dataset d;
  d.num_identities = 2;
  for (int si = 0; si < 20; ++si) {
    SceneImage s;
    s.id = "g" + std::to_string(si);
    s.camera_id = 0;
    s.pixels = Tensor({3, 24, 24}, static_cast<double>(si + 1) / 21.0);
    d.scenes.push_back(std::move(s));
    d.boxes.push_back({bb(2, 2, 8, 16, si % 2)});
  }
  d.captions.push_back(make_caption(0));
  d.captions.push_back(make_caption(1));

  EvalConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 8;
  double mean = 0.0;
  const int num_seeds = 40;
  for (int seed = 0; seed < num_seeds; ++seed) {
    const EvalReport rep = evaluate(d, oracle_detector(), make_image_embedder(6, 100 + seed),
                                    make_text_embedder(6, 100 + seed), cfg);
    REQUIRE(rep.gallery_size == 20);
    mean += rep.per_query_ap[0] + rep.per_query_ap[1];
  }
  mean /= 2.0 * num_seeds;
  // E[AP] for a uniform ranking of N items with R relevant:
  // (H_N + (R-1)/(N-1) * (N - H_N)) / N.
  const double N = 20, R = 10;
  double harmonic = 0.0;
  for (int i = 1; i <= 20; ++i) harmonic += 1.0 / i;
  const double expected = (harmonic + (R - 1) / (N - 1) * (N - harmonic)) / N;
  CHECK(mean == doctest::Approx(expected).epsilon(0.1));
  CHECK(std::abs(mean - expected) < 0.05);
}

TEST_CASE("evaluation is deterministic") {
  const Dataset d = identity_coded_dataset();
  const ImageEmbedder ei = make_image_embedder(5, 9);
  const TextEmbedder et = make_text_embedder(5, 9);
  EvalConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 8;
  const EvalReport a = evaluate(d, oracle_detector(), ei, et, cfg);
  const EvalReport b = evaluate(d, oracle_detector(), ei, et, cfg);
  CHECK(a.map == b.map);
  REQUIRE(a.results.size() == b.results.size());
  for (std::size_t i = 0; i < a.results.size(); ++i) {
    CHECK(a.results[i].ranking == b.results[i].ranking);
    CHECK(a.results[i].similarity == b.results[i].similarity);
  }
}

TEST_CASE("report files carry the full protocol") {
  namespace fs = std::filesystem;
  const Dataset d = identity_coded_dataset();
  const ImageEmbedder ei = make_image_embedder(5, 3);
  const TextEmbedder et = make_text_embedder(5, 3);
  EvalConfig cfg;
  cfg.crop_h = 8;
  cfg.crop_w = 8;
  const EvalReport rep = evaluate(d, oracle_detector(), ei, et, cfg);

  const fs::path jpath = fs::temp_directory_path() / "tps_eval_report.json";
  write_eval_report(jpath, rep);
  std::ifstream is(jpath);
  nlohmann::json doc;
  is >> doc;
  CHECK(doc["map"].get<double>() == rep.map);
  CHECK(doc["cmc"]["rank1"].get<double>() == rep.cmc1);
  CHECK(doc["num_queries"].get<std::size_t>() == 3);
  CHECK(doc["gallery_size"].get<std::size_t>() == 3);
  CHECK(doc["protocol"]["iou_thresh"].get<double>() == 0.5);
  CHECK(doc["protocol"]["nms_thresh"].get<double>() == 0.7);
  REQUIRE(doc["queries"].size() == 3);
  CHECK(doc["queries"][0].contains("ap"));

  const fs::path cpath = fs::temp_directory_path() / "tps_rankings.csv";
  write_rankings_csv(cpath, rep);
  std::ifstream cs(cpath);
  std::string header;
  std::getline(cs, header);
  CHECK(header == "query,rank,scene,box,similarity,correct");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(cs, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 9);  // 3 queries x 3 gallery entries
}

}  // TEST_SUITE
