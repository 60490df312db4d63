#include "tps/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tps/pfm.hpp"
#include "tps/rng.hpp"

namespace tps {

using nlohmann::json;

std::string language_name(Language lang) {
  switch (lang) {
    case Language::zh: return "zh";
    case Language::en: return "en";
    case Language::synthetic: return "synthetic";
  }
  fail("unreachable language tag");
}

Language language_from_name(const std::string& name) {
  if (name == "zh") return Language::zh;
  if (name == "en") return Language::en;
  if (name == "synthetic") return Language::synthetic;
  fail("unknown language tag '" + name + "'");
}

int Vocab::add(const std::string& token) {
  auto it = index.find(token);
  if (it != index.end()) return it->second;
  const int id = static_cast<int>(tokens.size());
  tokens.push_back(token);
  index.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = index.find(token);
  return it == index.end() ? -1 : it->second;
}

namespace {

std::size_t utf8_codepoints(const std::string& s) {
  std::size_t n = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++n;
  return n;
}

std::vector<std::string> split_whitespace(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

// Clamps a box to the scene; throws on non-positive extent or a box that
// lies entirely outside the image.
BoundingBox clamp_box(double x, double y, double w, double h, int identity, double score,
                      double scene_w, double scene_h, const std::string& locus) {
  require(w > 0 && h > 0, "invalid box extent at " + locus);
  const double x0 = std::max(x, 0.0), y0 = std::max(y, 0.0);
  const double x1 = std::min(x + w, scene_w), y1 = std::min(y + h, scene_h);
  require(x1 > x0 && y1 > y0, "box outside image at " + locus);
  BoundingBox b;
  b.x = x0;
  b.y = y0;
  b.w = x1 - x0;
  b.h = y1 - y0;
  // A box already inside the scene passes through bit-exactly; the edge
  // arithmetic above would otherwise perturb the low bits of w and h.
  if (x >= 0.0 && x + w <= scene_w) {
    b.x = x;
    b.w = w;
  }
  if (y >= 0.0 && y + h <= scene_h) {
    b.y = y;
    b.h = h;
  }
  b.identity = identity;
  b.score = score;
  return b;
}

}  // namespace

Dataset load_dataset(const std::filesystem::path& root) {
  const auto ann_path = root / "annotations.json";
  std::ifstream is(ann_path);
  require(is.good(), "missing annotation file: " + ann_path.string());
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    fail("malformed annotation file " + ann_path.string() + ": " + e.what());
  }

  Dataset d;
  try {
    require(doc.contains("scenes") && doc["scenes"].is_array(),
            "malformed annotation file: missing 'scenes' array");
    for (const auto& js : doc["scenes"]) {
      SceneImage scene;
      scene.id = js.at("id").get<std::string>();
      scene.camera_id = js.value("camera_id", 0);
      scene.pixels = read_pfm(root / js.at("pixels").get<std::string>());
      require(scene.pixels.dim(1) >= 16 && scene.pixels.dim(2) >= 16,
              "scene '" + scene.id + "' smaller than 16x16");
      d.scenes.push_back(std::move(scene));
    }

    // Deterministic ordering: scenes sorted by id, boxes kept in annotation order.
    std::vector<std::size_t> order(d.scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return d.scenes[a].id < d.scenes[b].id; });
    std::vector<SceneImage> sorted;
    sorted.reserve(d.scenes.size());
    for (std::size_t i : order) sorted.push_back(std::move(d.scenes[i]));
    d.scenes = std::move(sorted);
    std::unordered_map<std::string, std::size_t> scene_pos;
    for (std::size_t i = 0; i < d.scenes.size(); ++i) {
      require(scene_pos.emplace(d.scenes[i].id, i).second,
              "duplicate scene id '" + d.scenes[i].id + "'");
    }

    d.boxes.resize(d.scenes.size());
    for (const auto& js : doc["scenes"]) {
      const std::string id = js.at("id").get<std::string>();
      const std::size_t si = scene_pos.at(id);
      const auto& scene = d.scenes[si];
      const double sw = static_cast<double>(scene.pixels.dim(2));
      const double sh = static_cast<double>(scene.pixels.dim(1));
      for (const auto& jb : js.value("boxes", json::array())) {
        require(jb.is_array() && (jb.size() == 5 || jb.size() == 6),
                "malformed box record in scene '" + id + "' (want [x,y,w,h,identity(,score)])");
        const std::string locus = "scene '" + id + "' box " + std::to_string(d.boxes[si].size());
        const double score = jb.size() == 6 ? jb[5].get<double>() : 1.0;
        require(score >= 0.0 && score <= 1.0, "box score outside [0,1] at " + locus);
        d.boxes[si].push_back(clamp_box(jb[0].get<double>(), jb[1].get<double>(),
                                        jb[2].get<double>(), jb[3].get<double>(),
                                        jb[4].get<int>(), score, sw, sh, locus));
      }
    }

    // Materialize before iterating: items() holds a reference, and a
    // temporary from value() would not outlive the loop header.
    const json vocab_doc = doc.value("vocab", json::object());
    for (const auto& [token, id] : vocab_doc.items()) {
      const int tid = id.get<int>();
      require(tid >= 0, "negative vocab id for token '" + token + "'");
      if (d.vocab.tokens.size() <= static_cast<std::size_t>(tid))
        d.vocab.tokens.resize(static_cast<std::size_t>(tid) + 1);
      require(d.vocab.tokens[static_cast<std::size_t>(tid)].empty(),
              "duplicate vocab id " + std::to_string(tid));
      d.vocab.tokens[static_cast<std::size_t>(tid)] = token;
    }
    for (std::size_t i = 0; i < d.vocab.tokens.size(); ++i) {
      require(!d.vocab.tokens[i].empty(), "vocab ids not contiguous: id " + std::to_string(i) + " unused");
      d.vocab.index.emplace(d.vocab.tokens[i], static_cast<int>(i));
    }

    std::size_t ci = 0;
    for (const auto& jc : doc.value("captions", json::array())) {
      const std::string locus = "caption " + std::to_string(ci++);
      Caption cap;
      const std::string scene_id = jc.at("scene_id").get<std::string>();
      auto sp = scene_pos.find(scene_id);
      require(sp != scene_pos.end(), "dangling reference: " + locus + " names unknown scene '" + scene_id + "'");
      cap.scene_index = sp->second;
      cap.box_index = jc.at("box_index").get<std::size_t>();
      require(cap.box_index < d.boxes[cap.scene_index].size(),
              "dangling reference: " + locus + " box_index " + std::to_string(cap.box_index) +
                  " out of range for scene '" + scene_id + "'");
      cap.language = language_from_name(jc.value("language", "synthetic"));
      if (jc.contains("tokens")) {
        for (const auto& jt : jc["tokens"]) {
          const int id = d.vocab.id(jt.get<std::string>());
          require(id >= 0, "unknown token '" + jt.get<std::string>() + "' in " + locus);
          cap.tokens.push_back(id);
        }
      } else if (jc.contains("text")) {
        for (const auto& tok : split_whitespace(jc["text"].get<std::string>())) {
          const int id = d.vocab.id(tok);
          require(id >= 0, "unknown token '" + tok + "' in " + locus);
          cap.tokens.push_back(id);
        }
      } else {
        fail("malformed record: " + locus + " has neither 'text' nor 'tokens'");
      }
      if (jc.contains("text")) cap.raw_text = jc["text"].get<std::string>();
      require(!cap.tokens.empty() && cap.tokens.size() <= 128,
              "caption length out of range (1..128) at " + locus);
      cap.identity = d.box_of(cap).identity;
      d.captions.push_back(std::move(cap));
    }
  } catch (const json::exception& e) {
    fail("malformed annotation file " + ann_path.string() + ": " + e.what());
  }

  // Re-index identities to contiguous 0..N-1; keep the file's ids as metadata.
  std::set<int> labeled;
  for (const auto& scene_boxes : d.boxes)
    for (const auto& b : scene_boxes)
      if (b.identity != kUnlabeled) {
        require(b.identity >= 0, "negative identity id " + std::to_string(b.identity));
        labeled.insert(b.identity);
      }
  d.source_identity.assign(labeled.begin(), labeled.end());
  std::unordered_map<int, int> remap;
  for (std::size_t i = 0; i < d.source_identity.size(); ++i)
    remap.emplace(d.source_identity[i], static_cast<int>(i));
  for (auto& scene_boxes : d.boxes)
    for (auto& b : scene_boxes)
      if (b.identity != kUnlabeled) b.identity = remap.at(b.identity);
  for (auto& c : d.captions)
    if (c.identity != kUnlabeled) c.identity = remap.at(c.identity);
  d.num_identities = static_cast<int>(labeled.size());

  if (doc.contains("num_identities")) {
    const int declared = doc["num_identities"].get<int>();
    require(declared == d.num_identities,
            "identity ids not contiguous: file declares " + std::to_string(declared) +
                " identities but " + std::to_string(d.num_identities) + " distinct labeled ids found");
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  json doc;
  doc["num_identities"] = d.num_identities;
  json scenes = json::array();
  for (std::size_t si = 0; si < d.scenes.size(); ++si) {
    const auto& scene = d.scenes[si];
    json js;
    js["id"] = scene.id;
    js["camera_id"] = scene.camera_id;
    js["pixels"] = scene.id + ".pfm";
    json boxes = json::array();
    for (const auto& b : d.boxes[si]) {
      const int source_id =
          b.identity == kUnlabeled ? kUnlabeled : d.source_identity[static_cast<std::size_t>(b.identity)];
      boxes.push_back(json::array({b.x, b.y, b.w, b.h, source_id}));
    }
    js["boxes"] = std::move(boxes);
    scenes.push_back(std::move(js));
    write_pfm(root / (scene.id + ".pfm"), scene.pixels);
  }
  doc["scenes"] = std::move(scenes);

  json captions = json::array();
  for (const auto& c : d.captions) {
    json jc;
    jc["scene_id"] = d.scenes[c.scene_index].id;
    jc["box_index"] = c.box_index;
    jc["language"] = language_name(c.language);
    json toks = json::array();
    for (int t : c.tokens) toks.push_back(d.vocab.tokens[static_cast<std::size_t>(t)]);
    jc["tokens"] = std::move(toks);
    if (!c.raw_text.empty()) jc["text"] = c.raw_text;
    captions.push_back(std::move(jc));
  }
  doc["captions"] = std::move(captions);

  json vocab = json::object();
  for (std::size_t i = 0; i < d.vocab.tokens.size(); ++i) vocab[d.vocab.tokens[i]] = i;
  doc["vocab"] = std::move(vocab);

  std::ofstream os(root / "annotations.json");
  require(os.good(), "cannot write " + (root / "annotations.json").string());
  os << doc.dump(2) << "\n";
  require(os.good(), "failed writing " + (root / "annotations.json").string());
}

std::vector<Violation> validate_dataset(const Dataset& d, const ValidationConfig& rules) {
  std::vector<Violation> out;
  auto flag = [&](std::string code, std::string message, std::string locus) {
    out.push_back({std::move(code), std::move(message), std::move(locus)});
  };

  require(d.boxes.size() == d.scenes.size(), "validate_dataset: boxes/scenes size mismatch");
  for (std::size_t si = 0; si < d.scenes.size(); ++si) {
    const auto& scene = d.scenes[si];
    const std::string locus = "scene '" + scene.id + "'";
    if (scene.pixels.rank() != 3 || scene.pixels.dim(1) < 16 || scene.pixels.dim(2) < 16)
      flag("scene-extent", "scene smaller than 16x16", locus);
    for (double v : scene.pixels.data)
      if (v < 0.0 || v > 1.0) {
        flag("pixel-range", "pixel value outside [0,1]", locus);
        break;
      }
    const double sw = static_cast<double>(scene.pixels.dim(2));
    const double sh = static_cast<double>(scene.pixels.dim(1));
    for (std::size_t bi = 0; bi < d.boxes[si].size(); ++bi) {
      const auto& b = d.boxes[si][bi];
      const std::string bl = locus + " box " + std::to_string(bi);
      if (b.w <= 0 || b.h <= 0) flag("box-extent", "non-positive box extent", bl);
      if (b.x < 0 || b.y < 0 || b.x + b.w > sw + 1e-9 || b.y + b.h > sh + 1e-9)
        flag("box-extent", "box not within scene", bl);
      if (b.score < 0.0 || b.score > 1.0) flag("box-score", "score outside [0,1]", bl);
      if (b.identity != kUnlabeled && (b.identity < 0 || b.identity >= d.num_identities))
        flag("identity-range", "identity id outside 0..N-1", bl);
    }
  }

  std::map<std::pair<std::size_t, std::size_t>, int> caption_count;
  for (std::size_t ci = 0; ci < d.captions.size(); ++ci) {
    const auto& c = d.captions[ci];
    const std::string locus = "caption " + std::to_string(ci);
    if (c.scene_index >= d.scenes.size() || c.box_index >= d.boxes[c.scene_index].size()) {
      flag("dangling-reference", "caption box_ref does not resolve", locus);
      continue;
    }
    if (c.tokens.empty() || c.tokens.size() > 128)
      flag("caption-length", "caption length outside 1..128", locus);
    for (int t : c.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= d.vocab.size()) {
        flag("token-range", "token id outside vocabulary", locus);
        break;
      }
    const auto& b = d.box_of(c);
    if (b.identity == kUnlabeled)
      flag("unlabeled-captioned", "caption attached to an unlabeled box", locus);
    else if (c.identity != b.identity)
      flag("identity-mismatch", "caption identity disagrees with its box", locus);
    caption_count[{c.scene_index, c.box_index}]++;
  }

  std::vector<int> identity_boxes(static_cast<std::size_t>(std::max(d.num_identities, 0)), 0);
  for (std::size_t si = 0; si < d.boxes.size(); ++si) {
    for (std::size_t bi = 0; bi < d.boxes[si].size(); ++bi) {
      const auto& b = d.boxes[si][bi];
      if (b.identity == kUnlabeled) continue;
      if (b.identity >= 0 && b.identity < d.num_identities)
        identity_boxes[static_cast<std::size_t>(b.identity)]++;
      const int have = caption_count.count({si, bi}) ? caption_count[{si, bi}] : 0;
      if (have != rules.captions_per_box)
        flag("caption-count",
             "labeled box has " + std::to_string(have) + " captions, rule requires " +
                 std::to_string(rules.captions_per_box),
             "scene '" + d.scenes[si].id + "' box " + std::to_string(bi));
    }
  }
  for (int id = 0; id < d.num_identities; ++id)
    if (identity_boxes[static_cast<std::size_t>(id)] == 0)
      flag("identity-gap", "identity has no bounding box", "identity " + std::to_string(id));

  return out;
}

std::size_t caption_length(const Caption& c) {
  // Chinese captions are measured in characters, everything else in tokens.
  if (c.language == Language::zh && !c.raw_text.empty()) return utf8_codepoints(c.raw_text);
  return c.tokens.size();
}

StatsReport dataset_stats(const Dataset& d) {
  StatsReport r;
  r.num_scenes = d.scenes.size();
  for (const auto& sb : d.boxes) r.num_boxes += sb.size();
  r.num_captions = d.captions.size();
  r.num_identities = static_cast<std::size_t>(d.num_identities);
  double total_len = 0;
  for (const auto& c : d.captions) {
    const std::size_t len = caption_length(c);
    total_len += static_cast<double>(len);
    std::size_t bin = 0;
    if (len > 70) bin = 6;
    else if (len > 60) bin = 5;
    else if (len > 50) bin = 4;
    else if (len > 40) bin = 3;
    else if (len > 30) bin = 2;
    else if (len > 20) bin = 1;
    r.length_hist[bin]++;
  }
  r.mean_caption_length = r.num_captions ? total_len / static_cast<double>(r.num_captions) : 0.0;
  return r;
}

std::string stats_table(const StatsReport& r) {
  std::ostringstream os;
  const char* bins[7] = {"(0,20]", "(20,30]", "(30,40]", "(40,50]", "(50,60]", "(60,70]", "(70,inf)"};
  os << "Sentence length distribution\n";
  os << "Length";
  for (const char* b : bins) os << "\t" << b;
  os << "\nNum";
  for (std::size_t n : r.length_hist) os << "\t" << n;
  os << "\n\n";
  os << "scenes\t" << r.num_scenes << "\n";
  os << "boxes\t" << r.num_boxes << "\n";
  os << "captions\t" << r.num_captions << "\n";
  os << "identities\t" << r.num_identities << "\n";
  os << "mean caption length\t" << r.mean_caption_length << "\n";
  return os.str();
}

std::string stats_json(const StatsReport& r) {
  json doc;
  doc["scenes"] = r.num_scenes;
  doc["boxes"] = r.num_boxes;
  doc["captions"] = r.num_captions;
  doc["identities"] = r.num_identities;
  doc["mean_caption_length"] = r.mean_caption_length;
  doc["length_hist"] = {{"(0,20]", r.length_hist[0]},   {"(20,30]", r.length_hist[1]},
                        {"(30,40]", r.length_hist[2]},  {"(40,50]", r.length_hist[3]},
                        {"(50,60]", r.length_hist[4]},  {"(60,70]", r.length_hist[5]},
                        {"(70,inf)", r.length_hist[6]}};
  return doc.dump(2) + "\n";
}

namespace {

// Extracts the scenes whose index is in `keep`, remapping identities in
// `identity_set` to fresh contiguous ids and relabeling the rest UNLABELED.
Dataset subset_by_identities(const Dataset& d, const std::set<int>& identity_set) {
  Dataset out;
  out.vocab = d.vocab;
  std::unordered_map<int, int> remap;
  for (int id : identity_set) {
    const int fresh = static_cast<int>(remap.size());
    remap.emplace(id, fresh);
    out.source_identity.push_back(d.source_identity[static_cast<std::size_t>(id)]);
  }
  out.num_identities = static_cast<int>(identity_set.size());

  std::vector<long> scene_remap(d.scenes.size(), -1);
  for (std::size_t si = 0; si < d.scenes.size(); ++si) {
    bool keep = false;
    for (const auto& b : d.boxes[si])
      if (b.identity != kUnlabeled && identity_set.count(b.identity)) keep = true;
    if (!keep) continue;
    scene_remap[si] = static_cast<long>(out.scenes.size());
    out.scenes.push_back(d.scenes[si]);
    auto boxes = d.boxes[si];
    for (auto& b : boxes)
      b.identity = (b.identity != kUnlabeled && identity_set.count(b.identity))
                       ? remap.at(b.identity)
                       : kUnlabeled;
    out.boxes.push_back(std::move(boxes));
  }
  for (const auto& c : d.captions) {
    if (c.identity == kUnlabeled || !identity_set.count(c.identity)) continue;
    Caption cap = c;
    cap.identity = remap.at(c.identity);
    cap.scene_index = static_cast<std::size_t>(scene_remap[c.scene_index]);
    out.captions.push_back(std::move(cap));
  }
  return out;
}

}  // namespace

SplitResult split_dataset(const Dataset& d, std::uint64_t seed) {
  require(d.num_identities >= 3, "split_dataset: need at least 3 identities, have " +
                                     std::to_string(d.num_identities));

  std::vector<std::size_t> captions_per_identity(static_cast<std::size_t>(d.num_identities), 0);
  std::size_t total_captions = 0;
  for (const auto& c : d.captions)
    if (c.identity != kUnlabeled) {
      captions_per_identity[static_cast<std::size_t>(c.identity)]++;
      ++total_captions;
    }
  require(total_captions > 0, "split_dataset: corpus has no labeled captions");

  std::vector<int> order(static_cast<std::size_t>(d.num_identities));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);

  // Fill train until it holds two thirds of the captions; the remainder is
  // the test side. Identity granularity makes the 2:1 ratio approximate.
  const double target = 2.0 / 3.0 * static_cast<double>(total_captions);
  std::set<int> train_ids, test_ids;
  std::size_t train_captions = 0;
  int last_train = -1;
  for (int id : order) {
    if (static_cast<double>(train_captions) < target) {
      train_ids.insert(id);
      train_captions += captions_per_identity[static_cast<std::size_t>(id)];
      last_train = id;
    } else {
      test_ids.insert(id);
    }
  }
  if (test_ids.empty()) {
    train_ids.erase(last_train);
    test_ids.insert(last_train);
  }

  SplitResult split;
  split.train = subset_by_identities(d, train_ids);
  split.test = subset_by_identities(d, test_ids);

  // Validation: a random tenth of the train scenes (at least one), kept as a
  // monitoring copy with train identity indexing.
  const std::size_t n_train_scenes = split.train.scenes.size();
  if (n_train_scenes > 0) {
    std::vector<std::size_t> scene_order(n_train_scenes);
    for (std::size_t i = 0; i < scene_order.size(); ++i) scene_order[i] = i;
    rng.shuffle(scene_order);
    const std::size_t n_val = std::max<std::size_t>(1, n_train_scenes / 10);
    std::set<std::size_t> val_set(scene_order.begin(), scene_order.begin() + static_cast<long>(n_val));
    Dataset& val = split.val;
    val.vocab = split.train.vocab;
    val.num_identities = split.train.num_identities;
    val.source_identity = split.train.source_identity;
    std::vector<long> remap(n_train_scenes, -1);
    for (std::size_t si = 0; si < n_train_scenes; ++si) {
      if (!val_set.count(si)) continue;
      remap[si] = static_cast<long>(val.scenes.size());
      val.scenes.push_back(split.train.scenes[si]);
      val.boxes.push_back(split.train.boxes[si]);
    }
    for (const auto& c : split.train.captions) {
      if (remap[c.scene_index] < 0) continue;
      Caption cap = c;
      cap.scene_index = static_cast<std::size_t>(remap[c.scene_index]);
      val.captions.push_back(std::move(cap));
    }
  }
  return split;
}

}  // namespace tps
