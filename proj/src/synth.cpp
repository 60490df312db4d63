#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "tps/dataset.hpp"
#include "tps/rng.hpp"

namespace tps {

namespace {

constexpr const char* kDims[4] = {"hair", "torso", "legs", "acc"};

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);  // wrap to [0,1)
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - f * s);
  const double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Each dimension owns a quarter of the hue wheel, so a color read anywhere
// in the crop identifies both the attribute and its value; a pooled color
// summary of the whole figure then suffices to tell identities apart.
// Saturation/value still differ per dimension as a secondary cue.
std::array<double, 3> attribute_color(int dim, int value, int n_values) {
  const double hue =
      (static_cast<double>(dim) + (static_cast<double>(value) + 0.5) / static_cast<double>(n_values)) / 4.0;
  switch (dim) {
    case 0: return hsv_to_rgb(hue, 0.85, 0.95);  // hair
    case 1: return hsv_to_rgb(hue, 0.90, 0.65);  // torso
    case 2: return hsv_to_rgb(hue, 0.55, 0.85);  // legs
    default: return hsv_to_rgb(hue, 1.00, 1.00);  // accessory
  }
}

double placement_overlap(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  require(cfg.num_identities >= 1, "num_identities must be positive");
  require(cfg.scenes >= 1 && cfg.persons_per_scene >= 1, "need at least one scene and one person per scene");
  require(cfg.captions_per_box == 1 || cfg.captions_per_box == 2, "captions_per_box must be 1 or 2");
  require(cfg.scene_h >= 32 && cfg.scene_w >= 32, "scene extent must be at least 32x32");
  require(cfg.hair_values >= 2 && cfg.torso_values >= 2 && cfg.legs_values >= 2 &&
              cfg.accessory_values >= 2,
          "each attribute needs at least 2 values");
  require(static_cast<long>(cfg.hair_values) * cfg.torso_values * cfg.legs_values >=
              cfg.num_identities,
          "attribute space smaller than the requested number of identities");
  require(cfg.accessory_values >= std::max({cfg.hair_values, cfg.torso_values, cfg.legs_values}),
          "accessory_values must be at least the largest other attribute count");
  require(static_cast<long>(cfg.scenes) * cfg.persons_per_scene >= cfg.num_identities,
          "fewer person slots than identities");
  require(cfg.occlusion >= 0.0 && cfg.occlusion <= 0.6, "occlusion must lie in [0, 0.6]");

  Rng rng(derive_seed(seed, "synth"));
  Dataset d;

  // Vocabulary: a base token and a synonym per attribute value, e.g.
  // "torso2" and "torso2b".
  const int n_values[4] = {cfg.hair_values, cfg.torso_values, cfg.legs_values,
                           cfg.accessory_values};
  for (int dim = 0; dim < 4; ++dim)
    for (int v = 0; v < n_values[dim]; ++v) {
      d.vocab.add(std::string(kDims[dim]) + std::to_string(v));
      d.vocab.add(std::string(kDims[dim]) + std::to_string(v) + "b");
    }

  // One unique (hair, torso, legs) triple per identity; the accessory is the
  // sum of the other three modulo its value count, which forces any two
  // identities apart in at least two attributes.
  std::vector<std::array<int, 4>> tuples;
  tuples.reserve(static_cast<std::size_t>(cfg.hair_values * cfg.torso_values * cfg.legs_values));
  for (int h = 0; h < cfg.hair_values; ++h)
    for (int t = 0; t < cfg.torso_values; ++t)
      for (int l = 0; l < cfg.legs_values; ++l)
        tuples.push_back({h, t, l, (h + t + l) % cfg.accessory_values});
  rng.shuffle(tuples);
  tuples.resize(static_cast<std::size_t>(cfg.num_identities));

  // Every identity appears at least once; remaining slots draw uniformly.
  std::vector<int> slots;
  slots.reserve(static_cast<std::size_t>(cfg.scenes * cfg.persons_per_scene));
  for (int i = 0; i < cfg.num_identities; ++i) slots.push_back(i);
  while (slots.size() < static_cast<std::size_t>(cfg.scenes) * cfg.persons_per_scene)
    slots.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_identities))));
  rng.shuffle(slots);

  const double sw = cfg.scene_w, sh = cfg.scene_h;
  std::size_t slot = 0;
  for (int si = 0; si < cfg.scenes; ++si) {
    SceneImage scene;
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%04d", si);
    scene.id = name;
    scene.camera_id = si % 4;
    scene.pixels = Tensor({3, static_cast<std::size_t>(cfg.scene_h),
                           static_cast<std::size_t>(cfg.scene_w)});
    for (double& p : scene.pixels.data) p = 0.45 + 0.1 * rng.uniform();

    std::vector<BoundingBox> boxes;
    for (int pi = 0; pi < cfg.persons_per_scene; ++pi) {
      const int identity = slots[slot++];
      // Roughly 3:1 person boxes; prefer placements that overlap existing
      // people as little as possible.
      BoundingBox best{};
      double best_overlap = 2.0;
      for (int attempt = 0; attempt < 12; ++attempt) {
        BoundingBox b;
        b.h = (0.45 + 0.30 * rng.uniform()) * sh;
        b.w = b.h / 3.0 * (0.85 + 0.30 * rng.uniform());
        b.x = rng.uniform() * (sw - b.w);
        b.y = rng.uniform() * (sh - b.h);
        double worst = 0.0;
        for (const auto& other : boxes) worst = std::max(worst, placement_overlap(b, other));
        if (worst < best_overlap) {
          best_overlap = worst;
          best = b;
        }
        if (worst < 0.25) break;
      }
      best.identity = identity;
      best.score = 1.0;

      const auto& attrs = tuples[static_cast<std::size_t>(identity)];
      const double occ_top = cfg.occlusion > 0.0 ? rng.uniform() * (1.0 - cfg.occlusion) : 2.0;
      const int py0 = static_cast<int>(std::ceil(best.y - 0.5));
      const int py1 = static_cast<int>(std::floor(best.y + best.h - 0.5));
      const int px0 = static_cast<int>(std::ceil(best.x - 0.5));
      const int px1 = static_cast<int>(std::floor(best.x + best.w - 0.5));
      for (int py = std::max(py0, 0); py <= std::min(py1, cfg.scene_h - 1); ++py) {
        const double v = (py + 0.5 - best.y) / best.h;
        for (int px = std::max(px0, 0); px <= std::min(px1, cfg.scene_w - 1); ++px) {
          const double u = (px + 0.5 - best.x) / best.w;
          std::array<double, 3> color;
          if (v < 0.2)
            color = attribute_color(0, attrs[0], cfg.hair_values);
          else if (v < 0.6)
            color = attribute_color(1, attrs[1], cfg.torso_values);
          else
            color = attribute_color(2, attrs[2], cfg.legs_values);
          // Accessory mark: a patch on the right of the torso band.
          if (u >= 0.62 && u < 0.95 && v >= 0.28 && v < 0.45)
            color = attribute_color(3, attrs[3], cfg.accessory_values);
          if (v >= occ_top && v < occ_top + cfg.occlusion) color = {0.5, 0.5, 0.5};
          for (int c = 0; c < 3; ++c) {
            const double noisy = color[static_cast<std::size_t>(c)] + (rng.uniform() - 0.5) * 0.08;
            scene.pixels.data[scene.pixels.idx3(static_cast<std::size_t>(c),
                                                static_cast<std::size_t>(py),
                                                static_cast<std::size_t>(px))] =
                std::clamp(noisy, 0.0, 1.0);
          }
        }
      }
      boxes.push_back(best);
    }
    d.scenes.push_back(std::move(scene));
    d.boxes.push_back(std::move(boxes));
  }

  // Captions, top to bottom: hair, torso, accessory, legs. The first variant
  // uses the base tokens; the second swaps in synonyms and drops one
  // attribute, which still pins down the identity.
  for (std::size_t si = 0; si < d.scenes.size(); ++si) {
    for (std::size_t bi = 0; bi < d.boxes[si].size(); ++bi) {
      const auto& attrs = tuples[static_cast<std::size_t>(d.boxes[si][bi].identity)];
      for (int variant = 0; variant < cfg.captions_per_box; ++variant) {
        const int phrase_dims[4] = {0, 1, 3, 2};  // top-to-bottom reading order
        std::vector<int> phrases(phrase_dims, phrase_dims + 4);
        if (variant == 1) {
          const std::size_t drop = rng.below(4);
          phrases.erase(phrases.begin() + static_cast<long>(drop));
        }
        if (cfg.shuffle_phrases) rng.shuffle(phrases);
        Caption cap;
        cap.language = Language::synthetic;
        cap.scene_index = si;
        cap.box_index = bi;
        cap.identity = d.boxes[si][bi].identity;
        for (int dim : phrases) {
          std::string token = std::string(kDims[dim]) +
                              std::to_string(attrs[static_cast<std::size_t>(dim)]);
          if (variant == 1) token += "b";
          cap.tokens.push_back(d.vocab.id(token));
        }
        d.captions.push_back(std::move(cap));
      }
    }
  }

  d.num_identities = cfg.num_identities;
  d.source_identity.resize(static_cast<std::size_t>(cfg.num_identities));
  for (int i = 0; i < cfg.num_identities; ++i) d.source_identity[static_cast<std::size_t>(i)] = i;
  return d;
}

std::array<int, 4> parse_caption_attributes(const Dataset& d, const Caption& c) {
  std::array<int, 4> attrs{-1, -1, -1, -1};
  for (int tid : c.tokens) {
    require(tid >= 0 && static_cast<std::size_t>(tid) < d.vocab.size(),
            "token id outside vocabulary");
    std::string tok = d.vocab.tokens[static_cast<std::size_t>(tid)];
    if (!tok.empty() && tok.back() == 'b') tok.pop_back();
    for (int dim = 0; dim < 4; ++dim) {
      const std::string prefix = kDims[dim];
      if (tok.size() > prefix.size() && tok.compare(0, prefix.size(), prefix) == 0) {
        // "legs" shares no prefix with the others, so first match wins.
        attrs[static_cast<std::size_t>(dim)] = std::stoi(tok.substr(prefix.size()));
        break;
      }
    }
  }
  return attrs;
}

}  // namespace tps
