#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "tps/tensor.hpp"

namespace tps {

constexpr int kUnlabeled = -1;

enum class Language { zh, en, synthetic };

std::string language_name(Language lang);
Language language_from_name(const std::string& name);

struct SceneImage {
  std::string id;
  Tensor pixels;  // channels x height x width, values in [0,1]
  int camera_id = 0;
};

struct BoundingBox {
  double x = 0, y = 0;  // top-left, pixels
  double w = 0, h = 0;
  int identity = kUnlabeled;
  double score = 1.0;  // 1.0 for ground truth
};

struct Caption {
  std::vector<int> tokens;
  Language language = Language::synthetic;
  int identity = kUnlabeled;
  std::size_t scene_index = 0;  // resolved box_ref
  std::size_t box_index = 0;
  std::string raw_text;  // original text when the annotation provided one
};

struct Vocab {
  std::vector<std::string> tokens;               // id -> token
  std::unordered_map<std::string, int> index;    // token -> id

  int add(const std::string& token);
  int id(const std::string& token) const;        // -1 when absent
  std::size_t size() const { return tokens.size(); }
};

struct Dataset {
  std::vector<SceneImage> scenes;
  std::vector<std::vector<BoundingBox>> boxes;  // per scene, annotation order
  std::vector<Caption> captions;
  Vocab vocab;
  int num_identities = 0;
  // Identity ids are re-indexed to contiguous 0..N-1; the annotation file's
  // original ids survive here as metadata.
  std::vector<int> source_identity;

  const SceneImage& scene(std::size_t i) const { return scenes[i]; }
  const BoundingBox& box_of(const Caption& c) const { return boxes[c.scene_index][c.box_index]; }
};

Dataset load_dataset(const std::filesystem::path& root);
void save_dataset(const Dataset& d, const std::filesystem::path& root);

struct ValidationConfig {
  int captions_per_box = 2;
};

struct Violation {
  std::string code;
  std::string message;
  std::string locus;
};

std::vector<Violation> validate_dataset(const Dataset& d, const ValidationConfig& rules);

// Sentence-length histogram: underflow (0,20] plus the published bins
// (20,30] (30,40] (40,50] (50,60] (60,70] (70,inf). Length is tokens for
// synthetic/en captions and characters for zh.
struct StatsReport {
  std::size_t num_scenes = 0;
  std::size_t num_boxes = 0;
  std::size_t num_captions = 0;
  std::size_t num_identities = 0;
  std::array<std::size_t, 7> length_hist{};
  double mean_caption_length = 0.0;
};

StatsReport dataset_stats(const Dataset& d);
std::size_t caption_length(const Caption& c);
std::string stats_table(const StatsReport& r);
std::string stats_json(const StatsReport& r);

struct SplitResult {
  Dataset train;
  Dataset val;  // copy of a random tenth of the train scenes
  Dataset test;
};

// Identity-disjoint train/test split with ~2:1 caption ratio. Boxes of
// out-of-split identities stay in the scenes but are relabeled UNLABELED.
SplitResult split_dataset(const Dataset& d, std::uint64_t seed);

struct SynthConfig {
  int num_identities = 20;
  int scenes = 24;
  int persons_per_scene = 3;
  int captions_per_box = 2;  // 1 or 2
  bool shuffle_phrases = false;
  int hair_values = 3;
  int torso_values = 4;
  int legs_values = 3;
  int accessory_values = 4;
  int scene_h = 96;
  int scene_w = 96;
  double occlusion = 0.0;  // fraction of each box hidden by a gray block
};

// Attribute-coded corpus: each identity is a unique (hair, torso, legs,
// accessory) tuple rendered as stacked color bands; captions list the
// attribute tokens top to bottom. Any two identities differ in at least
// two attributes, so a caption that drops one attribute still determines
// its identity.
Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

// Attribute tuple as encoded in an identity's captions; used by tests and
// the retrieval sanity oracle.
std::array<int, 4> parse_caption_attributes(const Dataset& d, const Caption& c);

}  // namespace tps
