#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "tps/dataset.hpp"
#include "tps/eval.hpp"
#include "tps/objectives.hpp"
#include "tps/optim.hpp"
#include "tps/tpan.hpp"

namespace tps {

// Flat run configuration; serialized as a single-level JSON object with
// exactly these keys. Unknown keys are rejected.
struct RunConfig {
  std::string mode = "tpan";  // baseline | tpan | tian
  std::uint64_t seed = 7;
  std::string corpus;  // corpus root; empty generates the synthetic default

  // synthetic corpus (used when corpus is empty)
  int synth_identities = 20;
  int synth_scenes = 64;
  int synth_persons_per_scene = 3;
  int synth_captions_per_box = 2;
  bool synth_shuffle_phrases = true;
  double synth_occlusion = 0.15;

  // encoder dimensions
  int channels = 32;    // image feature channels C
  int embed_dim = 16;   // joint embedding dimension D
  int text_embed = 16;  // token embedding width
  int crop_h = 48;
  int crop_w = 16;
  int max_caption_len = 128;

  // attention / prototype
  int channel_reduction = 4;
  int spatial_reduction = 3;
  double prototype_lambda = 0.5;

  // losses
  double margin = 0.2;
  double id_weight = 1.0;
  double mh_weight = 2.0;
  double guidance_weight = 1.0;

  // optimization
  double lr = 5e-3;
  int epochs = 80;
  int lr_decay_epoch = 50;  // learning rate falls to lr/10 at this epoch; 0 disables
  int batch_identities = 8;
  int batch_captions = 2;

  // simulated detector
  double translation_sigma = 0.06;
  double scale_sigma = 0.06;
  double drop_prob = 0.03;
  double spurious_rate = 0.25;
  double score_noise = 0.05;

  // evaluation protocol
  double iou_thresh = 0.5;
  double score_thresh = 0.5;
  double nms_thresh = 0.7;
};

RunConfig load_config(const std::filesystem::path& path);
// Applies "key=value" with the same key names and strict value parsing.
void apply_override(RunConfig& cfg, const std::string& assignment);
// Canonical serialized form (sorted keys); config_hash covers exactly this.
std::string config_json(const RunConfig& cfg);
std::uint32_t config_hash(const RunConfig& cfg);
void validate_config(const RunConfig& cfg);
JitterParams jitter_params(const RunConfig& cfg);
EvalConfig eval_config(const RunConfig& cfg);
SynthConfig synth_config(const RunConfig& cfg);

struct TpsModel {
  TpanModel net;
  SharedClassifier classifier;
  GuidanceMode mode = GuidanceMode::tpan;
  std::size_t attn_h = 0, attn_w = 0;

  void collect(std::vector<Parameter*>& out);
};

// Deterministic model assembly from the config and corpus dimensions.
TpsModel build_model(const RunConfig& cfg, std::size_t vocab, std::size_t num_identities);

struct TrainLogRow {
  long step = 0;
  double id_term = 0.0, mh_term = 0.0, guide_term = 0.0, total = 0.0;
};

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log);

// Owns the corpus splits, the model, and the optimizer for one run.
struct Session {
  RunConfig cfg;
  Dataset corpus;
  SplitResult split;
  TpsModel model;
  std::unique_ptr<Adam> opt;
  std::vector<TrainLogRow> log;
  long epoch = 0;
  long prototype_fallbacks = 0;

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;
  Session() = default;
};

std::unique_ptr<Session> make_session(const RunConfig& cfg);

// Full schedule: PK-sampled batches, Eq-style losses per cfg.mode, Adam
// steps, prototype EMA updates after each step (tpan mode only).
void train(Session& s);

EvalReport evaluate_split(Session& s, const Dataset& split_data);

// Checkpoint I/O. Loading requires a model of matching architecture.
void save_checkpoint(const std::filesystem::path& path, const Session& s);
void load_checkpoint(const std::filesystem::path& path, Session& s);

struct ComponentReport {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  std::size_t coords = 0;
  bool pass = false;
};

// Finite-difference sweep over every layer, every loss term, the composite
// objective on a 2-identity micro-batch, and the prototype stop-gradient.
std::vector<ComponentReport> grad_check_all(const RunConfig& cfg, double eps = 1e-5);

// Writes {scene}_{box}_A.pgm/.csv (and _Atarget when guidance is active)
// for every labeled box of the given split.
void export_attention(Session& s, const Dataset& split_data, const std::filesystem::path& dir);

}  // namespace tps
