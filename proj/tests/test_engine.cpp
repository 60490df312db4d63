// End-to-end run orchestration: configuration, training, checkpoints,
// evaluation wiring, attention export, and the gradient-check sweep.
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tps/boxes.hpp"
#include "tps/common.hpp"
#include "tps/dataset.hpp"
#include "tps/engine.hpp"
#include "tps/tpan.hpp"

using namespace tps;
namespace fs = std::filesystem;

namespace {

// Small dimensions so sessions train in milliseconds: 16x8 crops leave a
// 2x1 attention grid, and the synthetic corpus holds 8 scenes of 2 people.
RunConfig tiny_config() {
  RunConfig cfg;
  cfg.mode = "tpan";
  cfg.seed = 11;
  cfg.synth_identities = 6;
  cfg.synth_scenes = 8;
  cfg.synth_persons_per_scene = 2;
  cfg.synth_captions_per_box = 2;
  cfg.channels = 8;
  cfg.embed_dim = 8;
  cfg.text_embed = 8;
  cfg.crop_h = 16;
  cfg.crop_w = 8;
  cfg.max_caption_len = 16;
  cfg.channel_reduction = 4;
  cfg.spatial_reduction = 2;
  cfg.id_weight = 1.0;
  cfg.mh_weight = 1.0;
  cfg.guidance_weight = 1.0;
  cfg.epochs = 2;
  cfg.lr_decay_epoch = 0;
  cfg.batch_identities = 2;
  cfg.batch_captions = 1;
  return cfg;
}

fs::path test_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tps_engine_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "<no error thrown>";
}

void append_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

void append_record(std::string& out, const std::string& name, const std::vector<double>& values) {
  append_u32(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  append_u32(out, 1);
  append_u32(out, static_cast<std::uint32_t>(values.size()));
  out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

std::size_t count_labeled_boxes(const Dataset& d) {
  std::size_t n = 0;
  for (const auto& per_scene : d.boxes)
    for (const auto& b : per_scene)
      if (b.identity != kUnlabeled) ++n;
  return n;
}

std::size_t count_suffix(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() >= suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      ++n;
  }
  return n;
}

}  // namespace

TEST_SUITE("engine") {

TEST_CASE("config serializes to a stable sorted json document") {
  RunConfig cfg;
  const std::string text = config_json(cfg);
  REQUIRE(!text.empty());
  CHECK(text.back() == '\n');

  const nlohmann::json doc = nlohmann::json::parse(text);
  REQUIRE(doc.is_object());
  CHECK(doc.size() == 35);
  CHECK(doc.at("mode").get<std::string>() == "tpan");
  CHECK(doc.at("seed").get<std::uint64_t>() == 7);
  CHECK(doc.at("embed_dim").get<int>() == 16);
  CHECK(doc.at("crop_h").get<int>() == 48);
  CHECK(doc.at("crop_w").get<int>() == 16);
  CHECK(doc.at("nms_thresh").get<double>() == 0.7);
  CHECK(doc.at("corpus").get<std::string>().empty());

  // nlohmann objects iterate alphabetically, so the dump itself is canonical;
  // spot-check the order in the raw text.
  CHECK(text.find("\"batch_captions\"") < text.find("\"batch_identities\""));
  CHECK(text.find("\"batch_identities\"") < text.find("\"channels\""));
  CHECK(text.find("\"seed\"") < text.find("\"spatial_reduction\""));

  // Identical configs hash identically; any field change moves the hash.
  CHECK(config_hash(cfg) == config_hash(RunConfig{}));
  RunConfig other = cfg;
  other.lr = 1e-3;
  CHECK(config_hash(other) != config_hash(cfg));
  other = cfg;
  other.mode = "tian";
  CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("config files round trip through load_config") {
  const fs::path dir = test_dir("config_io");
  RunConfig cfg = tiny_config();
  cfg.margin = 0.35;
  cfg.synth_shuffle_phrases = true;

  const fs::path path = dir / "run.json";
  {
    std::ofstream os(path);
    os << config_json(cfg);
  }
  const RunConfig loaded = load_config(path);
  CHECK(config_json(loaded) == config_json(cfg));
  CHECK(config_hash(loaded) == config_hash(cfg));

  // A partial file keeps defaults for the rest.
  const fs::path partial = dir / "partial.json";
  write_bytes(partial, "{\"mode\": \"baseline\", \"epochs\": 3}\n");
  const RunConfig part = load_config(partial);
  CHECK(part.mode == "baseline");
  CHECK(part.epochs == 3);
  CHECK(part.embed_dim == RunConfig{}.embed_dim);

  const fs::path bogus = dir / "bogus.json";
  write_bytes(bogus, "{\"bogus\": 1}\n");
  CHECK(error_message([&] { load_config(bogus); }) == "unknown config key 'bogus'");

  const fs::path broken = dir / "broken.json";
  write_bytes(broken, "{ not json");
  CHECK(error_message([&] { load_config(broken); }).find("malformed config file") == 0);

  const fs::path arr = dir / "arr.json";
  write_bytes(arr, "[1, 2]\n");
  CHECK(error_message([&] { load_config(arr); }) == "config file must hold a flat JSON object");

  CHECK(error_message([&] { load_config(dir / "missing.json"); }).find("missing config file") == 0);
}

TEST_CASE("command line overrides parse typed values") {
  RunConfig cfg;
  apply_override(cfg, "lr=0.001");
  CHECK(cfg.lr == 0.001);
  apply_override(cfg, "epochs=3");
  CHECK(cfg.epochs == 3);
  apply_override(cfg, "mode=tian");  // bare string, not quoted json
  CHECK(cfg.mode == "tian");
  apply_override(cfg, "synth_shuffle_phrases=true");
  CHECK(cfg.synth_shuffle_phrases == true);
  apply_override(cfg, "corpus=/data/corpus");
  CHECK(cfg.corpus == "/data/corpus");
  apply_override(cfg, "margin=0.5");
  CHECK(cfg.margin == 0.5);

  CHECK(error_message([&] { apply_override(cfg, "lr"); }) ==
        "override must look like key=value, got 'lr'");
  CHECK(error_message([&] { apply_override(cfg, "=3"); }) ==
        "override must look like key=value, got '=3'");
  CHECK(error_message([&] { apply_override(cfg, "bogus=1"); }) == "unknown config key 'bogus'");
  CHECK(error_message([&] { apply_override(cfg, "lr=abc"); }).find("config field 'lr'") == 0);
}

TEST_CASE("invalid configurations are rejected with specific messages") {
  const RunConfig base = tiny_config();
  CHECK_NOTHROW(validate_config(base));
  CHECK_NOTHROW(validate_config(RunConfig{}));

  auto reject = [&](auto mutate, const std::string& fragment) {
    RunConfig c = base;
    mutate(c);
    const std::string msg = error_message([&] { validate_config(c); });
    INFO("message: ", msg, " expected fragment: ", fragment);
    CHECK(msg.find(fragment) != std::string::npos);
  };

  reject([](RunConfig& c) { c.mode = "bogus"; }, "mode");
  reject([](RunConfig& c) { c.channels = 0; }, "feature dimensions must be positive");
  reject([](RunConfig& c) { c.embed_dim = 0; }, "feature dimensions must be positive");
  reject([](RunConfig& c) { c.crop_h = 7; }, "crop size must be at least 8x8");
  reject([](RunConfig& c) { c.max_caption_len = 0; }, "max_caption_len must be positive");
  reject([](RunConfig& c) { c.channel_reduction = 5; }, "channel_reduction must divide embed_dim");
  reject(
      [](RunConfig& c) {
        c.crop_h = 8;
        c.crop_w = 8;
      },
      "crop size leaves no spatial extent to attend over");
  reject([](RunConfig& c) { c.prototype_lambda = 1.0; }, "prototype_lambda must lie in [0,1)");
  reject([](RunConfig& c) { c.prototype_lambda = -0.1; }, "prototype_lambda must lie in [0,1)");
  reject([](RunConfig& c) { c.margin = -0.01; }, "margin must be non-negative");
  reject([](RunConfig& c) { c.lr = 0.0; }, "learning rate must be positive");
  reject([](RunConfig& c) { c.epochs = -1; }, "epochs must be non-negative");
  reject([](RunConfig& c) { c.lr_decay_epoch = -1; }, "lr_decay_epoch must be non-negative");
  reject([](RunConfig& c) { c.batch_identities = 1; },
         "need at least 2 identities per batch for the hinge loss");
  reject([](RunConfig& c) { c.batch_captions = 0; }, "batch_captions must be positive");
  reject([](RunConfig& c) { c.translation_sigma = -0.1; },
         "detector noise parameters must be non-negative");
  reject([](RunConfig& c) { c.drop_prob = 1.0; }, "drop_prob must lie in [0,1)");
  reject([](RunConfig& c) { c.iou_thresh = 0.0; }, "iou_thresh must lie in (0,1]");
  reject([](RunConfig& c) { c.score_thresh = 1.5; }, "score_thresh must lie in [0,1]");
  reject([](RunConfig& c) { c.nms_thresh = 1.5; }, "nms_thresh must lie in (0,1]");

  // Divisibility message names the actual attention extent (48x16 -> 6x2).
  RunConfig c = RunConfig{};
  c.spatial_reduction = 5;
  CHECK(error_message([&] { validate_config(c); }) ==
        "spatial_reduction must divide the attention extent H*W = 12");
}

TEST_CASE("adapter structs mirror the run configuration") {
  RunConfig cfg = tiny_config();
  cfg.translation_sigma = 0.11;
  cfg.scale_sigma = 0.22;
  cfg.drop_prob = 0.33;
  cfg.spurious_rate = 0.44;
  cfg.score_noise = 0.55;
  cfg.iou_thresh = 0.6;
  cfg.score_thresh = 0.25;
  cfg.nms_thresh = 0.8;

  const JitterParams jp = jitter_params(cfg);
  CHECK(jp.translation_sigma == 0.11);
  CHECK(jp.scale_sigma == 0.22);
  CHECK(jp.drop_prob == 0.33);
  CHECK(jp.spurious_rate == 0.44);
  CHECK(jp.score_noise == 0.55);

  const EvalConfig ec = eval_config(cfg);
  CHECK(ec.iou_thresh == 0.6);
  CHECK(ec.score_thresh == 0.25);
  CHECK(ec.nms_thresh == 0.8);
  CHECK(ec.crop_h == 16);
  CHECK(ec.crop_w == 8);

  const SynthConfig sc = synth_config(cfg);
  CHECK(sc.num_identities == 6);
  CHECK(sc.scenes == 8);
  CHECK(sc.persons_per_scene == 2);
  CHECK(sc.captions_per_box == 2);
  CHECK(sc.shuffle_phrases == cfg.synth_shuffle_phrases);
  CHECK(sc.occlusion == cfg.synth_occlusion);
}

TEST_CASE("model construction is seeded and sized by the config") {
  const RunConfig tiny = tiny_config();
  TpsModel a = build_model(tiny, 30, 6);
  CHECK(a.attn_h == 2);
  CHECK(a.attn_w == 1);
  CHECK(a.mode == GuidanceMode::tpan);
  CHECK(a.net.prototypes.size() == 6);

  TpsModel wide = build_model(RunConfig{}, 30, 6);
  CHECK(wide.attn_h == 6);
  CHECK(wide.attn_w == 2);

  // Same seed, same weights, bit for bit.
  TpsModel b = build_model(tiny, 30, 6);
  std::vector<Parameter*> pa, pb;
  a.collect(pa);
  b.collect(pb);
  REQUIRE(pa.size() == pb.size());
  REQUIRE(!pa.empty());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value.data == pb[i]->value.data);
  }

  // A different seed must move at least one weight.
  RunConfig reseeded = tiny;
  reseeded.seed = 12;
  TpsModel c = build_model(reseeded, 30, 6);
  std::vector<Parameter*> pc;
  c.collect(pc);
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
    any_diff = pa[i]->value.data != pc[i]->value.data;
  CHECK(any_diff);

  CHECK_THROWS_AS(build_model(tiny, 0, 6), Error);
  CHECK_THROWS_AS(build_model(tiny, 30, 0), Error);
}

TEST_CASE("training logs weighted loss terms in step order") {
  RunConfig cfg = tiny_config();
  auto s = make_session(cfg);
  REQUIRE(s->split.train.captions.size() >= 2);
  train(*s);

  const std::size_t batch = static_cast<std::size_t>(cfg.batch_identities) *
                            static_cast<std::size_t>(cfg.batch_captions);
  const std::size_t steps_per_epoch =
      std::max<std::size_t>(1, s->split.train.captions.size() / batch);
  REQUIRE(s->log.size() == static_cast<std::size_t>(cfg.epochs) * steps_per_epoch);
  CHECK(s->epoch == cfg.epochs);

  for (std::size_t i = 0; i < s->log.size(); ++i) {
    const TrainLogRow& row = s->log[i];
    CHECK(row.step == static_cast<long>(i) + 1);
    CHECK(std::isfinite(row.total));
    CHECK(row.id_term >= 0.0);
    CHECK(row.mh_term >= 0.0);
    CHECK(row.guide_term >= 0.0);
    CHECK(row.total == row.id_term + row.mh_term + row.guide_term);
  }

  // Scaling the loss weights scales the logged terms of the first step
  // exactly (power-of-two factors, identical model and batch before any
  // update has been applied).
  RunConfig weighted = cfg;
  weighted.id_weight = 0.5;
  weighted.mh_weight = 2.0;
  weighted.guidance_weight = 0.25;
  auto sw = make_session(weighted);
  train(*sw);
  REQUIRE(!sw->log.empty());
  CHECK(sw->log[0].id_term == 0.5 * s->log[0].id_term);
  CHECK(sw->log[0].mh_term == 2.0 * s->log[0].mh_term);
  CHECK(sw->log[0].guide_term == 0.25 * s->log[0].guide_term);

  // The CSV log round-trips the header and one row per step.
  const fs::path dir = test_dir("train_log");
  const fs::path log_path = dir / "train_log.csv";
  write_train_log(log_path, s->log);
  std::ifstream is(log_path);
  std::string line;
  REQUIRE(std::getline(is, line));
  CHECK(line == "step,id,mh,guide,total");
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (rows == 0) CHECK(line.rfind("1,", 0) == 0);
    ++rows;
  }
  CHECK(rows == s->log.size());
}

TEST_CASE("a short run on the default corpus reduces the training loss") {
  RunConfig cfg;  // default corpus and model, shortened schedule
  cfg.epochs = 8;
  cfg.lr_decay_epoch = 0;
  auto s = make_session(cfg);
  train(*s);
  REQUIRE(!s->log.empty());

  const std::size_t steps_per_epoch = s->log.size() / static_cast<std::size_t>(cfg.epochs);
  REQUIRE(steps_per_epoch >= 1);
  auto epoch_mean = [&](std::size_t e) {
    double sum = 0.0;
    for (std::size_t i = 0; i < steps_per_epoch; ++i) sum += s->log[e * steps_per_epoch + i].total;
    return sum / static_cast<double>(steps_per_epoch);
  };
  CHECK(s->log.back().total < s->log.front().total);
  CHECK(epoch_mean(static_cast<std::size_t>(cfg.epochs) - 1) < epoch_mean(0));
}

TEST_CASE("baseline mode never touches the prototype table") {
  RunConfig cfg = tiny_config();
  cfg.mode = "baseline";
  auto s = make_session(cfg);
  train(*s);

  const PrototypeTable& tbl = s->model.net.prototypes;
  for (std::size_t i = 0; i < tbl.size(); ++i) CHECK(!tbl.is_initialized(i));
  for (double v : tbl.P.data) CHECK(v == 0.0);
  CHECK(s->prototype_fallbacks == 0);
  for (const TrainLogRow& row : s->log) CHECK(row.guide_term == 0.0);
}

TEST_CASE("guided modes populate guidance terms and prototypes") {
  RunConfig cfg = tiny_config();
  auto s = make_session(cfg);
  train(*s);

  // Every identity sampled at least once leaves its prototype row touched,
  // and the first visit to each identity had to fall back.
  const PrototypeTable& tbl = s->model.net.prototypes;
  bool any_touched = false;
  for (std::size_t i = 0; i < tbl.size(); ++i) any_touched = any_touched || tbl.is_initialized(i);
  CHECK(any_touched);
  CHECK(s->prototype_fallbacks > 0);

  double max_guide = 0.0;
  for (const TrainLogRow& row : s->log) max_guide = std::max(max_guide, row.guide_term);
  CHECK(max_guide > 0.0);

  // tian guides against the caption feature and leaves prototypes alone.
  RunConfig tc = tiny_config();
  tc.mode = "tian";
  auto st = make_session(tc);
  train(*st);
  const PrototypeTable& ttbl = st->model.net.prototypes;
  for (std::size_t i = 0; i < ttbl.size(); ++i) CHECK(!ttbl.is_initialized(i));
  CHECK(st->prototype_fallbacks == 0);
  double tian_guide = 0.0;
  for (const TrainLogRow& row : st->log) tian_guide = std::max(tian_guide, row.guide_term);
  CHECK(tian_guide > 0.0);
}

TEST_CASE("identical runs write byte-identical checkpoints") {
  const fs::path dir = test_dir("deterministic");
  const RunConfig cfg = tiny_config();

  auto a = make_session(cfg);
  train(*a);
  save_checkpoint(dir / "a.ckpt", *a);

  auto b = make_session(cfg);
  train(*b);
  save_checkpoint(dir / "b.ckpt", *b);

  REQUIRE(a->log.size() == b->log.size());
  for (std::size_t i = 0; i < a->log.size(); ++i) {
    CHECK(a->log[i].id_term == b->log[i].id_term);
    CHECK(a->log[i].mh_term == b->log[i].mh_term);
    CHECK(a->log[i].guide_term == b->log[i].guide_term);
    CHECK(a->log[i].total == b->log[i].total);
  }
  const std::string bytes_a = read_bytes(dir / "a.ckpt");
  const std::string bytes_b = read_bytes(dir / "b.ckpt");
  REQUIRE(!bytes_a.empty());
  CHECK(bytes_a == bytes_b);
  CHECK(bytes_a.compare(0, 4, "TPAN") == 0);
}

TEST_CASE("checkpoint round trip restores the full session state") {
  const fs::path dir = test_dir("roundtrip");
  const RunConfig cfg = tiny_config();

  auto trained = make_session(cfg);
  train(*trained);
  const fs::path ck = dir / "trained.ckpt";
  save_checkpoint(ck, *trained);

  auto fresh = make_session(cfg);
  CHECK_NOTHROW(load_checkpoint(ck, *fresh));
  CHECK(fresh->epoch == trained->epoch);

  // Re-saving the loaded session reproduces the original file byte for byte
  // (same params, prototypes, optimizer moments, and step counter).
  const fs::path ck2 = dir / "reloaded.ckpt";
  save_checkpoint(ck2, *fresh);
  CHECK(read_bytes(ck) == read_bytes(ck2));

  // Forward parity on a real crop from the test split.
  const Dataset& te = trained->split.test;
  REQUIRE(!te.captions.empty());
  const Caption& cap = te.captions[0];
  const Tensor patch = crop_resize(te.scene(cap.scene_index), te.box_of(cap),
                                   static_cast<std::size_t>(cfg.crop_h),
                                   static_cast<std::size_t>(cfg.crop_w));
  const Tensor ea = tpan_forward(trained->model.net, patch, GuidanceMode::baseline, -1, nullptr).e_i;
  const Tensor eb = tpan_forward(fresh->model.net, patch, GuidanceMode::baseline, -1, nullptr).e_i;
  CHECK(ea.data == eb.data);
  const Tensor ta = trained->model.net.text_encoder.forward(cap.tokens);
  const Tensor tb = fresh->model.net.text_encoder.forward(cap.tokens);
  CHECK(ta.data == tb.data);
}

TEST_CASE("corrupt checkpoints are rejected with precise errors") {
  const fs::path dir = test_dir("corrupt");
  const RunConfig cfg = tiny_config();
  auto s = make_session(cfg);
  const fs::path good = dir / "good.ckpt";
  save_checkpoint(good, *s);
  const std::string bytes = read_bytes(good);
  REQUIRE(bytes.size() > 16);

  auto fresh = [&] { return make_session(cfg); };

  const fs::path bad_magic = dir / "bad_magic.ckpt";
  write_bytes(bad_magic, "NOPE" + bytes.substr(4));
  CHECK(error_message([&] { load_checkpoint(bad_magic, *fresh()); }).find("not a checkpoint") == 0);

  const fs::path stub = dir / "stub.ckpt";
  write_bytes(stub, "TP");
  CHECK(error_message([&] { load_checkpoint(stub, *fresh()); }).find("not a checkpoint") == 0);

  const fs::path cut = dir / "cut.ckpt";
  write_bytes(cut, bytes.substr(0, bytes.size() - 5));
  CHECK(error_message([&] { load_checkpoint(cut, *fresh()); }).find("truncated checkpoint") == 0);

  const fs::path short_header = dir / "short_header.ckpt";
  write_bytes(short_header, bytes.substr(0, 6));
  CHECK(error_message([&] { load_checkpoint(short_header, *fresh()); })
            .find("truncated checkpoint") == 0);

  const fs::path versioned = dir / "versioned.ckpt";
  std::string v2 = bytes;
  v2[4] = 2;  // little-endian u32 version field right after the magic
  write_bytes(versioned, v2);
  CHECK(error_message([&] { load_checkpoint(versioned, *fresh()); }) ==
        "unsupported checkpoint version 2");

  const fs::path empty = dir / "empty.ckpt";
  std::string header = bytes.substr(0, 8);  // magic + version only
  write_bytes(empty, header);
  CHECK(error_message([&] { load_checkpoint(empty, *fresh()); }) ==
        "checkpoint missing tensor '__meta.config_hash'");

  const fs::path dup = dir / "dup.ckpt";
  std::string dup_bytes = header;
  append_record(dup_bytes, "x", {1.0});
  append_record(dup_bytes, "x", {2.0});
  write_bytes(dup, dup_bytes);
  CHECK(error_message([&] { load_checkpoint(dup, *fresh()); }) ==
        "duplicate checkpoint record 'x'");

  const fs::path extra = dir / "extra.ckpt";
  std::string extra_bytes = bytes;
  append_record(extra_bytes, "zzz", {3.0});
  write_bytes(extra, extra_bytes);
  CHECK(error_message([&] { load_checkpoint(extra, *fresh()); }) ==
        "unexpected checkpoint record 'zzz'");

  CHECK(error_message([&] { load_checkpoint(dir / "missing.ckpt", *fresh()); })
            .find("missing checkpoint file") == 0);

  // Architecture mismatch: a checkpoint from a narrower model cannot load.
  RunConfig narrow = cfg;
  narrow.embed_dim = 4;
  auto ns = make_session(narrow);
  const fs::path nck = dir / "narrow.ckpt";
  save_checkpoint(nck, *ns);
  CHECK(error_message([&] { load_checkpoint(nck, *fresh()); })
            .find("checkpoint tensor shape mismatch") == 0);
}

TEST_CASE("config hash mismatch warns but still loads matching shapes") {
  const fs::path dir = test_dir("hash_warn");
  RunConfig cfg = tiny_config();
  auto trained = make_session(cfg);
  train(*trained);
  const fs::path ck = dir / "trained.ckpt";
  save_checkpoint(ck, *trained);

  RunConfig tweaked = cfg;
  tweaked.lr = 1e-3;  // same architecture, different hash
  auto other = make_session(tweaked);
  CHECK_NOTHROW(load_checkpoint(ck, *other));

  std::vector<Parameter*> pt, po;
  trained->model.collect(pt);
  other->model.collect(po);
  REQUIRE(pt.size() == po.size());
  for (std::size_t i = 0; i < pt.size(); ++i) CHECK(pt[i]->value.data == po[i]->value.data);
  CHECK(other->epoch == trained->epoch);
}

TEST_CASE("zero epochs trains nothing and checkpoints the initial state") {
  const fs::path dir = test_dir("zero_epochs");
  RunConfig cfg = tiny_config();
  cfg.epochs = 0;

  auto s = make_session(cfg);
  train(*s);
  CHECK(s->log.empty());
  CHECK(s->epoch == 0);
  save_checkpoint(dir / "trained.ckpt", *s);

  auto untouched = make_session(cfg);
  save_checkpoint(dir / "fresh.ckpt", *untouched);
  CHECK(read_bytes(dir / "trained.ckpt") == read_bytes(dir / "fresh.ckpt"));
}

TEST_CASE("evaluation over the test split reports coherent counts") {
  RunConfig cfg = tiny_config();
  // A noise-free detector sees exactly the ground-truth boxes.
  cfg.translation_sigma = 0.0;
  cfg.scale_sigma = 0.0;
  cfg.drop_prob = 0.0;
  cfg.spurious_rate = 0.0;
  cfg.score_noise = 0.0;

  auto s = make_session(cfg);
  train(*s);
  const EvalReport rep = evaluate_split(*s, s->split.test);

  CHECK(rep.gallery_size >= 1);
  CHECK(rep.num_gt_boxes == count_labeled_boxes(s->split.test));
  CHECK(rep.num_queries + rep.num_excluded == s->split.test.captions.size());
  CHECK(rep.per_query_ap.size() == s->split.test.captions.size());
  CHECK(rep.results.size() == s->split.test.captions.size());
  REQUIRE(rep.num_queries > 0);
  CHECK(rep.map >= 0.0);
  CHECK(rep.map <= 1.0);
  CHECK(rep.cmc1 <= rep.cmc5);
  CHECK(rep.cmc5 <= rep.cmc10);
  CHECK(rep.cmc10 <= 1.0);
  CHECK(rep.iou_thresh == cfg.iou_thresh);
  CHECK(rep.score_thresh == cfg.score_thresh);
  CHECK(rep.nms_thresh == cfg.nms_thresh);

  // Evaluation is a pure read: rerunning it reproduces the numbers exactly.
  const EvalReport again = evaluate_split(*s, s->split.test);
  CHECK(again.map == rep.map);
  CHECK(again.cmc1 == rep.cmc1);
  CHECK(again.gallery_size == rep.gallery_size);
  CHECK(again.per_query_ap == rep.per_query_ap);
}

TEST_CASE("attention export writes maps for every labeled box") {
  const fs::path dir = test_dir("export_tpan");
  RunConfig cfg = tiny_config();
  auto s = make_session(cfg);
  train(*s);

  const Dataset& tr = s->split.train;
  const std::size_t labeled = count_labeled_boxes(tr);
  REQUIRE(labeled > 0);
  export_attention(*s, tr, dir);

  CHECK(count_suffix(dir, "_A.pgm") == labeled);
  CHECK(count_suffix(dir, "_A.csv") == labeled);
  // Every caption-bearing box gets a guidance target alongside its map.
  CHECK(count_suffix(dir, "_Atarget.pgm") == labeled);
  CHECK(count_suffix(dir, "_Atarget.csv") == labeled);

  // File names follow {scene_id}_{box_index}_{kind}.{ext}.
  bool found = false;
  for (std::size_t si = 0; si < tr.scenes.size() && !found; ++si)
    for (std::size_t bi = 0; bi < tr.boxes[si].size() && !found; ++bi)
      if (tr.boxes[si][bi].identity != kUnlabeled) {
        const std::string stem = tr.scenes[si].id + "_" + std::to_string(bi);
        CHECK(fs::exists(dir / (stem + "_A.pgm")));
        CHECK(fs::exists(dir / (stem + "_A.csv")));
        CHECK(fs::exists(dir / (stem + "_Atarget.pgm")));
        found = true;
      }
  CHECK(found);

  // Baseline sessions export plain maps only.
  const fs::path bdir = test_dir("export_baseline");
  RunConfig bc = tiny_config();
  bc.mode = "baseline";
  auto bs = make_session(bc);
  export_attention(*bs, bs->split.train, bdir);
  CHECK(count_suffix(bdir, "_A.pgm") == count_labeled_boxes(bs->split.train));
  CHECK(count_suffix(bdir, "_Atarget.pgm") == 0);
  CHECK(count_suffix(bdir, "_Atarget.csv") == 0);
}

TEST_CASE("gradient checks pass across every component") {
  const std::vector<ComponentReport> reports = grad_check_all(tiny_config());
  REQUIRE(!reports.empty());

  std::set<std::string> names;
  for (const ComponentReport& r : reports) {
    INFO("component: ", r.name, " max_rel_err: ", r.max_rel_err, " tol: ", r.tolerance);
    CHECK(r.pass);
    CHECK(r.coords > 0);
    names.insert(r.name);
  }
  for (const char* expected :
       {"linear", "conv2d", "encoder.image", "encoder.text", "attention.channel",
        "attention.spatial", "loss.id", "loss.mh", "loss.guidance", "composite",
        "stop_gradient"})
    CHECK(names.count(expected) == 1);

  // The stop-gradient probe demands an exact zero, not a small number.
  for (const ComponentReport& r : reports)
    if (r.name == "stop_gradient") CHECK(r.max_rel_err == 0.0);
}

}  // TEST_SUITE("engine")
