#include "tps/engine.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "tps/boxes.hpp"
#include "tps/gradcheck.hpp"
#include "tps/rng.hpp"

namespace tps {

using nlohmann::json;

namespace {

struct ConfigField {
  std::string key;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <class T>
ConfigField field(const char* key, T RunConfig::* member) {
  return {key,
          [member, key](RunConfig& c, const json& v) {
            try {
              c.*member = v.get<T>();
            } catch (const json::exception& e) {
              fail(std::string("config field '") + key + "': " + e.what());
            }
          },
          [member](const RunConfig& c) { return json(c.*member); }};
}

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      field("mode", &RunConfig::mode),
      field("seed", &RunConfig::seed),
      field("corpus", &RunConfig::corpus),
      field("synth_identities", &RunConfig::synth_identities),
      field("synth_scenes", &RunConfig::synth_scenes),
      field("synth_persons_per_scene", &RunConfig::synth_persons_per_scene),
      field("synth_captions_per_box", &RunConfig::synth_captions_per_box),
      field("synth_shuffle_phrases", &RunConfig::synth_shuffle_phrases),
      field("synth_occlusion", &RunConfig::synth_occlusion),
      field("channels", &RunConfig::channels),
      field("embed_dim", &RunConfig::embed_dim),
      field("text_embed", &RunConfig::text_embed),
      field("crop_h", &RunConfig::crop_h),
      field("crop_w", &RunConfig::crop_w),
      field("max_caption_len", &RunConfig::max_caption_len),
      field("channel_reduction", &RunConfig::channel_reduction),
      field("spatial_reduction", &RunConfig::spatial_reduction),
      field("prototype_lambda", &RunConfig::prototype_lambda),
      field("margin", &RunConfig::margin),
      field("id_weight", &RunConfig::id_weight),
      field("mh_weight", &RunConfig::mh_weight),
      field("guidance_weight", &RunConfig::guidance_weight),
      field("lr", &RunConfig::lr),
      field("epochs", &RunConfig::epochs),
      field("lr_decay_epoch", &RunConfig::lr_decay_epoch),
      field("batch_identities", &RunConfig::batch_identities),
      field("batch_captions", &RunConfig::batch_captions),
      field("translation_sigma", &RunConfig::translation_sigma),
      field("scale_sigma", &RunConfig::scale_sigma),
      field("drop_prob", &RunConfig::drop_prob),
      field("spurious_rate", &RunConfig::spurious_rate),
      field("score_noise", &RunConfig::score_noise),
      field("iou_thresh", &RunConfig::iou_thresh),
      field("score_thresh", &RunConfig::score_thresh),
      field("nms_thresh", &RunConfig::nms_thresh),
  };
  return fields;
}

const ConfigField& find_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  fail("unknown config key '" + key + "'");
}

std::size_t conv_stack_extent(std::size_t in) {
  // three k=3, stride-2, pad-1 stages
  for (int i = 0; i < 3; ++i) in = (in + 2 - 3) / 2 + 1;
  return in;
}

}  // namespace

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(is.good(), "missing config file: " + path.string());
  json doc;
  try {
    is >> doc;
  } catch (const json::exception& e) {
    fail("malformed config file " + path.string() + ": " + e.what());
  }
  require(doc.is_object(), "config file must hold a flat JSON object");
  RunConfig cfg;
  for (const auto& [key, value] : doc.items()) find_field(key).set(cfg, value);
  return cfg;
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0,
          "override must look like key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = json(raw);  // bare strings like mode=tian
  find_field(key).set(cfg, value);
}

std::string config_json(const RunConfig& cfg) {
  json doc;
  for (const auto& f : config_fields()) doc[f.key] = f.get(cfg);
  return doc.dump(2) + "\n";
}

std::uint32_t config_hash(const RunConfig& cfg) { return fnv1a32(config_json(cfg)); }

JitterParams jitter_params(const RunConfig& cfg) {
  JitterParams p;
  p.translation_sigma = cfg.translation_sigma;
  p.scale_sigma = cfg.scale_sigma;
  p.drop_prob = cfg.drop_prob;
  p.spurious_rate = cfg.spurious_rate;
  p.score_noise = cfg.score_noise;
  return p;
}

EvalConfig eval_config(const RunConfig& cfg) {
  EvalConfig ec;
  ec.iou_thresh = cfg.iou_thresh;
  ec.score_thresh = cfg.score_thresh;
  ec.nms_thresh = cfg.nms_thresh;
  ec.crop_h = static_cast<std::size_t>(cfg.crop_h);
  ec.crop_w = static_cast<std::size_t>(cfg.crop_w);
  return ec;
}

SynthConfig synth_config(const RunConfig& cfg) {
  SynthConfig sc;
  sc.num_identities = cfg.synth_identities;
  sc.scenes = cfg.synth_scenes;
  sc.persons_per_scene = cfg.synth_persons_per_scene;
  sc.captions_per_box = cfg.synth_captions_per_box;
  sc.shuffle_phrases = cfg.synth_shuffle_phrases;
  sc.occlusion = cfg.synth_occlusion;
  return sc;
}

void validate_config(const RunConfig& cfg) {
  guidance_mode_from_name(cfg.mode);
  require(cfg.channels >= 1 && cfg.embed_dim >= 1 && cfg.text_embed >= 1,
          "feature dimensions must be positive");
  require(cfg.crop_h >= 8 && cfg.crop_w >= 8, "crop size must be at least 8x8");
  require(cfg.max_caption_len >= 1, "max_caption_len must be positive");
  require(cfg.channel_reduction >= 1 && cfg.embed_dim % cfg.channel_reduction == 0,
          "channel_reduction must divide embed_dim");
  const std::size_t hw = conv_stack_extent(static_cast<std::size_t>(cfg.crop_h)) *
                         conv_stack_extent(static_cast<std::size_t>(cfg.crop_w));
  require(hw >= 2, "crop size leaves no spatial extent to attend over");
  require(cfg.spatial_reduction >= 1 && hw % static_cast<std::size_t>(cfg.spatial_reduction) == 0,
          "spatial_reduction must divide the attention extent H*W = " + std::to_string(hw));
  require(cfg.prototype_lambda >= 0.0 && cfg.prototype_lambda < 1.0,
          "prototype_lambda must lie in [0,1)");
  require(cfg.margin >= 0.0, "margin must be non-negative");
  require(cfg.lr > 0.0, "learning rate must be positive");
  require(cfg.epochs >= 0, "epochs must be non-negative");
  require(cfg.lr_decay_epoch >= 0, "lr_decay_epoch must be non-negative");
  require(cfg.batch_identities >= 2, "need at least 2 identities per batch for the hinge loss");
  require(cfg.batch_captions >= 1, "batch_captions must be positive");
  require(cfg.translation_sigma >= 0 && cfg.scale_sigma >= 0 && cfg.spurious_rate >= 0 &&
              cfg.score_noise >= 0,
          "detector noise parameters must be non-negative");
  require(cfg.drop_prob >= 0 && cfg.drop_prob < 1, "drop_prob must lie in [0,1)");
  require(cfg.iou_thresh > 0 && cfg.iou_thresh <= 1, "iou_thresh must lie in (0,1]");
  require(cfg.score_thresh >= 0 && cfg.score_thresh <= 1, "score_thresh must lie in [0,1]");
  require(cfg.nms_thresh > 0 && cfg.nms_thresh <= 1, "nms_thresh must lie in (0,1]");
}

void TpsModel::collect(std::vector<Parameter*>& out) {
  net.collect(out);
  classifier.collect(out);
}

TpsModel build_model(const RunConfig& cfg, std::size_t vocab, std::size_t num_identities) {
  validate_config(cfg);
  require(vocab >= 1, "empty vocabulary");
  require(num_identities >= 1, "model needs at least one identity");
  Rng rng(derive_seed(cfg.seed, "init"));
  TpsModel m;
  m.mode = guidance_mode_from_name(cfg.mode);
  m.attn_h = conv_stack_extent(static_cast<std::size_t>(cfg.crop_h));
  m.attn_w = conv_stack_extent(static_cast<std::size_t>(cfg.crop_w));
  m.net.image_encoder = ImageEncoder::create(static_cast<std::size_t>(cfg.channels), rng);
  m.net.reducer = FeatureReducer::create(static_cast<std::size_t>(cfg.channels),
                                         static_cast<std::size_t>(cfg.embed_dim), rng);
  m.net.channel_attn = ChannelAttention::create(static_cast<std::size_t>(cfg.embed_dim),
                                                static_cast<std::size_t>(cfg.channel_reduction), rng);
  m.net.spatial_attn = SpatialAttention::create(m.attn_h * m.attn_w,
                                                static_cast<std::size_t>(cfg.spatial_reduction), rng);
  m.net.text_encoder = TextEncoder::create(vocab, static_cast<std::size_t>(cfg.text_embed),
                                           static_cast<std::size_t>(cfg.embed_dim),
                                           static_cast<std::size_t>(cfg.max_caption_len), rng);
  m.net.prototypes = PrototypeTable::create(num_identities,
                                            static_cast<std::size_t>(cfg.embed_dim),
                                            cfg.prototype_lambda);
  m.classifier = SharedClassifier::create(num_identities, static_cast<std::size_t>(cfg.embed_dim), rng);
  return m;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
  std::ofstream os(path);
  require(os.good(), "cannot write " + path.string());
  os.precision(17);
  os << "step,id,mh,guide,total\n";
  for (const auto& row : log)
    os << row.step << "," << row.id_term << "," << row.mh_term << "," << row.guide_term << ","
       << row.total << "\n";
  require(os.good(), "failed writing " + path.string());
}

std::unique_ptr<Session> make_session(const RunConfig& cfg) {
  validate_config(cfg);
  auto s = std::make_unique<Session>();
  s->cfg = cfg;
  s->corpus = cfg.corpus.empty() ? generate_synthetic(synth_config(cfg), cfg.seed)
                                 : load_dataset(cfg.corpus);
  s->split = split_dataset(s->corpus, cfg.seed);
  require(!s->split.train.captions.empty(), "train split has no captions");
  require(!s->split.test.captions.empty(), "test split has no captions");
  s->model = build_model(cfg, s->corpus.vocab.size(),
                         static_cast<std::size_t>(s->split.train.num_identities));
  std::vector<Parameter*> params;
  s->model.collect(params);
  AdamConfig ac;
  ac.lr = cfg.lr;
  s->opt = std::make_unique<Adam>(std::move(params), ac);
  return s;
}

namespace {

// One PK-sampled optimization step; returns the logged loss terms.
TrainLogRow train_step(Session& s, Rng& rng, const std::vector<std::vector<std::size_t>>& by_identity,
                       long step_index) {
  const RunConfig& cfg = s.cfg;
  const Dataset& tr = s.split.train;
  TpsModel& model = s.model;
  const GuidanceMode mode = model.mode;

  std::vector<int> identity_pool;
  for (std::size_t id = 0; id < by_identity.size(); ++id)
    if (!by_identity[id].empty()) identity_pool.push_back(static_cast<int>(id));
  require(identity_pool.size() >= 2, "PK sampling needs at least 2 identities with captions");
  rng.shuffle(identity_pool);
  const std::size_t picked =
      std::min<std::size_t>(identity_pool.size(), static_cast<std::size_t>(cfg.batch_identities));

  std::vector<std::size_t> sample_captions;
  std::vector<int> labels;
  for (std::size_t i = 0; i < picked; ++i) {
    const auto& pool = by_identity[static_cast<std::size_t>(identity_pool[i])];
    std::vector<std::size_t> local(pool);
    rng.shuffle(local);
    for (int k = 0; k < cfg.batch_captions; ++k) {
      const std::size_t ci = k < static_cast<int>(local.size())
                                 ? local[static_cast<std::size_t>(k)]
                                 : pool[rng.below(pool.size())];
      sample_captions.push_back(ci);
      labels.push_back(identity_pool[i]);
    }
  }
  const std::size_t B = sample_captions.size();

  // Forward: text feature first (it doubles as guidance fallback), then the
  // image path.
  std::vector<TextEncoder::Ctx> text_ctx(B);
  std::vector<TpanTrace> traces(B);
  std::vector<TpanOutput> outs(B);
  BatchPairs pairs;
  for (std::size_t i = 0; i < B; ++i) {
    const Caption& cap = tr.captions[sample_captions[i]];
    Tensor e_t = model.net.text_encoder.forward(cap.tokens, &text_ctx[i]);
    const Tensor patch = crop_resize(tr.scene(cap.scene_index), tr.box_of(cap),
                                     static_cast<std::size_t>(cfg.crop_h),
                                     static_cast<std::size_t>(cfg.crop_w));
    outs[i] = tpan_forward(model.net, patch, mode, labels[i], &e_t, &traces[i]);
    if (outs[i].used_fallback) ++s.prototype_fallbacks;
    pairs.e_img.push_back(outs[i].e_i);
    pairs.e_txt.push_back(std::move(e_t));
    pairs.labels.push_back(labels[i]);
  }

  const double bd = static_cast<double>(B);
  std::vector<IdLossCtx> id_img(B), id_txt(B);
  double id_raw = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    id_raw += id_loss(model.classifier, pairs.e_img[i], labels[i], &id_img[i]);
    id_raw += id_loss(model.classifier, pairs.e_txt[i], labels[i], &id_txt[i]);
  }
  id_raw /= bd;
  MhCtx mh_ctx;
  const double mh_raw = mh_loss(pairs, cfg.margin, &mh_ctx);
  double guide_raw = 0.0;
  if (mode != GuidanceMode::baseline) {
    for (const auto& o : outs) guide_raw += o.guidance;
    guide_raw /= bd;
  }
  TrainLogRow row;
  row.step = step_index;
  row.id_term = cfg.id_weight * id_raw;
  row.mh_term = cfg.mh_weight * mh_raw;
  row.guide_term = cfg.guidance_weight * guide_raw;
  row.total = total_loss(row.id_term, row.mh_term, row.guide_term);

  // Backward.
  std::vector<Tensor> ge_img(B, Tensor({static_cast<std::size_t>(cfg.embed_dim)}));
  std::vector<Tensor> ge_txt(B, Tensor({static_cast<std::size_t>(cfg.embed_dim)}));
  for (std::size_t i = 0; i < B; ++i) {
    Tensor g = id_loss_backward(model.classifier, id_img[i], cfg.id_weight / bd);
    for (std::size_t d = 0; d < g.numel(); ++d) ge_img[i].data[d] += g.data[d];
    g = id_loss_backward(model.classifier, id_txt[i], cfg.id_weight / bd);
    for (std::size_t d = 0; d < g.numel(); ++d) ge_txt[i].data[d] += g.data[d];
  }
  mh_loss_backward(pairs, mh_ctx, cfg.mh_weight, ge_img, ge_txt);
  const double g_guide = mode == GuidanceMode::baseline ? 0.0 : cfg.guidance_weight / bd;
  for (std::size_t i = 0; i < B; ++i) {
    tpan_backward(model.net, traces[i], outs[i], ge_img[i], g_guide);
    model.net.text_encoder.backward(text_ctx[i], ge_txt[i]);
  }
  s.opt->step();

  // Prototype EMA after the step: this step's targets came from the
  // pre-update table.
  if (mode == GuidanceMode::tpan)
    for (std::size_t i = 0; i < B; ++i)
      model.net.prototypes.update(static_cast<std::size_t>(labels[i]), pairs.e_txt[i]);
  return row;
}

}  // namespace

void train(Session& s) {
  const RunConfig& cfg = s.cfg;
  const Dataset& tr = s.split.train;
  std::vector<std::vector<std::size_t>> by_identity(
      static_cast<std::size_t>(tr.num_identities));
  for (std::size_t ci = 0; ci < tr.captions.size(); ++ci)
    if (tr.captions[ci].identity != kUnlabeled)
      by_identity[static_cast<std::size_t>(tr.captions[ci].identity)].push_back(ci);

  Rng rng(derive_seed(cfg.seed, "batch"));
  const std::size_t batch =
      static_cast<std::size_t>(cfg.batch_identities) * static_cast<std::size_t>(cfg.batch_captions);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, tr.captions.size() / batch);
  long step_index = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.lr_decay_epoch > 0 && epoch == cfg.lr_decay_epoch) s.opt->set_lr(cfg.lr * 0.1);
    for (std::size_t k = 0; k < steps_per_epoch; ++k)
      s.log.push_back(train_step(s, rng, by_identity, ++step_index));
    s.epoch = epoch;
  }
}

EvalReport evaluate_split(Session& s, const Dataset& split_data) {
  const RunConfig& cfg = s.cfg;
  Detector det = jittered_detector(jitter_params(cfg), derive_seed(cfg.seed, "detect"));
  TpsModel& model = s.model;
  ImageEmbedder embed_image = [&model](const Tensor& patch) {
    return tpan_forward(model.net, patch, GuidanceMode::baseline, -1, nullptr).e_i;
  };
  TextEmbedder embed_text = [&model](const Caption& cap) {
    return model.net.text_encoder.forward(cap.tokens);
  };
  return evaluate(split_data, det, embed_image, embed_text, eval_config(cfg));
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ofstream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_record(std::ofstream& os, const std::string& name, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
}

Tensor scalar_record(double v) { return Tensor::from({1}, {v}); }

bool read_u32(std::ifstream& is, std::uint32_t& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return is.gcount() == sizeof v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Session& s) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot write " + path.string());
  os.write("TPAN", 4);
  write_u32(os, kCheckpointVersion);
  write_record(os, "__meta.config_hash", scalar_record(static_cast<double>(config_hash(s.cfg))));
  write_record(os, "__meta.epoch", scalar_record(static_cast<double>(s.epoch)));
  write_record(os, "__meta.adam_step",
               scalar_record(static_cast<double>(s.opt ? s.opt->step_count() : 0)));
  const auto& tbl = s.model.net.prototypes;
  write_record(os, "__prototype.P", tbl.P);
  Tensor touched({tbl.touched.size()});
  for (std::size_t i = 0; i < tbl.touched.size(); ++i)
    touched.data[i] = tbl.touched[i] ? 1.0 : 0.0;
  write_record(os, "__prototype.touched", touched);

  std::vector<Parameter*> params;
  const_cast<TpsModel&>(s.model).collect(params);
  for (const Parameter* p : params) write_record(os, p->name, p->value);
  if (s.opt) {
    for (std::size_t i = 0; i < s.opt->size(); ++i) {
      write_record(os, "__adam.m." + s.opt->param(i).name, s.opt->first_moment(i));
      write_record(os, "__adam.v." + s.opt->param(i).name, s.opt->second_moment(i));
    }
  }
  require(os.good(), "failed writing " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, Session& s) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "missing checkpoint file: " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  require(is.gcount() == 4 && std::memcmp(magic, "TPAN", 4) == 0,
          "not a checkpoint: " + path.string());
  std::uint32_t version = 0;
  require(read_u32(is, version), "truncated checkpoint: " + path.string());
  require(version == kCheckpointVersion,
          "unsupported checkpoint version " + std::to_string(version));

  std::map<std::string, Tensor> records;
  for (;;) {
    std::uint32_t name_len = 0;
    if (!read_u32(is, name_len)) {
      require(is.eof(), "truncated checkpoint: " + path.string());
      break;
    }
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = 0;
    require(is.gcount() == static_cast<std::streamsize>(name_len) && read_u32(is, rank),
            "truncated checkpoint: " + path.string());
    std::vector<std::size_t> shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      std::uint32_t extent = 0;
      require(read_u32(is, extent), "truncated checkpoint: " + path.string());
      shape.push_back(extent);
      numel *= extent;
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    require(is.gcount() == static_cast<std::streamsize>(numel * sizeof(double)),
            "truncated checkpoint: " + path.string());
    require(records.emplace(name, std::move(t)).second,
            "duplicate checkpoint record '" + name + "'");
  }

  auto take = [&](const std::string& name) -> Tensor {
    auto it = records.find(name);
    require(it != records.end(), "checkpoint missing tensor '" + name + "'");
    Tensor t = std::move(it->second);
    records.erase(it);
    return t;
  };

  const Tensor hash = take("__meta.config_hash");
  if (static_cast<std::uint32_t>(hash.data.at(0)) != config_hash(s.cfg))
    std::cerr << "warning: checkpoint was written under a different config\n";
  s.epoch = static_cast<long>(take("__meta.epoch").data.at(0));
  const long adam_step = static_cast<long>(take("__meta.adam_step").data.at(0));

  auto& tbl = s.model.net.prototypes;
  Tensor proto = take("__prototype.P");
  require(proto.shape == tbl.P.shape, "checkpoint tensor shape mismatch for '__prototype.P'");
  tbl.P = std::move(proto);
  Tensor touched = take("__prototype.touched");
  require(touched.numel() == tbl.touched.size(),
          "checkpoint tensor shape mismatch for '__prototype.touched'");
  for (std::size_t i = 0; i < tbl.touched.size(); ++i)
    tbl.touched[i] = touched.data[i] != 0.0 ? 1 : 0;

  std::vector<Parameter*> params;
  s.model.collect(params);
  for (Parameter* p : params) {
    Tensor t = take(p->name);
    require(t.shape == p->value.shape, "checkpoint tensor shape mismatch for '" + p->name + "'");
    p->value.data = std::move(t.data);
    p->value.grad.clear();
  }
  if (s.opt) {
    s.opt->set_step_count(adam_step);
    for (std::size_t i = 0; i < s.opt->size(); ++i) {
      Tensor m = take("__adam.m." + s.opt->param(i).name);
      Tensor v = take("__adam.v." + s.opt->param(i).name);
      require(m.shape == s.opt->first_moment(i).shape && v.shape == s.opt->second_moment(i).shape,
              "checkpoint tensor shape mismatch for optimizer state of '" + s.opt->param(i).name +
                  "'");
      s.opt->first_moment(i) = std::move(m);
      s.opt->second_moment(i) = std::move(v);
    }
  } else {
    for (auto it = records.begin(); it != records.end();) {
      if (it->first.rfind("__adam.", 0) == 0)
        it = records.erase(it);
      else
        ++it;
    }
  }
  require(records.empty(),
          "unexpected checkpoint record '" + (records.empty() ? "" : records.begin()->first) + "'");
}

void export_attention(Session& s, const Dataset& split_data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  TpsModel& model = s.model;
  const RunConfig& cfg = s.cfg;

  // First caption of each box, for instance-guided targets.
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> first_caption;
  for (std::size_t ci = 0; ci < split_data.captions.size(); ++ci) {
    const auto key = std::make_pair(split_data.captions[ci].scene_index,
                                    split_data.captions[ci].box_index);
    first_caption.emplace(key, ci);
  }

  for (std::size_t si = 0; si < split_data.scenes.size(); ++si) {
    for (std::size_t bi = 0; bi < split_data.boxes[si].size(); ++bi) {
      const auto& box = split_data.boxes[si][bi];
      if (box.identity == kUnlabeled) continue;
      const Tensor patch = crop_resize(split_data.scenes[si], box,
                                       static_cast<std::size_t>(cfg.crop_h),
                                       static_cast<std::size_t>(cfg.crop_w));
      Tensor e_t;
      const Tensor* f_t = nullptr;
      auto it = first_caption.find({si, bi});
      if (it != first_caption.end()) {
        e_t = model.net.text_encoder.forward(split_data.captions[it->second].tokens);
        f_t = &e_t;
      }
      GuidanceMode mode = model.mode;
      if (mode == GuidanceMode::tian && !f_t) mode = GuidanceMode::baseline;
      if (mode == GuidanceMode::tpan) {
        // Identity indices outside the table (foreign splits) or untouched
        // rows fall back to the instance feature, then to no guidance.
        const bool in_table = static_cast<std::size_t>(box.identity) < model.net.prototypes.size() &&
                              model.net.prototypes.is_initialized(
                                  static_cast<std::size_t>(box.identity));
        if (!in_table) mode = f_t ? GuidanceMode::tian : GuidanceMode::baseline;
      }
      const TpanOutput out = tpan_forward(model.net, patch, mode, box.identity, f_t);
      const std::string stem = split_data.scenes[si].id + "_" + std::to_string(bi);
      write_attention_pgm(dir / (stem + "_A.pgm"), out.attention);
      write_attention_csv(dir / (stem + "_A.csv"), out.attention);
      if (out.target.numel() > 0) {
        write_attention_pgm(dir / (stem + "_Atarget.pgm"), out.target);
        write_attention_csv(dir / (stem + "_Atarget.csv"), out.target);
      }
    }
  }
}

namespace {

using LossFn = std::function<double()>;

void zero_params(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->value.zero_grad();
}

}  // namespace

std::vector<ComponentReport> grad_check_all(const RunConfig& cfg, double eps) {
  validate_config(cfg);
  std::vector<ComponentReport> reports;
  Rng rng(derive_seed(cfg.seed, "gradcheck"));
  auto run = [&](const std::string& name, double tol, const LossFn& loss,
                 std::vector<Parameter*> params, std::size_t max_coords = 0) {
    const GradCheckReport r =
        grad_check(loss, params, eps, max_coords, derive_seed(cfg.seed, "gradcheck." + name));
    reports.push_back({name, r.max_rel_err, tol, r.coords_checked, r.max_rel_err <= tol});
  };

  {  // dense layer
    Linear lin = Linear::create("gc.lin", 3, 4, true, rng);
    Tensor x({4});
    for (double& v : x.data) v = rng.normal();
    auto loss = [&]() {
      zero_params({&lin.W, &lin.b});
      Tensor y = lin.forward(x);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      lin.backward(x, gy);
      return L;
    };
    run("linear", 1e-6, loss, {&lin.W, &lin.b});
  }

  {  // convolution
    Conv2d conv = Conv2d::create("gc.conv", 3, 2, 3, 2, 1, Pad::replicate, true, rng);
    Tensor x({2, 5, 5});
    for (double& v : x.data) v = rng.normal();
    auto loss = [&]() {
      zero_params({&conv.K, &conv.b});
      Tensor y = conv.forward(x);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      conv.backward(x, gy);
      return L;
    };
    run("conv2d", 1e-6, loss, {&conv.K, &conv.b});
  }

  for (Act kind : {Act::relu, Act::sigmoid}) {  // activations on a free input
    Parameter x;
    x.name = kind == Act::relu ? "gc.relu.x" : "gc.sigmoid.x";
    x.value = Tensor({6});
    for (double& v : x.value.data) {
      // keep relu inputs clear of the kink at 0
      const double mag = 0.1 + rng.uniform();
      v = rng.uniform() < 0.5 ? -mag : mag;
    }
    auto loss = [&]() {
      x.value.zero_grad();
      ActCtx ctx;
      Tensor y = act_forward(x.value, kind, &ctx);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      Tensor gx = act_backward(ctx, gy);
      x.value.ensure_grad();
      for (std::size_t i = 0; i < gx.numel(); ++i) x.value.grad[i] += gx.data[i];
      return L;
    };
    run(kind == Act::relu ? "activation.relu" : "activation.sigmoid",
        kind == Act::relu ? 1e-4 : 1e-6, loss, {&x});
  }

  {  // pooling reductions
    for (int which = 0; which < 2; ++which) {
      Parameter x;
      x.name = which == 0 ? "gc.spool.x" : "gc.cpool.x";
      x.value = Tensor({3, 4, 2});
      for (double& v : x.value.data) v = rng.normal();
      auto loss = [&]() {
        x.value.zero_grad();
        Tensor y = which == 0 ? spatial_mean(x.value) : channel_mean(x.value);
        Tensor gy(y.shape);
        double L = 0.0;
        for (std::size_t i = 0; i < y.numel(); ++i) {
          L += y.data[i] * y.data[i];
          gy.data[i] = 2.0 * y.data[i];
        }
        Tensor gx = which == 0 ? spatial_mean_backward(gy, x.value.shape)
                               : channel_mean_backward(gy, x.value.shape);
        x.value.ensure_grad();
        for (std::size_t i = 0; i < gx.numel(); ++i) x.value.grad[i] += gx.data[i];
        return L;
      };
      run(which == 0 ? "pool.spatial_mean" : "pool.channel_mean", 1e-6, loss, {&x});
    }
  }

  {  // embedding normalization
    Parameter x;
    x.name = "gc.norm.x";
    x.value = Tensor({5});
    for (double& v : x.value.data) v = rng.normal() + (rng.uniform() < 0.5 ? -0.5 : 0.5);
    Tensor w({5});
    for (double& v : w.data) v = rng.normal();
    auto loss = [&]() {
      x.value.zero_grad();
      NormCtx ctx;
      Tensor y = l2_normalize(x.value, &ctx);
      const double L = dot(y, w);
      Tensor gx = l2_normalize_backward(ctx, w);
      x.value.ensure_grad();
      for (std::size_t i = 0; i < gx.numel(); ++i) x.value.grad[i] += gx.data[i];
      return L;
    };
    run("l2_normalize", 1e-6, loss, {&x});
  }

  {  // feature reducer
    FeatureReducer red = FeatureReducer::create(6, 4, rng);
    Tensor x({6, 3, 2});
    for (double& v : x.data) v = rng.normal();
    std::vector<Parameter*> params;
    red.collect(params);
    auto loss = [&]() {
      zero_params(params);
      FeatureReducer::Ctx ctx;
      Tensor y = red.forward(x, &ctx);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      red.backward(ctx, gy);
      return L;
    };
    run("reducer", 1e-6, loss, params);
  }

  {  // image encoder end to end
    ImageEncoder enc = ImageEncoder::create(static_cast<std::size_t>(cfg.channels), rng);
    Tensor patch({3, 16, 8});
    for (double& v : patch.data) v = rng.uniform();
    std::vector<Parameter*> params;
    enc.collect(params);
    auto loss = [&]() {
      zero_params(params);
      ImageEncoder::Ctx ctx;
      Tensor y = enc.forward(patch, &ctx);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      enc.backward(ctx, gy);
      return L;
    };
    run("encoder.image", 1e-4, loss, params, 25);
  }

  {  // text encoder end to end
    TextEncoder enc = TextEncoder::create(12, 6, 5, 16, rng);
    const std::vector<int> tokens = {3, 7, 1, 9};
    Tensor w({5});
    for (double& v : w.data) v = rng.normal();
    std::vector<Parameter*> params;
    enc.collect(params);
    auto loss = [&]() {
      zero_params(params);
      TextEncoder::Ctx ctx;
      Tensor y = enc.forward(tokens, &ctx);
      const double L = dot(y, w);
      enc.backward(ctx, w);
      return L;
    };
    run("encoder.text", 1e-6, loss, params, 40);
  }

  {  // channel attention block
    ChannelAttention ca = ChannelAttention::create(8, 4, rng);
    Tensor f_c({8});
    for (double& v : f_c.data) v = rng.normal();
    std::vector<Parameter*> params;
    ca.collect(params);
    auto loss = [&]() {
      zero_params(params);
      ChannelAttention::Ctx ctx;
      Tensor y = ca.forward(f_c, &ctx);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      ca.backward(ctx, gy);
      return L;
    };
    run("attention.channel", 1e-4, loss, params);
  }

  {  // spatial attention block
    SpatialAttention sa = SpatialAttention::create(6, 3, rng);
    Tensor fhat({4, 3, 2});
    for (double& v : fhat.data) v = rng.normal();
    std::vector<Parameter*> params;
    sa.collect(params);
    auto loss = [&]() {
      zero_params(params);
      SpatialAttention::Ctx ctx;
      Tensor y = sa.forward(fhat, &ctx);
      Tensor gy(y.shape);
      double L = 0.0;
      for (std::size_t i = 0; i < y.numel(); ++i) {
        L += y.data[i] * y.data[i];
        gy.data[i] = 2.0 * y.data[i];
      }
      sa.backward(ctx, gy);
      return L;
    };
    run("attention.spatial", 1e-4, loss, params);
  }

  {  // identification loss
    SharedClassifier cls = SharedClassifier::create(5, 6, rng);
    Parameter e;
    e.name = "gc.id.e";
    e.value = Tensor({6});
    for (double& v : e.value.data) v = rng.normal();
    std::vector<Parameter*> params = {&e};
    cls.collect(params);
    auto loss = [&]() {
      zero_params(params);
      IdLossCtx ctx;
      const double L = id_loss(cls, e.value, 2, &ctx);
      Tensor ge = id_loss_backward(cls, ctx, 1.0);
      e.value.ensure_grad();
      for (std::size_t i = 0; i < ge.numel(); ++i) e.value.grad[i] += ge.data[i];
      return L;
    };
    run("loss.id", 1e-6, loss, params);
  }

  {  // hardest-negative hinge loss
    const std::size_t n = 4, dim = 5;
    std::vector<Parameter> eimg(n), etxt(n);
    const std::vector<int> labels = {0, 0, 1, 1};
    // Redraw until every hinge sits clear of its kink so central
    // differences stay on one linear piece.
    for (int attempt = 0; attempt < 100; ++attempt) {
      for (std::size_t i = 0; i < n; ++i) {
        eimg[i].name = "gc.mh.ei" + std::to_string(i);
        etxt[i].name = "gc.mh.et" + std::to_string(i);
        eimg[i].value = Tensor({dim});
        etxt[i].value = Tensor({dim});
        for (double& v : eimg[i].value.data) v = rng.normal(0.0, 0.5);
        for (double& v : etxt[i].value.data) v = rng.normal(0.0, 0.5);
      }
      BatchPairs b;
      for (std::size_t i = 0; i < n; ++i) {
        b.e_img.push_back(eimg[i].value);
        b.e_txt.push_back(etxt[i].value);
        b.labels.push_back(labels[i]);
      }
      double closest = 1e9;
      for (std::size_t i = 0; i < n; ++i) {
        const double pos = dot(b.e_img[i], b.e_txt[i]);
        for (std::size_t j = 0; j < n; ++j) {
          if (labels[j] == labels[i]) continue;
          closest = std::min(closest, std::abs(0.2 + dot(b.e_img[i], b.e_txt[j]) - pos));
          closest = std::min(closest, std::abs(0.2 + dot(b.e_img[j], b.e_txt[i]) - pos));
        }
      }
      if (closest > 1e-2) break;
    }
    std::vector<Parameter*> params;
    for (auto& p : eimg) params.push_back(&p);
    for (auto& p : etxt) params.push_back(&p);
    auto loss = [&]() {
      zero_params(params);
      BatchPairs cur;
      for (std::size_t i = 0; i < n; ++i) {
        cur.e_img.push_back(eimg[i].value);
        cur.e_txt.push_back(etxt[i].value);
        cur.labels.push_back(labels[i]);
      }
      MhCtx ctx;
      const double L = mh_loss(cur, 0.2, &ctx);
      std::vector<Tensor> gi, gt;
      mh_loss_backward(cur, ctx, 1.0, gi, gt);
      for (std::size_t i = 0; i < n; ++i) {
        eimg[i].value.ensure_grad();
        etxt[i].value.ensure_grad();
        for (std::size_t d = 0; d < dim; ++d) {
          eimg[i].value.grad[d] += gi[i].data[d];
          etxt[i].value.grad[d] += gt[i].data[d];
        }
      }
      return L;
    };
    run("loss.mh", 1e-6, loss, params);
  }

  {  // guidance loss
    Parameter a;
    a.name = "gc.guide.a";
    a.value = Tensor({3, 2});
    Tensor target({3, 2});
    for (double& v : a.value.data) v = rng.uniform();
    for (double& v : target.data) v = rng.uniform();
    auto loss = [&]() {
      a.value.zero_grad();
      const double L = guidance_loss(target, a.value);
      Tensor ga;
      guidance_loss_backward(target, a.value, 1.0, ga);
      a.value.ensure_grad();
      for (std::size_t i = 0; i < ga.numel(); ++i) a.value.grad[i] += ga.data[i];
      return L;
    };
    run("loss.guidance", 1e-6, loss, {&a});
  }

  // Composite objective on a 2-identity micro-batch, with the target maps
  // frozen at the base point: the loss being differentiated treats them as
  // the constants they are.
  {
    RunConfig micro = cfg;
    micro.mode = "tpan";
    micro.corpus.clear();
    micro.synth_identities = 2;
    micro.synth_scenes = 2;
    micro.synth_persons_per_scene = 1;
    micro.synth_captions_per_box = 2;
    micro.synth_shuffle_phrases = false;
    micro.synth_occlusion = 0.0;
    const Dataset data = generate_synthetic(synth_config(micro), micro.seed);
    TpsModel model = build_model(micro, data.vocab.size(), 2);
    std::vector<Parameter*> params;
    model.collect(params);

    struct Sample {
      Tensor patch;
      std::vector<int> tokens;
      int label;
    };
    std::vector<Sample> batch;
    for (const auto& cap : data.captions)
      batch.push_back({crop_resize(data.scene(cap.scene_index), data.box_of(cap),
                                   static_cast<std::size_t>(micro.crop_h),
                                   static_cast<std::size_t>(micro.crop_w)),
                       cap.tokens, cap.identity});

    // Seed the prototype rows, then freeze the per-sample target maps.
    for (const auto& smp : batch)
      model.net.prototypes.update(static_cast<std::size_t>(smp.label),
                                  model.net.text_encoder.forward(smp.tokens));
    std::vector<Tensor> frozen_targets;
    for (const auto& smp : batch) {
      TpanOutput out = tpan_forward(model.net, smp.patch, GuidanceMode::tpan, smp.label, nullptr);
      frozen_targets.push_back(out.target);
    }

    const double bd = static_cast<double>(batch.size());
    const std::size_t D = static_cast<std::size_t>(micro.embed_dim);
    auto loss = [&]() {
      zero_params(params);
      const std::size_t B = batch.size();
      std::vector<TextEncoder::Ctx> tctx(B);
      std::vector<TpanTrace> traces(B);
      std::vector<TpanOutput> outs(B);
      BatchPairs pairs;
      for (std::size_t i = 0; i < B; ++i) {
        Tensor e_t = model.net.text_encoder.forward(batch[i].tokens, &tctx[i]);
        outs[i] = tpan_forward(model.net, batch[i].patch, GuidanceMode::tpan, batch[i].label,
                               &e_t, &traces[i]);
        outs[i].target = frozen_targets[i];
        outs[i].guidance = guidance_loss(outs[i].target, outs[i].attention);
        pairs.e_img.push_back(outs[i].e_i);
        pairs.e_txt.push_back(std::move(e_t));
        pairs.labels.push_back(batch[i].label);
      }
      std::vector<IdLossCtx> id_img(B), id_txt(B);
      double id_raw = 0.0, guide_raw = 0.0;
      for (std::size_t i = 0; i < B; ++i) {
        id_raw += id_loss(model.classifier, pairs.e_img[i], batch[i].label, &id_img[i]);
        id_raw += id_loss(model.classifier, pairs.e_txt[i], batch[i].label, &id_txt[i]);
        guide_raw += outs[i].guidance;
      }
      id_raw /= bd;
      guide_raw /= bd;
      MhCtx mh_ctx;
      const double mh_raw = mh_loss(pairs, micro.margin, &mh_ctx);
      const double L = total_loss(id_raw, mh_raw, guide_raw);

      std::vector<Tensor> ge_img(B, Tensor({D})), ge_txt(B, Tensor({D}));
      for (std::size_t i = 0; i < B; ++i) {
        Tensor g = id_loss_backward(model.classifier, id_img[i], 1.0 / bd);
        for (std::size_t d = 0; d < D; ++d) ge_img[i].data[d] += g.data[d];
        g = id_loss_backward(model.classifier, id_txt[i], 1.0 / bd);
        for (std::size_t d = 0; d < D; ++d) ge_txt[i].data[d] += g.data[d];
      }
      mh_loss_backward(pairs, mh_ctx, 1.0, ge_img, ge_txt);
      for (std::size_t i = 0; i < B; ++i) {
        tpan_backward(model.net, traces[i], outs[i], ge_img[i], 1.0 / bd);
        model.net.text_encoder.backward(tctx[i], ge_txt[i]);
      }
      return L;
    };
    run("composite", 1e-4, loss, params, 25);

    // Stop-gradient: the prototype table influences nothing but the values
    // of the frozen target maps. Rerunning the whole backward with the rows
    // perturbed must reproduce every parameter gradient bit for bit, and no
    // gradient slot may ever appear on the table itself.
    auto snapshot = [&]() {
      loss();
      std::vector<std::vector<double>> grads;
      for (Parameter* p : params) grads.push_back(p->value.grad);
      return grads;
    };
    const auto before = snapshot();
    Tensor saved = model.net.prototypes.P;
    for (double& v : model.net.prototypes.P.data) v += 0.37;
    const auto after = snapshot();
    model.net.prototypes.P = saved;
    double worst = 0.0;
    for (std::size_t p = 0; p < before.size(); ++p)
      for (std::size_t i = 0; i < before[p].size(); ++i)
        worst = std::max(worst, std::abs(before[p][i] - after[p][i]));
    if (model.net.prototypes.P.has_grad())
      for (double v : model.net.prototypes.P.grad) worst = std::max(worst, std::abs(v));
    reports.push_back({"stop_gradient", worst, 0.0, before.size(), worst == 0.0});
  }

  return reports;
}

}  // namespace tps
