// Command-line entry point: corpus tooling, training, evaluation, and
// diagnostics for the prototype-guided person search models.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tps/engine.hpp"

namespace {

namespace fs = std::filesystem;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON config file (flat key/value object)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--set", a.sets, "config override key=value (repeatable)");
}

tps::RunConfig resolve_config(const ConfigArgs& a) {
  tps::RunConfig cfg;
  if (!a.config_path.empty()) cfg = tps::load_config(a.config_path);
  for (const auto& s : a.sets) tps::apply_override(cfg, s);
  tps::validate_config(cfg);
  return cfg;
}

const tps::Dataset& pick_split(const tps::Session& s, const std::string& name) {
  if (name == "train") return s.split.train;
  if (name == "val") return s.split.val;
  if (name == "test") return s.split.test;
  tps::fail("unknown split '" + name + "' (expected train, val, or test)");
}

int cmd_synth(const ConfigArgs& args, const std::string& out) {
  const tps::RunConfig cfg = resolve_config(args);
  const tps::Dataset d = tps::generate_synthetic(tps::synth_config(cfg), cfg.seed);
  tps::save_dataset(d, out);
  std::size_t boxes = 0;
  for (const auto& b : d.boxes) boxes += b.size();
  std::cout << "wrote " << d.scenes.size() << " scenes, " << boxes << " boxes, "
            << d.captions.size() << " captions, " << d.vocab.size() << " vocab entries to " << out
            << "\n";
  return 0;
}

int cmd_stats(const std::string& data, bool as_json) {
  const tps::Dataset d = tps::load_dataset(data);
  const tps::StatsReport r = tps::dataset_stats(d);
  std::cout << (as_json ? tps::stats_json(r) : tps::stats_table(r));
  return 0;
}

int cmd_validate(const std::string& data, int captions_per_box) {
  const tps::Dataset d = tps::load_dataset(data);
  tps::ValidationConfig rules;
  rules.captions_per_box = captions_per_box;
  const auto violations = tps::validate_dataset(d, rules);
  for (const auto& v : violations)
    std::cout << v.code << ": " << v.message << " [" << v.locus << "]\n";
  if (violations.empty()) {
    std::cout << "no violations\n";
    return 0;
  }
  std::cout << violations.size() << " violation(s)\n";
  return 1;
}

int cmd_train(const ConfigArgs& args, const std::string& out) {
  const tps::RunConfig cfg = resolve_config(args);
  auto s = tps::make_session(cfg);
  tps::train(*s);
  fs::create_directories(out);
  tps::save_checkpoint(fs::path(out) / "checkpoint.tpan", *s);
  tps::write_train_log(fs::path(out) / "train_log.csv", s->log);
  {
    std::ofstream os(fs::path(out) / "config.json");
    tps::require(os.good(), "cannot write " + (fs::path(out) / "config.json").string());
    os << tps::config_json(cfg);
  }
  std::cout << "mode " << cfg.mode << ", " << s->epoch << " epoch(s), " << s->log.size()
            << " step(s)";
  if (!s->log.empty())
    std::cout << ", total loss " << s->log.front().total << " -> " << s->log.back().total;
  if (s->prototype_fallbacks > 0)
    std::cout << ", " << s->prototype_fallbacks << " prototype fallback(s)";
  std::cout << "\nwrote " << out << "/checkpoint.tpan\n";
  return 0;
}

int cmd_eval(const ConfigArgs& args, const std::string& checkpoint, const std::string& out,
             const std::string& split) {
  const tps::RunConfig cfg = resolve_config(args);
  auto s = tps::make_session(cfg);
  tps::load_checkpoint(checkpoint, *s);
  const tps::EvalReport rep = tps::evaluate_split(*s, pick_split(*s, split));
  fs::create_directories(out);
  tps::write_eval_report(fs::path(out) / "eval_report.json", rep);
  tps::write_rankings_csv(fs::path(out) / "rankings.csv", rep);
  std::printf("split %s: mAP %.4f  CMC@1 %.4f  CMC@5 %.4f  CMC@10 %.4f  (%zu queries, %zu gallery boxes)\n",
              split.c_str(), rep.map, rep.cmc1, rep.cmc5, rep.cmc10, rep.num_queries,
              rep.gallery_size);
  std::cout << "wrote " << out << "/eval_report.json\n";
  return 0;
}

int cmd_gradcheck(const ConfigArgs& args) {
  const tps::RunConfig cfg = resolve_config(args);
  const auto reports = tps::grad_check_all(cfg);
  bool ok = true;
  std::printf("%-22s %12s %10s %8s  %s\n", "component", "max_rel_err", "tolerance", "coords",
              "status");
  for (const auto& r : reports) {
    std::printf("%-22s %12.3e %10.0e %8zu  %s\n", r.name.c_str(), r.max_rel_err, r.tolerance,
                r.coords, r.pass ? "pass" : "FAIL");
    ok = ok && r.pass;
  }
  return ok ? 0 : 1;
}

int cmd_export_attn(const ConfigArgs& args, const std::string& checkpoint, const std::string& out,
                    const std::string& split) {
  const tps::RunConfig cfg = resolve_config(args);
  auto s = tps::make_session(cfg);
  tps::load_checkpoint(checkpoint, *s);
  tps::export_attention(*s, pick_split(*s, split), out);
  std::cout << "wrote attention maps to " << out << "\n";
  return 0;
}

int cmd_rank(const ConfigArgs& args, const std::string& checkpoint, const std::string& query,
             int top, const std::string& split) {
  tps::require(top >= 1, "--top must be positive");
  const tps::RunConfig cfg = resolve_config(args);
  auto s = tps::make_session(cfg);
  tps::load_checkpoint(checkpoint, *s);
  const tps::Dataset& data = pick_split(*s, split);

  std::vector<int> tokens;
  std::istringstream is(query);
  for (std::string word; is >> word;) {
    const int id = s->corpus.vocab.id(word);
    tps::require(id >= 0, "query token '" + word + "' is not in the corpus vocabulary");
    tokens.push_back(id);
  }
  tps::require(!tokens.empty(), "empty query");

  tps::TpsModel& model = s->model;
  const tps::Detector det =
      tps::jittered_detector(tps::jitter_params(cfg), tps::derive_seed(cfg.seed, "detect"));
  const tps::ImageEmbedder embed_image = [&model](const tps::Tensor& patch) {
    return tps::tpan_forward(model.net, patch, tps::GuidanceMode::baseline, -1, nullptr).e_i;
  };
  const auto gallery = tps::build_gallery(data, det, embed_image, tps::eval_config(cfg));
  tps::require(!gallery.empty(), "gallery is empty for split '" + split + "'");

  const tps::Tensor e_t = model.net.text_encoder.forward(tokens);
  std::vector<double> sims(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) sims[i] = tps::dot(e_t, gallery[i].embedding);
  const auto order = tps::rank_descending(sims);

  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(top), order.size());
  for (std::size_t r = 0; r < n; ++r) {
    const auto& g = gallery[order[r]];
    std::printf("%2zu  %-12s box %.1f,%.1f %.1fx%.1f  score %.3f  sim %+.4f\n", r + 1,
                g.scene_id.c_str(), g.det.box.x, g.det.box.y, g.det.box.w, g.det.box.h,
                g.det.score, sims[order[r]]);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-guided text-based person search (desk-scale)"};
  app.require_subcommand(1);

  ConfigArgs synth_args;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  add_config_flags(synth, synth_args);
  synth->add_option("--out", synth_out, "output corpus directory")->required();

  std::string stats_data;
  bool stats_json_flag = false;
  auto* stats = app.add_subcommand("stats", "corpus summary and caption-length histogram");
  stats->add_option("--data", stats_data, "corpus directory")->required();
  stats->add_flag("--json", stats_json_flag, "emit JSON instead of the table");

  std::string validate_data;
  int validate_cpb = 2;
  auto* validate = app.add_subcommand("validate", "check corpus invariants");
  validate->add_option("--data", validate_data, "corpus directory")->required();
  validate->add_option("--captions-per-box", validate_cpb, "expected captions per labeled box");

  ConfigArgs train_args;
  std::string train_out;
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_config_flags(train, train_args);
  train->add_option("--out", train_out, "output directory")->required();

  ConfigArgs eval_args;
  std::string eval_ckpt, eval_out, eval_split = "test";
  auto* eval = app.add_subcommand("eval", "run the retrieval protocol on a split");
  add_config_flags(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--out", eval_out, "output directory")->required();
  eval->add_option("--split", eval_split, "train, val, or test");

  ConfigArgs grad_args;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_config_flags(grad, grad_args);

  ConfigArgs attn_args;
  std::string attn_ckpt, attn_out, attn_split = "test";
  auto* attn = app.add_subcommand("export-attn", "write attention maps for every labeled box");
  add_config_flags(attn, attn_args);
  attn->add_option("--checkpoint", attn_ckpt, "checkpoint file")->required();
  attn->add_option("--out", attn_out, "output directory")->required();
  attn->add_option("--split", attn_split, "train, val, or test");

  ConfigArgs rank_args;
  std::string rank_ckpt, rank_query, rank_split = "test";
  int rank_top = 10;
  auto* rank = app.add_subcommand("rank", "rank gallery boxes against a free-text query");
  add_config_flags(rank, rank_args);
  rank->add_option("--checkpoint", rank_ckpt, "checkpoint file")->required();
  rank->add_option("--query", rank_query, "query text (corpus vocabulary tokens)")->required();
  rank->add_option("--top", rank_top, "how many results to print");
  rank->add_option("--split", rank_split, "train, val, or test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_args, synth_out);
    if (stats->parsed()) return cmd_stats(stats_data, stats_json_flag);
    if (validate->parsed()) return cmd_validate(validate_data, validate_cpb);
    if (train->parsed()) return cmd_train(train_args, train_out);
    if (eval->parsed()) return cmd_eval(eval_args, eval_ckpt, eval_out, eval_split);
    if (grad->parsed()) return cmd_gradcheck(grad_args);
    if (attn->parsed()) return cmd_export_attn(attn_args, attn_ckpt, attn_out, attn_split);
    if (rank->parsed()) return cmd_rank(rank_args, rank_ckpt, rank_query, rank_top, rank_split);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;  // unreachable with require_subcommand(1)
}
