// Command-line front end: data generation, stats, training, evaluation,
// single-sample prediction, ablation sweeps, and report rendering.
//
// Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 numerical abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cma/config.hpp"
#include "cma/data.hpp"
#include "cma/metrics.hpp"
#include "cma/model.hpp"
#include "cma/report.hpp"
#include "cma/train.hpp"
#include "cma/vocab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GlobalOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;  // -1: keep config value
  std::string device = "cpu";
};

void add_global_opts(CLI::App* cmd, GlobalOpts& g) {
  cmd->add_option("--config", g.config_path, "JSON config file");
  cmd->add_option("--set", g.overrides,
                  "config override key=value (dots reach into loss.*)");
  cmd->add_option("--seed", g.seed, "RNG seed override");
  cmd->add_option("--device", g.device, "compute device (only cpu exists)");
}

json parse_override_value(const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  try {
    std::size_t used = 0;
    if (raw.find_first_of(".eE") == std::string::npos) {
      const long long v = std::stoll(raw, &used);
      if (used == raw.size()) return v;
    } else {
      const double v = std::stod(raw, &used);
      if (used == raw.size()) return v;
    }
  } catch (const std::exception&) {
  }
  return raw;  // strings (enum names) fall through
}

cma::ModelConfig resolve_config(const GlobalOpts& g) {
  cma::ModelConfig cfg;
  if (!g.config_path.empty()) cfg = cma::load_config(g.config_path);
  if (!g.overrides.empty()) {
    json patch = json::object();
    for (const auto& kv : g.overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw cma::ConfigError("--set expects key=value, got: " + kv);
      const std::string key = kv.substr(0, eq);
      const json value = parse_override_value(kv.substr(eq + 1));
      const auto dot = key.find('.');
      if (dot == std::string::npos) {
        patch[key] = value;
      } else {
        patch[key.substr(0, dot)][key.substr(dot + 1)] = value;
      }
    }
    cfg = cma::config_from_json(patch, cfg);
  }
  if (g.seed >= 0) cfg.seed = static_cast<std::uint64_t>(g.seed);
  if (g.device != "cpu")
    throw cma::ConfigError("unknown device: " + g.device);
  return cfg;
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

cma::Vocab load_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw cma::DataError("cannot open vocabulary file: " + path);
  cma::Vocab v;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) v.add(line);
  return v;
}

void save_vocab_file(const cma::Vocab& v, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw cma::DataError("cannot write vocabulary file: " + path);
  for (const auto& w : v.words()) out << w << "\n";
}

struct DataArgs {
  std::string annotations;
  std::string features_dir;
  std::string vocab_path;
  std::string format = "jsonl";
  double default_duration = 30.0;
};

void add_data_opts(CLI::App* cmd, DataArgs& d, bool required = true) {
  auto* a = cmd->add_option("--data", d.annotations, "annotation file");
  auto* f = cmd->add_option("--features", d.features_dir,
                            "directory of <id>.cmaf feature files");
  if (required) {
    a->required();
    f->required();
  }
  cmd->add_option("--vocab", d.vocab_path,
                  "vocabulary file (one word per line)");
  cmd->add_option("--format", d.format, "annotation format: jsonl|charades_txt");
  cmd->add_option("--default-duration", d.default_duration,
                  "duration for formats that do not carry one (seconds)");
}

cma::Dataset load_data(const DataArgs& d, const cma::Vocab* vocab_override) {
  std::vector<std::string> warnings;
  const auto recs =
      cma::parse_annotations(d.annotations, cma::parse_annotation_format(d.format),
                             &warnings, d.default_duration);
  print_warnings(warnings);
  cma::Vocab vocab;
  if (vocab_override != nullptr) {
    vocab = *vocab_override;
  } else if (!d.vocab_path.empty()) {
    vocab = load_vocab_file(d.vocab_path);
  } else {
    std::vector<std::string> texts;
    for (const auto& r : recs) texts.push_back(r.text);
    vocab = cma::build_vocab(texts);
  }
  return cma::assemble_dataset(recs, d.features_dir, std::move(vocab));
}

/// Token ids must index into the embedding table, so the table is sized to
/// the actual vocabulary when the config default is too small.
void fit_vocab(cma::ModelConfig& cfg, const cma::Vocab& vocab) {
  if (cfg.vocab_size < vocab.size()) cfg.vocab_size = vocab.size();
}

void write_predictions(const std::vector<cma::PredictionRow>& rows,
                       const std::string& path) {
  std::ofstream out(path);
  if (!out) throw cma::DataError("cannot write predictions: " + path);
  for (const auto& r : rows) {
    json j{{"id", r.id},
           {"pred_start", r.pred_seconds.first},
           {"pred_end", r.pred_seconds.second},
           {"pred_start_norm", r.sanitized.start},
           {"pred_end_norm", r.sanitized.end},
           {"iou", r.iou}};
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------

int cmd_generate_data(const std::string& out_dir, cma::SyntheticConfig scfg,
                      int test_count) {
  const int train_count = scfg.count;
  scfg.count = train_count + test_count;
  const auto ds = cma::generate_synthetic(scfg);

  fs::create_directories(fs::path(out_dir) / "features");
  const auto recs = cma::annotation_records(ds);
  std::vector<cma::AnnotationRecord> train_recs(recs.begin(),
                                                recs.begin() + train_count);
  std::vector<cma::AnnotationRecord> test_recs(recs.begin() + train_count,
                                               recs.end());
  cma::write_annotations_jsonl(train_recs,
                               (fs::path(out_dir) / "train.jsonl").string());
  cma::write_annotations_jsonl(test_recs,
                               (fs::path(out_dir) / "test.jsonl").string());
  for (const auto& s : ds.samples)
    cma::write_features(
        (fs::path(out_dir) / "features" / (s.id + ".cmaf")).string(),
        s.video.features);
  save_vocab_file(ds.vocab, (fs::path(out_dir) / "vocab.txt").string());

  const auto st = cma::dataset_stats(ds);
  std::cout << "wrote " << train_count << " train / " << test_count
            << " test samples to " << out_dir << "\n"
            << cma::format_stats(st);
  return 0;
}

int cmd_stats(const DataArgs& d) {
  std::vector<std::string> warnings;
  const auto recs =
      cma::parse_annotations(d.annotations, cma::parse_annotation_format(d.format),
                             &warnings, d.default_duration);
  print_warnings(warnings);
  if (recs.empty()) throw cma::DataError("no usable annotations");
  cma::Dataset ds;
  for (const auto& r : recs) {
    cma::GroundingSample s;
    s.id = r.id;
    s.gt = r.normalized();
    ds.samples.push_back(std::move(s));
  }
  std::cout << cma::format_stats(cma::dataset_stats(ds));
  return 0;
}

int cmd_train(const GlobalOpts& g, const DataArgs& data, const DataArgs& val,
              const std::string& out_dir) {
  auto cfg = resolve_config(g);
  const auto train_ds = load_data(data, nullptr);
  cma::Dataset val_ds;
  val_ds.vocab = train_ds.vocab;
  if (!val.annotations.empty()) {
    // validation shares the training vocabulary
    val_ds = load_data(val, &train_ds.vocab);
  }
  fit_vocab(cfg, train_ds.vocab);
  cfg.validate();
  for (const auto& s : train_ds.samples)
    if (s.video.features.rows() != cfg.d_v)
      throw cma::ConfigError(
          "feature dim " + std::to_string(s.video.features.rows()) +
          " does not match configured d_v " + std::to_string(cfg.d_v) +
          " (use --set d_v=" + std::to_string(s.video.features.rows()) + ")");

  fs::create_directories(out_dir);
  std::ofstream log((fs::path(out_dir) / "metrics.jsonl").string());
  if (!log) throw cma::DataError("cannot write metrics log in " + out_dir);

  const auto res = cma::train(cfg, train_ds, val_ds, &log);

  const auto best = cma::make_checkpoint(cfg, res, train_ds.vocab, true);
  const auto final_ck = cma::make_checkpoint(cfg, res, train_ds.vocab, false);
  cma::save_checkpoint(best, (fs::path(out_dir) / "model.ckpt").string());
  cma::save_checkpoint(final_ck, (fs::path(out_dir) / "final.ckpt").string());

  std::cout << "trained " << res.history.size() << " epochs on "
            << train_ds.samples.size() << " samples\n";
  if (!res.history.empty() && res.history.back().has_val) {
    std::cout << "best validation mIoU " << res.best_miou << " at epoch "
              << res.best_epoch << "\n";
    std::cout << cma::format_report(res.history.back().val);
  }
  std::cout << "checkpoints and metrics in " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const DataArgs& data,
             bool against_true, const std::string& pred_out) {
  const auto ck = cma::load_checkpoint(ckpt_path);
  const auto vocab = ck.vocab();
  const auto ds = load_data(data, &vocab);
  for (const auto& s : ds.samples)
    if (s.video.features.rows() != ck.config.d_v)
      throw cma::ConfigError("feature dim " +
                             std::to_string(s.video.features.rows()) +
                             " does not match checkpoint d_v " +
                             std::to_string(ck.config.d_v));
  std::vector<cma::PredictionRow> rows;
  const auto rep =
      cma::evaluate_dataset(ck.params, ck.config, ds, against_true, &rows);
  if (!pred_out.empty()) write_predictions(rows, pred_out);
  std::cout << cma::format_report(rep);
  return 0;
}

int cmd_predict(const std::string& ckpt_path, const std::string& features_path,
                const std::string& query, double duration) {
  const auto ck = cma::load_checkpoint(ckpt_path);
  const auto vocab = ck.vocab();
  const cma::Mat raw = cma::read_features(features_path);
  if (raw.rows() != ck.config.d_v)
    throw cma::ConfigError("feature dim does not match checkpoint d_v");
  const cma::Mat clips = cma::resample_clips(raw, ck.config.n_clips);
  const auto pred =
      cma::predict(ck.params, ck.config, clips, vocab.encode(query));
  const auto clean = cma::sanitize_for_metrics(pred);
  const auto sec = cma::denormalize_interval(clean, duration);
  json j{{"pred_start", sec.first},
         {"pred_end", sec.second},
         {"pred_start_norm", clean.start},
         {"pred_end_norm", clean.end}};
  std::cout << j.dump() << "\n";
  return 0;
}

struct AblationRow {
  std::string name;
  double miou = 0.0;
  double r1_50 = 0.0;
};

int cmd_ablate(const GlobalOpts& g, const DataArgs& data, const DataArgs& val,
               const std::string& axis, const std::string& seeds_csv,
               const std::string& out_path) {
  const auto base_cfg = resolve_config(g);
  const auto train_ds = load_data(data, nullptr);
  const auto val_ds = load_data(val, &train_ds.vocab);

  std::vector<std::uint64_t> seeds;
  std::stringstream ss(seeds_csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    seeds.push_back(std::stoull(tok));
  }
  if (seeds.empty()) throw cma::ConfigError("ablate: no seeds given");

  struct Variant {
    std::string name;
    cma::ModelConfig cfg;
  };
  std::vector<Variant> variants;
  if (axis == "structure") {
    for (auto s : {cma::Structure::Full, cma::Structure::DecoderOnly,
                   cma::Structure::EncoderOnly}) {
      auto c = base_cfg;
      c.structure = s;
      variants.push_back({cma::to_string(s), c});
    }
  } else if (axis == "pe") {
    for (auto p : {cma::PEVariant::None, cma::PEVariant::Learned,
                   cma::PEVariant::Sinusoidal}) {
      auto c = base_cfg;
      c.pe_variant = p;
      variants.push_back({cma::to_string(p), c});
    }
  } else if (axis == "fusion") {
    for (auto f : {cma::FusionOp::Add, cma::FusionOp::Concat,
                   cma::FusionOp::Hadamard}) {
      auto c = base_cfg;
      c.fusion_op = f;
      variants.push_back({cma::to_string(f), c});
    }
  } else if (axis == "loss") {
    const std::pair<double, double> rows[] = {
        {0.5, 1.0}, {2.0, 0.1}, {2.0, 0.2}, {10.0, 0.1}};
    for (const auto& [alpha, beta] : rows) {
      auto c = base_cfg;
      c.loss.alpha = alpha;
      c.loss.beta = beta;
      std::ostringstream name;
      name << "alpha=" << alpha << ",beta=" << beta;
      variants.push_back({name.str(), c});
    }
  } else {
    throw cma::ConfigError("unknown ablation axis: " + axis +
                           " (expected structure|pe|fusion|loss)");
  }

  std::vector<AblationRow> table;
  for (auto& v : variants) {
    fit_vocab(v.cfg, train_ds.vocab);
    double miou = 0.0, r1 = 0.0;
    for (const auto seed : seeds) {
      auto c = v.cfg;
      c.seed = seed;
      c.validate();
      const auto res = cma::train(c, train_ds, val_ds, nullptr);
      const auto rep =
          cma::evaluate_dataset(res.best_params, c, val_ds);
      miou += rep.miou;
      r1 += rep.r1_at.at(0.5);
      std::cerr << v.name << " seed " << seed << ": miou " << rep.miou
                << " r1@0.5 " << rep.r1_at.at(0.5) << "\n";
    }
    table.push_back({v.name, miou / seeds.size(), r1 / seeds.size()});
  }

  std::ostringstream out;
  out << "axis: " << axis << " (mean over " << seeds.size() << " seed"
      << (seeds.size() > 1 ? "s" : "") << ")\n";
  char line[128];
  std::snprintf(line, sizeof(line), "%-24s %8s %8s\n", "variant", "mIoU",
                "R1@0.5");
  out << line;
  for (const auto& r : table) {
    std::snprintf(line, sizeof(line), "%-24s %8.2f %8.2f\n", r.name.c_str(),
                  r.miou, r.r1_50);
    out << line;
  }
  std::cout << out.str();
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw cma::DataError("cannot write ablation table: " + out_path);
    f << out.str();
  }
  return 0;
}

int cmd_report(const std::string& log_path, const std::string& pred_path,
               const std::string& out_dir) {
  const auto log = cma::parse_metrics_log_file(log_path);
  fs::create_directories(out_dir);

  {
    std::ofstream svg((fs::path(out_dir) / "loss_curve.svg").string());
    svg << cma::loss_curve_svg(log);
  }
  if (!pred_path.empty()) {
    std::ifstream in(pred_path);
    if (!in) throw cma::DataError("cannot open predictions: " + pred_path);
    std::vector<double> ious;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        ious.push_back(json::parse(line).at("iou").get<double>());
      } catch (const json::exception& e) {
        throw cma::DataError(pred_path + ":" + std::to_string(line_no) + ": " +
                             e.what());
      }
    }
    std::ofstream svg((fs::path(out_dir) / "iou_histogram.svg").string());
    svg << cma::iou_histogram_svg(ious);
  }
  const auto summary = cma::summarize(log);
  {
    std::ofstream txt((fs::path(out_dir) / "summary.txt").string());
    txt << summary;
  }
  std::cout << summary << "report written to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"temporal grounding model: train, evaluate, ablate"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write a synthetic dataset");
  std::string gen_out = "data";
  int gen_test_count = 500;
  cma::SyntheticConfig scfg;
  scfg.count = 2000;
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--count", scfg.count, "training sample count");
  gen->add_option("--test-count", gen_test_count, "held-out sample count");
  gen->add_option("--n-clips", scfg.n_clips, "raw clips per video");
  gen->add_option("--d-v", scfg.d_v, "clip feature dimension");
  gen->add_option("--vocab-size", scfg.vocab_size, "vocabulary size");
  gen->add_option("--gen-seed", scfg.seed, "generator seed");
  gen->add_option("--bias-sigma", scfg.bias_sigma,
                  "annotation noise scale (fraction of interval length)");
  gen->add_option("--mean-ratio", scfg.mean_ratio, "mean interval ratio");
  gen->add_option("--duration", scfg.duration, "video duration in seconds");

  // stats
  auto* stats = app.add_subcommand("stats", "interval ratio distribution");
  DataArgs stats_data;
  stats->add_option("--data", stats_data.annotations, "annotation file")
      ->required();
  stats->add_option("--format", stats_data.format,
                    "annotation format: jsonl|charades_txt");
  stats->add_option("--default-duration", stats_data.default_duration,
                    "duration for formats without one");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  GlobalOpts tr_g;
  DataArgs tr_data, tr_val;
  std::string tr_out = "run";
  add_global_opts(tr, tr_g);
  add_data_opts(tr, tr_data);
  tr->add_option("--val-data", tr_val.annotations, "validation annotations");
  tr->add_option("--val-features", tr_val.features_dir,
                 "validation feature directory");
  tr->add_option("--out", tr_out, "output directory for checkpoints and log");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  GlobalOpts ev_g;
  DataArgs ev_data;
  std::string ev_ckpt, ev_pred_out;
  bool ev_true = false;
  add_global_opts(ev, ev_g);
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  add_data_opts(ev, ev_data);
  ev->add_flag("--against-true", ev_true,
               "score against unbiased truth where the data carries it");
  ev->add_option("--pred-out", ev_pred_out, "per-sample prediction jsonl");

  // predict
  auto* pr = app.add_subcommand("predict", "locate one query in one video");
  GlobalOpts pr_g;
  std::string pr_ckpt, pr_features, pr_query;
  double pr_duration = 30.0;
  add_global_opts(pr, pr_g);
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
  pr->add_option("--features", pr_features, "feature file")->required();
  pr->add_option("--query", pr_query, "natural-language query")->required();
  pr->add_option("--duration", pr_duration, "video duration in seconds");

  // ablate
  auto* ab = app.add_subcommand("ablate", "compare model variants");
  GlobalOpts ab_g;
  DataArgs ab_data, ab_val;
  std::string ab_axis, ab_seeds = "0,1,2", ab_out;
  add_global_opts(ab, ab_g);
  add_data_opts(ab, ab_data);
  ab->add_option("--val-data", ab_val.annotations, "validation annotations")
      ->required();
  ab->add_option("--val-features", ab_val.features_dir,
                 "validation feature directory");
  ab->add_option("--axis", ab_axis, "structure|pe|fusion|loss")->required();
  ab->add_option("--seeds", ab_seeds, "comma-separated seed list");
  ab->add_option("--out", ab_out, "also write the table to this file");

  // report
  auto* rp = app.add_subcommand("report", "render plots from a metrics log");
  std::string rp_log, rp_pred, rp_out = "report";
  rp->add_option("--log", rp_log, "metrics jsonl")->required();
  rp->add_option("--pred", rp_pred, "prediction jsonl for the IoU histogram");
  rp->add_option("--out", rp_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate_data(gen_out, scfg, gen_test_count);
    if (stats->parsed()) return cmd_stats(stats_data);
    if (tr->parsed()) {
      if (tr_val.features_dir.empty()) tr_val.features_dir = tr_data.features_dir;
      tr_val.vocab_path.clear();
      tr_val.format = tr_data.format;
      return cmd_train(tr_g, tr_data, tr_val, tr_out);
    }
    if (ev->parsed()) {
      resolve_config(ev_g);  // validates --device/--set usage
      return cmd_eval(ev_ckpt, ev_data, ev_true, ev_pred_out);
    }
    if (pr->parsed()) {
      resolve_config(pr_g);
      return cmd_predict(pr_ckpt, pr_features, pr_query, pr_duration);
    }
    if (ab->parsed()) {
      if (ab_val.features_dir.empty()) ab_val.features_dir = ab_data.features_dir;
      ab_val.format = ab_data.format;
      return cmd_ablate(ab_g, ab_data, ab_val, ab_axis, ab_seeds, ab_out);
    }
    if (rp->parsed()) return cmd_report(rp_log, rp_pred, rp_out);
  } catch (const cma::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cma::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const cma::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
