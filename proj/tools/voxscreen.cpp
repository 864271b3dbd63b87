// voxscreen: dataset generation, training, evaluation, inference and latency
// benchmarking from one JSON run config.
//
// Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "voxscreen/checkpoint.hpp"
#include "voxscreen/config.hpp"
#include "voxscreen/kernels.hpp"
#include "voxscreen/protocol.hpp"
#include "voxscreen/report.hpp"

#ifndef VOXSCREEN_VERSION
#define VOXSCREEN_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace voxscreen;

namespace {

struct Options {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
  int threads = 0;
  std::vector<std::string> sets;
  std::string checkpoint;
  bool anchor_sweep = false;
  std::vector<std::string> inputs;
  int bench_volumes = 10;
};

config::RunConfig resolve(const Options& o) {
  std::vector<std::string> overrides = o.sets;
  if (o.seed) overrides.push_back("seed=" + std::to_string(*o.seed));
  config::RunConfig cfg = config::load(o.config, overrides);
  if (!o.out.empty()) cfg.out_dir = o.out;
  return cfg;
}

void write_json(const fs::path& path, const json& j) { report::write_text(path, j.dump(2) + "\n"); }

// run.json holds everything needed to reproduce the run; wall time goes to
// timings.json so repeated runs leave byte-identical records.
void write_run_record(const config::RunConfig& cfg, const std::string& command, const Options& o, double seconds) {
  const fs::path out(cfg.out_dir);
  write_json(out / "run.json", {{"command", command},
                                {"code_version", VOXSCREEN_VERSION},
                                {"seed", cfg.seed},
                                {"threads", kernels::num_threads()},
                                {"config_file", o.config},
                                {"overrides", o.sets},
                                {"config", cfg.to_json()}});
  write_json(out / "timings.json", {{"command", command}, {"wall_seconds", seconds}});
}

struct Data {
  protocol::Dataset set;
  std::vector<eval::TrainTest> splits;
};

Data load_data(const config::RunConfig& cfg, bool with_splits = false) {
  Data d;
  if (!cfg.dataset_path.empty()) {
    const fs::path dir(cfg.dataset_path);
    spdlog::info("loading dataset from {}", dir.string());
    d.set = protocol::load_dataset(dir / "manifest.json");
    if (with_splits) {
      std::ifstream f(dir / "splits.json");
      d.splits = f ? synth::splits_from_json(json::parse(f)) : synth::plan_splits(cfg.split, d.set.labels);
    }
  } else {
    spdlog::info("synthesizing {} {} {} in memory", cfg.dataset.sample_count(), synth::to_string(cfg.dataset.target),
                 synth::to_string(cfg.dataset.kind));
    d.set = protocol::synth_dataset(cfg.dataset);
    if (with_splits) d.splits = synth::plan_splits(cfg.split, d.set.labels);
  }
  spdlog::info("{} volumes", d.set.size());
  return d;
}

std::vector<size_t> all_indices(size_t n) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

protocol::ClsRun cls_run(const config::RunConfig& cfg) { return {cfg.model, cfg.preprocess, cfg.train, cfg.eval, cfg.seed}; }
protocol::DetRun det_run(const config::RunConfig& cfg) {
  return {cfg.detector, cfg.preprocess, cfg.train, cfg.eval, cfg.seed};
}

json summary_json(const eval::Summary& s) {
  json j = s.to_json();
  j["text"] = s.format();
  return j;
}

json class_metrics_json(const eval::ClassMetrics& m) {
  return {{"tpr", m.tpr}, {"fpr", m.fpr}, {"tp", m.tp}, {"fn", m.fn}, {"fp", m.fp}, {"tn", m.tn}, {"diagnostic", m.diagnostic}};
}

json pr_json(const eval::PrMetrics& m, double ap) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"ap", ap},      {"tp", m.tp},
          {"kept", m.kept},           {"n_gt", m.n_gt},     {"diagnostic", m.diagnostic}};
}

// Checkpoints ---------------------------------------------------------------------

std::unique_ptr<models::Classifier<float>> load_classifier(const std::string& path, const config::RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "classifier") throw CheckpointError(path + " is not a classifier checkpoint");
  const auto spec = models::ModelSpec::from_json(ck.meta.at("model"));
  if (!(spec == cfg.model)) {
    throw CheckpointError(fmt::format("checkpoint architecture {} does not match config model {}", ck.meta.at("model").dump(),
                                      cfg.model.to_json().dump()));
  }
  auto model = std::make_unique<models::Classifier<float>>(spec, 0);
  auto state = model->state();
  restore_tensors(ck, state);
  model->set_training(false);
  return model;
}

std::unique_ptr<detect::Detector> load_detector(const std::string& path, const config::RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "detector") throw CheckpointError(path + " is not a detector checkpoint");
  const config::RunConfig saved = config::RunConfig::from_json(ck.meta.at("config"));
  if (saved.to_json()["detector"] != cfg.to_json()["detector"]) {
    throw CheckpointError("checkpoint detector " + saved.to_json()["detector"].dump() + " does not match config detector " +
                          cfg.to_json()["detector"].dump());
  }
  if (saved.preprocess.resample_factor != cfg.preprocess.resample_factor) {
    throw CheckpointError("checkpoint was trained at resample factor " + std::to_string(saved.preprocess.resample_factor));
  }
  auto model = detect::make_detector(saved.detector, saved.preprocess.resample_factor, 0);
  auto state = model->state();
  restore_tensors(ck, state);
  model->set_training(false);
  return model;
}

// Commands --------------------------------------------------------------------------

void cmd_gen(const config::RunConfig& cfg) {
  const auto ds = synth::gen_dataset(cfg.dataset, cfg.split, cfg.out_dir);
  int64_t boxes = 0;
  for (const auto& e : ds.entries) boxes += int64_t(e.boxes.size());
  spdlog::info("wrote {} volumes with {} boxes to {}", ds.entries.size(), boxes, cfg.out_dir);
}

void cmd_train_cls(const config::RunConfig& cfg) {
  const Data d = load_data(cfg);
  const auto inputs = protocol::classifier_inputs(d.set, cfg.preprocess);
  models::Classifier<float> model(cfg.model, Rng(cfg.seed).split("init").next_u64());
  std::vector<double> losses;
  const auto idx = all_indices(d.set.size());
  protocol::train_classifier(model, inputs, d.set.labels, idx, cls_run(cfg), [&](int64_t step, double loss) {
    losses.push_back(loss);
    spdlog::debug("step {} loss {:.5f}", step, loss);
  });
  const fs::path out(cfg.out_dir);
  report::write_loss_csv(out / "loss.csv", losses);
  save_checkpoint(out / "classifier.ckpt",
                  {{"kind", "classifier"}, {"model", cfg.model.to_json()}, {"config", cfg.to_json()},
                   {"code_version", VOXSCREEN_VERSION}},
                  model.state());
  spdlog::info("trained {} steps, final loss {:.4f}; checkpoint {}", losses.size(), losses.empty() ? 0.0 : losses.back(),
               (out / "classifier.ckpt").string());
}

void cmd_eval_cls(const config::RunConfig& cfg, const Options& o) {
  const Data d = load_data(cfg, o.checkpoint.empty());
  const fs::path out(cfg.out_dir);
  std::vector<eval::ClassMetrics> runs;
  json metrics;
  if (!o.checkpoint.empty()) {
    auto model = load_classifier(o.checkpoint, cfg);
    const auto inputs = protocol::classifier_inputs(d.set, cfg.preprocess);
    const auto scores = protocol::score_classifier(*model, inputs, all_indices(d.set.size()));
    runs.push_back(eval::classification_metrics(scores, d.set.labels, cfg.eval.classification_threshold));
    metrics["protocol"] = "checkpoint";
  } else {
    if (cfg.split.mode != eval::SplitPlan::Mode::kfold) spdlog::warn("eval-cls with {} random splits", d.splits.size());
    protocol::cross_validate(d.set, d.splits, cls_run(cfg), 0, [&](size_t f, const protocol::FoldResult& r) {
      spdlog::info("fold {}/{}: TPR {:.2f} FPR {:.2f} ({:.0f} s)", f + 1, d.splits.size(), r.metrics.tpr, r.metrics.fpr,
                   r.train_seconds);
      report::write_loss_csv(out / fmt::format("loss_fold{}.csv", f), r.losses);
      runs.push_back(r.metrics);
    });
    metrics["protocol"] = cfg.split.mode == eval::SplitPlan::Mode::kfold ? "kfold" : "random";
  }
  std::vector<double> tpr, fpr;
  metrics["runs"] = json::array();
  for (const auto& m : runs) {
    tpr.push_back(m.tpr);
    fpr.push_back(m.fpr);
    metrics["runs"].push_back(class_metrics_json(m));
  }
  const auto t = eval::aggregate(tpr), f = eval::aggregate(fpr);
  metrics["tpr"] = summary_json(t);
  metrics["fpr"] = summary_json(f);
  write_json(out / "metrics.json", metrics);
  const std::string table =
      eval::render_table(report::classification_header(), {report::classification_row(cfg.model, cfg.preprocess, t, f)});
  report::write_text(out / "table.txt", table);
  fmt::print("{}", table);
}

void cmd_train_det(const config::RunConfig& cfg) {
  const Data d = load_data(cfg);
  auto model = detect::make_detector(cfg.detector, cfg.preprocess.resample_factor, Rng(cfg.seed).split("init").next_u64());
  std::vector<double> losses;
  protocol::train_detector(*model, d.set, all_indices(d.set.size()), det_run(cfg), [&](int64_t step, double loss) {
    losses.push_back(loss);
    spdlog::debug("step {} loss {:.5f}", step, loss);
  });
  const fs::path out(cfg.out_dir);
  report::write_loss_csv(out / "loss.csv", losses);
  save_checkpoint(out / "detector.ckpt", {{"kind", "detector"}, {"config", cfg.to_json()}, {"code_version", VOXSCREEN_VERSION}},
                  model->state());
  spdlog::info("trained {} steps, final loss {:.4f}; checkpoint {}", losses.size(), losses.empty() ? 0.0 : losses.back(),
               (out / "detector.ckpt").string());
}

void cmd_eval_det(const config::RunConfig& base, const Options& o) {
  const Data d = load_data(base, o.checkpoint.empty());
  const fs::path out(base.out_dir);
  std::vector<std::string> presets{base.detector.anchors.sizes_label()};
  if (o.anchor_sweep) presets = detect::AnchorConfig::preset_names();

  json metrics = {{"rows", json::array()}};
  std::vector<std::vector<std::string>> rows;
  for (const auto& preset : presets) {
    config::RunConfig cfg = base;
    if (o.anchor_sweep) cfg.detector.anchors.sizes = detect::AnchorConfig::preset_sizes(preset);
    const fs::path dir = o.anchor_sweep ? out / preset : out;
    fs::create_directories(dir);
    std::vector<protocol::SplitResult> results;
    if (!o.checkpoint.empty()) {
      auto model = load_detector(o.checkpoint, cfg);
      protocol::SplitResult r;
      const auto idx = all_indices(d.set.size());
      r.detections = protocol::run_detector(*model, d.set, idx, det_run(cfg));
      r.truth = d.set.ground_truth(idx);
      r.pr = eval::detection_pr(r.detections, r.truth, cfg.eval);
      r.ap = r.truth.empty() ? 0.0 : eval::average_precision(r.detections, r.truth, cfg.eval.iou_threshold);
      results.push_back(std::move(r));
    } else {
      results = protocol::evaluate_detector(d.set, d.splits, det_run(cfg), 0, [&](size_t s, const protocol::SplitResult& r) {
        spdlog::info("{} split {}/{}: P {:.2f} R {:.2f} AP {:.2f} ({:.0f} s)", preset, s + 1, d.splits.size(), r.pr.precision,
                     r.pr.recall, r.ap, r.train_seconds);
        report::write_loss_csv(dir / fmt::format("loss_split{}.csv", s), r.losses);
      });
    }
    std::vector<double> p, rc, ap;
    json row = {{"model", report::detector_name(cfg.detector.family)},
                {"network", report::network_name(cfg.detector.backbone)},
                {"anchor_size", preset},
                {"splits", json::array()}};
    for (size_t s = 0; s < results.size(); ++s) {
      const auto& r = results[s];
      p.push_back(r.pr.precision);
      rc.push_back(r.pr.recall);
      ap.push_back(r.ap);
      row["splits"].push_back(pr_json(r.pr, r.ap));
      report::write_pr_csv(dir / fmt::format("pr_split{}.csv", s),
                           eval::pr_curve(r.detections, r.truth, cfg.eval.iou_threshold));
    }
    const auto sp = eval::aggregate(p), sr = eval::aggregate(rc), sa = eval::aggregate(ap);
    row["precision"] = summary_json(sp);
    row["recall"] = summary_json(sr);
    row["ap"] = summary_json(sa);
    metrics["rows"].push_back(row);
    rows.push_back(report::detection_row(cfg.detector, sp, sr, sa));
  }
  write_json(out / "metrics.json", metrics);
  const std::string table = eval::render_table(report::detection_header(), rows) +
                            fmt::format("precision and recall at score >= {}, AP at IoU {}\n", base.eval.score_threshold,
                                        base.eval.iou_threshold);
  report::write_text(out / "table.txt", table);
  fmt::print("{}", table);
}

void cmd_infer(const config::RunConfig& cfg, const Options& o) {
  if (o.checkpoint.empty()) throw std::invalid_argument("infer needs --checkpoint");
  if (o.inputs.empty()) throw std::invalid_argument("infer needs at least one volume file");
  auto model = load_detector(o.checkpoint, cfg);
  json dets = json::array();
  for (const auto& path : o.inputs) {
    Volume v = load_volume(path);
    if (v.id().empty()) v.set_id(fs::path(path).stem().string());
    const auto found = detect::detect(*model, v, cfg.preprocess, cfg.eval);
    spdlog::info("{}: {} detections", path, found.size());
    for (const auto& det : found) dets.push_back(detection_to_json(det));
  }
  write_json(fs::path(cfg.out_dir) / "detections.json", dets);
}

void cmd_bench(const config::RunConfig& cfg, const Options& o) {
  const Data d = load_data(cfg);
  std::unique_ptr<detect::Detector> model =
      o.checkpoint.empty() ? detect::make_detector(cfg.detector, cfg.preprocess.resample_factor, cfg.seed)
                           : load_detector(o.checkpoint, cfg);
  std::vector<Volume> volumes;
  for (size_t i = 0; i < d.set.size() && int(i) < o.bench_volumes; ++i) volumes.push_back(d.set.volumes[i]);
  const auto stats = detect::bench_inference(*model, volumes, cfg.preprocess, cfg.eval);
  json j = stats.to_json();
  j["threads"] = kernels::num_threads();
  write_json(fs::path(cfg.out_dir) / "bench.json", j);
  spdlog::info("{} volumes: mean {:.4f} s, median {:.4f} s, p95 {:.4f} s", stats.n, stats.mean_s, stats.median_s, stats.p95_s);
}

spdlog::level::level_enum log_level() {
  const char* env = std::getenv("VOXSCREEN_LOG");
  const std::string v = env ? env : "info";
  if (v == "error") return spdlog::level::err;
  if (v == "debug") return spdlog::level::debug;
  if (v != "info") throw std::invalid_argument("VOXSCREEN_LOG must be error, info or debug, got \"" + v + "\"");
  return spdlog::level::info;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxscreen: 3D baggage CT classification and detection"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "Run config JSON");
  app.add_option("--seed", o.seed, "Seed; overrides the config");
  app.add_option("--out", o.out, "Output directory; overrides out_dir");
  app.add_option("--threads", o.threads, "Worker threads (1 is bit-deterministic)")->check(CLI::PositiveNumber);
  app.add_option("--set", o.sets, "Override a dotted config key, KEY=VALUE (repeatable)")->allow_extra_args(false);

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset with manifest and splits");
  auto* train_cls = app.add_subcommand("train-cls", "Train a classifier on the whole dataset");
  auto* eval_cls = app.add_subcommand("eval-cls", "Cross-validated TPR/FPR, or a checkpoint's");
  eval_cls->add_option("--checkpoint", o.checkpoint, "Evaluate this classifier instead of cross-validating");
  auto* train_det = app.add_subcommand("train-det", "Train a detector on the whole dataset");
  auto* eval_det = app.add_subcommand("eval-det", "Precision/recall and AP over random splits, or a checkpoint's");
  eval_det->add_option("--checkpoint", o.checkpoint, "Evaluate this detector instead of training per split");
  eval_det->add_flag("--anchor-sweep", o.anchor_sweep, "Repeat for every anchor size preset");
  auto* infer = app.add_subcommand("infer", "Detect objects in volume files");
  infer->add_option("--checkpoint", o.checkpoint, "Detector checkpoint")->required();
  infer->add_option("volumes", o.inputs, "VOL1 files")->required();
  auto* bench = app.add_subcommand("bench", "Per-volume inference latency");
  bench->add_option("--checkpoint", o.checkpoint, "Detector checkpoint (default: untrained weights)");
  bench->add_option("--volumes", o.bench_volumes, "Number of volumes to time")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  auto logger = spdlog::stderr_color_mt("voxscreen");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

  const auto t0 = std::chrono::steady_clock::now();
  try {
    spdlog::set_level(log_level());
    if (o.threads > 0) kernels::set_num_threads(o.threads);
    const config::RunConfig cfg = resolve(o);
    fs::create_directories(cfg.out_dir);
    std::string command;
    if (*gen) {
      command = "gen";
      cmd_gen(cfg);
    } else if (*train_cls) {
      command = "train-cls";
      cmd_train_cls(cfg);
    } else if (*eval_cls) {
      command = "eval-cls";
      cmd_eval_cls(cfg, o);
    } else if (*train_det) {
      command = "train-det";
      cmd_train_det(cfg);
    } else if (*eval_det) {
      command = "eval-det";
      cmd_eval_det(cfg, o);
    } else if (*infer) {
      command = "infer";
      cmd_infer(cfg, o);
    } else if (*bench) {
      command = "bench";
      cmd_bench(cfg, o);
    }
    write_run_record(cfg, command, o, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  } catch (const std::invalid_argument& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
