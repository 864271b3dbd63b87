#include "voxscreen/config.hpp"

#include <fstream>
#include <set>

#include <fmt/format.h>

namespace voxscreen::config {

using nlohmann::json;

namespace {

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("{}: expected an object", name()));
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(fmt::format("{}: wrong type ({})", key_path(key), j_.at(key).dump()));
    }
  }

  const json* child(const char* key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string name() const { return path_.empty() ? "config" : path_; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown key " + key_path(key));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// Runs a section check, tagging failures with the section name.
template <typename F>
void checked(const std::string& section, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    const std::string what = e.what();
    // module validators already name their own section
    throw ConfigError(what.starts_with(section) ? what : fmt::format("{}: {}", section, what));
  }
}

json dataset_json(const synth::DatasetConfig& d, const std::string& path) {
  return {{"kind", synth::to_string(d.kind)},
          {"target", synth::to_string(d.target)},
          {"path", path},
          {"bag_dims", {d.bag_dims.d, d.bag_dims.h, d.bag_dims.w}},
          {"crop_min", d.crop_min},
          {"crop_max", d.crop_max},
          {"n_positive", d.n_positive},
          {"n_negative", d.n_negative},
          {"n_volumes", d.n_volumes},
          {"targets_min", d.targets_min},
          {"targets_max", d.targets_max},
          {"total_targets", d.total_targets},
          {"voxel_scale", d.voxel_scale},
          {"clutter",
           {{"min_shapes", d.clutter.min_shapes},
            {"max_shapes", d.clutter.max_shapes},
            {"intensity_lo", d.clutter.intensity_lo},
            {"intensity_hi", d.clutter.intensity_hi},
            {"noise_sigma", d.clutter.noise_sigma}}}};
}

// Kind and target pick the per-dataset defaults; explicit keys override them.
void read_dataset(const json& j, RunConfig& cfg) {
  Section s(j, "dataset");
  std::string kind = "crops", target = "bottle";
  s.get("kind", kind);
  s.get("target", target);
  checked("dataset", [&] { cfg.dataset = synth::DatasetConfig::defaults(synth::parse_kind(kind), synth::parse_target(target)); });
  auto& d = cfg.dataset;
  s.get("path", cfg.dataset_path);
  std::vector<int64_t> dims{d.bag_dims.d, d.bag_dims.h, d.bag_dims.w};
  s.get("bag_dims", dims);
  if (dims.size() != 3) throw ConfigError("dataset.bag_dims: expected [D, H, W]");
  d.bag_dims = {dims[0], dims[1], dims[2]};
  s.get("crop_min", d.crop_min);
  s.get("crop_max", d.crop_max);
  s.get("n_positive", d.n_positive);
  s.get("n_negative", d.n_negative);
  s.get("n_volumes", d.n_volumes);
  s.get("targets_min", d.targets_min);
  s.get("targets_max", d.targets_max);
  s.get("total_targets", d.total_targets);
  s.get("voxel_scale", d.voxel_scale);
  if (const json* c = s.child("clutter")) {
    Section cs(*c, "dataset.clutter");
    cs.get("min_shapes", d.clutter.min_shapes);
    cs.get("max_shapes", d.clutter.max_shapes);
    cs.get("intensity_lo", d.clutter.intensity_lo);
    cs.get("intensity_hi", d.clutter.intensity_hi);
    cs.get("noise_sigma", d.clutter.noise_sigma);
    cs.finish();
  }
  s.finish();
}

void read_preprocess(const json& j, preprocess::PreprocessConfig& p) {
  Section s(j, "preprocess");
  s.get("s", p.s);
  s.get("rescale", p.rescale);
  s.get("rotation_probability", p.rotation_probability);
  if (const json* f = s.child("resample_factor")) {
    if (f->is_number()) {
      p.resample_factor = f->get<double>();
    } else if (f->is_string()) {
      checked("preprocess.resample_factor", [&] { p.resample_factor = preprocess::parse_factor(f->get<std::string>()); });
    } else {
      throw ConfigError("preprocess.resample_factor: expected a number or \"p/q\"");
    }
  }
  s.finish();
}

void read_model(const json& j, const std::string& path, const char* arch_key, models::ModelSpec& spec) {
  Section s(j, path);
  std::string arch = spec.arch(), norm = models::to_string(spec.norm);
  s.get(arch_key, arch);
  s.get("norm", norm);
  const models::ModelSpec old = spec;
  checked(path, [&] {
    spec = models::ModelSpec::parse_arch(arch);
    spec.norm = models::parse_norm(norm);
  });
  spec.base_channels = old.base_channels;
  spec.fpn_channels = old.fpn_channels;
  s.get("base_channels", spec.base_channels);
  s.get("fpn_channels", spec.fpn_channels);
  if (path == "detector") return;  // the detector section owns its other keys
  s.finish();
}

void read_anchors(const json& j, detect::AnchorConfig& a) {
  Section s(j, "detector.anchors");
  std::string preset;
  std::vector<double> sizes;
  std::vector<int64_t> strides(a.strides.begin(), a.strides.end());
  s.get("preset", preset);
  s.get("sizes", sizes);
  s.get("strides", strides);
  s.finish();
  if (!preset.empty()) {
    checked("detector.anchors.preset", [&] { a.sizes = detect::AnchorConfig::preset_sizes(preset); });
    if (!sizes.empty() && !std::equal(sizes.begin(), sizes.end(), a.sizes.begin(), a.sizes.end())) {
      throw ConfigError("detector.anchors: sizes disagree with preset " + preset);
    }
  } else if (!sizes.empty()) {
    if (sizes.size() != 4) throw ConfigError("detector.anchors.sizes: expected four sizes");
    std::copy(sizes.begin(), sizes.end(), a.sizes.begin());
  }
  if (strides.size() != 4) throw ConfigError("detector.anchors.strides: expected four strides");
  std::copy(strides.begin(), strides.end(), a.strides.begin());
}

void read_detector(const json& j, detect::DetectorConfig& d) {
  Section s(j, "detector");
  s.get("family", d.family);
  s.get("label", d.label);
  read_model(j, "detector", "backbone", d.backbone);
  for (const char* key : {"backbone", "base_channels", "fpn_channels", "norm"}) s.child(key);
  s.get("focal_alpha", d.focal_alpha);
  s.get("focal_gamma", d.focal_gamma);
  s.get("augment", d.augment);
  d.anchors.scale_multipliers = detect::AnchorConfig::multipliers_for(d.family);
  if (const json* a = s.child("anchors")) read_anchors(*a, d.anchors);
  if (const json* m = s.child("match")) {
    Section ms(*m, "detector.match");
    ms.get("pos_iou", d.match.pos_iou);
    ms.get("neg_iou", d.match.neg_iou);
    ms.get("force_best_match", d.match.force_best_match);
    ms.get("proposals_per_volume", d.match.proposals_per_volume);
    ms.get("rpn_nms_iou", d.match.rpn_nms_iou);
    ms.finish();
  }
  s.finish();
}

void read_train(const json& j, nn::TrainConfig& t) {
  Section s(j, "train");
  s.get("learning_rate", t.learning_rate);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("eps", t.eps);
  s.get("max_iterations", t.max_iterations);
  s.get("epochs", t.epochs);
  s.get("batch_size", t.batch_size);
  s.get("lr_milestones", t.lr_milestones);
  s.get("lr_gamma", t.lr_gamma);
  s.get("positive_weight", t.positive_weight);
  s.finish();
}

void read_eval(const json& j, eval::EvalConfig& e) {
  Section s(j, "eval");
  s.get("iou_threshold", e.iou_threshold);
  s.get("score_threshold", e.score_threshold);
  s.get("nms_iou", e.nms_iou);
  s.get("classification_threshold", e.classification_threshold);
  s.get("ap_prefilter", e.ap_prefilter);
  s.finish();
}

void read_split(const json& j, eval::SplitPlan& p) {
  Section s(j, "split");
  std::string mode = p.mode == eval::SplitPlan::Mode::kfold ? "kfold" : "random";
  s.get("mode", mode);
  if (mode == "kfold") {
    p.mode = eval::SplitPlan::Mode::kfold;
  } else if (mode == "random") {
    p.mode = eval::SplitPlan::Mode::random;
  } else {
    throw ConfigError("split.mode: expected \"kfold\" or \"random\", got \"" + mode + "\"");
  }
  s.get("k", p.k);
  s.get("train_fraction", p.train_fraction);
  s.get("n_repeats", p.n_repeats);
  s.finish();
}

}  // namespace

void RunConfig::validate() const {
  checked("dataset", [&] { dataset.validate(); });
  checked("preprocess", [&] { preprocess.validate(); });
  checked("model", [&] { model.validate(); });
  checked("detector", [&] { detector.validate(); });
  checked("train", [&] { train.validate(); });
  checked("eval", [&] { eval.validate(); });
  checked("split", [&] { split.validate(); });
  if (out_dir.empty()) throw ConfigError("out_dir: must not be empty");
}

json RunConfig::to_json() const {
  const auto& a = detector.anchors;
  json anchors = {{"sizes", a.sizes}, {"strides", a.strides}};
  for (const auto& name : detect::AnchorConfig::preset_names()) {
    if (detect::AnchorConfig::preset_sizes(name) == a.sizes) anchors["preset"] = name;
  }
  json det = {{"family", detector.family},
              {"label", detector.label},
              {"backbone", detector.backbone.arch()},
              {"base_channels", detector.backbone.base_channels},
              {"fpn_channels", detector.backbone.fpn_channels},
              {"norm", models::to_string(detector.backbone.norm)},
              {"anchors", anchors},
              {"match",
               {{"pos_iou", detector.match.pos_iou},
                {"neg_iou", detector.match.neg_iou},
                {"force_best_match", detector.match.force_best_match},
                {"proposals_per_volume", detector.match.proposals_per_volume},
                {"rpn_nms_iou", detector.match.rpn_nms_iou}}},
              {"focal_alpha", detector.focal_alpha},
              {"focal_gamma", detector.focal_gamma},
              {"augment", detector.augment}};
  return {{"seed", seed},
          {"out_dir", out_dir},
          {"dataset", dataset_json(dataset, dataset_path)},
          {"preprocess",
           {{"s", preprocess.s},
            {"rescale", preprocess.rescale},
            {"rotation_probability", preprocess.rotation_probability},
            {"resample_factor", preprocess.resample_factor}}},
          {"model", model.to_json()},
          {"detector", det},
          {"train",
           {{"learning_rate", train.learning_rate},
            {"beta1", train.beta1},
            {"beta2", train.beta2},
            {"eps", train.eps},
            {"max_iterations", train.max_iterations},
            {"epochs", train.epochs},
            {"batch_size", train.batch_size},
            {"lr_milestones", train.lr_milestones},
            {"lr_gamma", train.lr_gamma},
            {"positive_weight", train.positive_weight}}},
          {"eval",
           {{"iou_threshold", eval.iou_threshold},
            {"score_threshold", eval.score_threshold},
            {"nms_iou", eval.nms_iou},
            {"classification_threshold", eval.classification_threshold},
            {"ap_prefilter", eval.ap_prefilter}}},
          {"split",
           {{"mode", split.mode == eval::SplitPlan::Mode::kfold ? "kfold" : "random"},
            {"k", split.k},
            {"train_fraction", split.train_fraction},
            {"n_repeats", split.n_repeats}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig cfg;
  Section s(j, "");
  s.get("seed", cfg.seed);
  s.get("out_dir", cfg.out_dir);
  cfg.dataset.seed = cfg.seed;
  if (const json* d = s.child("dataset")) read_dataset(*d, cfg);
  cfg.dataset.seed = cfg.seed;
  cfg.split.seed = cfg.seed;
  if (const json* p = s.child("preprocess")) read_preprocess(*p, cfg.preprocess);
  if (const json* m = s.child("model")) read_model(*m, "model", "arch", cfg.model);
  if (const json* d = s.child("detector")) {
    read_detector(*d, cfg.detector);
  } else {
    cfg.detector.anchors.scale_multipliers = detect::AnchorConfig::multipliers_for(cfg.detector.family);
  }
  if (const json* t = s.child("train")) read_train(*t, cfg.train);
  if (const json* e = s.child("eval")) read_eval(*e, cfg.eval);
  // crops default to k-fold cross-validation, bags to repeated random splits
  cfg.split.mode = cfg.dataset.kind == synth::DatasetConfig::Kind::bags ? eval::SplitPlan::Mode::random
                                                                        : eval::SplitPlan::Mode::kfold;
  if (const json* p = s.child("split")) read_split(*p, cfg.split);
  s.finish();
  cfg.validate();
  return cfg;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects KEY=VALUE, got \"" + assignment + "\"");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* node = &j;
  size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: malformed key \"" + key + "\"");
    if (!node->is_object()) throw ConfigError("--set: \"" + key + "\" descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path.string());
    j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config " + path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

}  // namespace voxscreen::config
