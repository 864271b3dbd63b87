#include "voxscreen/report.hpp"

#include <fstream>
#include <stdexcept>

#include <fmt/format.h>

namespace voxscreen::report {

std::string network_name(const models::ModelSpec& spec) {
  if (spec.family == "vrn") return "VRN";
  return fmt::format("ResNet{}", spec.depth);
}

std::string detector_name(const std::string& family) {
  if (family == "retinanet3d") return "RetinaNet";
  if (family == "fasterrcnn3d") return "Faster R-CNN";
  throw std::invalid_argument("unknown detector family \"" + family + "\"");
}

namespace {

const char* mark(bool on) { return on ? "✓" : "✗"; }

}  // namespace

std::vector<std::string> classification_header() { return {"Model", "Res", "Rot", "RF", "TPR (%)", "FPR (%)"}; }

std::vector<std::string> classification_row(const models::ModelSpec& spec, const preprocess::PreprocessConfig& pre,
                                             const eval::Summary& tpr, const eval::Summary& fpr) {
  return {network_name(spec), mark(pre.rescale), mark(pre.rotation_probability > 0), mark(spec.rich_features),
          tpr.format(), fpr.format()};
}

std::vector<std::string> detection_header() {
  return {"Model", "Network", "Anchor size", "Precision (%)", "Recall (%)", "Average Precision (%)"};
}

std::vector<std::string> detection_row(const detect::DetectorConfig& cfg, const eval::Summary& precision,
                                       const eval::Summary& recall, const eval::Summary& ap) {
  return {detector_name(cfg.family), network_name(cfg.backbone), cfg.anchors.sizes_label(),
          precision.format(), recall.format(), ap.format()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

void write_loss_csv(const std::filesystem::path& path, std::span<const double> losses) {
  std::string out = "step,loss\n";
  for (size_t i = 0; i < losses.size(); ++i) out += fmt::format("{},{:.9g}\n", i, losses[i]);
  write_text(path, out);
}

void write_pr_csv(const std::filesystem::path& path, std::span<const eval::PrPoint> curve) {
  std::string out = "score,precision,recall\n";
  for (const auto& p : curve) out += fmt::format("{:.9g},{:.9g},{:.9g}\n", p.score, p.precision, p.recall);
  write_text(path, out);
}

}  // namespace voxscreen::report
