#pragma once

// Result tables and CSV files. Table rows follow the published layouts:
// classification as Model | Res | Rot | RF | TPR | FPR and detection as
// Model | Network | Anchor size | Precision | Recall | AP, each metric cell
// "mean ± std".

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "voxscreen/detectors.hpp"
#include "voxscreen/eval.hpp"
#include "voxscreen/models.hpp"
#include "voxscreen/preprocess.hpp"

namespace voxscreen::report {

/// "ResNet10", "ResNet101", "VRN".
std::string network_name(const models::ModelSpec& spec);
/// "RetinaNet" or "Faster R-CNN".
std::string detector_name(const std::string& family);

std::vector<std::string> classification_header();
std::vector<std::string> classification_row(const models::ModelSpec& spec, const preprocess::PreprocessConfig& pre,
                                             const eval::Summary& tpr, const eval::Summary& fpr);

std::vector<std::string> detection_header();
std::vector<std::string> detection_row(const detect::DetectorConfig& cfg, const eval::Summary& precision,
                                       const eval::Summary& recall, const eval::Summary& ap);

/// step,loss
void write_loss_csv(const std::filesystem::path& path, std::span<const double> losses);
/// score,precision,recall
void write_pr_csv(const std::filesystem::path& path, std::span<const eval::PrPoint> curve);

/// Write text to a file, throwing std::runtime_error with the path on failure.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace voxscreen::report
