#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/geometry.hpp"

namespace voxscreen {

struct Annotation {
  std::string label;
  Box3 box;
};

/// One manifest record: a VOL1 file plus its ground-truth boxes. An entry
/// without boxes is a negative sample.
struct ManifestEntry {
  std::string volume;  // path, relative to the manifest directory unless absolute
  std::string id;
  std::vector<Annotation> boxes;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json manifest_to_json(const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> manifest_from_json(const nlohmann::json& j);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

/// Resolve an entry's volume path against the directory holding the manifest.
std::filesystem::path resolve_volume_path(const std::filesystem::path& manifest_path, const ManifestEntry& entry);

// Detection output: one JSON object per line, {"id","label","box","score"}.
nlohmann::json detection_to_json(const Detection& det);
Detection detection_from_json(const nlohmann::json& j);
void write_detections_jsonl(std::ostream& out, const std::vector<Detection>& dets);
std::vector<Detection> read_detections_jsonl(std::istream& in);

}  // namespace voxscreen
