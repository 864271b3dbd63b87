#include "voxscreen/annotations.hpp"

#include <fstream>
#include <istream>
#include <ostream>

namespace voxscreen {

using nlohmann::json;

namespace {

Box3 box_from_json(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 6) {
    throw ManifestError(where + ": box must be an array of 6 numbers [z0,y0,x0,z1,y1,x1]");
  }
  std::array<double, 6> c{};
  for (size_t i = 0; i < 6; ++i) {
    if (!j[i].is_number()) throw ManifestError(where + ": box coordinate " + std::to_string(i) + " is not a number");
    c[i] = j[i].get<double>();
  }
  Box3 box = Box3::from_array(c);
  if (!box.valid()) throw ManifestError(where + ": invalid box " + to_string(box));
  return box;
}

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ManifestError(where + ": unknown key \"" + key + "\"");
  }
}

}  // namespace

json manifest_to_json(const std::vector<ManifestEntry>& entries) {
  json out = json::array();
  for (const auto& e : entries) {
    json boxes = json::array();
    for (const auto& a : e.boxes) boxes.push_back({{"label", a.label}, {"box", a.box.to_array()}});
    out.push_back({{"volume", e.volume}, {"id", e.id}, {"boxes", boxes}});
  }
  return out;
}

std::vector<ManifestEntry> manifest_from_json(const json& j) {
  if (!j.is_array()) throw ManifestError("manifest must be a JSON array");
  std::vector<ManifestEntry> entries;
  entries.reserve(j.size());
  for (size_t i = 0; i < j.size(); ++i) {
    const json& item = j[i];
    const std::string where = "manifest[" + std::to_string(i) + "]";
    if (!item.is_object()) throw ManifestError(where + ": entry must be an object");
    reject_unknown(item, {"volume", "id", "boxes"}, where);
    if (!item.contains("volume") || !item["volume"].is_string()) throw ManifestError(where + ": missing \"volume\"");
    if (!item.contains("id") || !item["id"].is_string()) throw ManifestError(where + ": missing \"id\"");
    if (!item.contains("boxes") || !item["boxes"].is_array()) throw ManifestError(where + ": missing \"boxes\"");
    ManifestEntry entry{item["volume"].get<std::string>(), item["id"].get<std::string>(), {}};
    for (size_t b = 0; b < item["boxes"].size(); ++b) {
      const json& jb = item["boxes"][b];
      const std::string bwhere = where + ".boxes[" + std::to_string(b) + "]";
      if (!jb.is_object()) throw ManifestError(bwhere + ": must be an object");
      reject_unknown(jb, {"label", "box"}, bwhere);
      if (!jb.contains("label") || !jb["label"].is_string()) throw ManifestError(bwhere + ": missing \"label\"");
      if (!jb.contains("box")) throw ManifestError(bwhere + ": missing \"box\"");
      entry.boxes.push_back({jb["label"].get<std::string>(), box_from_json(jb["box"], bwhere)});
    }
    entries.push_back(std::move(entry));
  }
  return entries;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ManifestError(path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ManifestError("cannot open " + path.string() + " for writing");
  out << manifest_to_json(entries).dump(1) << '\n';
}

std::filesystem::path resolve_volume_path(const std::filesystem::path& manifest_path, const ManifestEntry& entry) {
  std::filesystem::path p(entry.volume);
  if (p.is_absolute()) return p;
  return manifest_path.parent_path() / p;
}

json detection_to_json(const Detection& det) {
  return {{"id", det.volume_id}, {"label", det.label}, {"box", det.box.to_array()}, {"score", det.score}};
}

Detection detection_from_json(const json& j) {
  Detection d;
  d.volume_id = j.at("id").get<std::string>();
  d.label = j.at("label").get<std::string>();
  d.box = box_from_json(j.at("box"), "detection");
  d.score = j.at("score").get<double>();
  if (!(d.score >= 0.0 && d.score <= 1.0)) throw ManifestError("detection score outside [0,1]");
  return d;
}

void write_detections_jsonl(std::ostream& out, const std::vector<Detection>& dets) {
  for (const auto& d : dets) out << detection_to_json(d).dump() << '\n';
}

std::vector<Detection> read_detections_jsonl(std::istream& in) {
  std::vector<Detection> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(detection_from_json(json::parse(line)));
  }
  return out;
}

}  // namespace voxscreen
