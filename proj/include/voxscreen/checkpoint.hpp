#pragma once

// Single-file checkpoint:
//   bytes 0-3   "VCK1"
//   bytes 4-11  u64 LE header length L
//   next L      UTF-8 JSON {"meta": {...}, "tensors": [{"name","shape","offset"}]}
//   remainder   f32 LE payload; offsets count floats from the payload start

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxscreen/optim.hpp"

namespace voxscreen {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StoredTensor {
  std::string name;
  nn::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredTensor> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<nn::Parameter<float>>& tensors);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copy stored values into `tensors`. Names and shapes must match one-to-one;
/// any missing, extra or mis-shaped entry throws CheckpointError.
void restore_tensors(const Checkpoint& ckpt, std::vector<nn::Parameter<float>>& tensors);

}  // namespace voxscreen
