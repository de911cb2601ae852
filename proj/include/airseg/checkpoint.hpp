#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace airseg {

/// Named float array participating in a checkpoint (parameter data,
/// running statistics, optimizer moments).
struct NamedArray {
  std::string name;
  std::vector<float>* data;
  std::vector<int> shape;  // informational; product must equal data->size()
};

/// Checkpoint format: `<base>.json` manifest (array names, shapes, offsets,
/// free-form "extras") + `<base>.bin` little-endian f32 payload. Round-trips
/// are bit-exact.
void save_checkpoint(const std::string& base, const nlohmann::json& extras,
                     const std::vector<NamedArray>& arrays);

/// Loads the payload into the given arrays (matched by name; counts must
/// agree) and returns the manifest extras.
nlohmann::json load_checkpoint(const std::string& base, const std::vector<NamedArray>& arrays);

/// Reads only the manifest extras (e.g. to pick a model config before
/// construction).
nlohmann::json peek_checkpoint(const std::string& base);

}  // namespace airseg
