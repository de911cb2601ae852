#include "airseg/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace airseg {

using nlohmann::json;

namespace {

std::string strip_json_suffix(const std::string& path) {
  const std::string suffix = ".json";
  if (path.size() > suffix.size() &&
      path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return path.substr(0, path.size() - suffix.size());
  }
  return path;
}

}  // namespace

void save_checkpoint(const std::string& path, const json& extras,
                     const std::vector<NamedArray>& arrays) {
  const std::string base = strip_json_suffix(path);
  json manifest;
  manifest["format"] = "airseg-ckpt-v1";
  manifest["extras"] = extras;
  json arr = json::array();
  size_t offset = 0;
  for (const auto& a : arrays) {
    json e;
    e["name"] = a.name;
    e["shape"] = a.shape;
    e["offset"] = offset;
    e["count"] = a.data->size();
    arr.push_back(e);
    offset += a.data->size();
  }
  manifest["arrays"] = arr;
  {
    std::ofstream mf(base + ".json");
    if (!mf) throw std::runtime_error("cannot open for write: " + base + ".json");
    mf << manifest.dump(2) << "\n";
  }
  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot open for write: " + base + ".bin");
  for (const auto& a : arrays) {
    bf.write(reinterpret_cast<const char*>(a.data->data()),
             std::streamsize(a.data->size() * sizeof(float)));
  }
  if (!bf) throw std::runtime_error("short write: " + base + ".bin");
}

json peek_checkpoint(const std::string& path) {
  const std::string base = strip_json_suffix(path);
  std::ifstream mf(base + ".json");
  if (!mf) throw std::runtime_error("cannot open: " + base + ".json");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest " + base + ".json: " + e.what());
  }
  if (manifest.value("format", "") != "airseg-ckpt-v1") {
    throw std::runtime_error("unsupported checkpoint format in " + base + ".json");
  }
  return manifest["extras"];
}

json load_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  const std::string base = strip_json_suffix(path);
  std::ifstream mf(base + ".json");
  if (!mf) throw std::runtime_error("cannot open: " + base + ".json");
  json manifest;
  mf >> manifest;
  if (manifest.value("format", "") != "airseg-ckpt-v1") {
    throw std::runtime_error("unsupported checkpoint format in " + base + ".json");
  }
  std::ifstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw std::runtime_error("cannot open: " + base + ".bin");
  // index manifest entries by name
  std::map<std::string, std::pair<size_t, size_t>> entries;  // name -> (offset, count)
  for (const auto& e : manifest.at("arrays")) {
    entries[e.at("name").get<std::string>()] = {e.at("offset").get<size_t>(),
                                                e.at("count").get<size_t>()};
  }
  for (const auto& a : arrays) {
    auto it = entries.find(a.name);
    if (it == entries.end()) {
      throw std::runtime_error("checkpoint " + base + " is missing array: " + a.name);
    }
    const auto [offset, count] = it->second;
    if (count != a.data->size()) {
      throw std::runtime_error("checkpoint array " + a.name + " has " + std::to_string(count) +
                               " elements, expected " + std::to_string(a.data->size()));
    }
    bf.seekg(std::streamoff(offset * sizeof(float)));
    bf.read(reinterpret_cast<char*>(a.data->data()), std::streamsize(count * sizeof(float)));
    if (!bf) throw std::runtime_error("short read in checkpoint payload: " + base + ".bin");
  }
  return manifest["extras"];
}

}  // namespace airseg
