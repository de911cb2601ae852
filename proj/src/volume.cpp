#include "airseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace airseg {

using nlohmann::json;

std::string to_string(VolumeKind k) {
  switch (k) {
    case VolumeKind::Intensity: return "intensity";
    case VolumeKind::Probability: return "probability";
    case VolumeKind::Mask: return "mask";
    case VolumeKind::Label: return "label";
  }
  return "intensity";
}

VolumeKind volume_kind_from_string(const std::string& s) {
  if (s == "intensity") return VolumeKind::Intensity;
  if (s == "probability") return VolumeKind::Probability;
  if (s == "mask") return VolumeKind::Mask;
  if (s == "label") return VolumeKind::Label;
  throw std::invalid_argument("unknown volume kind: " + s);
}

Volume3::Volume3(std::array<int, 3> d, VolumeKind k, float fill, std::array<double, 3> sp)
    : dims(d), spacing(sp), kind(k) {
  if (d[0] <= 0 || d[1] <= 0 || d[2] <= 0) {
    throw std::invalid_argument("volume dims must be positive");
  }
  voxels.assign(size_t(d[0]) * size_t(d[1]) * size_t(d[2]), fill);
}

bool Volume3::is_binary() const {
  for (float v : voxels) {
    if (v != 0.0f && v != 1.0f) return false;
  }
  return true;
}

size_t Volume3::count_nonzero() const {
  size_t n = 0;
  for (float v : voxels) n += (v != 0.0f);
  return n;
}

void Volume3::validate() const {
  if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0) {
    throw std::invalid_argument("volume dims must be positive");
  }
  if (voxels.size() != size_t(dims[0]) * size_t(dims[1]) * size_t(dims[2])) {
    throw std::invalid_argument("voxel count does not match dims");
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw std::invalid_argument("spacing components must be positive");
  }
  if (kind == VolumeKind::Mask && !is_binary()) {
    throw std::invalid_argument("mask volume contains non-binary values");
  }
  if (kind == VolumeKind::Probability) {
    for (float v : voxels) {
      if (!(v >= 0.0f && v <= 1.0f)) {
        throw std::invalid_argument("probability volume contains values outside [0,1]");
      }
    }
  }
}

size_t Voi::pad_count() const {
  size_t n = 0;
  for (uint8_t p : padded) n += (p != 0);
  return n;
}

Voi extract_voi(const Volume3& vol, std::array<int, 3> center,
                std::array<int, 3> size, float pad_value) {
  for (int a = 0; a < 3; ++a) {
    if (size[a] <= 0) throw std::invalid_argument("voi size must be positive");
  }
  if (!vol.in_bounds(center[0], center[1], center[2])) {
    throw std::invalid_argument("center out of bounds");
  }
  Voi voi;
  voi.size = size;
  for (int a = 0; a < 3; ++a) voi.origin[a] = center[a] - size[a] / 2;
  const size_t n = size_t(size[0]) * size_t(size[1]) * size_t(size[2]);
  voi.data.assign(n, pad_value);
  voi.padded.assign(n, 1);
  for (int z = 0; z < size[2]; ++z) {
    const int vz = voi.origin[2] + z;
    if (vz < 0 || vz >= vol.dims[2]) continue;
    for (int y = 0; y < size[1]; ++y) {
      const int vy = voi.origin[1] + y;
      if (vy < 0 || vy >= vol.dims[1]) continue;
      const int x0 = std::max(0, -voi.origin[0]);
      const int x1 = std::min(size[0], vol.dims[0] - voi.origin[0]);
      if (x0 >= x1) continue;
      const float* src = &vol.voxels[vol.index(voi.origin[0] + x0, vy, vz)];
      float* dst = &voi.data[voi.index(x0, y, z)];
      std::memcpy(dst, src, size_t(x1 - x0) * sizeof(float));
      std::memset(&voi.padded[voi.index(x0, y, z)], 0, size_t(x1 - x0));
    }
  }
  return voi;
}

static std::vector<int> axis_positions(int dim, int size, int stride) {
  std::vector<int> pos;
  if (size >= dim) {
    pos.push_back(0);
    return pos;
  }
  for (int p = 0; p + size < dim; p += stride) pos.push_back(p);
  const int last = dim - size;
  if (pos.empty() || pos.back() != last) pos.push_back(last);
  return pos;
}

std::vector<std::array<int, 3>> sliding_windows(std::array<int, 3> dims,
                                                std::array<int, 3> size, int stride) {
  if (stride <= 0) throw std::invalid_argument("stride must be positive");
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0 || size[a] <= 0) {
      throw std::invalid_argument("dims and window size must be positive");
    }
  }
  const auto xs = axis_positions(dims[0], size[0], stride);
  const auto ys = axis_positions(dims[1], size[1], stride);
  const auto zs = axis_positions(dims[2], size[2], stride);
  std::vector<std::array<int, 3>> origins;
  origins.reserve(xs.size() * ys.size() * zs.size());
  for (int z : zs)
    for (int y : ys)
      for (int x : xs) origins.push_back({x, y, z});
  return origins;
}

std::array<Volume3, 3> coordinate_channels(std::array<int, 3> dims) {
  std::array<Volume3, 3> chans{Volume3(dims, VolumeKind::Intensity),
                               Volume3(dims, VolumeKind::Intensity),
                               Volume3(dims, VolumeKind::Intensity)};
  std::array<std::vector<float>, 3> axis_vals;
  for (int a = 0; a < 3; ++a) {
    axis_vals[a].resize(dims[a]);
    for (int i = 0; i < dims[a]; ++i) {
      axis_vals[a][i] = dims[a] > 1 ? float(i) / float(dims[a] - 1) : 0.0f;
    }
  }
  for (int z = 0; z < dims[2]; ++z) {
    for (int y = 0; y < dims[1]; ++y) {
      for (int x = 0; x < dims[0]; ++x) {
        const size_t i = chans[0].index(x, y, z);
        chans[0].voxels[i] = axis_vals[0][x];
        chans[1].voxels[i] = axis_vals[1][y];
        chans[2].voxels[i] = axis_vals[2][z];
      }
    }
  }
  return chans;
}

static std::string strip_json_suffix(const std::string& path) {
  const std::string suffix = ".json";
  if (path.size() > suffix.size() &&
      path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return path.substr(0, path.size() - suffix.size());
  }
  return path;
}

void write_volume(const Volume3& vol, const std::string& path) {
  vol.validate();
  const std::string base = strip_json_suffix(path);
  const bool as_u8 = (vol.kind == VolumeKind::Mask);
  json header;
  header["dims"] = {vol.dims[0], vol.dims[1], vol.dims[2]};
  header["spacing"] = {vol.spacing[0], vol.spacing[1], vol.spacing[2]};
  header["dtype"] = as_u8 ? "u8" : "f32";
  header["kind"] = to_string(vol.kind);
  header["order"] = "x-fastest";
  {
    std::ofstream hf(base + ".json");
    if (!hf) throw std::runtime_error("cannot open for write: " + base + ".json");
    hf << header.dump(2) << "\n";
  }
  std::ofstream rf(base + ".raw", std::ios::binary);
  if (!rf) throw std::runtime_error("cannot open for write: " + base + ".raw");
  if (as_u8) {
    std::vector<uint8_t> bytes(vol.voxels.size());
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = uint8_t(vol.voxels[i]);
    rf.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  } else {
    // x86 is little-endian; floats are written verbatim
    rf.write(reinterpret_cast<const char*>(vol.voxels.data()),
             std::streamsize(vol.voxels.size() * sizeof(float)));
  }
  if (!rf) throw std::runtime_error("short write: " + base + ".raw");
}

Volume3 read_volume(const std::string& path) {
  const std::string base = strip_json_suffix(path);
  std::ifstream hf(base + ".json");
  if (!hf) throw std::runtime_error("cannot open: " + base + ".json");
  json header;
  try {
    hf >> header;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed volume header " + base + ".json: " + e.what());
  }
  Volume3 vol;
  try {
    auto d = header.at("dims");
    auto s = header.at("spacing");
    vol.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    vol.spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    vol.kind = volume_kind_from_string(header.at("kind").get<std::string>());
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed volume header " + base + ".json: " + e.what());
  }
  const std::string dtype = header.at("dtype").get<std::string>();
  if (dtype != "f32" && dtype != "u8") {
    throw std::runtime_error("unknown dtype in " + base + ".json: " + dtype);
  }
  if (vol.dims[0] <= 0 || vol.dims[1] <= 0 || vol.dims[2] <= 0) {
    throw std::runtime_error("non-positive dims in " + base + ".json");
  }
  const size_t n = size_t(vol.dims[0]) * size_t(vol.dims[1]) * size_t(vol.dims[2]);
  std::ifstream rf(base + ".raw", std::ios::binary | std::ios::ate);
  if (!rf) throw std::runtime_error("cannot open: " + base + ".raw");
  const size_t bytes = size_t(rf.tellg());
  const size_t elem = (dtype == "u8") ? 1 : sizeof(float);
  if (bytes != n * elem) {
    throw std::runtime_error("payload size mismatch in " + base + ".raw: header says " +
                             std::to_string(n) + " elements, file has " +
                             std::to_string(bytes / elem));
  }
  rf.seekg(0);
  vol.voxels.resize(n);
  if (dtype == "u8") {
    std::vector<uint8_t> raw(n);
    rf.read(reinterpret_cast<char*>(raw.data()), std::streamsize(n));
    for (size_t i = 0; i < n; ++i) vol.voxels[i] = float(raw[i]);
  } else {
    rf.read(reinterpret_cast<char*>(vol.voxels.data()), std::streamsize(n * sizeof(float)));
  }
  if (!rf) throw std::runtime_error("short read: " + base + ".raw");
  vol.validate();
  return vol;
}

}  // namespace airseg
