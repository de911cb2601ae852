#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace airseg {

enum class VolumeKind { Intensity, Probability, Mask, Label };

std::string to_string(VolumeKind k);
VolumeKind volume_kind_from_string(const std::string& s);

/// Dense 3D scalar grid with spacing metadata. Voxels are stored x-fastest:
/// linear index = x + nx*(y + ny*z). Carrier for intensities, probabilities,
/// binary masks and component labels.
struct Volume3 {
  std::array<int, 3> dims{0, 0, 0};           // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  VolumeKind kind = VolumeKind::Intensity;
  std::vector<float> voxels;

  Volume3() = default;
  Volume3(std::array<int, 3> d, VolumeKind k, float fill = 0.0f,
          std::array<double, 3> sp = {1.0, 1.0, 1.0});

  size_t size() const { return voxels.size(); }
  size_t index(int x, int y, int z) const {
    return size_t(x) + size_t(dims[0]) * (size_t(y) + size_t(dims[1]) * size_t(z));
  }
  float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
  float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
  bool in_bounds(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] && z < dims[2];
  }
  void unravel(size_t i, int& x, int& y, int& z) const {
    x = int(i % size_t(dims[0]));
    y = int((i / size_t(dims[0])) % size_t(dims[1]));
    z = int(i / (size_t(dims[0]) * size_t(dims[1])));
  }

  bool is_binary() const;
  size_t count_nonzero() const;

  /// Throws std::invalid_argument on a violated invariant (size mismatch,
  /// non-positive spacing, out-of-range values for mask/probability kinds).
  void validate() const;
};

/// Fixed-size sub-volume around a sample point. Out-of-bounds voxels carry
/// the declared pad value and are flagged.
struct Voi {
  std::array<int, 3> origin{0, 0, 0};  // may be negative at volume borders
  std::array<int, 3> size{0, 0, 0};
  std::vector<float> data;             // x-fastest
  std::vector<uint8_t> padded;         // 1 where out of bounds

  size_t index(int x, int y, int z) const {
    return size_t(x) + size_t(size[0]) * (size_t(y) + size_t(size[1]) * size_t(z));
  }
  size_t pad_count() const;
};

/// Cube of the given size centered at `center` (for even sizes the center
/// voxel lands at index size/2). Throws if center is outside the volume.
Voi extract_voi(const Volume3& vol, std::array<int, 3> center,
                std::array<int, 3> size, float pad_value);

/// Window origins tiling `dims`: stride steps per axis, with the last window
/// clamped so its far face coincides with the volume boundary. Lexicographic
/// (z-major, x-fastest) order; the union of windows covers every voxel.
std::vector<std::array<int, 3>> sliding_windows(std::array<int, 3> dims,
                                                std::array<int, 3> size = {64, 64, 64},
                                                int stride = 32);

/// Per-axis normalized coordinate fields: channel c at (x,y,z) equals the
/// index along axis c mapped linearly to [0,1] (a 1-voxel axis maps to 0).
std::array<Volume3, 3> coordinate_channels(std::array<int, 3> dims);

/// Two-file volume format: `<base>.json` header + `<base>.raw` little-endian
/// payload. Masks are stored as u8, everything else as f32. Round-trips are
/// bit-exact. `path` may be given with or without the .json suffix.
void write_volume(const Volume3& vol, const std::string& path);
Volume3 read_volume(const std::string& path);

}  // namespace airseg
