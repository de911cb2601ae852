#include "airseg/morphology.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace airseg {

namespace {

void require_binary(const Volume3& mask, const char* op) {
  if (!mask.is_binary()) {
    throw std::invalid_argument(std::string(op) + ": input mask is not binary");
  }
}

// offsets of the 6- and 26-neighborhoods
const int kN6[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

std::vector<std::array<int, 3>> neighbor_offsets(int connectivity) {
  std::vector<std::array<int, 3>> offs;
  if (connectivity == 6) {
    for (auto& o : kN6) offs.push_back({o[0], o[1], o[2]});
    return offs;
  }
  if (connectivity != 26) throw std::invalid_argument("connectivity must be 6 or 26");
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (dx || dy || dz) offs.push_back({dx, dy, dz});
  return offs;
}

}  // namespace

Volume3 erode6(const Volume3& mask) {
  require_binary(mask, "erode6");
  Volume3 out(mask.dims, VolumeKind::Mask, 0.0f, mask.spacing);
  for (int z = 0; z < mask.dims[2]; ++z) {
    for (int y = 0; y < mask.dims[1]; ++y) {
      for (int x = 0; x < mask.dims[0]; ++x) {
        if (mask.at(x, y, z) == 0.0f) continue;
        bool keep = true;
        for (auto& o : kN6) {
          const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!mask.in_bounds(nx, ny, nz) || mask.at(nx, ny, nz) == 0.0f) {
            keep = false;
            break;
          }
        }
        if (keep) out.at(x, y, z) = 1.0f;
      }
    }
  }
  return out;
}

Volume3 edge_map(const Volume3& mask) {
  require_binary(mask, "edge_map");
  Volume3 eroded = erode6(mask);
  Volume3 out(mask.dims, VolumeKind::Mask, 0.0f, mask.spacing);
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    out.voxels[i] = (mask.voxels[i] != 0.0f && eroded.voxels[i] == 0.0f) ? 1.0f : 0.0f;
  }
  return out;
}

Components connected_components(const Volume3& mask, int connectivity) {
  require_binary(mask, "connected_components");
  const auto offs = neighbor_offsets(connectivity);
  Components comp;
  comp.labels = Volume3(mask.dims, VolumeKind::Label, 0.0f, mask.spacing);
  std::vector<size_t> stack;
  float next_label = 1.0f;
  // scanning in linear-index order numbers components by their smallest member
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    if (mask.voxels[i] == 0.0f || comp.labels.voxels[i] != 0.0f) continue;
    size_t count = 0;
    comp.labels.voxels[i] = next_label;
    stack.push_back(i);
    while (!stack.empty()) {
      const size_t cur = stack.back();
      stack.pop_back();
      ++count;
      int x, y, z;
      mask.unravel(cur, x, y, z);
      for (auto& o : offs) {
        const int nx = x + o[0], ny = y + o[1], nz = z + o[2];
        if (!mask.in_bounds(nx, ny, nz)) continue;
        const size_t ni = mask.index(nx, ny, nz);
        if (mask.voxels[ni] != 0.0f && comp.labels.voxels[ni] == 0.0f) {
          comp.labels.voxels[ni] = next_label;
          stack.push_back(ni);
        }
      }
    }
    comp.sizes.push_back(count);
    next_label += 1.0f;
  }
  return comp;
}

Volume3 largest_component(const Volume3& mask, int connectivity) {
  Components comp = connected_components(mask, connectivity);
  Volume3 out(mask.dims, VolumeKind::Mask, 0.0f, mask.spacing);
  if (comp.sizes.empty()) return out;
  const size_t best =
      size_t(std::max_element(comp.sizes.begin(), comp.sizes.end()) - comp.sizes.begin());
  const float want = float(best + 1);
  for (size_t i = 0; i < out.voxels.size(); ++i) {
    out.voxels[i] = (comp.labels.voxels[i] == want) ? 1.0f : 0.0f;
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::max() / 4;

// 1D lower envelope of parabolas (squared-distance transform) at sample
// coordinates x[i] = i*step. f is read with stride, d written with stride.
void edt_1d(const double* f, double* d, int n, double step,
            std::vector<int>& v, std::vector<double>& z) {
  v.resize(size_t(n));
  z.resize(size_t(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    const double xq = q * step;
    double s;
    for (;;) {
      const double xv = v[k] * step;
      s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2 * xq - 2 * xv);
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * step;
    while (z[k + 1] < xq) ++k;
    const double dx = xq - v[k] * step;
    d[q] = dx * dx + f[v[k]];
  }
}

Volume3 squared_edt(const Volume3& seed_mask, std::array<double, 3> step) {
  const int nx = seed_mask.dims[0], ny = seed_mask.dims[1], nz = seed_mask.dims[2];
  std::vector<double> g(seed_mask.voxels.size());
  for (size_t i = 0; i < g.size(); ++i) {
    g[i] = seed_mask.voxels[i] != 0.0f ? 0.0 : kInf;
  }
  std::vector<int> v;
  std::vector<double> z, line_in, line_out;
  // x pass
  line_in.resize(size_t(nx));
  line_out.resize(size_t(nx));
  for (int zz = 0; zz < nz; ++zz) {
    for (int yy = 0; yy < ny; ++yy) {
      double* row = &g[seed_mask.index(0, yy, zz)];
      edt_1d(row, line_out.data(), nx, step[0], v, z);
      std::copy(line_out.begin(), line_out.end(), row);
    }
  }
  // y pass
  line_in.resize(size_t(ny));
  line_out.resize(size_t(ny));
  for (int zz = 0; zz < nz; ++zz) {
    for (int xx = 0; xx < nx; ++xx) {
      for (int yy = 0; yy < ny; ++yy) line_in[size_t(yy)] = g[seed_mask.index(xx, yy, zz)];
      edt_1d(line_in.data(), line_out.data(), ny, step[1], v, z);
      for (int yy = 0; yy < ny; ++yy) g[seed_mask.index(xx, yy, zz)] = line_out[size_t(yy)];
    }
  }
  // z pass
  line_in.resize(size_t(nz));
  line_out.resize(size_t(nz));
  for (int yy = 0; yy < ny; ++yy) {
    for (int xx = 0; xx < nx; ++xx) {
      for (int zz = 0; zz < nz; ++zz) line_in[size_t(zz)] = g[seed_mask.index(xx, yy, zz)];
      edt_1d(line_in.data(), line_out.data(), nz, step[2], v, z);
      for (int zz = 0; zz < nz; ++zz) g[seed_mask.index(xx, yy, zz)] = line_out[size_t(zz)];
    }
  }
  Volume3 out(seed_mask.dims, VolumeKind::Intensity, 0.0f, seed_mask.spacing);
  for (size_t i = 0; i < g.size(); ++i) out.voxels[i] = float(std::sqrt(g[i]));
  return out;
}

}  // namespace

Volume3 distance_transform(const Volume3& mask, bool spacing_aware) {
  require_binary(mask, "distance_transform");
  if (mask.count_nonzero() == 0) throw std::invalid_argument("empty foreground");
  const std::array<double, 3> step =
      spacing_aware ? mask.spacing : std::array<double, 3>{1.0, 1.0, 1.0};
  return squared_edt(mask, step);
}

Volume3 distance_to_background(const Volume3& mask, bool spacing_aware) {
  require_binary(mask, "distance_to_background");
  Volume3 inverted(mask.dims, VolumeKind::Mask, 0.0f, mask.spacing);
  size_t bg = 0;
  for (size_t i = 0; i < mask.voxels.size(); ++i) {
    const bool is_bg = mask.voxels[i] == 0.0f;
    inverted.voxels[i] = is_bg ? 1.0f : 0.0f;
    bg += is_bg;
  }
  if (bg == 0) throw std::invalid_argument("mask has no background");
  const std::array<double, 3> step =
      spacing_aware ? mask.spacing : std::array<double, 3>{1.0, 1.0, 1.0};
  return squared_edt(inverted, step);
}

}  // namespace airseg
