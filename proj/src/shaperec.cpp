#include "airseg/shaperec.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "airseg/morphology.hpp"

namespace airseg {

using nlohmann::json;

void smooth_diameters(SkeletonTree& tree, int half_window) {
  if (half_window < 0) throw std::invalid_argument("smooth_diameters: negative window");
  for (const auto& br : tree.branches) {
    const int k = int(br.chain.size());
    for (int j = 0; j < k; ++j) {
      double acc = 0.0;
      for (int o = -half_window; o <= half_window; ++o) {
        const int q = std::clamp(j + o, 0, k - 1);  // replicate at chain ends
        acc += tree.voxels[size_t(br.chain[size_t(q)])].diameter_mm;
      }
      tree.voxels[size_t(br.chain[size_t(j)])].smoothed_mm =
          acc / double(2 * half_window + 1);
    }
  }
}

namespace {

void rasterize_ball(Volume3& out, const SkeletonTree::Voxel& v,
                    const std::array<double, 3>& sp, size_t* clipped) {
  const double r = v.smoothed_mm / 2.0;
  bool clip = false;
  int lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    const int rv = int(std::ceil(r / sp[size_t(a)]));
    lo[a] = v.pos[size_t(a)] - rv;
    hi[a] = v.pos[size_t(a)] + rv;
    if (lo[a] < 0) {
      lo[a] = 0;
      clip = true;
    }
    if (hi[a] > out.dims[size_t(a)] - 1) {
      hi[a] = out.dims[size_t(a)] - 1;
      clip = true;
    }
  }
  if (clip && clipped) ++*clipped;
  for (int z = lo[2]; z <= hi[2]; ++z) {
    for (int y = lo[1]; y <= hi[1]; ++y) {
      for (int x = lo[0]; x <= hi[0]; ++x) {
        const double dx = (x - v.pos[0]) * sp[0];
        const double dy = (y - v.pos[1]) * sp[1];
        const double dz = (z - v.pos[2]) * sp[2];
        if (dx * dx + dy * dy + dz * dz <= r * r) out.at(x, y, z) = 1.0f;
      }
    }
  }
}

}  // namespace

Volume3 reconstruct(const SkeletonTree& tree, std::array<int, 3> dims,
                    std::array<double, 3> spacing, ReconstructStats* stats) {
  Volume3 out(dims, VolumeKind::Mask, 0.0f, spacing);
  size_t clipped = 0;
  for (const auto& v : tree.voxels) {
    if (!out.in_bounds(v.pos[0], v.pos[1], v.pos[2])) {
      ++clipped;
      continue;
    }
    out.at(v.pos[0], v.pos[1], v.pos[2]) = 1.0f;  // sub-voxel radii keep the center
    rasterize_ball(out, v, spacing, &clipped);
  }
  if (stats) stats->clipped_balls = clipped;
  return out;
}

Volume3 refine(const Volume3& seg, const SkeletonTree& tree, const Volume3& recon,
               const ReconParams& params, RefineReport* report) {
  if (tree.voxels.empty()) throw std::invalid_argument("refine: empty tree");
  if (seg.dims != recon.dims) throw std::invalid_argument("refine: dims mismatch");
  if (!seg.is_binary()) throw std::invalid_argument("refine: segmentation must be binary");

  Volume3 out = seg;
  out.kind = VolumeKind::Mask;
  RefineReport local;
  RefineReport& rep = report ? *report : local;

  // (a) fracture fill: compare the segmentation's local diameter at each
  // centerline voxel with the smoothed diameter
  const Volume3 seg_edt = distance_to_background(seg, /*spacing_aware=*/true);
  for (const auto& v : tree.voxels) {
    const bool inside = seg.in_bounds(v.pos[0], v.pos[1], v.pos[2]) &&
                        seg.at(v.pos[0], v.pos[1], v.pos[2]) != 0.0f;
    const double local_d = inside ? 2.0 * seg_edt.at(v.pos[0], v.pos[1], v.pos[2]) : 0.0;
    if (local_d < params.fracture_factor * v.smoothed_mm) {
      const size_t before = out.count_nonzero();
      if (out.in_bounds(v.pos[0], v.pos[1], v.pos[2])) out.at(v.pos[0], v.pos[1], v.pos[2]) = 1.0f;
      rasterize_ball(out, v, out.spacing, nullptr);
      rep.filled_voxels += out.count_nonzero() - before;
      rep.fill_centers.push_back(v.pos);
    }
  }

  // (b) protrusion trim: anything farther from its nearest centerline voxel
  // than the reconstructed radius (+ slack) goes; centerline voxels stay
  const double tol_mm =
      params.trim_tol_voxels * *std::max_element(out.spacing.begin(), out.spacing.end());
  std::vector<std::array<int, 3>> fg;
  std::vector<size_t> fg_idx;
  for (size_t i = 0; i < out.voxels.size(); ++i) {
    if (out.voxels[i] != 0.0f) {
      int x, y, z;
      out.unravel(i, x, y, z);
      fg.push_back({x, y, z});
      fg_idx.push_back(i);
    }
  }
  const std::vector<int> owner = nearest_centerline(tree, fg);
  std::vector<char> is_center(out.voxels.size(), 0);
  for (const auto& v : tree.voxels) {
    if (out.in_bounds(v.pos[0], v.pos[1], v.pos[2])) {
      is_center[out.index(v.pos[0], v.pos[1], v.pos[2])] = 1;
    }
  }
  for (size_t q = 0; q < fg.size(); ++q) {
    if (is_center[fg_idx[q]]) continue;
    const auto& c = tree.voxels[size_t(owner[q])];
    const double dx = (fg[q][0] - c.pos[0]) * out.spacing[0];
    const double dy = (fg[q][1] - c.pos[1]) * out.spacing[1];
    const double dz = (fg[q][2] - c.pos[2]) * out.spacing[2];
    const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
    if (dist > c.smoothed_mm / 2.0 + tol_mm) {
      out.voxels[fg_idx[q]] = 0.0f;
      rep.trimmed.push_back(fg[q]);
    }
  }
  return out;
}

json RefineReport::to_json() const {
  json j;
  j["filled_voxels"] = filled_voxels;
  json fills = json::array();
  for (const auto& p : fill_centers) fills.push_back({p[0], p[1], p[2]});
  j["fill_centers"] = fills;
  json trims = json::array();
  for (const auto& p : trimmed) trims.push_back({p[0], p[1], p[2]});
  j["trimmed"] = trims;
  j["trimmed_voxels"] = trimmed.size();
  return j;
}

}  // namespace airseg
