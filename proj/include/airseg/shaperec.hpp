#pragma once

#include <array>

#include <json.hpp>

#include "airseg/treekit.hpp"
#include "airseg/volume.hpp"

namespace airseg {

struct ReconParams {
  int half_window = 2;                  // 5-tap diameter smoothing
  double fracture_factor = 2.0 / 3.0;   // fill where local d < factor * d'
  double trim_tol_voxels = 1.0;         // radius slack before trimming
};

/// Sliding-window smoothing of per-voxel diameters along each branch chain:
/// d'[j] = mean of d over [j-w, j+w], with replicate padding at chain ends.
/// Writes SkeletonTree::Voxel::smoothed_mm.
void smooth_diameters(SkeletonTree& tree, int half_window = 2);

struct ReconstructStats {
  size_t clipped_balls = 0;
};

/// Airway rebuilt as the union of solid balls of radius d'/2 (mm,
/// spacing-aware) around every centerline voxel, rasterized with a
/// center-in-ball test. Balls reaching outside the volume are clipped and
/// counted.
Volume3 reconstruct(const SkeletonTree& tree, std::array<int, 3> dims,
                    std::array<double, 3> spacing, ReconstructStats* stats = nullptr);

struct RefineReport {
  std::vector<std::array<int, 3>> fill_centers;   // centerline voxels that triggered a fill
  std::vector<std::array<int, 3>> trimmed;        // removed segmentation voxels
  size_t filled_voxels = 0;

  nlohmann::json to_json() const;
};

/// Segmentation refinement: (a) fracture fill — where the segmentation's
/// local diameter at a centerline voxel falls below fracture_factor of the
/// smoothed diameter, the reconstructed ball there is added; (b) protrusion
/// trim — voxels farther from their nearest centerline voxel than that
/// voxel's reconstructed radius plus one voxel of slack are removed.
/// Centerline voxels are never removed.
Volume3 refine(const Volume3& seg, const SkeletonTree& tree, const Volume3& recon,
               const ReconParams& params = {}, RefineReport* report = nullptr);

}  // namespace airseg
