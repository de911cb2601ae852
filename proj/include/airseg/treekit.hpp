#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "airseg/volume.hpp"

namespace airseg {

enum class BranchType { TracheaMain, Lobar, Segmental, Subsegmental };

std::string to_string(BranchType t);

/// Branch-decomposed centerline of a binary airway mask. Branch chains are
/// 26-connected paths ordered parent-to-child; the tree is rooted at the
/// trachea end and acyclic. Per-voxel diameters are in mm.
struct SkeletonTree {
  struct Voxel {
    std::array<int, 3> pos;
    double diameter_mm = 0.0;
    double smoothed_mm = 0.0;  // filled by shaperec::smooth_diameters
  };
  struct Branch {
    std::vector<int> chain;  // voxel ids, parent-to-child order
    int parent = -1;
    std::vector<int> children;
    int generation = 0;
    double diameter_mm = 0.0;  // mean of chain diameters
    BranchType type = BranchType::TracheaMain;
  };

  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<Voxel> voxels;
  std::vector<Branch> branches;
  std::vector<int> voxel_branch;  // voxel id -> branch id
  int root_branch = -1;

  size_t total_voxels() const { return voxels.size(); }
  bool empty() const { return branches.empty(); }
};

/// One-voxel-thick, 26-connected, homotopic centerline of a binary mask:
/// distance-ordered homotopic thinning (simple-point deletion in increasing
/// boundary-distance order, curve endpoints preserved) followed by adaptive
/// spur pruning. If the mask has several 26-components the largest is taken
/// and a warning is printed. Throws on an empty mask.
Volume3 skeletonize(const Volume3& mask);

/// Decomposes a centerline into a rooted branch tree. The root is the
/// endpoint nearest the largest-z end of the structure; junction clusters
/// are absorbed into their parent chain so one anatomical bifurcation costs
/// one generation. Cycles are broken at their smallest-diameter edge (with a
/// warning); leaf branches shorter than 3 voxels with no children are
/// pruned. Per-voxel diameters (2x the spacing-aware distance to the nearest
/// background voxel) and per-branch means are filled in.
SkeletonTree build_tree(const Volume3& centerline, const Volume3& mask);

/// Diameter estimate at a single mask voxel: twice the spacing-aware
/// Euclidean distance to the nearest background voxel, in mm. Exact for
/// axis-aligned cylinders up to voxel quantization. Throws if the voxel is
/// outside the mask.
double voxel_diameter(const Volume3& mask, std::array<int, 3> voxel);

/// Mean of the chain's per-voxel diameters. Throws on an empty branch.
double branch_diameter(const SkeletonTree& tree, int branch);

/// Generation-depth branch typing: gen 0-1 trachea/main, 2 lobar,
/// 3 segmental, >=4 subsegmental.
void classify_branches(SkeletonTree& tree);

struct Subsets {
  std::vector<int> s1;  // all branches
  std::vector<int> s2;  // segmental with diameter < 2 mm, plus all subsegmental
};
Subsets subsets(const SkeletonTree& tree);

struct SamplePoint {
  std::array<int, 3> pos;
  int label = 0;  // 1 airway, 0 background
  int band = 0;   // 1..5 for negatives, 0 for positives
};

struct SampleSet {
  std::vector<SamplePoint> positives;
  std::vector<SamplePoint> negatives;
};

/// Distance bands for negative sampling, in voxel units with ceiling
/// rounding: band k covers ceil(dist) in [lo_k, hi_k].
inline constexpr std::array<std::array<int, 2>, 5> kNegativeBands{
    {{1, 1}, {2, 4}, {5, 7}, {8, 10}, {11, 30}}};

/// The sampling protocol: n_pos positives uniformly from airway voxels of S2
/// branches (airway voxels are assigned to branches by nearest centerline
/// voxel) and per_band negatives per distance band, all deterministic for a
/// given seed. Sampling falls back to replacement with a warning when a
/// region is smaller than its quota; an empty band is an error naming the
/// band.
SampleSet sample_points(const Volume3& mask, const SkeletonTree& tree, uint64_t seed,
                        int n_pos = 3000, int per_band = 600);

void save_sample_set(const SampleSet& set, const std::string& path,
                     const std::string& volume_ref, const std::string& mask_ref);
struct LoadedSampleSet {
  SampleSet set;
  std::string volume_ref, mask_ref;
};
LoadedSampleSet load_sample_set(const std::string& path);

/// For each query voxel, the index of the nearest centerline voxel (ties ->
/// smallest index). Distances are spacing-aware.
std::vector<int> nearest_centerline(const SkeletonTree& tree,
                                    const std::vector<std::array<int, 3>>& queries);

}  // namespace airseg
