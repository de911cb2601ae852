#pragma once

#include "airseg/volume.hpp"

namespace airseg {

/// 6-connectivity erosion; volume borders count as background.
Volume3 erode6(const Volume3& mask);

/// Boundary shell of a binary mask: foreground voxels with at least one
/// 6-neighbor outside the mask (the volume border counts as outside).
/// Equals mask AND NOT erode6(mask). Throws on non-binary input.
Volume3 edge_map(const Volume3& mask);

struct Components {
  Volume3 labels;               // kind Label, background 0, components 1..K
  std::vector<size_t> sizes;    // sizes[k-1] = voxel count of label k
};

/// Connected-component labeling with 6 or 26 connectivity. Components are
/// numbered by their smallest linear-index member, so labels are invariant
/// under voxel-iteration order.
Components connected_components(const Volume3& mask, int connectivity);

/// Mask of the largest 26-connected component (ties broken by label order).
Volume3 largest_component(const Volume3& mask, int connectivity = 26);

/// Exact Euclidean distance from each voxel to the nearest foreground voxel
/// (0 on foreground), computed with the separable parabola method. In voxel
/// units by default; spacing-aware gives mm. Throws on empty foreground.
Volume3 distance_transform(const Volume3& mask, bool spacing_aware = false);

/// Distance from each foreground voxel to the nearest background voxel
/// (0 on background). Used for local radius estimates. Throws if the mask
/// has no background.
Volume3 distance_to_background(const Volume3& mask, bool spacing_aware = false);

}  // namespace airseg
