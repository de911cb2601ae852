#pragma once

#include <string>

#include <json.hpp>

#include "airseg/treekit.hpp"
#include "airseg/volume.hpp"

namespace airseg {

struct Confusion {
  size_t tp = 0, fp = 0, fn = 0, tn = 0;
  size_t total() const { return tp + fp + fn + tn; }
};

/// Voxelwise confusion counts; dims must match.
Confusion confusion(const Volume3& pred, const Volume3& gt);

/// Overlap metrics with the standard definitions: DSC = 2TP/(2TP+FP+FN),
/// FPR = FP/(FP+TN), Sen = TP/(TP+FN), Pre = TP/(TP+FP). An empty
/// denominator yields 1.0 when the corresponding error count is also 0,
/// else 0.0, and the case is flagged.
struct Metrics {
  double dsc = 0, fpr = 0, sen = 0, pre = 0;
  bool dsc_degenerate = false, fpr_degenerate = false;
  bool sen_degenerate = false, pre_degenerate = false;
};
Metrics metrics(const Confusion& c);

struct EvalReport {
  Confusion counts;
  Metrics m;
  std::string mode = "whole";  // or "stripped"
};

EvalReport evaluate(const Volume3& pred, const Volume3& gt, bool stripped = false);
nlohmann::json report_to_json(const EvalReport& r);

/// Removes the voxels belonging (by nearest ground-truth centerline voxel)
/// to generation-0/1 branches. The stripping region is a pure function of
/// voxel position given the tree, so applying this to prediction and ground
/// truth removes the same region from both.
Volume3 strip_trachea_main(const Volume3& mask, const SkeletonTree& tree);

}  // namespace airseg
