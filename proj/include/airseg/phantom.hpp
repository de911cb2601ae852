#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/volume.hpp"

namespace airseg {

/// Synthetic branching-tube phantom: a recursive binary tree of capsules
/// (cylinders with hemispherical caps) with exact analytic ground truth.
/// Intensities mimic the HU ordering of chest CT: dark lumen, optional
/// bright wall shell, intermediate background.
struct PhantomSpec {
  std::array<int, 3> dims{96, 96, 96};
  std::array<double, 3> spacing{0.7, 0.7, 0.7};
  int generations = 4;            // levels including the root; 2^g - 1 branches
  double root_radius_mm = 2.5;
  double child_radius_ratio = 0.64;
  double root_length_mm = 20.0;
  double child_length_ratio = 0.75;
  std::array<double, 2> branch_angle_deg{24.0, 40.0};
  double lumen_level = -1000.0;
  double wall_level = 0.0;
  double background_level = -150.0;
  double wall_thickness_mm = 0.0;  // 0 disables the wall shell
  double noise_sigma = 25.0;
  double blur_sigma = 0.7;         // in voxels
  uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static PhantomSpec from_json(const nlohmann::json& j);
};

struct PhantomBranch {
  std::array<double, 3> p0, p1;  // segment endpoints, mm
  double radius_mm = 0.0;
  int generation = 0;
  int parent = -1;
  bool clipped = false;  // true when the capsule leaves the volume bounds
};

struct Phantom {
  Volume3 intensity;
  Volume3 gt_mask;
  std::vector<PhantomBranch> branches;
};

/// Deterministic generation: the same spec (including seed) yields
/// bit-identical volumes.
Phantom generate(const PhantomSpec& spec);

/// Exact point-to-capsule-union test used by the rasterizer; exposed so
/// independent checks can call it on analytic branch descriptions.
bool inside_capsules(const std::vector<PhantomBranch>& branches,
                     const std::array<double, 3>& point_mm);

struct DatasetEntry {
  std::string name;
  uint64_t seed = 0;
  std::string split;  // train | val | test
};

struct DatasetManifest {
  PhantomSpec spec_template;
  std::vector<DatasetEntry> entries;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Generates n phantoms with disjoint per-volume seeds, writes volumes and a
/// manifest under out_dir, and splits them train/val/test. Splits must sum
/// to n; n >= 3.
DatasetManifest make_dataset(const PhantomSpec& spec_template, int n, uint64_t seed,
                             std::array<int, 3> split, const std::string& out_dir);

DatasetManifest load_manifest(const std::string& path);

}  // namespace airseg
