#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/volume.hpp"

namespace airseg {

/// Voxel classifier driving the region growing: probability that the voxel
/// centered at each query position is airway. Implementations must be pure
/// and deterministic per (model, voxel); batch calls must equal repeated
/// single calls.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::vector<float> classify(const Volume3& vol,
                                      const std::vector<std::array<int, 3>>& voxels) = 0;
};

/// Ground-truth lookup classifier (returns 1 on mask voxels, 0 elsewhere).
/// Test instrument for growth-equality oracles.
class OracleClassifier : public Classifier {
 public:
  explicit OracleClassifier(const Volume3& gt) : gt_(gt) {}
  std::vector<float> classify(const Volume3&,
                              const std::vector<std::array<int, 3>>& voxels) override {
    std::vector<float> p(voxels.size());
    for (size_t i = 0; i < voxels.size(); ++i) {
      const auto& v = voxels[i];
      p[i] = gt_.in_bounds(v[0], v[1], v[2]) && gt_.at(v[0], v[1], v[2]) != 0.0f ? 1.0f : 0.0f;
    }
    return p;
  }

 private:
  const Volume3& gt_;
};

class LambdaClassifier : public Classifier {
 public:
  using Fn = std::function<float(const Volume3&, std::array<int, 3>)>;
  explicit LambdaClassifier(Fn fn) : fn_(std::move(fn)) {}
  std::vector<float> classify(const Volume3& vol,
                              const std::vector<std::array<int, 3>>& voxels) override {
    std::vector<float> p(voxels.size());
    for (size_t i = 0; i < voxels.size(); ++i) p[i] = fn_(vol, voxels[i]);
    return p;
  }

 private:
  Fn fn_;
};

/// Seed voxels for growth: mask voxels at the tips of the skeleton tree's
/// leaf branches, with the root end excluded. Deterministic sorted order;
/// structures without tubular ends (e.g. a sphere) yield no seeds.
std::vector<std::array<int, 3>> terminal_voxels(const Volume3& mask);

struct GrowthLog {
  std::vector<size_t> added_per_round;
  size_t evaluations = 0;  // classifier calls == |visited|
  size_t rounds = 0;
  std::string stop_reason;
};
nlohmann::json growth_log_to_json(const GrowthLog& log);

struct GrowOptions {
  uint64_t shuffle_seed = 0;  // nonzero: permute stack order (results must not change)
  size_t max_rounds = 64;     // safety valve; normal stop is two quiet rounds
};

struct GrowResult {
  Volume3 mask;
  GrowthLog log;
};

/// Classifier-driven region growing. Each update round pops seeds and
/// classifies their unvisited 26-neighbors; probabilities >= t_u join the
/// mask and the frontier. Rounds re-derive terminal seeds from the updated
/// mask and the loop stops once two successive rounds add nothing. Voxels
/// are evaluated at most once across all rounds, which guarantees
/// termination; the mask only ever grows.
GrowResult grow(const Volume3& initial_mask, const Volume3& vol, Classifier& clf,
                float t_u = 0.8f, const GrowOptions& opts = {});

/// Round-by-round summary of a finished growth.
nlohmann::json growth_report(const GrowthLog& log);

}  // namespace airseg
