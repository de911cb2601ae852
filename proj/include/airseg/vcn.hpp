#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/growseg.hpp"
#include "airseg/nn.hpp"
#include "airseg/treekit.hpp"
#include "airseg/volume.hpp"

namespace airseg {

/// Voxel classification network: maps a 32-cubed neighborhood to the
/// probability that its center voxel is airway. Three down-sampling blocks
/// (two 3x3x3 convs with BN+ReLU, then 2x2 max pooling) with kernel counts
/// 16,16,32,32,64,64, followed by fully connected layers of 2048 and 128
/// neurons and a 2-way softmax.
struct VcnConfig {
  std::array<int, 6> conv_widths{16, 16, 32, 32, 64, 64};
  std::array<int, 2> fc_widths{2048, 128};
  std::array<int, 3> input{32, 32, 32};

  void validate() const;
  nlohmann::json to_json() const;
  static VcnConfig from_json(const nlohmann::json& j);
};

class VcnModel {
 public:
  VcnModel(const VcnConfig& cfg, uint64_t seed);

  /// x: [N,1,32,32,32] normalized intensities -> [N,2] class probabilities
  /// (column 1 is the airway class). Spatial trace is 32 -> 16 -> 8 -> 4.
  ad::TensorF forward(const ad::TensorF& x, bool training);

  const VcnConfig& config() const { return cfg_; }
  size_t parameter_count();
  std::vector<ad::TensorF> parameters();
  nn::Registry registry();

  nn::IntensityNorm norm;

  void save(const std::string& path);
  static VcnModel load(const std::string& path);

 private:
  VcnConfig cfg_;
  nn::ConvBnRelu c1_, c2_, c3_, c4_, c5_, c6_;
  nn::Linear fc1_, fc2_, fc3_;
};

struct VcnSample {
  std::vector<float> x;  // normalized 32-cubed neighborhood
  int label = 0;         // 1 airway, 0 background
};

struct VcnTrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

/// Plain SGD on the BCE of the airway-class probability. Requires both
/// classes to be present; deterministic for a fixed seed.
VcnTrainResult train_vcn(VcnModel& model, const std::vector<VcnSample>& samples,
                         int epochs, float lr = 1e-4f, int batch = 8, uint64_t seed = 1);

/// Airway probability of a single voxel: a 32-cubed neighborhood is
/// extracted around it (borders padded with the volume minimum intensity),
/// normalized, and pushed through the network.
float vcn_classify(VcnModel& model, const Volume3& vol, std::array<int, 3> voxel);

std::vector<float> vcn_classify_batch(VcnModel& model, const Volume3& vol,
                                      const std::vector<std::array<int, 3>>& voxels,
                                      int batch = 32);

/// Region-growing adapter around a trained model.
class VcnClassifier : public Classifier {
 public:
  explicit VcnClassifier(VcnModel& model, int batch = 32) : model_(model), batch_(batch) {}
  std::vector<float> classify(const Volume3& vol,
                              const std::vector<std::array<int, 3>>& voxels) override {
    return vcn_classify_batch(model_, vol, voxels, batch_);
  }

 private:
  VcnModel& model_;
  int batch_;
};

/// Builds training samples from a sample-point set over its source volume.
std::vector<VcnSample> make_vcn_samples(const Volume3& vol, const std::vector<SamplePoint>& points,
                                        const nn::IntensityNorm& norm);

}  // namespace airseg
