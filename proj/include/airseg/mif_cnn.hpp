#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "airseg/nn.hpp"
#include "airseg/volume.hpp"

namespace airseg {

/// Segmentation network configuration: u-shaped encoder-decoder with exactly
/// two pooling stages, a multi-rate dilated-convolution pyramid at the
/// bottleneck, an edge-guidance head on the first-level features, and
/// normalized volume coordinates concatenated before the output head.
struct MifConfig {
  int in_channels = 1;
  std::array<int, 3> encoder_widths{16, 32, 64};
  std::array<int, 3> aspp_rates{6, 12, 18};
  int aspp_out_channels = 64;
  int edge_channels = 8;
  std::array<int, 3> patch{64, 64, 64};
  float seg_threshold = 0.5f;

  void validate() const;
  nlohmann::json to_json() const;
  static MifConfig from_json(const nlohmann::json& j);
};

struct MifOutputs {
  ad::TensorF seg_prob;   // [1,1,D,H,W], in [0,1]
  ad::TensorF edge_prob;  // [1,1,D,H,W], in [0,1]
};

class MifModel {
 public:
  MifModel(const MifConfig& cfg, uint64_t seed);

  /// Forward pass on one patch. x: [1,in,D,H,W] normalized intensities,
  /// coords: [1,3,D,H,W] normalized volume coordinates of the patch voxels.
  /// Spatial dims must be divisible by 4 (two pools).
  MifOutputs forward(const ad::TensorF& x, const ad::TensorF& coords, bool training);

  const MifConfig& config() const { return cfg_; }
  size_t parameter_count();
  std::vector<ad::TensorF> parameters();
  nn::Registry registry();  // rebuilt on demand (models stay movable)

  nn::IntensityNorm norm;

  void save(const std::string& path);
  static MifModel load(const std::string& path);

 private:
  MifConfig cfg_;
  nn::ConvBnRelu enc1a_, enc1b_, enc2a_, enc2b_, enc3a_, enc3b_;
  nn::ConvBnRelu aspp1x1_, aspp_r0_, aspp_r1_, aspp_r2_;
  nn::Conv3d aspp_pool_conv_;  // global-pool branch: 1x1x1 conv + ReLU
  nn::Conv3d aspp_fuse_;
  nn::BatchNorm aspp_fuse_bn_;
  nn::ConvBnRelu up2_, dec2_, up1_, dec1_;
  nn::ConvBnRelu egm1_, egm2_;
  nn::Conv3d edge_head_;
  nn::Conv3d seg_head_;
};

/// One training example: a patch with its volume-coordinate channels and
/// ground-truth mask/edge targets, flattened x-fastest.
struct MifSample {
  std::array<int, 3> size{0, 0, 0};
  std::vector<float> x;       // normalized intensities
  std::vector<float> coords;  // 3 channels
  std::vector<float> mask;
  std::vector<float> edge;
};

/// Combined objective: Dice on the segmentation head plus BCE on the edge
/// head, with the parts reported separately.
struct MifLoss {
  ad::TensorF total;
  double seg_part = 0.0;
  double edge_part = 0.0;
};
MifLoss mif_total_loss(const MifOutputs& out, const ad::TensorF& gt_mask,
                       const ad::TensorF& gt_edge);

struct MifTrainResult {
  std::vector<double> train_loss;  // per-epoch mean of the combined loss
  std::vector<double> val_loss;    // empty when no validation set given
  int best_epoch = -1;
};

/// Adam training loop, deterministic for a fixed seed. When a validation set
/// is provided the best-validation parameters are restored at the end.
/// Throws on an empty dataset or a non-finite loss.
MifTrainResult train_mif(MifModel& model, const std::vector<MifSample>& train,
                         const std::vector<MifSample>& val, int epochs,
                         float lr = 1e-4f, uint64_t seed = 1);

/// Builds training samples from a volume+mask pair: normalized sliding
/// windows with volume-coordinate channels and edge targets.
std::vector<MifSample> make_mif_samples(const Volume3& vol, const Volume3& gt,
                                        const nn::IntensityNorm& norm,
                                        std::array<int, 3> patch, int stride);

/// Fits the affine intensity normalization on training volumes (mean/std).
nn::IntensityNorm fit_intensity_norm(const std::vector<const Volume3*>& vols);

struct MifPrediction {
  Volume3 prob;  // kind probability
  Volume3 mask;  // prob >= seg_threshold
};

/// Whole-volume inference: 64-cubed windows at stride 32 (clamped at the
/// borders), overlapping probabilities averaged per voxel in deterministic
/// window order. Volumes smaller than the patch are reflect-padded and the
/// result cropped back.
MifPrediction predict_volume(MifModel& model, const Volume3& vol, int stride = 32);

}  // namespace airseg
