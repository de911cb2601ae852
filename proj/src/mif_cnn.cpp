#include "airseg/mif_cnn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "airseg/morphology.hpp"

namespace airseg {

using ad::TensorF;
using nlohmann::json;

void MifConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("mif: in_channels must be >= 1");
  for (int w : encoder_widths) {
    if (w < 1) throw std::invalid_argument("mif: encoder widths must be positive");
  }
  if (aspp_out_channels < 1 || edge_channels < 1) {
    throw std::invalid_argument("mif: channel counts must be positive");
  }
  if (!(aspp_rates[0] > 0 && aspp_rates[0] < aspp_rates[1] && aspp_rates[1] < aspp_rates[2])) {
    throw std::invalid_argument("mif: aspp rates must be strictly increasing positives");
  }
  for (int p : patch) {
    if (p < 4 || p % 4 != 0) {
      throw std::invalid_argument("mif: patch dims must be positive multiples of 4");
    }
  }
  if (!(seg_threshold > 0.0f && seg_threshold < 1.0f)) {
    throw std::invalid_argument("mif: seg threshold must be in (0,1)");
  }
}

json MifConfig::to_json() const {
  json j;
  j["in_channels"] = in_channels;
  j["encoder_widths"] = encoder_widths;
  j["aspp_rates"] = aspp_rates;
  j["aspp_out_channels"] = aspp_out_channels;
  j["edge_channels"] = edge_channels;
  j["patch"] = patch;
  j["seg_threshold"] = seg_threshold;
  return j;
}

MifConfig MifConfig::from_json(const json& j) {
  MifConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("encoder_widths")) c.encoder_widths = j["encoder_widths"].get<std::array<int, 3>>();
  if (j.contains("aspp_rates")) c.aspp_rates = j["aspp_rates"].get<std::array<int, 3>>();
  c.aspp_out_channels = j.value("aspp_out_channels", c.aspp_out_channels);
  c.edge_channels = j.value("edge_channels", c.edge_channels);
  if (j.contains("patch")) c.patch = j["patch"].get<std::array<int, 3>>();
  c.seg_threshold = j.value("seg_threshold", c.seg_threshold);
  return c;
}

MifModel::MifModel(const MifConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int w1 = cfg_.encoder_widths[0], w2 = cfg_.encoder_widths[1],
            w3 = cfg_.encoder_widths[2];
  const int a = cfg_.aspp_out_channels, e = cfg_.edge_channels;
  enc1a_ = nn::ConvBnRelu::make(cfg_.in_channels, w1, 3, 1, rng);
  enc1b_ = nn::ConvBnRelu::make(w1, w1, 3, 1, rng);
  enc2a_ = nn::ConvBnRelu::make(w1, w2, 3, 1, rng);
  enc2b_ = nn::ConvBnRelu::make(w2, w2, 3, 1, rng);
  enc3a_ = nn::ConvBnRelu::make(w2, w3, 3, 1, rng);
  enc3b_ = nn::ConvBnRelu::make(w3, w3, 3, 1, rng);
  aspp1x1_ = nn::ConvBnRelu::make(w3, a, 1, 1, rng);
  aspp_r0_ = nn::ConvBnRelu::make(w3, a, 3, cfg_.aspp_rates[0], rng);
  aspp_r1_ = nn::ConvBnRelu::make(w3, a, 3, cfg_.aspp_rates[1], rng);
  aspp_r2_ = nn::ConvBnRelu::make(w3, a, 3, cfg_.aspp_rates[2], rng);
  // BN over a 1x1x1 map is degenerate, so the pooled branch is conv+ReLU
  aspp_pool_conv_ = nn::Conv3d::make(w3, a, 1, 1, /*bias=*/true, rng);
  aspp_fuse_ = nn::Conv3d::make(5 * a, a, 1, 1, /*bias=*/false, rng);
  aspp_fuse_bn_ = nn::BatchNorm::make(a);
  up2_ = nn::ConvBnRelu::make(a, w2, 3, 1, rng);
  dec2_ = nn::ConvBnRelu::make(w2 + w2, w2, 3, 1, rng);
  up1_ = nn::ConvBnRelu::make(w2, w1, 3, 1, rng);
  dec1_ = nn::ConvBnRelu::make(w1 + w1 + e, w1, 3, 1, rng);
  egm1_ = nn::ConvBnRelu::make(w1, e, 3, 1, rng);
  egm2_ = nn::ConvBnRelu::make(e, e, 3, 1, rng);
  edge_head_ = nn::Conv3d::make(e, 1, 1, 1, /*bias=*/true, rng);
  seg_head_ = nn::Conv3d::make(w1 + 3, 1, 1, 1, /*bias=*/true, rng);
}

nn::Registry MifModel::registry() {
  nn::Registry reg;
  reg.add("enc1a", enc1a_);
  reg.add("enc1b", enc1b_);
  reg.add("enc2a", enc2a_);
  reg.add("enc2b", enc2b_);
  reg.add("enc3a", enc3a_);
  reg.add("enc3b", enc3b_);
  reg.add("aspp1x1", aspp1x1_);
  reg.add("aspp_r0", aspp_r0_);
  reg.add("aspp_r1", aspp_r1_);
  reg.add("aspp_r2", aspp_r2_);
  reg.add("aspp_pool", aspp_pool_conv_);
  reg.add("aspp_fuse", aspp_fuse_);
  reg.add("aspp_fuse_bn", aspp_fuse_bn_);
  reg.add("up2", up2_);
  reg.add("dec2", dec2_);
  reg.add("up1", up1_);
  reg.add("dec1", dec1_);
  reg.add("egm1", egm1_);
  reg.add("egm2", egm2_);
  reg.add("edge_head", edge_head_);
  reg.add("seg_head", seg_head_);
  return reg;
}

std::vector<TensorF> MifModel::parameters() { return registry().params; }
size_t MifModel::parameter_count() { return registry().parameter_count(); }

MifOutputs MifModel::forward(const TensorF& x, const TensorF& coords, bool training) {
  if (x.ndim() != 5 || x.dim(1) != cfg_.in_channels) {
    throw std::invalid_argument("mif: input must be [1,in,D,H,W]");
  }
  if (coords.ndim() != 5 || coords.dim(1) != 3 || coords.dim(2) != x.dim(2) ||
      coords.dim(3) != x.dim(3) || coords.dim(4) != x.dim(4)) {
    throw std::invalid_argument("mif: coords must be [1,3,D,H,W] matching the patch");
  }
  if (x.dim(2) % 4 || x.dim(3) % 4 || x.dim(4) % 4) {
    throw std::invalid_argument("mif: spatial dims must be divisible by 4");
  }

  auto e1 = enc1b_(enc1a_(x, training), training);
  auto p1 = ad::maxpool3d(e1);
  auto e2 = enc2b_(enc2a_(p1, training), training);
  auto p2 = ad::maxpool3d(e2);
  auto e3 = enc3b_(enc3a_(p2, training), training);

  // multi-rate pyramid over the bottleneck features
  auto b0 = aspp1x1_(e3, training);
  auto b1 = aspp_r0_(e3, training);
  auto b2 = aspp_r1_(e3, training);
  auto b3 = aspp_r2_(e3, training);
  auto pooled = ad::relu(aspp_pool_conv_(ad::global_avg_pool(e3)));
  auto b4 = ad::broadcast_spatial(pooled, e3.dim(2), e3.dim(3), e3.dim(4));
  auto fused = aspp_fuse_bn_(aspp_fuse_(ad::concat_channels<float>({b0, b1, b2, b3, b4})),
                             training);

  auto d2 = up2_(ad::upsample_nearest(fused), training);
  d2 = dec2_(ad::concat_channels<float>({d2, e2}), training);
  auto d1 = up1_(ad::upsample_nearest(d2), training);

  // edge guidance from the full-resolution encoder features; the edge
  // features also rejoin the decoder at the same resolution
  auto eg = egm2_(egm1_(e1, training), training);
  auto edge_prob = ad::sigmoid(edge_head_(eg));
  d1 = dec1_(ad::concat_channels<float>({d1, e1, eg}), training);

  auto seg_prob = ad::sigmoid(seg_head_(ad::concat_channels<float>({d1, coords})));
  return {seg_prob, edge_prob};
}

void MifModel::save(const std::string& path) {
  json extras;
  extras["kind"] = "mif";
  extras["config"] = cfg_.to_json();
  extras["norm"] = {{"offset", norm.offset}, {"scale", norm.scale}};
  extras["optimizer_state"] = false;
  save_checkpoint(path, extras, registry().arrays);
}

MifModel MifModel::load(const std::string& path) {
  const json extras = peek_checkpoint(path);
  if (extras.value("kind", "") != "mif") {
    throw std::runtime_error("checkpoint is not a mif model: " + path);
  }
  MifModel model(MifConfig::from_json(extras.at("config")), /*seed=*/0);
  load_checkpoint(path, model.registry().arrays);
  model.norm.offset = extras.at("norm").at("offset").get<float>();
  model.norm.scale = extras.at("norm").at("scale").get<float>();
  return model;
}

MifLoss mif_total_loss(const MifOutputs& out, const TensorF& gt_mask, const TensorF& gt_edge) {
  MifLoss loss;
  auto seg = ad::dice_loss(out.seg_prob, gt_mask);
  auto edge = ad::bce_loss(out.edge_prob, gt_edge);
  loss.seg_part = seg.item();
  loss.edge_part = edge.item();
  loss.total = ad::add(seg, edge);
  return loss;
}

nn::IntensityNorm fit_intensity_norm(const std::vector<const Volume3*>& vols) {
  double sum = 0.0;
  size_t n = 0;
  for (const Volume3* v : vols) {
    for (float x : v->voxels) sum += x;
    n += v->voxels.size();
  }
  if (n == 0) throw std::invalid_argument("fit_intensity_norm: no voxels");
  const double mean = sum / double(n);
  double var = 0.0;
  for (const Volume3* v : vols) {
    for (float x : v->voxels) var += (x - mean) * (x - mean);
  }
  var /= double(n);
  nn::IntensityNorm norm;
  norm.offset = float(mean);
  norm.scale = std::max(1e-3f, float(std::sqrt(var)));
  return norm;
}

namespace {

TensorF sample_to_tensor(const std::vector<float>& data, int channels,
                         std::array<int, 3> size) {
  return TensorF::from_data({1, channels, size[2], size[1], size[0]}, data);
}

}  // namespace

MifTrainResult train_mif(MifModel& model, const std::vector<MifSample>& train,
                         const std::vector<MifSample>& val, int epochs, float lr,
                         uint64_t seed) {
  if (train.empty()) throw std::invalid_argument("train_mif: empty dataset");
  auto params = model.parameters();
  ad::Adam<float> opt;
  opt.lr = lr;
  Rng order_rng(seed);
  MifTrainResult result;
  double best_val = std::numeric_limits<double>::max();
  std::vector<std::vector<float>> best_state;

  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t(0));

  for (int epoch = 0; epoch < epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t i : order) {
      const auto& s = train[i];
      auto x = sample_to_tensor(s.x, model.config().in_channels, s.size);
      auto coords = sample_to_tensor(s.coords, 3, s.size);
      auto mask = sample_to_tensor(s.mask, 1, s.size);
      auto edge = sample_to_tensor(s.edge, 1, s.size);
      auto out = model.forward(x, coords, /*training=*/true);
      auto loss = mif_total_loss(out, mask, edge);
      const double lv = loss.total.item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_mif: non-finite loss at epoch " +
                                 std::to_string(epoch) + ", sample " + std::to_string(i));
      }
      ad::zero_grads(params);
      loss.total.backward();
      opt.step(params);
      loss_sum += lv;
    }
    result.train_loss.push_back(loss_sum / double(train.size()));

    if (!val.empty()) {
      ad::NoGradGuard ng;
      double vsum = 0.0;
      for (const auto& s : val) {
        auto x = sample_to_tensor(s.x, model.config().in_channels, s.size);
        auto coords = sample_to_tensor(s.coords, 3, s.size);
        auto mask = sample_to_tensor(s.mask, 1, s.size);
        auto edge = sample_to_tensor(s.edge, 1, s.size);
        auto out = model.forward(x, coords, /*training=*/false);
        auto loss = mif_total_loss(out, mask, edge);
        vsum += loss.total.item();
      }
      const double vmean = vsum / double(val.size());
      result.val_loss.push_back(vmean);
      if (vmean < best_val) {
        best_val = vmean;
        result.best_epoch = epoch;
        best_state = model.registry().snapshot();
      }
    }
  }
  if (!best_state.empty()) {
    model.registry().restore(best_state);
  } else {
    result.best_epoch = epochs - 1;
  }
  return result;
}

std::vector<MifSample> make_mif_samples(const Volume3& vol, const Volume3& gt,
                                        const nn::IntensityNorm& norm,
                                        std::array<int, 3> patch, int stride) {
  if (vol.dims != gt.dims) throw std::invalid_argument("make_mif_samples: dims mismatch");
  const Volume3 edge = edge_map(gt);
  const auto coord = coordinate_channels(vol.dims);
  std::vector<MifSample> samples;
  for (const auto& origin : sliding_windows(vol.dims, patch, stride)) {
    MifSample s;
    s.size = patch;
    const size_t n = size_t(patch[0]) * patch[1] * patch[2];
    s.x.resize(n);
    s.coords.resize(3 * n);
    s.mask.resize(n);
    s.edge.resize(n);
    size_t i = 0;
    for (int z = 0; z < patch[2]; ++z) {
      for (int y = 0; y < patch[1]; ++y) {
        for (int x = 0; x < patch[0]; ++x, ++i) {
          const int vx = origin[0] + x, vy = origin[1] + y, vz = origin[2] + z;
          s.x[i] = norm.apply(vol.at(vx, vy, vz));
          s.mask[i] = gt.at(vx, vy, vz);
          s.edge[i] = edge.at(vx, vy, vz);
          s.coords[i] = coord[0].at(vx, vy, vz);
          s.coords[n + i] = coord[1].at(vx, vy, vz);
          s.coords[2 * n + i] = coord[2].at(vx, vy, vz);
        }
      }
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

namespace {

// symmetric reflection fold of index i into [0, n)
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  int j = i % period;
  if (j < 0) j += period;
  return j < n ? j : period - 1 - j;
}

}  // namespace

MifPrediction predict_volume(MifModel& model, const Volume3& vol, int stride) {
  const auto patch = model.config().patch;
  std::array<int, 3> pd;
  for (int a = 0; a < 3; ++a) pd[size_t(a)] = std::max(vol.dims[size_t(a)], patch[size_t(a)]);
  const bool padded = pd != vol.dims;

  // normalized (and reflect-padded, when needed) intensity field
  Volume3 field(pd, VolumeKind::Intensity, 0.0f, vol.spacing);
  for (int z = 0; z < pd[2]; ++z) {
    const int vz = reflect_index(z, vol.dims[2]);
    for (int y = 0; y < pd[1]; ++y) {
      const int vy = reflect_index(y, vol.dims[1]);
      for (int x = 0; x < pd[0]; ++x) {
        const int vx = reflect_index(x, vol.dims[0]);
        field.at(x, y, z) = model.norm.apply(vol.at(vx, vy, vz));
      }
    }
  }
  const auto coord = coordinate_channels(pd);

  std::vector<float> prob_sum(field.size(), 0.0f);
  std::vector<uint16_t> count(field.size(), 0);
  const size_t n = size_t(patch[0]) * patch[1] * patch[2];
  std::vector<float> xbuf(n), cbuf(3 * n);

  ad::NoGradGuard ng;
  for (const auto& origin : sliding_windows(pd, patch, stride)) {
    size_t i = 0;
    for (int z = 0; z < patch[2]; ++z) {
      for (int y = 0; y < patch[1]; ++y) {
        for (int x = 0; x < patch[0]; ++x, ++i) {
          const int vx = origin[0] + x, vy = origin[1] + y, vz = origin[2] + z;
          xbuf[i] = field.at(vx, vy, vz);
          cbuf[i] = coord[0].at(vx, vy, vz);
          cbuf[n + i] = coord[1].at(vx, vy, vz);
          cbuf[2 * n + i] = coord[2].at(vx, vy, vz);
        }
      }
    }
    auto x = TensorF::from_data({1, 1, patch[2], patch[1], patch[0]}, xbuf);
    auto coords = TensorF::from_data({1, 3, patch[2], patch[1], patch[0]}, cbuf);
    auto out = model.forward(x, coords, /*training=*/false);
    const float* p = out.seg_prob.data();
    i = 0;
    for (int z = 0; z < patch[2]; ++z) {
      for (int y = 0; y < patch[1]; ++y) {
        for (int x2 = 0; x2 < patch[0]; ++x2, ++i) {
          const size_t fi = field.index(origin[0] + x2, origin[1] + y, origin[2] + z);
          prob_sum[fi] += p[i];
          count[fi] += 1;
        }
      }
    }
  }

  MifPrediction pred;
  pred.prob = Volume3(vol.dims, VolumeKind::Probability, 0.0f, vol.spacing);
  pred.mask = Volume3(vol.dims, VolumeKind::Mask, 0.0f, vol.spacing);
  for (int z = 0; z < vol.dims[2]; ++z) {
    for (int y = 0; y < vol.dims[1]; ++y) {
      for (int x = 0; x < vol.dims[0]; ++x) {
        const size_t fi = field.index(x, y, z);
        const float p = prob_sum[fi] / float(count[fi]);
        pred.prob.at(x, y, z) = std::clamp(p, 0.0f, 1.0f);
        pred.mask.at(x, y, z) = p >= model.config().seg_threshold ? 1.0f : 0.0f;
      }
    }
  }
  (void)padded;
  return pred;
}

}  // namespace airseg
