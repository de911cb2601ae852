#include "airseg/vcn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace airseg {

using ad::TensorF;
using nlohmann::json;

void VcnConfig::validate() const {
  const std::array<int, 6> expect{16, 16, 32, 32, 64, 64};
  if (conv_widths != expect) {
    throw std::invalid_argument("vcn: conv widths must be 16,16,32,32,64,64");
  }
  if (fc_widths != std::array<int, 2>{2048, 128}) {
    throw std::invalid_argument("vcn: fc widths must be 2048,128");
  }
  for (int d : input) {
    if (d != 32) throw std::invalid_argument("vcn: input must be 32x32x32");
  }
}

json VcnConfig::to_json() const {
  json j;
  j["conv_widths"] = conv_widths;
  j["fc_widths"] = fc_widths;
  j["input"] = input;
  return j;
}

VcnConfig VcnConfig::from_json(const json& j) {
  VcnConfig c;
  if (j.contains("conv_widths")) c.conv_widths = j["conv_widths"].get<std::array<int, 6>>();
  if (j.contains("fc_widths")) c.fc_widths = j["fc_widths"].get<std::array<int, 2>>();
  if (j.contains("input")) c.input = j["input"].get<std::array<int, 3>>();
  return c;
}

VcnModel::VcnModel(const VcnConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const auto& w = cfg_.conv_widths;
  c1_ = nn::ConvBnRelu::make(1, w[0], 3, 1, rng);
  c2_ = nn::ConvBnRelu::make(w[0], w[1], 3, 1, rng);
  c3_ = nn::ConvBnRelu::make(w[1], w[2], 3, 1, rng);
  c4_ = nn::ConvBnRelu::make(w[2], w[3], 3, 1, rng);
  c5_ = nn::ConvBnRelu::make(w[3], w[4], 3, 1, rng);
  c6_ = nn::ConvBnRelu::make(w[4], w[5], 3, 1, rng);
  const int flat = w[5] * (cfg_.input[0] / 8) * (cfg_.input[1] / 8) * (cfg_.input[2] / 8);
  fc1_ = nn::Linear::make(flat, cfg_.fc_widths[0], rng);
  fc2_ = nn::Linear::make(cfg_.fc_widths[0], cfg_.fc_widths[1], rng);
  fc3_ = nn::Linear::make(cfg_.fc_widths[1], 2, rng);
}

nn::Registry VcnModel::registry() {
  nn::Registry reg;
  reg.add("c1", c1_);
  reg.add("c2", c2_);
  reg.add("c3", c3_);
  reg.add("c4", c4_);
  reg.add("c5", c5_);
  reg.add("c6", c6_);
  reg.add("fc1", fc1_);
  reg.add("fc2", fc2_);
  reg.add("fc3", fc3_);
  return reg;
}

std::vector<TensorF> VcnModel::parameters() { return registry().params; }
size_t VcnModel::parameter_count() { return registry().parameter_count(); }

TensorF VcnModel::forward(const TensorF& x, bool training) {
  if (x.ndim() != 5 || x.dim(1) != 1 || x.dim(2) != cfg_.input[2] ||
      x.dim(3) != cfg_.input[1] || x.dim(4) != cfg_.input[0]) {
    throw std::invalid_argument("vcn: input must be [N,1,32,32,32]");
  }
  auto h = c2_(c1_(x, training), training);
  h = ad::maxpool3d(h);  // 32 -> 16
  h = c4_(c3_(h, training), training);
  h = ad::maxpool3d(h);  // 16 -> 8
  h = c6_(c5_(h, training), training);
  h = ad::maxpool3d(h);  // 8 -> 4
  const int n = h.dim(0);
  const int flat = h.dim(1) * h.dim(2) * h.dim(3) * h.dim(4);
  h = ad::reshape(h, {n, flat});
  h = ad::relu(fc1_(h));
  h = ad::relu(fc2_(h));
  return ad::softmax(fc3_(h), 1);
}

void VcnModel::save(const std::string& path) {
  json extras;
  extras["kind"] = "vcn";
  extras["config"] = cfg_.to_json();
  extras["norm"] = {{"offset", norm.offset}, {"scale", norm.scale}};
  extras["optimizer_state"] = false;
  save_checkpoint(path, extras, registry().arrays);
}

VcnModel VcnModel::load(const std::string& path) {
  const json extras = peek_checkpoint(path);
  if (extras.value("kind", "") != "vcn") {
    throw std::runtime_error("checkpoint is not a vcn model: " + path);
  }
  VcnModel model(VcnConfig::from_json(extras.at("config")), /*seed=*/0);
  load_checkpoint(path, model.registry().arrays);
  model.norm.offset = extras.at("norm").at("offset").get<float>();
  model.norm.scale = extras.at("norm").at("scale").get<float>();
  return model;
}

VcnTrainResult train_vcn(VcnModel& model, const std::vector<VcnSample>& samples, int epochs,
                         float lr, int batch, uint64_t seed) {
  if (samples.empty()) throw std::invalid_argument("train_vcn: empty sample set");
  bool has_pos = false, has_neg = false;
  for (const auto& s : samples) (s.label ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) {
    throw std::invalid_argument("train_vcn: both classes must be present");
  }
  const size_t voxels = size_t(model.config().input[0]) * model.config().input[1] *
                        model.config().input[2];
  for (const auto& s : samples) {
    if (s.x.size() != voxels) throw std::invalid_argument("train_vcn: sample size mismatch");
  }

  auto params = model.parameters();
  ad::Sgd<float> opt{lr};
  Rng order_rng(seed);
  VcnTrainResult result;
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t(0));

  for (int epoch = 0; epoch < epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    size_t correct = 0, batches = 0;
    for (size_t start = 0; start < order.size(); start += size_t(batch)) {
      const size_t end = std::min(order.size(), start + size_t(batch));
      const int b = int(end - start);
      std::vector<float> xbuf(size_t(b) * voxels);
      std::vector<float> tbuf(size_t(b) * 2);
      for (int i = 0; i < b; ++i) {
        const auto& s = samples[order[start + size_t(i)]];
        std::copy(s.x.begin(), s.x.end(), xbuf.begin() + size_t(i) * voxels);
        tbuf[size_t(i) * 2 + 0] = s.label ? 0.0f : 1.0f;
        tbuf[size_t(i) * 2 + 1] = s.label ? 1.0f : 0.0f;
      }
      auto x = TensorF::from_data({b, 1, model.config().input[2], model.config().input[1],
                                   model.config().input[0]},
                                  std::move(xbuf));
      auto target = TensorF::from_data({b, 2}, std::move(tbuf));
      auto probs = model.forward(x, /*training=*/true);
      // BCE over the two softmax columns with one-hot targets equals the BCE
      // of the airway-class probability
      auto loss = ad::bce_loss(probs, target);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw std::runtime_error("train_vcn: non-finite loss at epoch " +
                                 std::to_string(epoch));
      }
      ad::zero_grads(params);
      loss.backward();
      opt.step(params);
      loss_sum += lv;
      ++batches;
      for (int i = 0; i < b; ++i) {
        const int pred = probs.data()[size_t(i) * 2 + 1] >= 0.5f ? 1 : 0;
        correct += (pred == samples[order[start + size_t(i)]].label);
      }
    }
    result.epoch_loss.push_back(loss_sum / double(batches));
    result.epoch_accuracy.push_back(double(correct) / double(samples.size()));
  }
  return result;
}

namespace {

float volume_min(const Volume3& vol) {
  float m = vol.voxels.empty() ? 0.0f : vol.voxels[0];
  for (float v : vol.voxels) m = std::min(m, v);
  return m;
}

}  // namespace

std::vector<float> vcn_classify_batch(VcnModel& model, const Volume3& vol,
                                      const std::vector<std::array<int, 3>>& voxels,
                                      int batch) {
  std::vector<float> out(voxels.size());
  if (voxels.empty()) return out;
  const auto in = model.config().input;
  const float pad = volume_min(vol);
  const size_t nvox = size_t(in[0]) * in[1] * in[2];
  ad::NoGradGuard ng;
  for (size_t start = 0; start < voxels.size(); start += size_t(batch)) {
    const size_t end = std::min(voxels.size(), start + size_t(batch));
    const int b = int(end - start);
    std::vector<float> xbuf(size_t(b) * nvox);
    for (int i = 0; i < b; ++i) {
      const Voi voi = extract_voi(vol, voxels[start + size_t(i)], in, pad);
      for (size_t j = 0; j < nvox; ++j) {
        xbuf[size_t(i) * nvox + j] = model.norm.apply(voi.data[j]);
      }
    }
    auto x = TensorF::from_data({b, 1, in[2], in[1], in[0]}, std::move(xbuf));
    auto probs = model.forward(x, /*training=*/false);
    for (int i = 0; i < b; ++i) out[start + size_t(i)] = probs.data()[size_t(i) * 2 + 1];
  }
  return out;
}

float vcn_classify(VcnModel& model, const Volume3& vol, std::array<int, 3> voxel) {
  return vcn_classify_batch(model, vol, {voxel}, 1)[0];
}

std::vector<VcnSample> make_vcn_samples(const Volume3& vol,
                                        const std::vector<SamplePoint>& points,
                                        const nn::IntensityNorm& norm) {
  std::vector<VcnSample> samples;
  samples.reserve(points.size());
  const float pad = volume_min(vol);
  for (const auto& p : points) {
    const Voi voi = extract_voi(vol, p.pos, {32, 32, 32}, pad);
    VcnSample s;
    s.label = p.label;
    s.x.resize(voi.data.size());
    for (size_t i = 0; i < voi.data.size(); ++i) s.x[i] = norm.apply(voi.data[i]);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace airseg
