#pragma once

#include <string>
#include <vector>

#include "airseg/checkpoint.hpp"
#include "airseg/ops.hpp"
#include "airseg/rng.hpp"
#include "airseg/tensor.hpp"

namespace airseg::nn {

using ad::TensorF;

/// Affine intensity normalization applied to network inputs; fitted on the
/// training volumes and persisted in checkpoints so inference matches.
struct IntensityNorm {
  float offset = 0.0f;
  float scale = 1.0f;
  float apply(float v) const { return (v - offset) / scale; }
};

struct Conv3d {
  TensorF w, b;
  int dilation = 1;
  int kernel = 3;

  static Conv3d make(int cin, int cout, int k, int dilation, bool bias, Rng& rng) {
    Conv3d c;
    c.kernel = k;
    c.dilation = dilation;
    const size_t fan_in = size_t(cin) * k * k * k;
    c.w = ad::kaiming_normal<float>({cout, cin, k, k, k}, fan_in, rng);
    if (bias) c.b = TensorF::zeros({cout}, true);
    return c;
  }

  TensorF operator()(const TensorF& x) const {
    return ad::conv3d(x, w, b, /*stride=*/1, dilation, /*pad=*/-1);
  }
};

struct BatchNorm {
  TensorF gamma, beta;
  std::vector<float> running_mean, running_var;

  static BatchNorm make(int c) {
    BatchNorm bn;
    bn.gamma = TensorF::full({c}, 1.0f, true);
    bn.beta = TensorF::zeros({c}, true);
    bn.running_mean.assign(size_t(c), 0.0f);
    bn.running_var.assign(size_t(c), 1.0f);
    return bn;
  }

  TensorF operator()(const TensorF& x, bool training) {
    return ad::batchnorm(x, gamma, beta, &running_mean, &running_var, training);
  }
};

/// 3x3x3 (or kxkxk) convolution + BN + ReLU, the workhorse block of both
/// networks. Convolutions feeding a BN carry no bias.
struct ConvBnRelu {
  Conv3d conv;
  BatchNorm bn;

  static ConvBnRelu make(int cin, int cout, int k, int dilation, Rng& rng) {
    return {Conv3d::make(cin, cout, k, dilation, /*bias=*/false, rng), BatchNorm::make(cout)};
  }

  TensorF operator()(const TensorF& x, bool training) {
    return ad::relu(bn(conv(x), training));
  }
};

struct Linear {
  TensorF w, b;

  static Linear make(int fin, int fout, Rng& rng) {
    Linear l;
    l.w = ad::kaiming_normal<float>({fin, fout}, size_t(fin), rng);
    l.b = TensorF::zeros({fout}, true);
    return l;
  }

  TensorF operator()(const TensorF& x) const { return ad::linear(x, w, b); }
};

/// Collects trainable tensors and checkpointable arrays of a model in a
/// stable order.
struct Registry {
  std::vector<ad::TensorF> params;
  std::vector<NamedArray> arrays;

  void add(const std::string& name, TensorF& t) {
    params.push_back(t);
    arrays.push_back({name, &t.data_vec(), t.shape()});
  }
  void add_buffer(const std::string& name, std::vector<float>& v) {
    arrays.push_back({name, &v, {int(v.size())}});
  }
  void add(const std::string& name, Conv3d& c) {
    add(name + ".w", c.w);
    if (c.b.defined()) add(name + ".b", c.b);
  }
  void add(const std::string& name, BatchNorm& bn) {
    add(name + ".gamma", bn.gamma);
    add(name + ".beta", bn.beta);
    add_buffer(name + ".running_mean", bn.running_mean);
    add_buffer(name + ".running_var", bn.running_var);
  }
  void add(const std::string& name, ConvBnRelu& b) {
    add(name + ".conv", b.conv);
    add(name + ".bn", b.bn);
  }
  void add(const std::string& name, Linear& l) {
    add(name + ".w", l.w);
    add(name + ".b", l.b);
  }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  /// Deep copy of every checkpointable array (for best-epoch snapshots).
  std::vector<std::vector<float>> snapshot() const {
    std::vector<std::vector<float>> s;
    s.reserve(arrays.size());
    for (const auto& a : arrays) s.push_back(*a.data);
    return s;
  }
  void restore(const std::vector<std::vector<float>>& s) {
    for (size_t i = 0; i < arrays.size(); ++i) *arrays[i].data = s[i];
  }
};

}  // namespace airseg::nn
