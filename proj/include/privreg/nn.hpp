#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "privreg/volume.hpp"

namespace privreg::nn {

// Channels-last float activations: element (voxel n, channel c) at n*c_total + c.
struct Tensor {
  Shape3 shape{0, 0, 0};
  int channels = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(Shape3 s, int c) : shape(s), channels(c), data(s.voxels() * std::size_t(c), 0.0f) {}
  std::size_t voxels() const { return shape.voxels(); }
};

struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<float> value, grad, m, v;

  Param(std::string n, std::vector<int> d);
  std::size_t size() const { return value.size(); }
};

// 3x3x3 (zero padding 1, stride 1 or 2) or pointwise convolution. Weight
// layout is (cout x taps*cin) column-major, with the taps*cin axis ordered
// offset-major.
struct Conv3d {
  int cin = 0, cout = 0, stride = 1;
  int ksize = 3;  // 3 or 1
  Param* weight = nullptr;
  Param* bias = nullptr;

  static Shape3 output_shape(const Shape3& in, int stride);
  int taps() const { return ksize == 1 ? 1 : 27; }
  Tensor forward(const Tensor& in) const;
  // Accumulates into weight/bias grads; fills grad_in when non-null.
  void backward(const Tensor& in, const Tensor& grad_out, Tensor* grad_in) const;
};

void leaky_relu_inplace(Tensor& t, float slope);
// Uses the activated output (sign is preserved by the activation).
void leaky_relu_backward(const Tensor& out, Tensor& grad, float slope);

// Align-corners trilinear resize to an arbitrary target grid.
Tensor upsample(const Tensor& in, const Shape3& target);
Tensor upsample_backward(const Tensor& grad_out, const Shape3& source);

Tensor concat(const Tensor& a, const Tensor& b);
void split(const Tensor& grad, Tensor& grad_a, Tensor& grad_b);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Applies one update to every parameter and clears gradients. step is the
// 1-based update count used for bias correction.
void adam_step(const std::vector<Param*>& params, const AdamConfig& cfg, std::int64_t step);

}  // namespace privreg::nn
