#include "privreg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <Eigen/Core>

#include "privreg/error.hpp"

namespace privreg::nn {

using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic>;
using MapF = Eigen::Map<MatF>;
using CMapF = Eigen::Map<const MatF>;

Param::Param(std::string n, std::vector<int> d) : name(std::move(n)), dims(std::move(d)) {
  std::size_t count = 1;
  for (int x : dims) count *= std::size_t(x);
  value.assign(count, 0.0f);
  grad.assign(count, 0.0f);
  m.assign(count, 0.0f);
  v.assign(count, 0.0f);
}

Shape3 Conv3d::output_shape(const Shape3& in, int stride) {
  return {(in.d - 1) / stride + 1, (in.h - 1) / stride + 1, (in.w - 1) / stride + 1};
}

namespace {

// col(r, n) with r = offset*cin + c, stored column-major (K x N)
void im2col(const Tensor& in, int stride, const Shape3& out_shape, std::vector<float>& col) {
  const int cin = in.channels;
  const std::size_t K = std::size_t(27 * cin);
  col.assign(K * out_shape.voxels(), 0.0f);
  const Shape3& s = in.shape;
  std::size_t n = 0;
  for (int i = 0; i < out_shape.d; ++i)
    for (int j = 0; j < out_shape.h; ++j)
      for (int k = 0; k < out_shape.w; ++k, ++n) {
        float* dst = &col[n * K];
        int off = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj)
            for (int dk = -1; dk <= 1; ++dk, ++off) {
              const int ii = i * stride + di, jj = j * stride + dj, kk = k * stride + dk;
              if (!s.contains(ii, jj, kk)) continue;
              std::memcpy(dst + off * cin, &in.data[s.index(ii, jj, kk) * cin], sizeof(float) * cin);
            }
      }
}

void col2im(const std::vector<float>& col, int stride, const Shape3& out_shape, Tensor& grad_in) {
  const int cin = grad_in.channels;
  const std::size_t K = std::size_t(27 * cin);
  const Shape3& s = grad_in.shape;
  std::size_t n = 0;
  for (int i = 0; i < out_shape.d; ++i)
    for (int j = 0; j < out_shape.h; ++j)
      for (int k = 0; k < out_shape.w; ++k, ++n) {
        const float* src = &col[n * K];
        int off = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj)
            for (int dk = -1; dk <= 1; ++dk, ++off) {
              const int ii = i * stride + di, jj = j * stride + dj, kk = k * stride + dk;
              if (!s.contains(ii, jj, kk)) continue;
              float* dst = &grad_in.data[s.index(ii, jj, kk) * cin];
              for (int c = 0; c < cin; ++c) dst[c] += src[off * cin + c];
            }
      }
}

}  // namespace

Tensor Conv3d::forward(const Tensor& in) const {
  if (in.channels != cin) fail(ErrorKind::ArchMismatch, "conv input has wrong channel count");
  const Shape3 os = ksize == 1 ? in.shape : output_shape(in.shape, stride);
  const int N = int(os.voxels()), K = taps() * cin;
  Tensor out(os, cout);
  MapF o(out.data.data(), cout, N);
  if (ksize == 1) {
    // channels-last input already is the K x N column matrix
    o.noalias() = CMapF(weight->value.data(), cout, K) * CMapF(in.data.data(), K, N);
  } else {
    std::vector<float> col;
    im2col(in, stride, os, col);
    o.noalias() = CMapF(weight->value.data(), cout, K) * CMapF(col.data(), K, N);
  }
  o.colwise() += Eigen::Map<const Eigen::VectorXf>(bias->value.data(), cout);
  return out;
}

namespace {

// Plain loop so the summation order never depends on buffer alignment.
void add_bias_grad(const CMapF& go, std::vector<float>& grad) {
  for (Eigen::Index o = 0; o < go.rows(); ++o) {
    double s = 0.0;
    for (Eigen::Index n = 0; n < go.cols(); ++n) s += go(o, n);
    grad[std::size_t(o)] += float(s);
  }
}

}  // namespace

void Conv3d::backward(const Tensor& in, const Tensor& grad_out, Tensor* grad_in) const {
  const Shape3& os = grad_out.shape;
  const int N = int(os.voxels()), K = taps() * cin;
  const CMapF go(grad_out.data.data(), cout, N);
  if (ksize == 1) {
    MapF(weight->grad.data(), cout, K).noalias() += go * CMapF(in.data.data(), K, N).transpose();
    add_bias_grad(go, bias->grad);
    if (grad_in) {
      *grad_in = Tensor(in.shape, cin);
      MapF(grad_in->data.data(), K, N).noalias() = CMapF(weight->value.data(), cout, K).transpose() * go;
    }
    return;
  }
  std::vector<float> col;
  im2col(in, stride, os, col);
  MapF(weight->grad.data(), cout, K).noalias() += go * CMapF(col.data(), K, N).transpose();
  add_bias_grad(go, bias->grad);
  if (grad_in) {
    *grad_in = Tensor(in.shape, cin);
    MapF(col.data(), K, N).noalias() = CMapF(weight->value.data(), cout, K).transpose() * go;
    col2im(col, stride, os, *grad_in);
  }
}

void leaky_relu_inplace(Tensor& t, float slope) {
  for (float& x : t.data) x = x > 0.0f ? x : slope * x;
}

void leaky_relu_backward(const Tensor& out, Tensor& grad, float slope) {
  for (std::size_t n = 0; n < grad.data.size(); ++n) {
    if (!(out.data[n] > 0.0f)) grad.data[n] *= slope;
  }
}

namespace {

struct Tap {
  int lo, hi;
  float w;  // weight of hi
};

std::vector<Tap> taps(int src, int dst) {
  std::vector<Tap> t(static_cast<std::size_t>(dst));
  for (int x = 0; x < dst; ++x) {
    const double p = dst > 1 ? double(x) * double(src - 1) / double(dst - 1) : 0.0;
    int lo = std::min(int(std::floor(p)), src - 1);
    const int hi = std::min(lo + 1, src - 1);
    t[std::size_t(x)] = {lo, hi, float(p - lo)};
  }
  return t;
}

}  // namespace

Tensor upsample(const Tensor& in, const Shape3& target) {
  const auto ti = taps(in.shape.d, target.d), tj = taps(in.shape.h, target.h), tk = taps(in.shape.w, target.w);
  const int C = in.channels;
  Tensor out(target, C);
  const Shape3& s = in.shape;
  for (int i = 0; i < target.d; ++i)
    for (int j = 0; j < target.h; ++j)
      for (int k = 0; k < target.w; ++k) {
        float* dst = &out.data[target.index(i, j, k) * C];
        const int is[2] = {ti[i].lo, ti[i].hi}, js[2] = {tj[j].lo, tj[j].hi}, ks[2] = {tk[k].lo, tk[k].hi};
        const float wi[2] = {1 - ti[i].w, ti[i].w}, wj[2] = {1 - tj[j].w, tj[j].w}, wk[2] = {1 - tk[k].w, tk[k].w};
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const float w = wi[a] * wj[b] * wk[c];
              if (w == 0.0f) continue;
              const float* src = &in.data[s.index(is[a], js[b], ks[c]) * C];
              for (int ch = 0; ch < C; ++ch) dst[ch] += w * src[ch];
            }
      }
  return out;
}

Tensor upsample_backward(const Tensor& grad_out, const Shape3& source) {
  const Shape3& t = grad_out.shape;
  const auto ti = taps(source.d, t.d), tj = taps(source.h, t.h), tk = taps(source.w, t.w);
  const int C = grad_out.channels;
  Tensor g(source, C);
  for (int i = 0; i < t.d; ++i)
    for (int j = 0; j < t.h; ++j)
      for (int k = 0; k < t.w; ++k) {
        const float* src = &grad_out.data[t.index(i, j, k) * C];
        const int is[2] = {ti[i].lo, ti[i].hi}, js[2] = {tj[j].lo, tj[j].hi}, ks[2] = {tk[k].lo, tk[k].hi};
        const float wi[2] = {1 - ti[i].w, ti[i].w}, wj[2] = {1 - tj[j].w, tj[j].w}, wk[2] = {1 - tk[k].w, tk[k].w};
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) {
              const float w = wi[a] * wj[b] * wk[c];
              if (w == 0.0f) continue;
              float* dst = &g.data[source.index(is[a], js[b], ks[c]) * C];
              for (int ch = 0; ch < C; ++ch) dst[ch] += w * src[ch];
            }
      }
  return g;
}

Tensor concat(const Tensor& a, const Tensor& b) {
  if (!(a.shape == b.shape)) fail(ErrorKind::ArchMismatch, "concat of tensors on different grids");
  Tensor out(a.shape, a.channels + b.channels);
  const std::size_t N = a.voxels();
  for (std::size_t n = 0; n < N; ++n) {
    float* dst = &out.data[n * out.channels];
    std::memcpy(dst, &a.data[n * a.channels], sizeof(float) * a.channels);
    std::memcpy(dst + a.channels, &b.data[n * b.channels], sizeof(float) * b.channels);
  }
  return out;
}

void split(const Tensor& grad, Tensor& ga, Tensor& gb) {
  const std::size_t N = grad.voxels();
  for (std::size_t n = 0; n < N; ++n) {
    const float* src = &grad.data[n * grad.channels];
    std::memcpy(&ga.data[n * ga.channels], src, sizeof(float) * ga.channels);
    std::memcpy(&gb.data[n * gb.channels], src + ga.channels, sizeof(float) * gb.channels);
  }
}

void adam_step(const std::vector<Param*>& params, const AdamConfig& cfg, std::int64_t step) {
  const double c1 = 1.0 - std::pow(cfg.beta1, double(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, double(step));
  const float b1 = float(cfg.beta1), b2 = float(cfg.beta2);
  const float lr_t = float(cfg.lr * std::sqrt(c2) / c1);
  const float eps_t = float(cfg.eps * std::sqrt(c2));
  for (Param* p : params) {
    for (std::size_t n = 0; n < p->size(); ++n) {
      const float g = p->grad[n];
      p->m[n] = b1 * p->m[n] + (1.0f - b1) * g;
      p->v[n] = b2 * p->v[n] + (1.0f - b2) * g * g;
      p->value[n] -= lr_t * p->m[n] / (std::sqrt(p->v[n]) + eps_t);
      p->grad[n] = 0.0f;
    }
  }
}

}  // namespace privreg::nn
