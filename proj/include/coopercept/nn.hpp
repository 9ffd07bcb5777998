#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "coopercept/tensor.hpp"

namespace coopercept {

// Active-cell mask over the (n, h, w) planes of an NCHW tensor. Used to give
// dense autodiff ops the exact semantics of the sparse inference path:
// statistics and values restricted to active sites, inactive cells zero.
struct SpatialMask {
  int n = 1, h = 0, w = 0;
  std::vector<uint8_t> active;  // n*h*w entries

  int64_t count() const;
  static SpatialMask all_active(int n, int h, int w);
};

// Zeroes inactive (n,h,w) cells across all channels.
Tensor mask_mul(const Tensor& x, const SpatialMask& m);

// Cross-correlation, square padding, stride >= 1. x:[N,C,H,W] w:[OC,IC,KH,KW]
// b:[OC] or undefined. Output [N,OC,OH,OW], OH=(H+2p-KH)/s+1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// Transposed conv, no padding. x:[N,C,H,W] w:[IC,OC,KH,KW];
// output [N,OC,(H-1)s+KH,(W-1)s+KW].
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride);

struct BnState {
  std::vector<float> running_mean, running_var;
  void init(int channels);
};

// Batch norm over (N,H,W) per channel. With a mask, statistics are computed
// over active cells only (count >= 2 required in training); every cell is
// still transformed, so callers that want sparse semantics apply mask_mul
// after. Eval mode uses running statistics.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                    bool training, float momentum = 0.1f, float eps = 1e-5f,
                    const SpatialMask* mask = nullptr);

// x:[1,C,P,M], mask over (P,M): max over valid point slots -> [P,C].
// Gradient routes to the first maximal element per (pillar, channel).
Tensor max_pool_points(const Tensor& x, const std::vector<uint8_t>& mask, int P, int M);

// feats:[P,C] scattered to [1,C,H,W] at (row,col) coords; duplicate coords error.
Tensor scatter_pillars(const Tensor& feats, const std::vector<std::pair<int, int>>& coords,
                       int h, int w);

// Precomputed bilinear gather: out cell j = sum_k wgt[k] * x[.., idx[k]].
struct WarpPlan {
  int src_h = 0, src_w = 0, dst_h = 0, dst_w = 0;
  struct Tap {
    int32_t idx[4] = {-1, -1, -1, -1};
    float wgt[4] = {0, 0, 0, 0};
  };
  std::vector<Tap> taps;           // dst_h*dst_w
  std::vector<uint8_t> valid;      // dst_h*dst_w
};

Tensor bilinear_warp(const Tensor& x, const WarpPlan& plan);

// ---------------- layers ----------------

struct Parameter {
  std::string name;
  Tensor t;
};
using ParamList = std::vector<Parameter>;

// Kaiming-uniform fan-in init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), seeded by
// mix(seed, name) so streams never shift when unrelated parameters appear.
Tensor kaiming_uniform(const Shape& shape, int fan_in, uint64_t seed, const std::string& name);

struct LinearLayer {
  std::string name;
  Tensor w, b;
  void init(const std::string& name, int out_f, int in_f, uint64_t seed, bool bias = true);
  Tensor forward(const Tensor& x) const;  // x:[R,in_f]
  void collect(ParamList& out);
};

struct Conv2dLayer {
  std::string name;
  Tensor w, b;
  int stride = 1, pad = 1;
  void init(const std::string& name, int oc, int ic, int k, int stride, int pad, uint64_t seed,
            bool bias = true);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out);
};

struct ConvTranspose2dLayer {
  std::string name;
  Tensor w;
  int stride = 2;
  void init(const std::string& name, int ic, int oc, int k, int stride, uint64_t seed);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out);
};

struct BatchNorm2dLayer {
  std::string name;
  Tensor gamma, beta;
  BnState state;
  float momentum = 0.1f, eps = 1e-5f;
  void init(const std::string& name, int channels);
  Tensor forward(const Tensor& x, bool training, const SpatialMask* mask = nullptr);
  void collect(ParamList& out);
  // running stats serialized alongside parameters
  void collect_buffers(std::map<std::string, std::pair<Shape, std::vector<float>>>& out) const;
  void load_buffers(const std::map<std::string, std::pair<Shape, std::vector<float>>>& in);
};

// ---------------- optimizer ----------------

struct Adam {
  float lr = 1e-3f, beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  struct State {
    std::vector<float> m, v;
    int64_t t = 0;
  };
  std::map<std::string, State> state;

  void step(ParamList& params);
  static void zero_grad(ParamList& params);
};

// ---------------- checkpoint ----------------

// Binary container: magic "CPKT", u32 version, u32 count, then per entry
// u32 name_len, name bytes, u32 ndim, u32 dims[], f32 payload (little-endian).
struct NamedTensorMap {
  std::map<std::string, std::pair<Shape, std::vector<float>>> items;

  void put(const std::string& name, const Shape& s, std::vector<float> data);
  void save(const std::filesystem::path& path) const;
  static NamedTensorMap load(const std::filesystem::path& path);
};

}  // namespace coopercept
