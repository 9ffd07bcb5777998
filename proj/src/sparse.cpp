#include "coopercept/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace coopercept {

namespace {

int conv_out_extent(int n, int stride) { return (n + 2 - 3) / stride + 1; }  // pad 1, k 3

void check_hw(int h, int w) {
  if (h <= 0 || w <= 0)
    throw std::invalid_argument("sparse: non-positive grid " + std::to_string(h) + "x" +
                                std::to_string(w));
}

}  // namespace

SparseMap2D sparsify(const Tensor& dense, const SpatialMask& mask) {
  if (dense.ndim() != 4 || dense.dim(0) != 1)
    throw std::invalid_argument("sparsify: expected [1,C,H,W], got " + shape_str(dense.shape()));
  int c = dense.dim(1), h = dense.dim(2), w = dense.dim(3);
  if (mask.h != h || mask.w != w) throw std::invalid_argument("sparsify: mask/tensor shape mismatch");
  SparseMap2D sm;
  sm.h = h;
  sm.w = w;
  sm.channels = c;
  for (int i = 0; i < h * w; ++i)
    if (mask.active[static_cast<size_t>(i)]) sm.sites.push_back(i);
  int ns = sm.nsites();
  sm.feats.assign(static_cast<size_t>(ns) * static_cast<size_t>(c), 0.0f);
  auto src = dense.data();
  par_for(ns, [&](int64_t s) {
    int site = sm.sites[static_cast<size_t>(s)];
    for (int ch = 0; ch < c; ++ch)
      sm.feats[static_cast<size_t>(s) * c + ch] =
          src[static_cast<size_t>(ch) * h * w + static_cast<size_t>(site)];
  });
  return sm;
}

Tensor densify(const SparseMap2D& sm, SpatialMask* mask_out) {
  check_hw(sm.h, sm.w);
  Tensor out = Tensor::zeros({1, sm.channels, sm.h, sm.w});
  auto dst = out.mutable_data();
  int ns = sm.nsites();
  for (int s = 0; s < ns; ++s) {
    int site = sm.sites[static_cast<size_t>(s)];
    for (int ch = 0; ch < sm.channels; ++ch)
      dst[static_cast<size_t>(ch) * sm.h * sm.w + static_cast<size_t>(site)] =
          sm.feats[static_cast<size_t>(s) * sm.channels + ch];
  }
  if (mask_out) {
    mask_out->n = 1;
    mask_out->h = sm.h;
    mask_out->w = sm.w;
    mask_out->active.assign(static_cast<size_t>(sm.h) * sm.w, 0);
    for (int site : sm.sites) mask_out->active[static_cast<size_t>(site)] = 1;
  }
  return out;
}

SpatialMask propagate_mask3x3(const SpatialMask& in, int stride) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("propagate_mask3x3: stride must be 1 or 2");
  check_hw(in.h, in.w);
  if (in.n != 1) throw std::invalid_argument("propagate_mask3x3: batch mask unsupported");
  int oh = conv_out_extent(in.h, stride);
  int ow = conv_out_extent(in.w, stride);
  SpatialMask out;
  out.n = 1;
  out.h = oh;
  out.w = ow;
  out.active.assign(static_cast<size_t>(oh) * ow, 0);
  par_for(static_cast<int64_t>(oh) * ow, [&](int64_t idx) {
    int orow = static_cast<int>(idx / ow);
    int ocol = static_cast<int>(idx % ow);
    uint8_t a = 0;
    for (int kr = 0; kr < 3 && !a; ++kr) {
      int ir = orow * stride + kr - 1;
      if (ir < 0 || ir >= in.h) continue;
      for (int kc = 0; kc < 3; ++kc) {
        int ic = ocol * stride + kc - 1;
        if (ic < 0 || ic >= in.w) continue;
        if (in.active[static_cast<size_t>(ir) * in.w + static_cast<size_t>(ic)]) {
          a = 1;
          break;
        }
      }
    }
    out.active[static_cast<size_t>(idx)] = a;
  });
  return out;
}

SparseMap2D sparse_conv2d(const SparseMap2D& in, const Tensor& weight, const Tensor& bias,
                          int stride) {
  check_hw(in.h, in.w);
  if (stride != 1 && stride != 2) throw std::invalid_argument("sparse_conv2d: stride must be 1 or 2");
  if (weight.ndim() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3)
    throw std::invalid_argument("sparse_conv2d: weight must be [OC,IC,3,3], got " +
                                shape_str(weight.shape()));
  int oc = weight.dim(0), ic = weight.dim(1);
  if (ic != in.channels)
    throw std::invalid_argument("sparse_conv2d: weight in-channels " + std::to_string(ic) +
                                " != map channels " + std::to_string(in.channels));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != oc))
    throw std::invalid_argument("sparse_conv2d: bias must be [OC]");

  // input site lookup grid: linear index -> row in feats, -1 if inactive
  std::vector<int> in_at(static_cast<size_t>(in.h) * in.w, -1);
  for (int s = 0; s < in.nsites(); ++s) in_at[static_cast<size_t>(in.sites[static_cast<size_t>(s)])] = s;

  int oh = conv_out_extent(in.h, stride);
  int ow = conv_out_extent(in.w, stride);

  SparseMap2D out;
  out.h = oh;
  out.w = ow;
  out.channels = oc;

  // output active set: any input site in the 3x3 receptive field
  for (int orow = 0; orow < oh; ++orow) {
    for (int ocol = 0; ocol < ow; ++ocol) {
      bool a = false;
      for (int kr = 0; kr < 3 && !a; ++kr) {
        int ir = orow * stride + kr - 1;
        if (ir < 0 || ir >= in.h) continue;
        for (int kc = 0; kc < 3; ++kc) {
          int icn = ocol * stride + kc - 1;
          if (icn < 0 || icn >= in.w) continue;
          if (in_at[static_cast<size_t>(ir) * in.w + static_cast<size_t>(icn)] >= 0) {
            a = true;
            break;
          }
        }
      }
      if (a) out.sites.push_back(orow * ow + ocol);
    }
  }

  int ns = out.nsites();
  out.feats.assign(static_cast<size_t>(ns) * oc, 0.0f);
  auto wd = weight.data();
  const float* bd = bias.defined() ? bias.data().data() : nullptr;

  // gather form: each output site reads its (up to 9) active input neighbours;
  // writes are disjoint, so the parallel loop is deterministic
  par_for(ns, [&](int64_t s) {
    int site = out.sites[static_cast<size_t>(s)];
    int orow = site / ow;
    int ocol = site % ow;
    float* dst = &out.feats[static_cast<size_t>(s) * oc];
    std::vector<double> acc(static_cast<size_t>(oc), 0.0);
    for (int kr = 0; kr < 3; ++kr) {
      int ir = orow * stride + kr - 1;
      if (ir < 0 || ir >= in.h) continue;
      for (int kc = 0; kc < 3; ++kc) {
        int icn = ocol * stride + kc - 1;
        if (icn < 0 || icn >= in.w) continue;
        int srow = in_at[static_cast<size_t>(ir) * in.w + static_cast<size_t>(icn)];
        if (srow < 0) continue;
        const float* src = &in.feats[static_cast<size_t>(srow) * ic];
        for (int o = 0; o < oc; ++o) {
          const float* wk = &wd[((static_cast<size_t>(o) * ic) * 3 + kr) * 3 + kc];
          double a = 0.0;
          // weight stride between consecutive input channels at fixed (o,kr,kc) is 9
          for (int i = 0; i < ic; ++i) a += static_cast<double>(wk[static_cast<size_t>(i) * 9]) * src[i];
          acc[static_cast<size_t>(o)] += a;
        }
      }
    }
    for (int o = 0; o < oc; ++o)
      dst[o] = static_cast<float>(acc[static_cast<size_t>(o)] + (bd ? bd[o] : 0.0f));
  });
  return out;
}

void sparse_batch_norm_eval(SparseMap2D& sm, const Tensor& gamma, const Tensor& beta,
                            const Tensor& running_mean, const Tensor& running_var, double eps) {
  int c = sm.channels;
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw std::invalid_argument("sparse_batch_norm_eval: parameter size mismatch");
  auto g = gamma.data();
  auto b = beta.data();
  auto m = running_mean.data();
  auto v = running_var.data();
  std::vector<float> scale(static_cast<size_t>(c)), shift(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    double inv = 1.0 / std::sqrt(static_cast<double>(v[ch]) + eps);
    scale[static_cast<size_t>(ch)] = static_cast<float>(g[ch] * inv);
    shift[static_cast<size_t>(ch)] = static_cast<float>(b[ch] - g[ch] * m[ch] * inv);
  }
  par_for(sm.nsites(), [&](int64_t s) {
    float* row = &sm.feats[static_cast<size_t>(s) * c];
    for (int ch = 0; ch < c; ++ch)
      row[ch] = row[ch] * scale[static_cast<size_t>(ch)] + shift[static_cast<size_t>(ch)];
  });
}

void sparse_relu(SparseMap2D& sm) {
  par_for(static_cast<int64_t>(sm.feats.size()), [&](int64_t i) {
    if (sm.feats[static_cast<size_t>(i)] < 0.0f) sm.feats[static_cast<size_t>(i)] = 0.0f;
  });
}

}  // namespace coopercept
