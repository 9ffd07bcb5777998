#pragma once

#include <vector>

#include "coopercept/nn.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

// Sparse 2-D feature map: a sorted list of active sites on an h x w grid plus
// a dense [nsites, channels] feature block. This is the fast inference-side
// representation; training runs on the masked-dense path, which has identical
// numerics at active sites (and exact zeros elsewhere).
struct SparseMap2D {
  int h = 0;
  int w = 0;
  int channels = 0;
  std::vector<int> sites;    // linear indices r*w+c, strictly increasing
  std::vector<float> feats;  // [nsites, channels] row-major

  int nsites() const { return static_cast<int>(sites.size()); }
};

// Dense [1,C,H,W] tensor + mask -> sparse map over the active cells.
SparseMap2D sparsify(const Tensor& dense, const SpatialMask& mask);

// Sparse map -> dense [1,C,H,W] tensor (zeros at inactive sites). If
// mask_out is non-null it receives the site mask.
Tensor densify(const SparseMap2D& sm, SpatialMask* mask_out = nullptr);

// Active-site rule for a 3x3 / pad-1 convolution: an output site is active
// iff at least one input site falls inside its receptive field. stride 1 or 2.
SpatialMask propagate_mask3x3(const SpatialMask& in, int stride);

// 3x3 convolution (pad 1) evaluated on active sites only. weight [OC,IC,3,3];
// bias [OC] or undefined for no bias (bias is added on active sites only).
// Output sites follow propagate_mask3x3(input sites, stride).
SparseMap2D sparse_conv2d(const SparseMap2D& in, const Tensor& weight, const Tensor& bias,
                          int stride);

// Inference-mode batch norm applied at active sites.
void sparse_batch_norm_eval(SparseMap2D& sm, const Tensor& gamma, const Tensor& beta,
                            const Tensor& running_mean, const Tensor& running_var,
                            double eps = 1e-5);

void sparse_relu(SparseMap2D& sm);

}  // namespace coopercept
