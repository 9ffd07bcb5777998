#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coopercept/geometry.hpp"
#include "coopercept/nn.hpp"
#include "coopercept/pillars.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

// Anchor boxes: one size, a fixed yaw set per cell, resting on the ground.
struct AnchorSpec {
  double w = 1.6, l = 3.9, h = 1.56;
  std::vector<double> yaws = {0.0, geom::kPi * 0.5};
  double z_center = 0.78;

  int per_cell() const { return static_cast<int>(yaws.size()); }
  double diagonal() const { return std::sqrt(w * w + l * l); }
};

// Anchors sit at feature-cell centers of the post-neck grid.
struct AnchorGrid {
  int h = 0, w = 0;
  double x_min = 0.0, y_min = 0.0, cell_m = 0.0;
  AnchorSpec spec;

  static AnchorGrid from_voxels(const VoxelConfig& vox, int feature_stride,
                                const AnchorSpec& spec);
  geom::Box7 box_at(int r, int c, int k) const;
  int64_t count() const { return static_cast<int64_t>(h) * w * spec.per_cell(); }
};

// Per-anchor residuals, 7 channels: (dx/d_a, dy/d_a, dz/h_a, log w-, l-,
// h-ratios, yaw offset wrapped into (-pi/2, pi/2]). The wrapped single-channel
// yaw keeps the printed 2x7 regression width; equality of decoded yaw is
// therefore modulo pi and tests compare it through sin/cos.
constexpr int kRegChannels = 7;

std::array<float, kRegChannels> encode_box(const geom::Box7& gt, const geom::Box7& anchor,
                                           const AnchorSpec& spec);
geom::Box7 decode_box(const std::array<float, kRegChannels>& res, const geom::Box7& anchor,
                      const AnchorSpec& spec);

// 1 positive / 0 negative / -1 ignore, laid out channel-major [K,H,W] to
// match the head outputs.
struct TargetAssignment {
  int h = 0, w = 0, per_cell = 0;
  std::vector<int8_t> labels;      // K*H*W
  std::vector<float> reg_targets;  // K*kRegChannels*H*W, channel-major
  std::vector<int> matched_gt;     // K*H*W, gt index or -1
  int n_positive = 0;
};

// BEV-IoU matching: >= pos_iou positive, < neg_iou negative, else ignored;
// every gt additionally forces its best-IoU anchor positive.
TargetAssignment assign_targets(const AnchorGrid& grid, const std::vector<geom::Box7>& gt_boxes,
                                double pos_iou = 0.6, double neg_iou = 0.45);

// Two 1x1 convolutions on the fused feature: objectness [K,H,W] and
// residuals [K*7,H,W].
struct DetectionHead {
  Conv2dLayer cls;
  Conv2dLayer reg;
  int per_cell = 2;

  void init(const std::string& prefix, int in_channels, int per_cell, uint64_t seed);
  std::pair<Tensor, Tensor> forward(const Tensor& feature) const;
  void collect(ParamList& out);
};

// Mean over non-ignored anchors of -alpha_t (1-p_t)^gamma log p_t, built from
// softplus/sigmoid compositions so it is stable for large logits.
Tensor focal_loss(const Tensor& cls_logits, const TargetAssignment& targets, float alpha = 0.25f,
                  float gamma = 2.0f);

// Sum of per-channel smooth-L1 (beta=1) over the 7 residuals, averaged over
// positive anchors; exact zero when there are no positives.
Tensor smooth_l1_loss(const Tensor& reg_out, const TargetAssignment& targets);

// sigmoid scores -> residual inversion -> rotated NMS.
std::vector<geom::Detection> decode(const Tensor& cls_logits, const Tensor& reg_out,
                                    const AnchorGrid& grid, double score_thresh = 0.2,
                                    double nms_iou = 0.15);

struct DetectionRecord {
  int frame_id = 0;
  geom::Detection det;
};

// CSV with header "frame_id,agent_id,x,y,z,w,l,h,theta,score"
void save_detections_csv(const std::string& path, const std::vector<DetectionRecord>& rows);

}  // namespace coopercept
