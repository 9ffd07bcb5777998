#include "coopercept/detection.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace coopercept {

AnchorGrid AnchorGrid::from_voxels(const VoxelConfig& vox, int feature_stride,
                                   const AnchorSpec& spec) {
  if (feature_stride < 1) throw std::invalid_argument("AnchorGrid: bad feature stride");
  if (vox.rows() % feature_stride != 0 || vox.cols() % feature_stride != 0)
    throw std::invalid_argument("AnchorGrid: stride does not divide the voxel grid");
  AnchorGrid g;
  g.h = vox.rows() / feature_stride;
  g.w = vox.cols() / feature_stride;
  g.x_min = vox.x_min;
  g.y_min = vox.y_min;
  g.cell_m = vox.voxel_xy * feature_stride;
  g.spec = spec;
  return g;
}

geom::Box7 AnchorGrid::box_at(int r, int c, int k) const {
  geom::Box7 b;
  b.x = x_min + (c + 0.5) * cell_m;
  b.y = y_min + (r + 0.5) * cell_m;
  b.z = spec.z_center;
  b.w = spec.w;
  b.l = spec.l;
  b.h = spec.h;
  b.theta = spec.yaws[static_cast<size_t>(k)];
  return b;
}

std::array<float, kRegChannels> encode_box(const geom::Box7& gt, const geom::Box7& anchor,
                                           const AnchorSpec& spec) {
  double d = spec.diagonal();
  std::array<float, kRegChannels> r;
  r[0] = static_cast<float>((gt.x - anchor.x) / d);
  r[1] = static_cast<float>((gt.y - anchor.y) / d);
  r[2] = static_cast<float>((gt.z - anchor.z) / spec.h);
  r[3] = static_cast<float>(std::log(gt.w / anchor.w));
  r[4] = static_cast<float>(std::log(gt.l / anchor.l));
  r[5] = static_cast<float>(std::log(gt.h / anchor.h));
  r[6] = static_cast<float>(geom::wrap_half_angle(gt.theta - anchor.theta));
  return r;
}

geom::Box7 decode_box(const std::array<float, kRegChannels>& res, const geom::Box7& anchor,
                      const AnchorSpec& spec) {
  double d = spec.diagonal();
  geom::Box7 b;
  b.x = anchor.x + res[0] * d;
  b.y = anchor.y + res[1] * d;
  b.z = anchor.z + res[2] * spec.h;
  b.w = anchor.w * std::exp(static_cast<double>(res[3]));
  b.l = anchor.l * std::exp(static_cast<double>(res[4]));
  b.h = anchor.h * std::exp(static_cast<double>(res[5]));
  b.theta = geom::wrap_angle(anchor.theta + res[6]);
  return b;
}

TargetAssignment assign_targets(const AnchorGrid& grid, const std::vector<geom::Box7>& gt_boxes,
                                double pos_iou, double neg_iou) {
  int k = grid.spec.per_cell();
  int64_t n_anchor = grid.count();
  TargetAssignment t;
  t.h = grid.h;
  t.w = grid.w;
  t.per_cell = k;
  t.labels.assign(static_cast<size_t>(n_anchor), 0);
  t.reg_targets.assign(static_cast<size_t>(n_anchor) * kRegChannels, 0.0f);
  t.matched_gt.assign(static_cast<size_t>(n_anchor), -1);
  if (gt_boxes.empty()) return t;
  for (const auto& g : gt_boxes) g.validate();

  size_t n_gt = gt_boxes.size();
  std::vector<double> best_gt_iou(n_gt, 0.0);
  std::vector<int64_t> best_gt_anchor(n_gt, -1);

  // anchor-major pass: label by max IoU over gts
  std::vector<int> matched(static_cast<size_t>(n_anchor), -1);
  for (int ki = 0; ki < k; ++ki) {
    for (int r = 0; r < grid.h; ++r) {
      for (int c = 0; c < grid.w; ++c) {
        int64_t ai = (static_cast<int64_t>(ki) * grid.h + r) * grid.w + c;
        geom::Box7 anchor = grid.box_at(r, c, ki);
        double best = 0.0;
        int best_gt = -1;
        for (size_t gi = 0; gi < n_gt; ++gi) {
          double iou = geom::rotated_iou_bev(anchor, gt_boxes[gi]);
          if (iou > best) {
            best = iou;
            best_gt = static_cast<int>(gi);
          }
          if (iou > best_gt_iou[gi]) {
            best_gt_iou[gi] = iou;
            best_gt_anchor[gi] = ai;
          }
        }
        if (best >= pos_iou) {
          t.labels[static_cast<size_t>(ai)] = 1;
          matched[static_cast<size_t>(ai)] = best_gt;
        } else if (best >= neg_iou) {
          t.labels[static_cast<size_t>(ai)] = -1;  // ignore band
        }
      }
    }
  }
  // each gt forces its best-overlap anchor positive
  for (size_t gi = 0; gi < n_gt; ++gi) {
    if (best_gt_anchor[gi] < 0 || best_gt_iou[gi] <= 0.0) continue;
    int64_t ai = best_gt_anchor[gi];
    t.labels[static_cast<size_t>(ai)] = 1;
    matched[static_cast<size_t>(ai)] = static_cast<int>(gi);
  }

  for (int ki = 0; ki < k; ++ki) {
    for (int r = 0; r < grid.h; ++r) {
      for (int c = 0; c < grid.w; ++c) {
        int64_t ai = (static_cast<int64_t>(ki) * grid.h + r) * grid.w + c;
        if (t.labels[static_cast<size_t>(ai)] != 1) continue;
        ++t.n_positive;
        int gi = matched[static_cast<size_t>(ai)];
        t.matched_gt[static_cast<size_t>(ai)] = gi;
        auto res = encode_box(gt_boxes[static_cast<size_t>(gi)], grid.box_at(r, c, ki), grid.spec);
        for (int j = 0; j < kRegChannels; ++j)
          t.reg_targets[((static_cast<size_t>(ki) * kRegChannels + j) * grid.h + r) * grid.w + c] =
              res[static_cast<size_t>(j)];
      }
    }
  }
  return t;
}

void DetectionHead::init(const std::string& prefix, int in_channels, int k, uint64_t seed) {
  per_cell = k;
  cls.init(prefix + ".head.cls", k, in_channels, 1, 1, 0, seed, /*bias=*/true);
  reg.init(prefix + ".head.reg", k * kRegChannels, in_channels, 1, 1, 0, seed, /*bias=*/true);
}

std::pair<Tensor, Tensor> DetectionHead::forward(const Tensor& feature) const {
  return {cls.forward(feature), reg.forward(feature)};
}

void DetectionHead::collect(ParamList& out) {
  cls.collect(out);
  reg.collect(out);
}

namespace {

void check_head_shapes(const Tensor& cls_logits, const TargetAssignment& t, int factor) {
  if (cls_logits.ndim() != 4 || cls_logits.dim(0) != 1 ||
      cls_logits.dim(1) != t.per_cell * factor || cls_logits.dim(2) != t.h ||
      cls_logits.dim(3) != t.w)
    throw std::invalid_argument("detection loss: output/target shape mismatch, got " +
                                shape_str(cls_logits.shape()));
}

}  // namespace

Tensor focal_loss(const Tensor& cls_logits, const TargetAssignment& targets, float alpha,
                  float gamma) {
  check_head_shapes(cls_logits, targets, 1);
  int64_t n = cls_logits.numel();
  int64_t n_valid = 0;
  Tensor wpos = Tensor::zeros(cls_logits.shape());
  Tensor wneg = Tensor::zeros(cls_logits.shape());
  auto wp = wpos.mutable_data();
  auto wn = wneg.mutable_data();
  for (int64_t i = 0; i < n; ++i) {
    int8_t lab = targets.labels[static_cast<size_t>(i)];
    if (lab == 1) {
      wp[static_cast<size_t>(i)] = alpha;
      ++n_valid;
    } else if (lab == 0) {
      wn[static_cast<size_t>(i)] = 1.0f - alpha;
      ++n_valid;
    }
  }
  if (n_valid == 0) return Tensor::scalar(0.0f);
  Tensor x = cls_logits;
  Tensor nx = scale(x, -1.0f);
  Tensor p = sigmoid(x);        // p_t for label 1
  Tensor q = sigmoid(nx);       // 1 - p
  Tensor lp = softplus(nx);     // -log p
  Tensor lq = softplus(x);      // -log(1-p)
  Tensor pos = mul(wpos, mul(pow_const(q, gamma), lp));
  Tensor neg = mul(wneg, mul(pow_const(p, gamma), lq));
  return scale(reduce_sum(add(pos, neg)), 1.0f / static_cast<float>(n_valid));
}

Tensor smooth_l1_loss(const Tensor& reg_out, const TargetAssignment& targets) {
  check_head_shapes(reg_out, targets, kRegChannels);
  if (targets.n_positive == 0) return Tensor::scalar(0.0f);
  Tensor tgt = Tensor::from_data(reg_out.shape(), targets.reg_targets);
  Tensor e = smooth_l1_elem(sub(reg_out, tgt));
  // positive-anchor indicator expanded over the 7 residual channels
  Tensor w = Tensor::zeros(reg_out.shape());
  auto wd = w.mutable_data();
  int hw = targets.h * targets.w;
  for (int ki = 0; ki < targets.per_cell; ++ki)
    for (int i = 0; i < hw; ++i) {
      if (targets.labels[static_cast<size_t>(ki) * hw + i] != 1) continue;
      for (int j = 0; j < kRegChannels; ++j)
        wd[(static_cast<size_t>(ki) * kRegChannels + j) * hw + i] = 1.0f;
    }
  return scale(reduce_sum(mul(e, w)), 1.0f / static_cast<float>(targets.n_positive));
}

std::vector<geom::Detection> decode(const Tensor& cls_logits, const Tensor& reg_out,
                                    const AnchorGrid& grid, double score_thresh, double nms_iou) {
  int k = grid.spec.per_cell();
  if (cls_logits.ndim() != 4 || cls_logits.dim(1) != k || reg_out.dim(1) != k * kRegChannels ||
      cls_logits.dim(2) != grid.h || cls_logits.dim(3) != grid.w)
    throw std::invalid_argument("decode: head output shape mismatch");
  auto cd = cls_logits.data();
  auto rd = reg_out.data();
  int hw = grid.h * grid.w;
  std::vector<geom::Detection> dets;
  for (int ki = 0; ki < k; ++ki) {
    for (int r = 0; r < grid.h; ++r) {
      for (int c = 0; c < grid.w; ++c) {
        int i = r * grid.w + c;
        double logit = cd[static_cast<size_t>(ki) * hw + i];
        double score = 1.0 / (1.0 + std::exp(-logit));
        if (score < score_thresh) continue;
        std::array<float, kRegChannels> res;
        for (int j = 0; j < kRegChannels; ++j)
          res[static_cast<size_t>(j)] = rd[(static_cast<size_t>(ki) * kRegChannels + j) * hw + i];
        geom::Detection d;
        d.box = decode_box(res, grid.box_at(r, c, ki), grid.spec);
        d.score = score;
        dets.push_back(d);
      }
    }
  }
  return geom::nms_bev(std::move(dets), nms_iou, score_thresh);
}

void save_detections_csv(const std::string& path, const std::vector<DetectionRecord>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_detections_csv: cannot open " + path);
  out << "frame_id,agent_id,x,y,z,w,l,h,theta,score\n";
  for (const auto& r : rows) {
    const auto& b = r.det.box;
    out << r.frame_id << ',' << r.det.agent_id << ',' << b.x << ',' << b.y << ',' << b.z << ','
        << b.w << ',' << b.l << ',' << b.h << ',' << b.theta << ',' << r.det.score << '\n';
  }
  if (!out) throw std::runtime_error("save_detections_csv: write failed for " + path);
}

}  // namespace coopercept
