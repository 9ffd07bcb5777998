#include "coopercept/fusion.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace coopercept {

void AgentTokenGrid::validate() const {
  if (n_agents < 1) throw std::invalid_argument("AgentTokenGrid: need at least the ego token");
  if (tokens.ndim() != 4 || tokens.dim(0) != n_agents || tokens.dim(1) != channels ||
      tokens.dim(2) != h || tokens.dim(3) != w)
    throw std::invalid_argument("AgentTokenGrid: tokens shape mismatch");
  if (valid.size() != static_cast<size_t>(n_agents) * h * w)
    throw std::invalid_argument("AgentTokenGrid: validity mask size mismatch");
  for (int i = 0; i < h * w; ++i)
    if (!valid[static_cast<size_t>(i)])
      throw std::invalid_argument("AgentTokenGrid: ego token must be valid everywhere");
}

void AttentionMaps::save_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("AttentionMaps: cannot open " + path);
  out << "agent_id,row,col,weight\n";
  for (int a = 0; a < n_agents; ++a)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        out << a << ',' << r << ',' << c << ','
            << weight[(static_cast<size_t>(a) * h + r) * w + c] << '\n';
  if (!out) throw std::runtime_error("AttentionMaps: write failed for " + path);
}

WarpPlan make_feature_warp_plan(const geom::Mat3& sender_to_ego, int rows, int cols, double x_min,
                                double y_min, double cell_m) {
  if (rows < 1 || cols < 1 || cell_m <= 0.0)
    throw std::invalid_argument("make_feature_warp_plan: bad grid spec");
  geom::Mat3 ego_to_sender = sender_to_ego.inverse();
  WarpPlan plan;
  plan.src_h = rows;
  plan.src_w = cols;
  plan.dst_h = rows;
  plan.dst_w = cols;
  plan.taps.resize(static_cast<size_t>(rows) * cols);
  plan.valid.assign(static_cast<size_t>(rows) * cols, 0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double ex = x_min + (c + 0.5) * cell_m;  // ego-grid cell center, meters
      double ey = y_min + (r + 0.5) * cell_m;
      double sx, sy;
      ego_to_sender.apply(ex, ey, sx, sy);
      double gc = (sx - x_min) / cell_m - 0.5;  // continuous sender grid coords
      double gr = (sy - y_min) / cell_m - 0.5;
      size_t at = static_cast<size_t>(r) * cols + c;
      if (gr < 0.0 || gr > rows - 1 || gc < 0.0 || gc > cols - 1) continue;  // outside sender fov
      int r0 = static_cast<int>(std::floor(gr));
      int c0 = static_cast<int>(std::floor(gc));
      if (r0 == rows - 1) --r0;  // top edge: collapse to the last full cell pair
      if (c0 == cols - 1) --c0;
      if (rows == 1) r0 = 0;
      if (cols == 1) c0 = 0;
      double fr = gr - r0, fc = gc - c0;
      auto& tap = plan.taps[at];
      int r1 = std::min(r0 + 1, rows - 1), c1 = std::min(c0 + 1, cols - 1);
      tap.idx[0] = r0 * cols + c0;
      tap.idx[1] = r0 * cols + c1;
      tap.idx[2] = r1 * cols + c0;
      tap.idx[3] = r1 * cols + c1;
      tap.wgt[0] = static_cast<float>((1.0 - fr) * (1.0 - fc));
      tap.wgt[1] = static_cast<float>((1.0 - fr) * fc);
      tap.wgt[2] = static_cast<float>(fr * (1.0 - fc));
      tap.wgt[3] = static_cast<float>(fr * fc);
      plan.valid[at] = 1;
    }
  }
  return plan;
}

WarpPlan make_feature_warp_plan(const geom::Mat3& sender_to_ego, const VoxelConfig& vox,
                                int feature_stride) {
  if (feature_stride < 1) throw std::invalid_argument("make_feature_warp_plan: bad stride");
  if (vox.rows() % feature_stride != 0 || vox.cols() % feature_stride != 0)
    throw std::invalid_argument("make_feature_warp_plan: stride does not divide the grid");
  return make_feature_warp_plan(sender_to_ego, vox.rows() / feature_stride,
                                vox.cols() / feature_stride, vox.x_min, vox.y_min,
                                vox.voxel_xy * feature_stride);
}

std::pair<Tensor, std::vector<uint8_t>> warp_feature(const Tensor& f, const WarpPlan& plan) {
  return {bilinear_warp(f, plan), plan.valid};
}

void MsaFusion::init(const FusionConfig& c, uint64_t seed, const std::string& prefix) {
  if (c.heads < 1) throw std::invalid_argument("MsaFusion: heads must be >= 1");
  if (c.model_dim < c.heads)
    throw std::invalid_argument("MsaFusion: model_dim must be >= heads");
  cfg = c;
  pre.init(prefix + ".msa.pre", cfg.model_dim, cfg.in_channels, seed);
  post.init(prefix + ".msa.post", cfg.model_dim, cfg.model_dim, seed);
  head_dims.assign(static_cast<size_t>(cfg.heads), cfg.model_dim / cfg.heads);
  for (int i = 0; i < cfg.model_dim % cfg.heads; ++i) ++head_dims[static_cast<size_t>(i)];
  wq.clear();
  wk.clear();
  wv.clear();
  for (int hd = 0; hd < cfg.heads; ++hd) {
    std::string base = prefix + ".msa.head" + std::to_string(hd + 1);
    int dh = head_dims[static_cast<size_t>(hd)];
    auto mk = [&](const std::string& nm) {
      Parameter p;
      p.name = base + "." + nm;
      p.t = kaiming_uniform({cfg.model_dim, dh}, cfg.model_dim, seed, p.name);
      p.t.set_requires_grad(true);
      return p;
    };
    wq.push_back(mk("wq"));
    wk.push_back(mk("wk"));
    wv.push_back(mk("wv"));
  }
}

Tensor MsaFusion::forward(const AgentTokenGrid& grid, AttentionMaps* attn_out) {
  grid.validate();
  if (grid.channels != cfg.in_channels)
    throw std::invalid_argument("MsaFusion: token width " + std::to_string(grid.channels) +
                                " != configured " + std::to_string(cfg.in_channels));
  int a = grid.n_agents, h = grid.h, w = grid.w, hw = h * w, d = cfg.model_dim;

  // [A,C,H,W] -> [HW*A, C] token rows (location-major, agent order fixed)
  Tensor rows = reshape(permute(grid.tokens, {2, 3, 0, 1}), {hw * a, cfg.in_channels});
  Tensor x = reshape(pre.forward(rows), {hw, a, d});

  // key/query validity mask, broadcast across query rows: [HW, A, A]
  Tensor mask = Tensor::zeros({hw, a, a});
  {
    auto md = mask.mutable_data();
    for (int q = 0; q < a; ++q)
      for (int k = 0; k < a; ++k)
        for (int i = 0; i < hw; ++i)
          md[(static_cast<size_t>(i) * a + q) * a + k] =
              grid.valid[static_cast<size_t>(k) * hw + i] ? 1.0f : 0.0f;
  }

  if (attn_out) {
    attn_out->n_agents = a;
    attn_out->h = h;
    attn_out->w = w;
    attn_out->weight.assign(static_cast<size_t>(a) * hw, 0.0f);
  }

  Tensor x_flat = reshape(x, {hw * a, d});
  std::vector<Tensor> head_outs;
  for (int hd = 0; hd < cfg.heads; ++hd) {
    int dh = head_dims[static_cast<size_t>(hd)];
    Tensor q = reshape(matmul(x_flat, wq[static_cast<size_t>(hd)].t), {hw, a, dh});
    Tensor k = reshape(matmul(x_flat, wk[static_cast<size_t>(hd)].t), {hw, a, dh});
    Tensor v = reshape(matmul(x_flat, wv[static_cast<size_t>(hd)].t), {hw, a, dh});
    Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(dh)));
    Tensor attn = softmax(scores, 2, 1.0f, &mask);  // invalid keys get exact 0
    if (attn_out) {
      auto ad = attn.data();
      for (int ag = 0; ag < a; ++ag)
        for (int i = 0; i < hw; ++i)
          attn_out->weight[static_cast<size_t>(ag) * hw + i] +=
              ad[(static_cast<size_t>(i) * a + 0) * a + ag] / static_cast<float>(cfg.heads);
    }
    head_outs.push_back(bmm(attn, v));  // [HW, A, dh]
  }
  Tensor cat = cfg.heads == 1 ? head_outs[0] : concat(head_outs, 2);  // [HW, A, D]
  Tensor out = reshape(post.forward(reshape(cat, {hw * a, d})), {hw, a, d});

  Tensor fused_rows;  // [HW, D]
  if (cfg.ego_query) {
    fused_rows = select(out, 1, 0);
  } else {
    // mean over valid tokens: weight each row by 1/count(location)
    Tensor wts = Tensor::zeros({hw, a, d});
    auto wd = wts.mutable_data();
    for (int i = 0; i < hw; ++i) {
      int cnt = 0;
      for (int ag = 0; ag < a; ++ag)
        if (grid.valid[static_cast<size_t>(ag) * hw + i]) ++cnt;
      for (int ag = 0; ag < a; ++ag) {
        float val = grid.valid[static_cast<size_t>(ag) * hw + i] ? 1.0f / cnt : 0.0f;
        for (int c = 0; c < d; ++c) wd[(static_cast<size_t>(i) * a + ag) * d + c] = val;
      }
    }
    fused_rows = scale(reduce_mean_axis(mul(out, wts), 1), static_cast<float>(a));
  }
  // [HW, D] -> [1, D, H, W]
  return reshape(permute(reshape(fused_rows, {h, w, d}), {2, 0, 1}), {1, d, h, w});
}

void MsaFusion::collect(ParamList& out) {
  pre.collect(out);
  for (int hd = 0; hd < cfg.heads; ++hd) {
    out.push_back(wq[static_cast<size_t>(hd)]);
    out.push_back(wk[static_cast<size_t>(hd)]);
    out.push_back(wv[static_cast<size_t>(hd)]);
  }
  post.collect(out);
}

}  // namespace coopercept
