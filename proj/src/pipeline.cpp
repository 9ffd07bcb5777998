#include "coopercept/pipeline.hpp"

#include <stdexcept>

#include "coopercept/logging.hpp"
#include "coopercept/rng.hpp"

namespace coopercept {

void PerceptionModel::init(const RunConfig& cfg) {
  cfg.validate();
  cfg_ = cfg;
  uint64_t seed = cfg.seed;
  int pfn_ch = cfg.stage_channels[0];
  pfn_.init(pfn_ch, seed, "student");
  teacher_pfn_.init(pfn_ch, seed, "teacher");

  BackboneConfig sb;
  sb.variant = Variant::Student;
  sb.stage_channels = cfg.stage_channels;
  sb.blocks_per_stage = cfg.blocks_student;
  student_.init(sb, seed, "student");

  BackboneConfig tb;
  tb.variant = Variant::Teacher;
  tb.stage_channels = cfg.stage_channels;
  tb.blocks_per_stage = cfg.blocks_teacher;
  teacher_.init(tb, seed, "teacher");

  int neck = student_.out_channels();
  codec_.init(neck, cfg.channel.compression_rate, seed, "shared");

  FusionConfig fc;
  fc.in_channels = neck;
  fc.model_dim = cfg.fusion_dim;
  fc.heads = cfg.fusion_heads;
  fc.ego_query = cfg.ego_query;
  msa_.init(fc, seed, "shared");

  head_.init("shared", cfg.fusion_dim, static_cast<int>(cfg.anchors.yaws.size()), seed);
  teacher_head_.init("teacher", neck, static_cast<int>(cfg.anchors.yaws.size()), seed);

  anchor_grid_ = AnchorGrid::from_voxels(cfg.voxels, cfg.feature_stride(), cfg.anchors);
}

uint64_t PerceptionModel::pillar_seed(int frame_id, int agent_slot) const {
  return mix_seed(mix_seed(cfg_.seed, "pillar-sample"),
                  static_cast<uint64_t>(frame_id) * 1000003ull + static_cast<uint64_t>(agent_slot));
}

std::pair<Tensor, SpatialMask> PerceptionModel::encode_view(const geom::PointCloud& cloud,
                                                            uint64_t sample_seed, bool training) {
  PillarBatch batch = pillarize(cloud, cfg_.voxels, sample_seed);
  Tensor pf = pfn_.forward(batch, training);
  SpatialMask mask;
  Tensor img = scatter_to_pseudo_image(pf, batch, cfg_.voxels, &mask);
  if (!cfg_.use_sparse) {
    Tensor feat = student_.forward(img, SpatialMask::all_active(1, mask.h, mask.w), training);
    SpatialMask full = SpatialMask::all_active(1, anchor_grid_.h, anchor_grid_.w);
    return {feat, full};
  }
  Tensor feat = student_.forward(img, mask, training);
  // the feature-grid mask after the stride-2 cascade isn't needed downstream;
  // report full coverage of the ego grid (fusion uses fov validity instead)
  SpatialMask out_mask = SpatialMask::all_active(1, anchor_grid_.h, anchor_grid_.w);
  return {feat, out_mask};
}

std::pair<Tensor, SpatialMask> PerceptionModel::encode_view_teacher(const geom::PointCloud& cloud,
                                                                    uint64_t sample_seed,
                                                                    bool training) {
  PillarBatch batch = pillarize(cloud, cfg_.voxels, sample_seed);
  Tensor pf = teacher_pfn_.forward(batch, training);
  SpatialMask mask;
  Tensor img = scatter_to_pseudo_image(pf, batch, cfg_.voxels, &mask);
  Tensor feat = cfg_.use_sparse
                    ? teacher_.forward(img, mask, training)
                    : teacher_.forward(img, SpatialMask::all_active(1, mask.h, mask.w), training);
  return {feat, SpatialMask::all_active(1, anchor_grid_.h, anchor_grid_.w)};
}

std::pair<Tensor, Tensor> PerceptionModel::teacher_heads(const Tensor& teacher_feature) const {
  return teacher_head_.forward(teacher_feature);
}

Tensor PerceptionModel::fuse_tokens(const AgentTokenGrid& grid, AttentionMaps* attn_out) {
  if (cfg_.use_msa) return msa_.forward(grid, attn_out);
  // naive mean fusion (ablation baseline): shared pre-projection, then a
  // per-location average over valid tokens; no attention, no post projection
  grid.validate();
  int a = grid.n_agents, h = grid.h, w = grid.w, hw = h * w, d = msa_.cfg.model_dim;
  Tensor rows = reshape(permute(grid.tokens, {2, 3, 0, 1}), {hw * a, msa_.cfg.in_channels});
  Tensor x = reshape(msa_.pre.forward(rows), {hw, a, d});
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
  Tensor fused_rows = scale(reduce_mean_axis(mul(x, wts), 1), static_cast<float>(a));
  if (attn_out) {
    attn_out->n_agents = a;
    attn_out->h = h;
    attn_out->w = w;
    attn_out->weight.assign(static_cast<size_t>(a) * hw, 0.0f);
    for (int i = 0; i < hw; ++i) {
      int cnt = 0;
      for (int ag = 0; ag < a; ++ag)
        if (grid.valid[static_cast<size_t>(ag) * hw + i]) ++cnt;
      for (int ag = 0; ag < a; ++ag)
        if (grid.valid[static_cast<size_t>(ag) * hw + i])
          attn_out->weight[static_cast<size_t>(ag) * hw + i] = 1.0f / cnt;
    }
  }
  return reshape(permute(reshape(fused_rows, {h, w, d}), {2, 0, 1}), {1, d, h, w});
}

EgoOutputs PerceptionModel::run_ego(const sim::SceneFrame& frame, int ego_index, bool training,
                                    const std::string& strategy_label, BandwidthReport* bw,
                                    AttentionMaps* attn_out) {
  if (ego_index < 0 || ego_index >= static_cast<int>(frame.agents.size()))
    throw std::invalid_argument("run_ego: bad ego index");
  const auto& ego = frame.agents[static_cast<size_t>(ego_index)];

  // every agent encodes its own view in its own frame
  std::vector<int> ids;
  std::vector<geom::Pose> poses;
  std::vector<Tensor> feats;
  Tensor ego_feat;
  SpatialMask ego_mask;
  for (size_t i = 0; i < frame.agents.size(); ++i) {
    const auto& ag = frame.agents[i];
    auto enc = encode_view(ag.cloud, pillar_seed(frame.frame_id, static_cast<int>(i)), training);
    if (static_cast<int>(i) == ego_index) {
      ego_feat = enc.first;
      ego_mask = enc.second;
    }
    ids.push_back(ag.id);
    poses.push_back(ag.pose);
    feats.push_back(enc.first);
  }

  auto msgs = broadcast(ids, poses, feats, ego_index, codec_, cfg_.channel, frame.frame_id,
                        strategy_label, bw);

  int h = anchor_grid_.h, w = anchor_grid_.w;
  int a = 1 + static_cast<int>(msgs.size());
  std::vector<Tensor> token_list;
  std::vector<uint8_t> valid(static_cast<size_t>(a) * h * w, 0);
  token_list.push_back(ego_feat);  // ego token skips the codec
  for (int i = 0; i < h * w; ++i) valid[static_cast<size_t>(i)] = 1;
  int slot = 1;
  for (const auto& msg : msgs) {
    Tensor dec = codec_.decompress(msg.payload);
    auto t = geom::relative_transform(ego.pose, msg.sender_pose);
    WarpPlan plan = make_feature_warp_plan(t, cfg_.voxels, cfg_.feature_stride());
    auto [warped, cover] = warp_feature(dec, plan);
    token_list.push_back(warped);
    for (int i = 0; i < h * w; ++i)
      valid[static_cast<size_t>(slot) * h * w + i] = cover[static_cast<size_t>(i)];
    ++slot;
  }

  AgentTokenGrid grid;
  grid.n_agents = a;
  grid.channels = student_.out_channels();
  grid.h = h;
  grid.w = w;
  grid.tokens = concat(token_list, 0);
  grid.valid = std::move(valid);

  EgoOutputs out;
  out.ego_feature = ego_feat;
  out.ego_mask = ego_mask;
  out.fused = fuse_tokens(grid, attn_out);
  auto heads = head_.forward(out.fused);
  out.cls = heads.first;
  out.reg = heads.second;
  return out;
}

EgoOutputs PerceptionModel::run_single(const geom::PointCloud& cloud_in_ego, uint64_t sample_seed,
                                       bool training) {
  auto enc = encode_view(cloud_in_ego, sample_seed, training);
  int h = anchor_grid_.h, w = anchor_grid_.w;
  AgentTokenGrid grid;
  grid.n_agents = 1;
  grid.channels = student_.out_channels();
  grid.h = h;
  grid.w = w;
  grid.tokens = reshape(enc.first, {1, grid.channels, h, w});
  grid.valid.assign(static_cast<size_t>(h) * w, 1);
  EgoOutputs out;
  out.ego_feature = enc.first;
  out.ego_mask = enc.second;
  out.fused = fuse_tokens(grid, nullptr);
  auto heads = head_.forward(out.fused);
  out.cls = heads.first;
  out.reg = heads.second;
  return out;
}

std::vector<geom::Detection> PerceptionModel::decode_outputs(const EgoOutputs& out) const {
  return decode(out.cls, out.reg, anchor_grid_, cfg_.score_thresh, cfg_.nms_iou);
}

ParamList PerceptionModel::params() {
  ParamList p;
  pfn_.collect(p);
  student_.collect(p);
  codec_.collect(p);
  msa_.collect(p);
  head_.collect(p);
  teacher_pfn_.collect(p);
  teacher_.collect(p);
  teacher_head_.collect(p);
  return p;
}

void PerceptionModel::save_checkpoint(const std::string& path) {
  NamedTensorMap m;
  for (auto& p : params()) {
    std::vector<float> d(p.t.data().begin(), p.t.data().end());
    m.put(p.name, p.t.shape(), std::move(d));
  }
  std::map<std::string, std::pair<Shape, std::vector<float>>> bufs;
  pfn_.collect_buffers(bufs);
  teacher_pfn_.collect_buffers(bufs);
  student_.collect_buffers(bufs);
  teacher_.collect_buffers(bufs);
  for (auto& [name, sv] : bufs) m.put(name, sv.first, std::move(sv.second));
  m.save(path);
}

void PerceptionModel::load_checkpoint(const std::string& path) {
  NamedTensorMap m = NamedTensorMap::load(path);
  for (auto& p : params()) {
    auto it = m.items.find(p.name);
    if (it == m.items.end())
      throw std::runtime_error("checkpoint: missing parameter '" + p.name + "' in " + path);
    if (it->second.first != p.t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + p.name + "'");
    auto dst = p.t.mutable_data();
    std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
  }
  pfn_.load_buffers(m.items);
  teacher_pfn_.load_buffers(m.items);
  student_.load_buffers(m.items);
  teacher_.load_buffers(m.items);
}

std::vector<geom::Box7> gt_in_ego_frame(const sim::SceneFrame& frame, int ego_index,
                                        double self_radius_m) {
  const auto& ego = frame.agents[static_cast<size_t>(ego_index)];
  geom::Mat3 world_to_ego = geom::pose_to_world(ego.pose).inverse();
  std::vector<geom::Box7> out;
  for (const auto& b : frame.gt_boxes) {
    double dx = b.x - ego.pose.x, dy = b.y - ego.pose.y;
    if (std::hypot(dx, dy) <= self_radius_m) continue;  // the ego's own platform
    out.push_back(geom::transform_box(b, world_to_ego));
  }
  return out;
}

geom::PointCloud aggregate_point_clouds(const sim::SceneFrame& frame, int ego_index,
                                        const VoxelConfig& crop, double comm_range_m) {
  if (ego_index < 0 || ego_index >= static_cast<int>(frame.agents.size()))
    throw std::invalid_argument("aggregate_point_clouds: bad ego index");
  const auto& ego = frame.agents[static_cast<size_t>(ego_index)];
  geom::PointCloud merged;
  for (size_t i = 0; i < frame.agents.size(); ++i) {
    const auto& ag = frame.agents[i];
    double dist = std::hypot(ag.pose.x - ego.pose.x, ag.pose.y - ego.pose.y);
    if (static_cast<int>(i) != ego_index && dist > comm_range_m) continue;
    geom::PointCloud pts =
        (static_cast<int>(i) == ego_index)
            ? ag.cloud
            : geom::transform_points(ag.cloud, geom::relative_transform(ego.pose, ag.pose));
    for (size_t k = 0; k < pts.size(); ++k) {
      float x = pts.xyz[3 * k], y = pts.xyz[3 * k + 1], z = pts.xyz[3 * k + 2];
      if (x < crop.x_min || x >= crop.x_max || y < crop.y_min || y >= crop.y_max ||
          z < crop.z_min || z >= crop.z_max)
        continue;
      merged.push(x, y, z);
    }
  }
  return merged;
}

}  // namespace coopercept
