#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coopercept/backbone.hpp"
#include "coopercept/comms.hpp"
#include "coopercept/config.hpp"
#include "coopercept/detection.hpp"
#include "coopercept/fusion.hpp"
#include "coopercept/lidar_sim.hpp"
#include "coopercept/pillars.hpp"

namespace coopercept {

// Everything the ego branch produced for one frame.
struct EgoOutputs {
  Tensor ego_feature;   // student neck output for the ego view [1,Cn,H,W]
  SpatialMask ego_mask; // its active-site mask
  Tensor fused;         // post-fusion feature [1,D,H,W]
  Tensor cls, reg;      // detection head outputs
};

// One model instance shared by every strategy: pillar encoder, student
// backbone, channel codec, attention fusion, detection head, plus the
// teacher branch used during distillation training.
class PerceptionModel {
 public:
  void init(const RunConfig& cfg);

  // Single-view encode through pillars + student backbone. `sample_seed`
  // drives pillar subsampling; training toggles batch-norm statistics.
  std::pair<Tensor, SpatialMask> encode_view(const geom::PointCloud& cloud, uint64_t sample_seed,
                                             bool training);
  // Same through the teacher branch.
  std::pair<Tensor, SpatialMask> encode_view_teacher(const geom::PointCloud& cloud,
                                                     uint64_t sample_seed, bool training);
  // Teacher detection head on a teacher feature.
  std::pair<Tensor, Tensor> teacher_heads(const Tensor& teacher_feature) const;

  // Full ego branch: encode every agent view, broadcast within range through
  // the codec, warp into the ego grid, fuse (attention or mean), run heads.
  // `frame_id` keys the bandwidth log; attn_out may be null.
  EgoOutputs run_ego(const sim::SceneFrame& frame, int ego_index, bool training,
                     const std::string& strategy_label, BandwidthReport* bw,
                     AttentionMaps* attn_out);

  // Ego branch on one prepared cloud (already in the ego frame): the
  // single-view path used by the none/early strategies (token stack of 1).
  EgoOutputs run_single(const geom::PointCloud& cloud_in_ego, uint64_t sample_seed, bool training);

  std::vector<geom::Detection> decode_outputs(const EgoOutputs& out) const;

  ParamList params();
  void save_checkpoint(const std::string& path);
  void load_checkpoint(const std::string& path);

  const AnchorGrid& anchor_grid() const { return anchor_grid_; }
  const RunConfig& config() const { return cfg_; }
  Backbone& student_backbone() { return student_; }
  Backbone& teacher_backbone() { return teacher_; }
  MsaFusion& fusion() { return msa_; }
  FeatureCodec& codec() { return codec_; }
  PillarFeatureNet& pfn() { return pfn_; }
  DetectionHead& head() { return head_; }

  // Deterministic per-(frame, agent) pillar-sampling seed.
  uint64_t pillar_seed(int frame_id, int agent_slot) const;

 private:
  Tensor fuse_tokens(const AgentTokenGrid& grid, AttentionMaps* attn_out);

  RunConfig cfg_;
  PillarFeatureNet pfn_, teacher_pfn_;
  Backbone student_, teacher_;
  FeatureCodec codec_;
  MsaFusion msa_;
  DetectionHead head_, teacher_head_;
  AnchorGrid anchor_grid_;
};

// World-frame gt mapped into the ego frame, with the ego's own platform box
// (center within `self_radius_m` of the sensor) removed.
std::vector<geom::Box7> gt_in_ego_frame(const sim::SceneFrame& frame, int ego_index,
                                        double self_radius_m = 1.0);

// Union of in-range agents' clouds in the ego frame, cropped to the voxel
// ranges (the teacher's input).
geom::PointCloud aggregate_point_clouds(const sim::SceneFrame& frame, int ego_index,
                                        const VoxelConfig& crop, double comm_range_m);

}  // namespace coopercept
