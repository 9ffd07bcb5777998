#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coopercept/geometry.hpp"
#include "coopercept/nn.hpp"
#include "coopercept/pillars.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

// Per-location token stack: agent 0 is the ego (always fully valid inside the
// grid); the remaining rows are warped neighbour features with their field-of-
// view coverage flags.
struct AgentTokenGrid {
  int n_agents = 0, channels = 0, h = 0, w = 0;
  Tensor tokens;               // [A, C, H, W]
  std::vector<uint8_t> valid;  // A*H*W coverage flags
  void validate() const;
};

// Mean-over-heads attention weight of the ego query row, one map per agent.
struct AttentionMaps {
  int n_agents = 0, h = 0, w = 0;
  std::vector<float> weight;  // [A, H, W]
  // CSV with header "agent_id,row,col,weight"
  void save_csv(const std::string& path) const;
};

// Inverse-warp sampling plan from a sender BEV grid into the ego grid, both
// sharing the same grid spec. `sender_to_ego` maps sender-frame coordinates
// into the ego frame; cell_m is the metric size of one feature cell.
WarpPlan make_feature_warp_plan(const geom::Mat3& sender_to_ego, int rows, int cols, double x_min,
                                double y_min, double cell_m);
// Same, with the grid spec derived from the voxel config and feature stride.
WarpPlan make_feature_warp_plan(const geom::Mat3& sender_to_ego, const VoxelConfig& vox,
                                int feature_stride);

// Applies a plan to [1,C,H,W]; returns the warped tensor plus validity flags
// (cells that sampled outside the sender grid are exact zero and invalid).
std::pair<Tensor, std::vector<uint8_t>> warp_feature(const Tensor& f, const WarpPlan& plan);

struct FusionConfig {
  int in_channels = 384;  // encoder neck width
  int model_dim = 256;    // token width inside attention
  int heads = 3;
  bool ego_query = true;  // false: mean over valid tokens instead of ego row
};

// Per-location multi-head self-attention over agent tokens. model_dim is
// split as evenly as possible across heads (leading heads take the remainder
// when heads does not divide it). Invalid agents get exactly zero attention.
struct MsaFusion {
  FusionConfig cfg;
  LinearLayer pre;   // in_channels -> model_dim
  LinearLayer post;  // model_dim -> model_dim
  std::vector<Parameter> wq, wk, wv;  // per head [model_dim, head_dim], no bias
  std::vector<int> head_dims;

  void init(const FusionConfig& cfg, uint64_t seed, const std::string& prefix);
  // -> fused feature [1, model_dim, H, W]
  Tensor forward(const AgentTokenGrid& grid, AttentionMaps* attn_out = nullptr);
  void collect(ParamList& out);
  int out_channels() const { return cfg.model_dim; }
};

}  // namespace coopercept
