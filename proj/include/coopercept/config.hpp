#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopercept/comms.hpp"
#include "coopercept/detection.hpp"
#include "coopercept/lidar_sim.hpp"
#include "coopercept/pillars.hpp"

namespace coopercept {

// Distillation knobs. `spatial_view` switches the channel-vector softmax view
// of the KD loss to the per-channel spatial-flatten alternative.
struct KdConfig {
  float temperature = 10.0f;
  float lambda_det = 1.0f;
  float lambda_kd = 1.0f;
  bool spatial_view = false;
};

struct TrainConfig {
  int epochs = 20;
  float lr = 1e-3f;
  int lr_step_epochs = 20;  // multiply lr by lr_decay every this many epochs
  float lr_decay = 0.1f;
};

// Everything a run needs, resolvable to/from a key=value file. The file a run
// writes into its output directory reproduces the run bit-identically.
struct RunConfig {
  std::string preset = "tiny";
  uint64_t seed = 1;
  std::string strategy = "ahd";  // none | late | early | ahd
  std::string data_dir = "data";
  std::string out_dir = "out";
  int n_frames = 200;
  int threads = 1;

  sim::SceneGenConfig scene;
  VoxelConfig voxels;
  std::vector<int> stage_channels = {8, 16, 32, 32, 32};
  std::vector<int> blocks_teacher;  // empty = variant default
  std::vector<int> blocks_student;
  int fusion_dim = 32;
  int fusion_heads = 3;
  bool ego_query = true;
  ChannelConfig channel;
  AnchorSpec anchors;
  double pos_iou = 0.6, neg_iou = 0.45;
  double score_thresh = 0.2, nms_iou = 0.15;
  KdConfig kd;
  TrainConfig train;
  bool use_msa = true;     // false: naive mean fusion (ablation)
  bool use_sparse = true;  // false: plain dense encoder stages (ablation)

  int feature_stride() const;  // spatial ratio pseudo-image : neck output
  void validate() const;

  void apply_preset(const std::string& name);  // "paper" | "tiny"
  static RunConfig for_preset(const std::string& name, uint64_t seed);

  void set_key(const std::string& key, const std::string& value);
  std::string dump() const;  // full key=value listing, fixed order
  void load_file(const std::string& path);
  void save_file(const std::string& path) const;
};

std::vector<std::string> config_keys();  // documented key set, fixed order

}  // namespace coopercept
