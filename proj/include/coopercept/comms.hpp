#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coopercept/geometry.hpp"
#include "coopercept/nn.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

struct ChannelConfig {
  double comm_range_m = 70.0;  // closed ball: exactly 70 m is in range
  int compression_rate = 32;
};

struct FeatureMessage {
  int sender_id = 0;
  geom::Pose sender_pose;
  Tensor payload;  // [1, C/rate, H, W]
  int64_t payload_bytes = 0;
};

struct BandwidthRecord {
  int frame_id = 0;
  int sender = 0;
  int receiver = 0;
  int64_t bytes = 0;
  std::string strategy;
};

struct BandwidthReport {
  std::vector<BandwidthRecord> records;

  void add(int frame_id, int sender, int receiver, int64_t bytes, const std::string& strategy);
  int64_t total_bytes() const;
  // CSV with header "frame_id,sender,receiver,bytes,strategy"
  void save_csv(const std::string& path) const;
};

// 1x1-convolution channel codec: compress C -> C/rate, decompress back.
// Parameters train jointly with the rest of the model.
struct FeatureCodec {
  int channels = 0;
  int rate = 1;
  Conv2dLayer enc;  // 1x1, C -> C/rate
  Conv2dLayer dec;  // 1x1, C/rate -> C

  void init(int channels, int rate, uint64_t seed, const std::string& prefix);
  Tensor compress(const Tensor& feature) const;    // [1,C,H,W] -> [1,C/rate,H,W]
  Tensor decompress(const Tensor& payload) const;  // [1,C/rate,H,W] -> [1,C,H,W]
  void collect(ParamList& out);
};

// Planar sender->receiver distance, the quantity gated against comm range.
double agent_distance(const geom::Pose& a, const geom::Pose& b);

// One broadcast step: every agent within range of the ego (closed ball,
// excluding the ego itself) contributes a compressed message, in agent order.
// Bytes are logged per message into `report`.
std::vector<FeatureMessage> broadcast(const std::vector<int>& agent_ids,
                                      const std::vector<geom::Pose>& poses,
                                      const std::vector<Tensor>& features, int ego_index,
                                      const FeatureCodec& codec, const ChannelConfig& channel,
                                      int frame_id, const std::string& strategy,
                                      BandwidthReport* report);

}  // namespace coopercept
