#include "coopercept/comms.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace coopercept {

void BandwidthReport::add(int frame_id, int sender, int receiver, int64_t bytes,
                          const std::string& strategy) {
  records.push_back({frame_id, sender, receiver, bytes, strategy});
}

int64_t BandwidthReport::total_bytes() const {
  int64_t t = 0;
  for (const auto& r : records) t += r.bytes;
  return t;
}

void BandwidthReport::save_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("BandwidthReport: cannot open " + path);
  out << "frame_id,sender,receiver,bytes,strategy\n";
  for (const auto& r : records)
    out << r.frame_id << ',' << r.sender << ',' << r.receiver << ',' << r.bytes << ','
        << r.strategy << '\n';
  if (!out) throw std::runtime_error("BandwidthReport: write failed for " + path);
}

void FeatureCodec::init(int ch, int r, uint64_t seed, const std::string& prefix) {
  if (r < 1) throw std::invalid_argument("FeatureCodec: rate must be >= 1");
  if (ch % r != 0)
    throw std::invalid_argument("FeatureCodec: rate " + std::to_string(r) +
                                " does not divide channel count " + std::to_string(ch));
  channels = ch;
  rate = r;
  enc.init(prefix + ".codec.enc", ch / r, ch, 1, 1, 0, seed);
  dec.init(prefix + ".codec.dec", ch, ch / r, 1, 1, 0, seed);
}

Tensor FeatureCodec::compress(const Tensor& feature) const {
  if (feature.ndim() != 4 || feature.dim(1) != channels)
    throw std::invalid_argument("FeatureCodec::compress: expected [1," + std::to_string(channels) +
                                ",H,W], got " + shape_str(feature.shape()));
  return enc.forward(feature);
}

Tensor FeatureCodec::decompress(const Tensor& payload) const {
  if (payload.ndim() != 4 || payload.dim(1) != channels / rate)
    throw std::invalid_argument("FeatureCodec::decompress: expected [1," +
                                std::to_string(channels / rate) + ",H,W], got " +
                                shape_str(payload.shape()));
  return dec.forward(payload);
}

void FeatureCodec::collect(ParamList& out) {
  enc.collect(out);
  dec.collect(out);
}

double agent_distance(const geom::Pose& a, const geom::Pose& b) {
  return std::hypot(a.x - b.x, a.y - b.y);
}

std::vector<FeatureMessage> broadcast(const std::vector<int>& agent_ids,
                                      const std::vector<geom::Pose>& poses,
                                      const std::vector<Tensor>& features, int ego_index,
                                      const FeatureCodec& codec, const ChannelConfig& channel,
                                      int frame_id, const std::string& strategy,
                                      BandwidthReport* report) {
  size_t n = agent_ids.size();
  if (poses.size() != n || features.size() != n)
    throw std::invalid_argument("broadcast: agent_ids/poses/features size mismatch");
  if (ego_index < 0 || ego_index >= static_cast<int>(n))
    throw std::invalid_argument("broadcast: bad ego index");
  std::vector<FeatureMessage> received;
  for (size_t i = 0; i < n; ++i) {
    if (static_cast<int>(i) == ego_index) continue;
    if (agent_distance(poses[i], poses[static_cast<size_t>(ego_index)]) > channel.comm_range_m)
      continue;
    FeatureMessage msg;
    msg.sender_id = agent_ids[i];
    msg.sender_pose = poses[i];
    msg.payload = codec.compress(features[i]);
    msg.payload_bytes = msg.payload.numel() * static_cast<int64_t>(sizeof(float));
    if (report)
      report->add(frame_id, agent_ids[i], agent_ids[static_cast<size_t>(ego_index)],
                  msg.payload_bytes, strategy);
    received.push_back(std::move(msg));
  }
  return received;
}

}  // namespace coopercept
