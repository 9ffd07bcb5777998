#include "coopercept/strategies.hpp"

#include <cmath>
#include <stdexcept>

namespace coopercept {

Strategy parse_strategy(const std::string& s) {
  if (s == "none") return Strategy::None;
  if (s == "early") return Strategy::Early;
  if (s == "late") return Strategy::Late;
  if (s == "ahd") return Strategy::Intermediate;
  throw std::invalid_argument("unknown strategy '" + s + "' (expected none|late|early|ahd)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Early: return "early";
    case Strategy::Late: return "late";
    case Strategy::Intermediate: return "ahd";
  }
  return "?";
}

StrategyOutput run_strategy(const sim::SceneFrame& frame, int ego_index, PerceptionModel& model,
                            Strategy strategy, BandwidthReport* report) {
  if (ego_index < 0 || ego_index >= static_cast<int>(frame.agents.size()))
    throw std::invalid_argument("run_strategy: bad ego index");
  const auto& cfg = model.config();
  const auto& ego = frame.agents[static_cast<size_t>(ego_index)];
  StrategyOutput out;

  auto in_range = [&](size_t i) {
    return std::hypot(frame.agents[i].pose.x - ego.pose.x,
                      frame.agents[i].pose.y - ego.pose.y) <= cfg.channel.comm_range_m;
  };

  switch (strategy) {
    case Strategy::None: {
      EgoOutputs eo =
          model.run_single(ego.cloud, model.pillar_seed(frame.frame_id, ego_index), false);
      out.detections = model.decode_outputs(eo);
      break;
    }
    case Strategy::Early: {
      geom::PointCloud lmix =
          aggregate_point_clouds(frame, ego_index, cfg.voxels, cfg.channel.comm_range_m);
      EgoOutputs eo =
          model.run_single(lmix, model.pillar_seed(frame.frame_id, 2000 + ego_index), false);
      out.detections = model.decode_outputs(eo);
      for (size_t i = 0; i < frame.agents.size(); ++i) {
        if (static_cast<int>(i) == ego_index || !in_range(i)) continue;
        int64_t bytes =
            static_cast<int64_t>(frame.agents[i].cloud.size()) * 3 * sizeof(float);
        out.bytes += bytes;
        if (report)
          report->add(frame.frame_id, frame.agents[i].id, ego.id, bytes, "early");
      }
      break;
    }
    case Strategy::Late: {
      std::vector<geom::Detection> pool;
      for (size_t i = 0; i < frame.agents.size(); ++i) {
        if (static_cast<int>(i) != ego_index && !in_range(i)) continue;
        const auto& ag = frame.agents[i];
        EgoOutputs eo =
            model.run_single(ag.cloud, model.pillar_seed(frame.frame_id, static_cast<int>(i)),
                             false);
        auto dets = model.decode_outputs(eo);
        if (static_cast<int>(i) != ego_index) {
          auto t = geom::relative_transform(ego.pose, ag.pose);
          for (auto& d : dets) d.box = geom::transform_box(d.box, t);
          int64_t bytes = static_cast<int64_t>(dets.size()) * 8 * sizeof(float);
          out.bytes += bytes;
          if (report) report->add(frame.frame_id, ag.id, ego.id, bytes, "late");
        }
        for (auto& d : dets) {
          d.agent_id = ag.id;
          pool.push_back(d);
        }
      }
      out.detections = geom::nms_bev(std::move(pool), cfg.nms_iou, cfg.score_thresh);
      break;
    }
    case Strategy::Intermediate: {
      BandwidthReport local;
      EgoOutputs eo = model.run_ego(frame, ego_index, false, "ahd", &local, nullptr);
      out.detections = model.decode_outputs(eo);
      out.bytes = local.total_bytes();
      if (report)
        for (const auto& r : local.records) report->records.push_back(r);
      break;
    }
  }
  for (auto& d : out.detections)
    if (strategy != Strategy::Late) d.agent_id = ego.id;
  return out;
}

}  // namespace coopercept
