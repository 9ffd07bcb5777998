#pragma once

#include <string>
#include <vector>

#include "coopercept/pipeline.hpp"

namespace coopercept {

enum class Strategy { None, Early, Late, Intermediate };

Strategy parse_strategy(const std::string& s);  // none | early | late | ahd
std::string strategy_name(Strategy s);

struct StrategyOutput {
  std::vector<geom::Detection> detections;  // ego frame
  int64_t bytes = 0;                        // payload bytes this frame
};

// Runs one frame through the chosen fusion strategy with a trained model.
// None: ego view only, zero bytes. Early: aggregated in-range cloud through
// the single-view path, bytes = raw transmitted points. Late: every in-range
// agent detects on its own view, boxes are moved into the ego frame and
// deduplicated with NMS, bytes = 8 floats per shared detection.
// Intermediate: the full compress/broadcast/warp/attend path.
StrategyOutput run_strategy(const sim::SceneFrame& frame, int ego_index, PerceptionModel& model,
                            Strategy strategy, BandwidthReport* report = nullptr);

}  // namespace coopercept
