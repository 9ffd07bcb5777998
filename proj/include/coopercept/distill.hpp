#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopercept/config.hpp"
#include "coopercept/pipeline.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

// Temperature-softmax KL between two same-shape feature maps; the first
// argument (teacher) is treated as a constant. Default view: per-location
// channel distributions, averaged over locations. spatial_view: per-channel
// spatial distributions, averaged over channels.
Tensor kd_loss(const Tensor& teacher_feature, const Tensor& student_feature, float temperature,
               bool spatial_view = false);

// L_total = lambda_det * det + lambda_kd * kd.
Tensor total_loss(const Tensor& det, const Tensor& kd, const KdConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double l_det = 0.0;  // ego detection loss (focal + smooth-L1), frame mean
  double l_kd = 0.0;
  double l_total = 0.0;  // the optimized objective, frame mean
  double lr = 0.0;
};

// "epoch,l_det,l_kd,l_total,lr" rows
void save_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows);

// Joint teacher/student training. Strategy selects the forward used for the
// ego detection loss: "ahd" runs the full comms+fusion path with the teacher
// and KD losses; "none" trains single-view; "early" trains single-view on the
// aggregated cloud. ("late" has no training of its own; it reuses "none".)
class Trainer {
 public:
  Trainer(PerceptionModel& model, const RunConfig& cfg);

  // One optimizer step on one frame; returns (l_det_ego, l_kd, l_total).
  std::array<double, 3> step(const sim::SceneFrame& frame, int ego_index);

  EpochMetrics train_epoch(const std::vector<sim::SceneFrame>& frames, int epoch);

  Adam& optimizer() { return opt_; }

 private:
  PerceptionModel& model_;
  RunConfig cfg_;
  Adam opt_;
  ParamList params_;
};

}  // namespace coopercept
