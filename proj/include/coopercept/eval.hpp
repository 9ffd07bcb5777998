#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopercept/comms.hpp"
#include "coopercept/config.hpp"
#include "coopercept/detection.hpp"
#include "coopercept/distill.hpp"
#include "coopercept/geometry.hpp"
#include "coopercept/lidar_sim.hpp"
#include "coopercept/pipeline.hpp"
#include "coopercept/strategies.hpp"

namespace coopercept {

// One precision/recall sample, taken after each ranked detection.
struct PrPoint {
  double score = 0.0;
  double recall = 0.0;
  double precision = 0.0;
};

struct ApResult {
  double iou_thresh = 0.0;
  double ap = 0.0;
  int tp = 0, fp = 0, fn = 0;
  int n_gt = 0;
  std::vector<PrPoint> curve;  // strongest detection first
};

// Detections and ground truth for one frame, in a shared frame of reference.
struct EvalFrame {
  std::vector<geom::Detection> detections;
  std::vector<geom::Box7> gt;
};

// Greedy matching inside one frame: detections are visited by
// (score desc, x asc, y asc); each claims its best-IoU still-unclaimed gt box
// when that IoU >= iou_thresh. Returns a true-positive flag per detection in
// the original order.
std::vector<uint8_t> match_frame(const std::vector<geom::Detection>& dets,
                                 const std::vector<geom::Box7>& gt, double iou_thresh);

// All-point interpolated average precision over every frame: detections are
// pooled and ranked by (score desc, frame asc, index asc); each true positive
// contributes the maximum precision at or beyond its own recall.
ApResult average_precision(const std::vector<EvalFrame>& frames, double iou_thresh);

// "rank,score,recall,precision" rows.
void save_pr_csv(const std::string& path, const ApResult& result);

// Ground truth kept for scoring: box center inside the voxel x/y ranges and
// at least one point of the fused cloud inside the box. The fused cloud is
// what a perfect aggregator could see, so the same gt set scores every
// strategy.
std::vector<geom::Box7> filter_gt_for_eval(const std::vector<geom::Box7>& gt_in_ego,
                                           const geom::PointCloud& fused_cloud,
                                           const VoxelConfig& voxels);

// Number of vehicle agents in the frame (the agents eligible to act as ego).
int n_vehicle_agents(const sim::SceneFrame& frame);
// Deterministic ego rotation: frame_id modulo the vehicle-agent count.
int eval_ego_index(const sim::SceneFrame& frame);

struct StrategyEvalResult {
  std::string strategy;
  ApResult ap050, ap070;
  double bytes_per_frame = 0.0;
  std::vector<int64_t> frame_bytes;            // aligned with `frames`
  std::vector<DetectionRecord> detections;     // ego-frame detections, all frames
  BandwidthReport bandwidth;
};

// Runs `strategy` on every frame (rotating ego), scores AP at IoU 0.5 and
// 0.7 against the filtered gt, and accounts transmitted bytes.
StrategyEvalResult evaluate_strategy(const std::vector<sim::SceneFrame>& frames,
                                     PerceptionModel& model, Strategy strategy);

// "strategy,iou,ap,tp,fp,fn,n_gt,bytes_per_frame" rows, two per strategy.
void save_results_csv(const std::string& path, const std::vector<StrategyEvalResult>& results);
// JSON array of {strategy, iou, ap, bytes_per_frame} objects, two per strategy.
void save_summary_json(const std::string& path, const std::vector<StrategyEvalResult>& results);

// Fresh-model training driver shared by the CLI and the experiment sweeps:
// initializes `model` from `cfg` and runs the configured number of epochs.
std::vector<EpochMetrics> train_run(PerceptionModel& model,
                                    const std::vector<sim::SceneFrame>& frames,
                                    const RunConfig& cfg);

struct TemperatureRow {
  double temperature = 0.0;
  double ap050 = 0.0, ap070 = 0.0;
};

// Trains one distilled model per temperature (same seed) and reports AP.
std::vector<TemperatureRow> sweep_temperature(const std::vector<sim::SceneFrame>& frames,
                                              const RunConfig& base,
                                              const std::vector<double>& temperatures);
// "temperature,ap_iou050,ap_iou070" rows.
void save_temperature_csv(const std::string& path, const std::vector<TemperatureRow>& rows);

struct AblationRow {
  bool use_sparse = false, use_kd = false, use_msa = false;
  double ap050 = 0.0, ap070 = 0.0;
};

// Trains and scores one model per toggle combination {sparse pillars,
// distillation, attention fusion}. All-off is the baseline: dense backbone,
// no distillation, mean fusion.
std::vector<AblationRow> run_ablation(const std::vector<sim::SceneFrame>& frames,
                                      const RunConfig& base,
                                      const std::vector<std::array<bool, 3>>& combos);
std::vector<std::array<bool, 3>> default_ablation_combos();
// "sparse,kd,msa,ap_iou050,ap_iou070" rows.
void save_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

}  // namespace coopercept
