#include "coopercept/distill.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "coopercept/logging.hpp"

namespace coopercept {

Tensor kd_loss(const Tensor& teacher_feature, const Tensor& student_feature, float temperature,
               bool spatial_view) {
  if (teacher_feature.shape() != student_feature.shape())
    throw std::invalid_argument("kd_loss: shape mismatch " + shape_str(teacher_feature.shape()) +
                                " vs " + shape_str(student_feature.shape()));
  if (teacher_feature.ndim() != 4 || teacher_feature.dim(0) != 1)
    throw std::invalid_argument("kd_loss: expected [1,C,H,W]");
  if (!(temperature > 0.0f)) throw std::invalid_argument("kd_loss: temperature must be > 0");
  int c = teacher_feature.dim(1);
  int hw = teacher_feature.dim(2) * teacher_feature.dim(3);

  auto rows = [&](const Tensor& t) {
    Tensor flat = reshape(t, {c, hw});
    return spatial_view ? flat : permute(flat, {1, 0});  // [rows, dist_dim]
  };
  int n_rows = spatial_view ? c : hw;

  Tensor p = softmax(stop_grad(rows(teacher_feature)), 1, temperature);
  Tensor q = softmax(rows(student_feature), 1, temperature);
  // the tiny floor only guards exact-zero probabilities from exp underflow
  Tensor lp = log_t(add_const(p, 1e-12f));
  Tensor lq = log_t(add_const(q, 1e-12f));
  Tensor kl = mul(p, sub(lp, lq));
  return scale(reduce_sum(kl), 1.0f / static_cast<float>(n_rows));
}

Tensor total_loss(const Tensor& det, const Tensor& kd, const KdConfig& cfg) {
  return add(scale(det, cfg.lambda_det), scale(kd, cfg.lambda_kd));
}

void save_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_metrics_csv: cannot open " + path);
  out << "epoch,l_det,l_kd,l_total,lr\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << r.l_det << ',' << r.l_kd << ',' << r.l_total << ',' << r.lr << '\n';
  if (!out) throw std::runtime_error("save_metrics_csv: write failed for " + path);
}

Trainer::Trainer(PerceptionModel& model, const RunConfig& cfg) : model_(model), cfg_(cfg) {
  cfg_.validate();
  opt_.lr = cfg_.train.lr;
  params_ = model_.params();
}

std::array<double, 3> Trainer::step(const sim::SceneFrame& frame, int ego_index) {
  auto gts = gt_in_ego_frame(frame, ego_index);
  auto targets = assign_targets(model_.anchor_grid(), gts, cfg_.pos_iou, cfg_.neg_iou);

  Tensor l_det_ego, l_kd = Tensor::scalar(0.0f), objective;
  if (cfg_.strategy == "ahd") {
    EgoOutputs out = model_.run_ego(frame, ego_index, true, "ahd", nullptr, nullptr);
    l_det_ego = add(focal_loss(out.cls, targets), smooth_l1_loss(out.reg, targets));
    if (cfg_.kd.lambda_kd > 0.0f) {
      // distillation: teacher sees the aggregated cloud in the ego frame and
      // trains through its own head alongside the KD feature match
      geom::PointCloud lmix =
          aggregate_point_clouds(frame, ego_index, cfg_.voxels, cfg_.channel.comm_range_m);
      auto tenc = model_.encode_view_teacher(
          lmix, model_.pillar_seed(frame.frame_id, 1000 + ego_index), true);
      auto theads = model_.teacher_heads(tenc.first);
      Tensor l_det_teacher =
          add(focal_loss(theads.first, targets), smooth_l1_loss(theads.second, targets));
      l_kd = kd_loss(tenc.first, out.ego_feature, cfg_.kd.temperature, cfg_.kd.spatial_view);
      objective = total_loss(add(l_det_ego, l_det_teacher), l_kd, cfg_.kd);
    } else {
      objective = total_loss(l_det_ego, l_kd, cfg_.kd);
    }
  } else if (cfg_.strategy == "none" || cfg_.strategy == "late") {
    const auto& ego = frame.agents[static_cast<size_t>(ego_index)];
    EgoOutputs out =
        model_.run_single(ego.cloud, model_.pillar_seed(frame.frame_id, ego_index), true);
    l_det_ego = add(focal_loss(out.cls, targets), smooth_l1_loss(out.reg, targets));
    objective = total_loss(l_det_ego, Tensor::scalar(0.0f), cfg_.kd);
  } else if (cfg_.strategy == "early") {
    geom::PointCloud lmix =
        aggregate_point_clouds(frame, ego_index, cfg_.voxels, cfg_.channel.comm_range_m);
    EgoOutputs out =
        model_.run_single(lmix, model_.pillar_seed(frame.frame_id, 2000 + ego_index), true);
    l_det_ego = add(focal_loss(out.cls, targets), smooth_l1_loss(out.reg, targets));
    objective = total_loss(l_det_ego, Tensor::scalar(0.0f), cfg_.kd);
  } else {
    throw std::invalid_argument("Trainer: unknown strategy '" + cfg_.strategy + "'");
  }

  double det_v = l_det_ego.item();
  double kd_v = l_kd.item();
  double total_v = objective.item();
  if (!std::isfinite(total_v))
    throw std::runtime_error("training diverged: non-finite loss at frame " +
                             std::to_string(frame.frame_id) + " (l_det=" + std::to_string(det_v) +
                             ", l_kd=" + std::to_string(kd_v) + ")");
  backward(objective);
  opt_.step(params_);
  Adam::zero_grad(params_);
  return {det_v, kd_v, total_v};
}

EpochMetrics Trainer::train_epoch(const std::vector<sim::SceneFrame>& frames, int epoch) {
  if (frames.empty()) throw std::invalid_argument("train_epoch: no frames");
  int step_every = std::max(1, cfg_.train.lr_step_epochs);
  opt_.lr = cfg_.train.lr * std::pow(cfg_.train.lr_decay, epoch / step_every);

  EpochMetrics m;
  m.epoch = epoch;
  m.lr = opt_.lr;
  for (const auto& frame : frames) {
    int n_vehicle_agents = 0;
    for (const auto& a : frame.agents)
      if (a.kind == sim::AgentKind::Vehicle) ++n_vehicle_agents;
    int ego = (n_vehicle_agents > 0) ? frame.frame_id % n_vehicle_agents : 0;
    auto [d, k, t] = step(frame, ego);
    m.l_det += d;
    m.l_kd += k;
    m.l_total += t;
  }
  m.l_det /= static_cast<double>(frames.size());
  m.l_kd /= static_cast<double>(frames.size());
  m.l_total /= static_cast<double>(frames.size());
  COOP_LOG_INFO("epoch %d: l_det=%.5f l_kd=%.5f l_total=%.5f lr=%.2e", epoch, m.l_det, m.l_kd,
                m.l_total, m.lr);
  return m;
}

}  // namespace coopercept
