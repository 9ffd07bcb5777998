#include "coopercept/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "coopercept/logging.hpp"
#include "json.hpp"

namespace coopercept {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void open_or_throw(std::ofstream& out, const std::string& path) {
  out.open(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
}

}  // namespace

std::vector<uint8_t> match_frame(const std::vector<geom::Detection>& dets,
                                 const std::vector<geom::Box7>& gt, double iou_thresh) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].box.x != dets[b].box.x) return dets[a].box.x < dets[b].box.x;
    return dets[a].box.y < dets[b].box.y;
  });
  std::vector<uint8_t> flags(dets.size(), 0);
  std::vector<uint8_t> claimed(gt.size(), 0);
  for (int di : order) {
    int best = -1;
    double best_iou = 0.0;
    for (size_t g = 0; g < gt.size(); ++g) {
      if (claimed[g]) continue;
      double iou = geom::rotated_iou_bev(dets[static_cast<size_t>(di)].box, gt[g]);
      if (iou > best_iou) {
        best_iou = iou;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0 && best_iou >= iou_thresh) {
      claimed[static_cast<size_t>(best)] = 1;
      flags[static_cast<size_t>(di)] = 1;
    }
  }
  return flags;
}

ApResult average_precision(const std::vector<EvalFrame>& frames, double iou_thresh) {
  ApResult r;
  r.iou_thresh = iou_thresh;

  struct Ranked {
    float score;
    int frame;
    int idx;
    uint8_t tp;
  };
  std::vector<Ranked> pool;
  int n_gt = 0;
  for (size_t f = 0; f < frames.size(); ++f) {
    n_gt += static_cast<int>(frames[f].gt.size());
    std::vector<uint8_t> flags = match_frame(frames[f].detections, frames[f].gt, iou_thresh);
    for (size_t i = 0; i < flags.size(); ++i)
      pool.push_back({frames[f].detections[i].score, static_cast<int>(f), static_cast<int>(i),
                      flags[i]});
  }
  r.n_gt = n_gt;
  std::stable_sort(pool.begin(), pool.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.frame != b.frame) return a.frame < b.frame;
    return a.idx < b.idx;
  });

  const size_t n = pool.size();
  std::vector<double> prec(n), rec(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += pool[i].tp ? 1 : 0;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = n_gt > 0 ? static_cast<double>(tp) / static_cast<double>(n_gt) : 0.0;
    r.curve.push_back({static_cast<double>(pool[i].score), rec[i], prec[i]});
  }
  r.tp = tp;
  r.fp = static_cast<int>(n) - tp;
  r.fn = n_gt - tp;
  if (n_gt <= 0 || n == 0) return r;

  // Interpolated envelope: max precision at this recall or beyond. Recall is
  // non-decreasing in rank, so that is a suffix maximum; summed in ascending
  // rank order so the accumulation order is reproducible.
  std::vector<double> env(n);
  double running = 0.0;
  for (size_t i = n; i-- > 0;) {
    running = std::max(running, prec[i]);
    env[i] = running;
  }
  double ap = 0.0;
  for (size_t i = 0; i < n; ++i)
    if (pool[i].tp) ap += env[i] / static_cast<double>(n_gt);
  r.ap = ap;
  return r;
}

void save_pr_csv(const std::string& path, const ApResult& result) {
  std::ofstream out;
  open_or_throw(out, path);
  out << "rank,score,recall,precision\n";
  for (size_t i = 0; i < result.curve.size(); ++i)
    out << (i + 1) << ',' << fmt(result.curve[i].score) << ',' << fmt(result.curve[i].recall)
        << ',' << fmt(result.curve[i].precision) << '\n';
}

std::vector<geom::Box7> filter_gt_for_eval(const std::vector<geom::Box7>& gt_in_ego,
                                           const geom::PointCloud& fused_cloud,
                                           const VoxelConfig& voxels) {
  std::vector<geom::Box7> kept;
  for (const auto& b : gt_in_ego) {
    if (b.x < voxels.x_min || b.x > voxels.x_max) continue;
    if (b.y < voxels.y_min || b.y > voxels.y_max) continue;
    if (geom::points_in_box(fused_cloud, b) < 1) continue;
    kept.push_back(b);
  }
  return kept;
}

int n_vehicle_agents(const sim::SceneFrame& frame) {
  int n = 0;
  for (const auto& a : frame.agents)
    if (a.kind == sim::AgentKind::Vehicle) ++n;
  return n;
}

int eval_ego_index(const sim::SceneFrame& frame) {
  int n = n_vehicle_agents(frame);
  if (n <= 0) throw std::runtime_error("frame " + std::to_string(frame.frame_id) +
                                       " has no vehicle agent to act as ego");
  return frame.frame_id % n;
}

StrategyEvalResult evaluate_strategy(const std::vector<sim::SceneFrame>& frames,
                                     PerceptionModel& model, Strategy strategy) {
  StrategyEvalResult res;
  res.strategy = strategy_name(strategy);
  const RunConfig& cfg = model.config();

  std::vector<EvalFrame> eval_frames;
  eval_frames.reserve(frames.size());
  int64_t total_bytes = 0;
  for (const auto& frame : frames) {
    int ego = eval_ego_index(frame);
    NoGradGuard ng;
    StrategyOutput so = run_strategy(frame, ego, model, strategy, &res.bandwidth);
    res.frame_bytes.push_back(so.bytes);
    total_bytes += so.bytes;
    for (const auto& d : so.detections) res.detections.push_back({frame.frame_id, d});

    std::vector<geom::Box7> gts = gt_in_ego_frame(frame, ego);
    geom::PointCloud fused =
        aggregate_point_clouds(frame, ego, cfg.voxels, cfg.channel.comm_range_m);
    eval_frames.push_back({std::move(so.detections), filter_gt_for_eval(gts, fused, cfg.voxels)});
  }
  res.bytes_per_frame =
      frames.empty() ? 0.0 : static_cast<double>(total_bytes) / static_cast<double>(frames.size());
  res.ap050 = average_precision(eval_frames, 0.5);
  res.ap070 = average_precision(eval_frames, 0.7);
  return res;
}

void save_results_csv(const std::string& path, const std::vector<StrategyEvalResult>& results) {
  std::ofstream out;
  open_or_throw(out, path);
  out << "strategy,iou,ap,tp,fp,fn,n_gt,bytes_per_frame\n";
  for (const auto& r : results)
    for (const ApResult* ap : {&r.ap050, &r.ap070})
      out << r.strategy << ',' << fmt(ap->iou_thresh) << ',' << fmt(ap->ap) << ',' << ap->tp << ','
          << ap->fp << ',' << ap->fn << ',' << ap->n_gt << ',' << fmt(r.bytes_per_frame) << '\n';
}

void save_summary_json(const std::string& path, const std::vector<StrategyEvalResult>& results) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : results) {
    for (const ApResult* ap : {&r.ap050, &r.ap070}) {
      nlohmann::ordered_json obj;
      obj["strategy"] = r.strategy;
      obj["iou"] = ap->iou_thresh;
      obj["ap"] = ap->ap;
      obj["bytes_per_frame"] = r.bytes_per_frame;
      arr.push_back(obj);
    }
  }
  std::ofstream out;
  open_or_throw(out, path);
  out << arr.dump(2) << '\n';
}

std::vector<EpochMetrics> train_run(PerceptionModel& model,
                                    const std::vector<sim::SceneFrame>& frames,
                                    const RunConfig& cfg) {
  model.init(cfg);
  Trainer trainer(model, cfg);
  std::vector<EpochMetrics> metrics;
  metrics.reserve(static_cast<size_t>(cfg.train.epochs));
  for (int e = 0; e < cfg.train.epochs; ++e) metrics.push_back(trainer.train_epoch(frames, e));
  return metrics;
}

std::vector<TemperatureRow> sweep_temperature(const std::vector<sim::SceneFrame>& frames,
                                              const RunConfig& base,
                                              const std::vector<double>& temperatures) {
  std::vector<TemperatureRow> rows;
  for (double t : temperatures) {
    RunConfig cfg = base;
    cfg.strategy = "ahd";
    cfg.kd.temperature = t;
    if (cfg.kd.lambda_kd <= 0.0) cfg.kd.lambda_kd = 1.0;
    COOP_LOG_INFO("sweep: training at temperature %g", t);
    PerceptionModel model;
    train_run(model, frames, cfg);
    StrategyEvalResult r = evaluate_strategy(frames, model, Strategy::Intermediate);
    rows.push_back({t, r.ap050.ap, r.ap070.ap});
  }
  return rows;
}

void save_temperature_csv(const std::string& path, const std::vector<TemperatureRow>& rows) {
  std::ofstream out;
  open_or_throw(out, path);
  out << "temperature,ap_iou050,ap_iou070\n";
  for (const auto& r : rows)
    out << fmt(r.temperature) << ',' << fmt(r.ap050) << ',' << fmt(r.ap070) << '\n';
}

std::vector<std::array<bool, 3>> default_ablation_combos() {
  return {{false, false, false}, {true, false, false}, {true, true, false}, {true, true, true}};
}

std::vector<AblationRow> run_ablation(const std::vector<sim::SceneFrame>& frames,
                                      const RunConfig& base,
                                      const std::vector<std::array<bool, 3>>& combos) {
  std::vector<AblationRow> rows;
  for (const auto& c : combos) {
    RunConfig cfg = base;
    cfg.strategy = "ahd";
    cfg.use_sparse = c[0];
    cfg.kd.lambda_kd = c[1] ? (base.kd.lambda_kd > 0.0 ? base.kd.lambda_kd : 1.0) : 0.0;
    cfg.use_msa = c[2];
    COOP_LOG_INFO("ablation: training sparse=%d kd=%d msa=%d", int(c[0]), int(c[1]), int(c[2]));
    PerceptionModel model;
    train_run(model, frames, cfg);
    StrategyEvalResult r = evaluate_strategy(frames, model, Strategy::Intermediate);
    rows.push_back({c[0], c[1], c[2], r.ap050.ap, r.ap070.ap});
  }
  return rows;
}

void save_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream out;
  open_or_throw(out, path);
  out << "sparse,kd,msa,ap_iou050,ap_iou070\n";
  for (const auto& r : rows)
    out << int(r.use_sparse) << ',' << int(r.use_kd) << ',' << int(r.use_msa) << ','
        << fmt(r.ap050) << ',' << fmt(r.ap070) << '\n';
}

}  // namespace coopercept
