#pragma once

// Serial, double-precision, naive-loop reference implementations. These are
// the independent oracles used by the test suite and the kernel benchmark:
// they take raw buffers plus explicit dims and never call into the optimized
// implementation.

#include <cstdint>
#include <functional>
#include <vector>

namespace coopref {

using dvec = std::vector<double>;

// ---- neural ops ----
dvec conv2d(const dvec& x, int N, int C, int H, int W, const dvec& w, int OC, int KH, int KW,
            const double* bias, int stride, int pad);
dvec conv_transpose2d(const dvec& x, int N, int C, int H, int W, const dvec& w, int OC, int KH,
                      int KW, int stride);
dvec matmul(const dvec& a, int M, int K, const dvec& b, int N);
dvec bmm(const dvec& a, int B, int M, int K, const dvec& b, int N);
dvec linear(const dvec& x, int R, int Din, const dvec& w, int Dout, const double* bias);
dvec relu(const dvec& x);
dvec sigmoid(const dvec& x);
dvec softplus(const dvec& x);
dvec softmax_lastaxis(const dvec& x, int64_t rows, int cols, double temperature,
                      const std::vector<uint8_t>* mask);
// Training-mode batch norm with optional (n,h,w) mask for the statistics.
dvec batch_norm_train(const dvec& x, int N, int C, int H, int W, const dvec& gamma,
                      const dvec& beta, double eps, const std::vector<uint8_t>* mask);
dvec batch_norm_eval(const dvec& x, int N, int C, int H, int W, const dvec& gamma,
                     const dvec& beta, const dvec& run_mean, const dvec& run_var, double eps);
dvec max_pool_points(const dvec& x, int C, int P, int M, const std::vector<uint8_t>& mask);

// ---- losses ----
double huber(double d, double beta);
// labels: 1 positive, 0 negative, -1 ignored. Mean over non-ignored anchors.
double focal_loss(const dvec& logits, const std::vector<int>& labels, double alpha, double gamma);
// preds/targets: [n_anchors x dims]; mean over positive anchors of per-anchor
// channel sums. Returns 0 when there are no positives.
double smooth_l1_loss(const dvec& preds, const dvec& targets, const std::vector<int>& labels,
                      int dims, double beta);
// KL(softmax(zt/T) || softmax(zs/T)) per row, averaged over rows.
double kd_kl(const dvec& zt, const dvec& zs, int64_t rows, int cols, double temperature);

// ---- attention ----
// Single-head scaled-dot-product attention for one query row over A tokens.
// q:[d], k,v:[A,d], valid:[A]; output [d].
dvec attention_row(const dvec& q, const dvec& k, const dvec& v, int A, int d,
                   const std::vector<uint8_t>& valid, dvec* weights_out);

// ---- geometry oracles ----
struct RefBox {
  double x, y, w, l, theta;  // BEV footprint
};
// Stratified jittered-grid sampling over the joint bounding box; `samples`
// must be a perfect square. Deterministic for a given seed.
double iou_monte_carlo(const RefBox& a, const RefBox& b, int64_t samples, uint64_t seed);

struct RefDet {
  double x, y, w, l, theta, score;
};
// Quadratic greedy NMS; keep order = (score desc, x asc, y asc); suppress
// when IoU > thresh. Returns kept indices into the input list.
std::vector<int> nms_bruteforce(const std::vector<RefDet>& dets, double iou_thresh,
                                double score_thresh,
                                const std::function<double(const RefDet&, const RefDet&)>& iou);

// All-point interpolated AP computed quadratically from first principles.
// tp_flags: ranked detections (score desc) marked TP/FP; n_gt > 0.
double ap_bruteforce(const std::vector<uint8_t>& tp_flags, int n_gt);

}  // namespace coopref
