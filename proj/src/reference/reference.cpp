#include "coopercept/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace coopref {

dvec conv2d(const dvec& x, int N, int C, int H, int W, const dvec& w, int OC, int KH, int KW,
            const double* bias, int stride, int pad) {
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  dvec out(static_cast<size_t>(N) * OC * OH * OW, 0.0);
  for (int n = 0; n < N; ++n)
    for (int oc = 0; oc < OC; ++oc)
      for (int oh = 0; oh < OH; ++oh)
        for (int ow = 0; ow < OW; ++ow) {
          double acc = bias ? bias[oc] : 0.0;
          for (int ic = 0; ic < C; ++ic)
            for (int kh = 0; kh < KH; ++kh)
              for (int kw = 0; kw < KW; ++kw) {
                int ih = oh * stride - pad + kh;
                int iw = ow * stride - pad + kw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[((static_cast<size_t>(n) * C + ic) * H + ih) * W + iw] *
                       w[((static_cast<size_t>(oc) * C + ic) * KH + kh) * KW + kw];
              }
          out[((static_cast<size_t>(n) * OC + oc) * OH + oh) * OW + ow] = acc;
        }
  return out;
}

dvec conv_transpose2d(const dvec& x, int N, int C, int H, int W, const dvec& w, int OC, int KH,
                      int KW, int stride) {
  int OH = (H - 1) * stride + KH;
  int OW = (W - 1) * stride + KW;
  dvec out(static_cast<size_t>(N) * OC * OH * OW, 0.0);
  for (int n = 0; n < N; ++n)
    for (int ic = 0; ic < C; ++ic)
      for (int ih = 0; ih < H; ++ih)
        for (int iw = 0; iw < W; ++iw) {
          double v = x[((static_cast<size_t>(n) * C + ic) * H + ih) * W + iw];
          for (int oc = 0; oc < OC; ++oc)
            for (int kh = 0; kh < KH; ++kh)
              for (int kw = 0; kw < KW; ++kw)
                out[((static_cast<size_t>(n) * OC + oc) * OH + ih * stride + kh) * OW +
                    iw * stride + kw] +=
                    v * w[((static_cast<size_t>(ic) * OC + oc) * KH + kh) * KW + kw];
        }
  return out;
}

dvec matmul(const dvec& a, int M, int K, const dvec& b, int N) {
  dvec out(static_cast<size_t>(M) * N, 0.0);
  for (int m = 0; m < M; ++m)
    for (int n = 0; n < N; ++n) {
      double acc = 0.0;
      for (int k = 0; k < K; ++k)
        acc += a[static_cast<size_t>(m) * K + k] * b[static_cast<size_t>(k) * N + n];
      out[static_cast<size_t>(m) * N + n] = acc;
    }
  return out;
}

dvec bmm(const dvec& a, int B, int M, int K, const dvec& b, int N) {
  dvec out(static_cast<size_t>(B) * M * N, 0.0);
  for (int bb = 0; bb < B; ++bb)
    for (int m = 0; m < M; ++m)
      for (int n = 0; n < N; ++n) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k)
          acc += a[(static_cast<size_t>(bb) * M + m) * K + k] *
                 b[(static_cast<size_t>(bb) * K + k) * N + n];
        out[(static_cast<size_t>(bb) * M + m) * N + n] = acc;
      }
  return out;
}

dvec linear(const dvec& x, int R, int Din, const dvec& w, int Dout, const double* bias) {
  dvec out(static_cast<size_t>(R) * Dout, 0.0);
  for (int r = 0; r < R; ++r)
    for (int o = 0; o < Dout; ++o) {
      double acc = bias ? bias[o] : 0.0;
      for (int d = 0; d < Din; ++d)
        acc += x[static_cast<size_t>(r) * Din + d] * w[static_cast<size_t>(o) * Din + d];
      out[static_cast<size_t>(r) * Dout + o] = acc;
    }
  return out;
}

dvec relu(const dvec& x) {
  dvec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return out;
}

dvec sigmoid(const dvec& x) {
  dvec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return out;
}

dvec softplus(const dvec& x) {
  dvec out(x.size());
  for (size_t i = 0; i < x.size(); ++i)
    out[i] = (x[i] > 0.0 ? x[i] : 0.0) + std::log1p(std::exp(-std::fabs(x[i])));
  return out;
}

dvec softmax_lastaxis(const dvec& x, int64_t rows, int cols, double temperature,
                      const std::vector<uint8_t>* mask) {
  dvec out(x.size(), 0.0);
  for (int64_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < cols; ++c) {
      if (mask && !(*mask)[static_cast<size_t>(r * cols + c)]) continue;
      mx = std::max(mx, x[static_cast<size_t>(r * cols + c)]);
    }
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      if (mask && !(*mask)[static_cast<size_t>(r * cols + c)]) continue;
      denom += std::exp((x[static_cast<size_t>(r * cols + c)] - mx) / temperature);
    }
    for (int c = 0; c < cols; ++c) {
      if (mask && !(*mask)[static_cast<size_t>(r * cols + c)]) continue;
      out[static_cast<size_t>(r * cols + c)] =
          std::exp((x[static_cast<size_t>(r * cols + c)] - mx) / temperature) / denom;
    }
  }
  return out;
}

dvec batch_norm_train(const dvec& x, int N, int C, int H, int W, const dvec& gamma,
                      const dvec& beta, double eps, const std::vector<uint8_t>* mask) {
  int64_t hw = static_cast<int64_t>(H) * W;
  dvec out(x.size());
  for (int c = 0; c < C; ++c) {
    double s = 0.0, s2 = 0.0;
    int64_t cnt = 0;
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i) {
        if (mask && !(*mask)[static_cast<size_t>(n * hw + i)]) continue;
        double v = x[(static_cast<size_t>(n) * C + c) * hw + i];
        s += v;
        s2 += v * v;
        ++cnt;
      }
    double mu = s / static_cast<double>(cnt);
    double var = s2 / static_cast<double>(cnt) - mu * mu;
    if (var < 0.0) var = 0.0;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i)
        out[(static_cast<size_t>(n) * C + c) * hw + i] =
            gamma[c] * (x[(static_cast<size_t>(n) * C + c) * hw + i] - mu) * inv + beta[c];
  }
  return out;
}

dvec batch_norm_eval(const dvec& x, int N, int C, int H, int W, const dvec& gamma,
                     const dvec& beta, const dvec& run_mean, const dvec& run_var, double eps) {
  int64_t hw = static_cast<int64_t>(H) * W;
  dvec out(x.size());
  for (int c = 0; c < C; ++c) {
    double inv = 1.0 / std::sqrt(run_var[c] + eps);
    for (int n = 0; n < N; ++n)
      for (int64_t i = 0; i < hw; ++i)
        out[(static_cast<size_t>(n) * C + c) * hw + i] =
            gamma[c] * (x[(static_cast<size_t>(n) * C + c) * hw + i] - run_mean[c]) * inv +
            beta[c];
  }
  return out;
}

dvec max_pool_points(const dvec& x, int C, int P, int M, const std::vector<uint8_t>& mask) {
  dvec out(static_cast<size_t>(P) * C, 0.0);
  for (int p = 0; p < P; ++p)
    for (int c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      for (int m = 0; m < M; ++m) {
        if (!mask[static_cast<size_t>(p) * M + m]) continue;
        best = std::max(best, x[(static_cast<size_t>(c) * P + p) * M + m]);
      }
      out[static_cast<size_t>(p) * C + c] = best;
    }
  return out;
}

double huber(double d, double beta) {
  double ad = std::fabs(d);
  return ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
}

double focal_loss(const dvec& logits, const std::vector<int>& labels, double alpha,
                  double gamma) {
  double total = 0.0;
  int64_t cnt = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] < 0) continue;
    double p = 1.0 / (1.0 + std::exp(-logits[i]));
    double pt = labels[i] == 1 ? p : 1.0 - p;
    double at = labels[i] == 1 ? alpha : 1.0 - alpha;
    total += -at * std::pow(1.0 - pt, gamma) * std::log(pt);
    ++cnt;
  }
  return cnt > 0 ? total / static_cast<double>(cnt) : 0.0;
}

double smooth_l1_loss(const dvec& preds, const dvec& targets, const std::vector<int>& labels,
                      int dims, double beta) {
  double total = 0.0;
  int64_t n_pos = 0;
  for (size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] != 1) continue;
    ++n_pos;
    for (int d = 0; d < dims; ++d)
      total += huber(preds[a * static_cast<size_t>(dims) + d] -
                         targets[a * static_cast<size_t>(dims) + d],
                     beta);
  }
  return n_pos > 0 ? total / static_cast<double>(n_pos) : 0.0;
}

double kd_kl(const dvec& zt, const dvec& zs, int64_t rows, int cols, double temperature) {
  dvec p = softmax_lastaxis(zt, rows, cols, temperature, nullptr);
  dvec q = softmax_lastaxis(zs, rows, cols, temperature, nullptr);
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double kl = 0.0;
    for (int c = 0; c < cols; ++c) {
      double pi = p[static_cast<size_t>(r * cols + c)];
      double qi = q[static_cast<size_t>(r * cols + c)];
      if (pi > 0.0) kl += pi * (std::log(pi) - std::log(qi));
    }
    total += kl;
  }
  return total / static_cast<double>(rows);
}

dvec attention_row(const dvec& q, const dvec& k, const dvec& v, int A, int d,
                   const std::vector<uint8_t>& valid, dvec* weights_out) {
  dvec scores(static_cast<size_t>(A), 0.0);
  double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (int a = 0; a < A; ++a) {
    double acc = 0.0;
    for (int i = 0; i < d; ++i) acc += q[i] * k[static_cast<size_t>(a) * d + i];
    scores[static_cast<size_t>(a)] = acc * scale;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (int a = 0; a < A; ++a)
    if (valid[static_cast<size_t>(a)]) mx = std::max(mx, scores[static_cast<size_t>(a)]);
  double denom = 0.0;
  dvec wgt(static_cast<size_t>(A), 0.0);
  for (int a = 0; a < A; ++a) {
    if (!valid[static_cast<size_t>(a)]) continue;
    wgt[static_cast<size_t>(a)] = std::exp(scores[static_cast<size_t>(a)] - mx);
    denom += wgt[static_cast<size_t>(a)];
  }
  for (int a = 0; a < A; ++a) wgt[static_cast<size_t>(a)] /= denom;
  if (weights_out) *weights_out = wgt;
  dvec out(static_cast<size_t>(d), 0.0);
  for (int a = 0; a < A; ++a) {
    if (!valid[static_cast<size_t>(a)]) continue;
    for (int i = 0; i < d; ++i) out[i] += wgt[static_cast<size_t>(a)] * v[static_cast<size_t>(a) * d + i];
  }
  return out;
}

namespace {

bool point_in_box(double px, double py, const RefBox& b) {
  double c = std::cos(b.theta), s = std::sin(b.theta);
  double dx = px - b.x, dy = py - b.y;
  // rotate into box frame: l along heading, w across
  double lx = c * dx + s * dy;
  double ly = -s * dx + c * dy;
  return std::fabs(lx) <= b.l * 0.5 && std::fabs(ly) <= b.w * 0.5;
}

void box_bounds(const RefBox& b, double& xmin, double& xmax, double& ymin, double& ymax) {
  double c = std::cos(b.theta), s = std::sin(b.theta);
  double ex = std::fabs(c) * b.l * 0.5 + std::fabs(s) * b.w * 0.5;
  double ey = std::fabs(s) * b.l * 0.5 + std::fabs(c) * b.w * 0.5;
  xmin = b.x - ex;
  xmax = b.x + ex;
  ymin = b.y - ey;
  ymax = b.y + ey;
}

}  // namespace

double iou_monte_carlo(const RefBox& a, const RefBox& b, int64_t samples, uint64_t seed) {
  double axmin, axmax, aymin, aymax, bxmin, bxmax, bymin, bymax;
  box_bounds(a, axmin, axmax, aymin, aymax);
  box_bounds(b, bxmin, bxmax, bymin, bymax);
  double xmin = std::min(axmin, bxmin), xmax = std::max(axmax, bxmax);
  double ymin = std::min(aymin, bymin), ymax = std::max(aymax, bymax);
  int64_t grid = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(samples))));
  if (grid * grid != samples)
    throw std::invalid_argument("iou_monte_carlo: samples must be a perfect square");
  std::mt19937_64 rng(seed);
  auto uni = [&rng]() { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  double cw = (xmax - xmin) / static_cast<double>(grid);
  double ch = (ymax - ymin) / static_cast<double>(grid);
  int64_t n_a = 0, n_b = 0, n_ab = 0;
  for (int64_t gy = 0; gy < grid; ++gy)
    for (int64_t gx = 0; gx < grid; ++gx) {
      double px = xmin + (static_cast<double>(gx) + uni()) * cw;
      double py = ymin + (static_cast<double>(gy) + uni()) * ch;
      bool ia = point_in_box(px, py, a);
      bool ib = point_in_box(px, py, b);
      n_a += ia;
      n_b += ib;
      n_ab += ia && ib;
    }
  int64_t n_union = n_a + n_b - n_ab;
  if (n_union == 0) return 0.0;
  return static_cast<double>(n_ab) / static_cast<double>(n_union);
}

std::vector<int> nms_bruteforce(const std::vector<RefDet>& dets, double iou_thresh,
                                double score_thresh,
                                const std::function<double(const RefDet&, const RefDet&)>& iou) {
  std::vector<int> order;
  for (int i = 0; i < static_cast<int>(dets.size()); ++i)
    if (dets[static_cast<size_t>(i)].score >= score_thresh) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    const RefDet& a = dets[static_cast<size_t>(i)];
    const RefDet& b = dets[static_cast<size_t>(j)];
    if (a.score != b.score) return a.score > b.score;
    if (a.x != b.x) return a.x < b.x;
    return a.y < b.y;
  });
  std::vector<uint8_t> suppressed(dets.size(), 0);
  std::vector<int> keep;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    int i = order[oi];
    if (suppressed[static_cast<size_t>(i)]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      int j = order[oj];
      if (suppressed[static_cast<size_t>(j)]) continue;
      if (iou(dets[static_cast<size_t>(i)], dets[static_cast<size_t>(j)]) > iou_thresh)
        suppressed[static_cast<size_t>(j)] = 1;
    }
  }
  return keep;
}

double ap_bruteforce(const std::vector<uint8_t>& tp_flags, int n_gt) {
  if (n_gt <= 0) throw std::invalid_argument("ap_bruteforce: n_gt must be positive");
  size_t n = tp_flags.size();
  if (n == 0) return 0.0;
  // precision/recall after each ranked detection
  std::vector<double> prec(n), rec(n);
  int tp = 0;
  for (size_t i = 0; i < n; ++i) {
    tp += tp_flags[i] ? 1 : 0;
    prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    rec[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  // all-point interpolation: each TP contributes max precision at recall >= its own
  double ap = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (!tp_flags[i]) continue;
    double pmax = 0.0;
    for (size_t j = 0; j < n; ++j)
      if (rec[j] >= rec[i]) pmax = std::max(pmax, prec[j]);
    ap += pmax / static_cast<double>(n_gt);
  }
  return ap;
}

}  // namespace coopref
