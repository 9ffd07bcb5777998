#include "coopercept/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <tuple>

namespace coopercept::geom {

double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  if (a > kPi) a -= 2.0 * kPi;
  return a;
}

double wrap_half_angle(double a) {
  a = std::fmod(a, kPi);
  if (a <= -kPi * 0.5) a += kPi;
  if (a > kPi * 0.5) a -= kPi;
  return a;
}

Mat3 Mat3::operator*(const Mat3& o) const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += m[static_cast<size_t>(3 * i + k)] * o.m[static_cast<size_t>(3 * k + j)];
      r.m[static_cast<size_t>(3 * i + j)] = acc;
    }
  return r;
}

Mat3 Mat3::inverse() const {
  const auto& a = m;
  double det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
               a[2] * (a[3] * a[7] - a[4] * a[6]);
  if (std::fabs(det) < 1e-12)
    throw std::invalid_argument("Mat3::inverse: singular matrix (det=" + std::to_string(det) +
                                ")");
  double inv = 1.0 / det;
  Mat3 r;
  r.m[0] = (a[4] * a[8] - a[5] * a[7]) * inv;
  r.m[1] = (a[2] * a[7] - a[1] * a[8]) * inv;
  r.m[2] = (a[1] * a[5] - a[2] * a[4]) * inv;
  r.m[3] = (a[5] * a[6] - a[3] * a[8]) * inv;
  r.m[4] = (a[0] * a[8] - a[2] * a[6]) * inv;
  r.m[5] = (a[2] * a[3] - a[0] * a[5]) * inv;
  r.m[6] = (a[3] * a[7] - a[4] * a[6]) * inv;
  r.m[7] = (a[1] * a[6] - a[0] * a[7]) * inv;
  r.m[8] = (a[0] * a[4] - a[1] * a[3]) * inv;
  return r;
}

void Mat3::apply(double x, double y, double& ox, double& oy) const {
  ox = m[0] * x + m[1] * y + m[2];
  oy = m[3] * x + m[4] * y + m[5];
}

Mat3 pose_to_world(const Pose& p) {
  double c = std::cos(p.yaw), s = std::sin(p.yaw);
  Mat3 r;
  r.m = {c, -s, p.x, s, c, p.y, 0.0, 0.0, 1.0};
  return r;
}

Mat3 relative_transform(const Pose& ego, const Pose& other) {
  return pose_to_world(ego).inverse() * pose_to_world(other);
}

void Box7::validate() const {
  if (!(w > 0.0) || !(l > 0.0) || !(h > 0.0))
    throw std::invalid_argument("Box7: non-positive extents w=" + std::to_string(w) +
                                " l=" + std::to_string(l) + " h=" + std::to_string(h));
}

std::array<std::array<double, 2>, 4> box_corners_bev(const Box7& b) {
  double c = std::cos(b.theta), s = std::sin(b.theta);
  double hl = b.l * 0.5, hw = b.w * 0.5;
  // local (along, across) corners in CCW order
  const double lc[4][2] = {{hl, -hw}, {hl, hw}, {-hl, hw}, {-hl, -hw}};
  std::array<std::array<double, 2>, 4> out{};
  for (int i = 0; i < 4; ++i) {
    out[static_cast<size_t>(i)][0] = b.x + c * lc[i][0] - s * lc[i][1];
    out[static_cast<size_t>(i)][1] = b.y + s * lc[i][0] + c * lc[i][1];
  }
  return out;
}

namespace {

using Poly = std::vector<std::array<double, 2>>;

double poly_area(const Poly& p) {
  double a = 0.0;
  size_t n = p.size();
  for (size_t i = 0; i < n; ++i) {
    size_t j = (i + 1) % n;
    a += p[i][0] * p[j][1] - p[j][0] * p[i][1];
  }
  return std::fabs(a) * 0.5;
}

// Sutherland-Hodgman: clip `poly` against the half-plane left of p1->p2.
Poly clip_by_edge(const Poly& poly, const std::array<double, 2>& p1,
                  const std::array<double, 2>& p2) {
  Poly out;
  size_t n = poly.size();
  if (n == 0) return out;
  auto side = [&](const std::array<double, 2>& q) {
    return (p2[0] - p1[0]) * (q[1] - p1[1]) - (p2[1] - p1[1]) * (q[0] - p1[0]);
  };
  for (size_t i = 0; i < n; ++i) {
    const auto& cur = poly[i];
    const auto& nxt = poly[(i + 1) % n];
    double sc = side(cur), sn = side(nxt);
    if (sc >= 0.0) out.push_back(cur);
    if ((sc > 0.0 && sn < 0.0) || (sc < 0.0 && sn > 0.0)) {
      double t = sc / (sc - sn);
      out.push_back({cur[0] + t * (nxt[0] - cur[0]), cur[1] + t * (nxt[1] - cur[1])});
    }
  }
  return out;
}

double intersection_area(const Box7& a, const Box7& b) {
  auto ca = box_corners_bev(a);
  auto cb = box_corners_bev(b);
  Poly poly(ca.begin(), ca.end());
  for (int i = 0; i < 4; ++i) {
    poly = clip_by_edge(poly, cb[static_cast<size_t>(i)], cb[static_cast<size_t>((i + 1) % 4)]);
    if (poly.empty()) return 0.0;
  }
  return poly_area(poly);
}

std::tuple<double, double, double, double, double> box_key(const Box7& b) {
  return {b.x, b.y, b.w, b.l, b.theta};
}

}  // namespace

double rotated_iou_bev(const Box7& a, const Box7& b) {
  a.validate();
  b.validate();
  // canonical argument order makes iou(a,b) == iou(b,a) bitwise
  const Box7* p = &a;
  const Box7* q = &b;
  if (box_key(b) < box_key(a)) std::swap(p, q);
  double inter = intersection_area(*p, *q);
  if (inter < 1e-12) return 0.0;
  double area_p = p->w * p->l;
  double area_q = q->w * q->l;
  double uni = area_p + area_q - inter;
  if (uni < 1e-12) return 0.0;
  return inter / uni;
}

std::vector<Detection> nms_bev(std::vector<Detection> dets, double iou_thresh,
                               double score_thresh) {
  std::vector<Detection> cand;
  for (const auto& d : dets)
    if (d.score >= score_thresh) cand.push_back(d);
  std::sort(cand.begin(), cand.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    return a.box.y < b.box.y;
  });
  std::vector<uint8_t> suppressed(cand.size(), 0);
  std::vector<Detection> keep;
  for (size_t i = 0; i < cand.size(); ++i) {
    if (suppressed[i]) continue;
    keep.push_back(cand[i]);
    for (size_t j = i + 1; j < cand.size(); ++j) {
      if (suppressed[j]) continue;
      if (rotated_iou_bev(cand[i].box, cand[j].box) > iou_thresh) suppressed[j] = 1;
    }
  }
  return keep;
}

PointCloud transform_points(const PointCloud& pc, const Mat3& m) {
  PointCloud out;
  out.xyz.resize(pc.xyz.size());
  size_t n = pc.size();
  for (size_t i = 0; i < n; ++i) {
    double x = pc.xyz[3 * i], y = pc.xyz[3 * i + 1];
    double ox, oy;
    m.apply(x, y, ox, oy);
    out.xyz[3 * i] = static_cast<float>(ox);
    out.xyz[3 * i + 1] = static_cast<float>(oy);
    out.xyz[3 * i + 2] = pc.xyz[3 * i + 2];  // planar transform: z preserved
  }
  return out;
}

Box7 transform_box(const Box7& b, const Mat3& m) {
  Box7 out = b;
  m.apply(b.x, b.y, out.x, out.y);
  double rot = std::atan2(m.m[3], m.m[0]);
  out.theta = wrap_angle(b.theta + rot);
  return out;
}

int points_in_box(const PointCloud& pc, const Box7& b) {
  double c = std::cos(b.theta), s = std::sin(b.theta);
  int count = 0;
  size_t n = pc.size();
  for (size_t i = 0; i < n; ++i) {
    double dx = pc.xyz[3 * i] - b.x;
    double dy = pc.xyz[3 * i + 1] - b.y;
    double dz = pc.xyz[3 * i + 2] - b.z;
    double lx = c * dx + s * dy;
    double ly = -s * dx + c * dy;
    if (std::fabs(lx) <= b.l * 0.5 && std::fabs(ly) <= b.w * 0.5 && std::fabs(dz) <= b.h * 0.5)
      ++count;
  }
  return count;
}

}  // namespace coopercept::geom
