#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace coopercept::geom {

inline constexpr double kPi = 3.14159265358979323846;

// Normalizes an angle to (-pi, pi].
double wrap_angle(double a);
// Normalizes to (-pi/2, pi/2] modulo pi (rectangle footprints are pi-periodic).
double wrap_half_angle(double a);

// Planar pose: x, y, yaw define the frame; z rides along untouched (sensor
// mount height for agents). All agent frames share the world z origin.
struct Pose {
  double x = 0.0, y = 0.0, z = 0.0, yaw = 0.0;
};

// Row-major 3x3 homogeneous planar transform.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  Mat3 operator*(const Mat3& o) const;
  Mat3 inverse() const;  // throws on singular matrix
  void apply(double x, double y, double& ox, double& oy) const;
};

Mat3 pose_to_world(const Pose& p);
// Maps coordinates in `other`'s frame into `ego`'s frame.
Mat3 relative_transform(const Pose& ego, const Pose& other);

// 7-DoF box: center (x,y,z), width w (across heading), length l (along
// heading), height h, yaw theta normalized to (-pi, pi].
struct Box7 {
  double x = 0, y = 0, z = 0, w = 0, l = 0, h = 0, theta = 0;
  void validate() const;  // throws on non-positive extents
};

struct Detection {
  Box7 box;
  float score = 0.0f;
  int agent_id = -1;
};

// BEV footprint corners, counter-clockwise.
std::array<std::array<double, 2>, 4> box_corners_bev(const Box7& b);

// Rotated BEV IoU via convex polygon clipping. Exactly symmetric in its
// arguments; degenerate intersections (area < 1e-12) return 0.
double rotated_iou_bev(const Box7& a, const Box7& b);

// Greedy NMS: order by (score desc, x asc, y asc), suppress IoU > iou_thresh,
// drop scores below score_thresh first.
std::vector<Detection> nms_bev(std::vector<Detection> dets, double iou_thresh,
                               double score_thresh);

// Flat xyz point storage.
struct PointCloud {
  std::vector<float> xyz;  // x0,y0,z0,x1,...

  size_t size() const { return xyz.size() / 3; }
  void push(float x, float y, float z) {
    xyz.push_back(x);
    xyz.push_back(y);
    xyz.push_back(z);
  }
  void append(const PointCloud& o) { xyz.insert(xyz.end(), o.xyz.begin(), o.xyz.end()); }
};

// Applies the planar transform to x,y; z passes through unchanged.
PointCloud transform_points(const PointCloud& pc, const Mat3& m);

// Applies a frame change to a box: center via m, yaw shifted by the
// transform's rotation. z unchanged.
Box7 transform_box(const Box7& b, const Mat3& m);

// Number of cloud points inside the 3D box (strict interior or boundary).
int points_in_box(const PointCloud& pc, const Box7& b);

}  // namespace coopercept::geom
