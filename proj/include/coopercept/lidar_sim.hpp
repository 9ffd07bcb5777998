#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "coopercept/geometry.hpp"
#include "coopercept/rng.hpp"

namespace coopercept::sim {

enum class AgentKind { Vehicle, Infrastructure };

// One sensor-equipped agent: pose in world (z = sensor mount height; the
// agent frame itself shares the world z origin so planar transforms are
// exact), and its point cloud expressed in the agent's own frame.
struct AgentObs {
  int id = 0;
  AgentKind kind = AgentKind::Vehicle;
  geom::Pose pose;
  geom::PointCloud cloud;
};

struct SceneFrame {
  int frame_id = 0;
  std::vector<AgentObs> agents;
  std::vector<geom::Box7> gt_boxes;  // world frame

  void validate() const;  // >=1 agent, finite coordinates, valid boxes
};

struct SceneGenConfig {
  int n_vehicles = 8;        // ground-truth boxes; every vehicle gets one
  int n_agents = 3;          // sensor-equipped vehicles (ego = first agent)
  bool roadside_unit = true; // add one infrastructure sensor
  double x_min = -30.0, x_max = 30.0;
  double y_min = -12.0, y_max = 12.0;
  std::vector<double> lane_ys = {-2.0, 2.0};  // lane centerlines along x
  double azimuth_step_deg = 0.5;
  int rings_vehicle = 16;
  int rings_infra = 32;
  double elev_min_vehicle_deg = -15.0, elev_max_vehicle_deg = 15.0;
  double elev_min_infra_deg = -45.0, elev_max_infra_deg = 0.0;
  double max_range = 100.0;
  double noise_sigma = 0.0;  // optional Gaussian range jitter, off by default
  double sensor_height_vehicle = 1.6;
  double sensor_height_infra = 4.5;
  int max_place_retries = 200;
};

// Nearest forward intersection of a ray with an upright oriented box.
// Returns the hit distance along the unit direction, or +inf on miss.
double ray_box_hit(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                   const geom::Box7& box);

// Spin a ring x azimuth pattern from `sensor`, returning nearest hits against
// `boxes` and the z=0 ground plane, expressed in the sensor's planar frame.
// `skip_box` (index into boxes, or -1) suppresses self-returns.
geom::PointCloud cast_rays(const geom::Pose& sensor, int rings, double elev_min_deg,
                           double elev_max_deg, double azimuth_step_deg, double max_range,
                           const std::vector<geom::Box7>& boxes, int skip_box,
                           double noise_sigma, Rng& rng);

// Lays out non-overlapping vehicles on lanes, mounts sensors on the first
// n_agents of them (plus an optional roadside unit), and ray-casts each view.
SceneFrame generate_scene(const SceneGenConfig& cfg, uint64_t seed);

void save_frame(const SceneFrame& f, const std::string& path);
SceneFrame load_frame(const std::string& path);

// All agent clouds of a frame mapped into the ego agent's frame and merged
// (ego's own points first, then the others in agent order).
geom::PointCloud fuse_clouds_into_ego(const SceneFrame& f, int ego_index);

// Writes frames/frame_NNNNN.json plus a manifest.json into `dir` (created if
// missing). `seed` and `label` are recorded in the manifest for provenance.
void save_dataset(const std::vector<SceneFrame>& frames, const std::string& dir, uint64_t seed,
                  const std::string& label);
// Loads every frame listed by `dir`/manifest.json, in manifest order.
std::vector<SceneFrame> load_dataset(const std::string& dir);

}  // namespace coopercept::sim
