#include "coopercept/lidar_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace coopercept::sim {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kDeg = geom::kPi / 180.0;

const char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string b64_encode(const uint8_t* data, size_t n) {
  std::string out;
  out.reserve(((n + 2) / 3) * 4);
  size_t i = 0;
  for (; i + 3 <= n; i += 3) {
    uint32_t v = (uint32_t(data[i]) << 16) | (uint32_t(data[i + 1]) << 8) | data[i + 2];
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back(kB64Alphabet[v & 63]);
  }
  size_t rem = n - i;
  if (rem == 1) {
    uint32_t v = uint32_t(data[i]) << 16;
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    uint32_t v = (uint32_t(data[i]) << 16) | (uint32_t(data[i + 1]) << 8);
    out.push_back(kB64Alphabet[(v >> 18) & 63]);
    out.push_back(kB64Alphabet[(v >> 12) & 63]);
    out.push_back(kB64Alphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<uint8_t> b64_decode(const std::string& s) {
  if (s.size() % 4 != 0) throw std::invalid_argument("base64: length not a multiple of 4");
  static int8_t rev[256];
  static bool init = [] {
    std::fill(std::begin(rev), std::end(rev), int8_t(-1));
    for (int i = 0; i < 64; ++i) rev[static_cast<unsigned char>(kB64Alphabet[i])] = int8_t(i);
    return true;
  }();
  (void)init;
  std::vector<uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i < s.size(); i += 4) {
    int pad = 0;
    uint32_t v = 0;
    for (int k = 0; k < 4; ++k) {
      char c = s[i + k];
      if (c == '=') {
        if (i + 4 != s.size() || k < 2) throw std::invalid_argument("base64: bad padding");
        ++pad;
        v <<= 6;
        continue;
      }
      if (pad > 0) throw std::invalid_argument("base64: data after padding");
      int8_t d = rev[static_cast<unsigned char>(c)];
      if (d < 0)
        throw std::invalid_argument("base64: invalid character at offset " + std::to_string(i + k));
      v = (v << 6) | uint32_t(d);
    }
    out.push_back(uint8_t((v >> 16) & 0xff));
    if (pad < 2) out.push_back(uint8_t((v >> 8) & 0xff));
    if (pad < 1) out.push_back(uint8_t(v & 0xff));
  }
  return out;
}

std::string encode_points(const geom::PointCloud& pc) {
  static_assert(sizeof(float) == 4);
  if (pc.xyz.empty()) return std::string();
  return b64_encode(reinterpret_cast<const uint8_t*>(pc.xyz.data()), pc.xyz.size() * 4);
}

geom::PointCloud decode_points(const std::string& s) {
  auto bytes = b64_decode(s);
  if (bytes.size() % 12 != 0)
    throw std::invalid_argument("frame: points payload is not a whole number of xyz triplets (" +
                                std::to_string(bytes.size()) + " bytes)");
  geom::PointCloud pc;
  pc.xyz.resize(bytes.size() / 4);
  if (!bytes.empty()) std::memcpy(pc.xyz.data(), bytes.data(), bytes.size());
  return pc;
}

}  // namespace

void SceneFrame::validate() const {
  if (agents.empty()) throw std::invalid_argument("frame: must contain at least one agent");
  for (const auto& a : agents) {
    if (!std::isfinite(a.pose.x) || !std::isfinite(a.pose.y) || !std::isfinite(a.pose.z) ||
        !std::isfinite(a.pose.yaw))
      throw std::invalid_argument("frame: non-finite pose for agent " + std::to_string(a.id));
    for (float v : a.cloud.xyz)
      if (!std::isfinite(v))
        throw std::invalid_argument("frame: non-finite point for agent " + std::to_string(a.id));
  }
  for (const auto& b : gt_boxes) b.validate();
}

double ray_box_hit(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
                   const geom::Box7& box) {
  // rotate the ray into the box frame; the box becomes an axis-aligned slab
  double c = std::cos(box.theta), s = std::sin(box.theta);
  double ox = origin[0] - box.x, oy = origin[1] - box.y, oz = origin[2] - box.z;
  double lo[3] = {c * ox + s * oy, -s * ox + c * oy, oz};
  double ld[3] = {c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1], dir[2]};
  double half[3] = {box.l * 0.5, box.w * 0.5, box.h * 0.5};
  double tmin = 0.0, tmax = kInf;
  for (int i = 0; i < 3; ++i) {
    if (std::fabs(ld[i]) < 1e-15) {
      if (lo[i] < -half[i] || lo[i] > half[i]) return kInf;
      continue;
    }
    double t1 = (-half[i] - lo[i]) / ld[i];
    double t2 = (half[i] - lo[i]) / ld[i];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return kInf;
  }
  // tmin==0 means the origin is inside the box; no surface in front of it
  return tmin > 0.0 ? tmin : kInf;
}

geom::PointCloud cast_rays(const geom::Pose& sensor, int rings, double elev_min_deg,
                           double elev_max_deg, double azimuth_step_deg, double max_range,
                           const std::vector<geom::Box7>& boxes, int skip_box,
                           double noise_sigma, Rng& rng) {
  if (rings < 1) throw std::invalid_argument("cast_rays: rings must be >= 1");
  if (azimuth_step_deg <= 0.0) throw std::invalid_argument("cast_rays: azimuth step must be > 0");
  int n_az = static_cast<int>(std::floor(360.0 / azimuth_step_deg + 1e-9));
  std::array<double, 3> origin = {sensor.x, sensor.y, sensor.z};
  geom::PointCloud out;
  double cy = std::cos(sensor.yaw), sy = std::sin(sensor.yaw);
  for (int r = 0; r < rings; ++r) {
    double elev = (rings == 1)
                      ? 0.5 * (elev_min_deg + elev_max_deg) * kDeg
                      : (elev_min_deg + (elev_max_deg - elev_min_deg) * r / (rings - 1)) * kDeg;
    double ce = std::cos(elev), se = std::sin(elev);
    for (int a = 0; a < n_az; ++a) {
      double az = a * azimuth_step_deg * kDeg + sensor.yaw;
      std::array<double, 3> dir = {ce * std::cos(az), ce * std::sin(az), se};
      double best = max_range;
      for (size_t b = 0; b < boxes.size(); ++b) {
        if (static_cast<int>(b) == skip_box) continue;
        double t = ray_box_hit(origin, dir, boxes[b]);
        if (t < best) best = t;
      }
      if (dir[2] < 0.0) {
        double t = -origin[2] / dir[2];  // ground plane z = 0
        if (t > 0.0 && t < best) best = t;
      }
      if (best >= max_range) continue;
      if (noise_sigma > 0.0) best = std::max(0.0, best + noise_sigma * rng.normal());
      double wx = origin[0] + best * dir[0];
      double wy = origin[1] + best * dir[1];
      double wz = origin[2] + best * dir[2];
      // into the sensor's planar frame (z shared with world)
      double dx = wx - sensor.x, dy = wy - sensor.y;
      out.push(static_cast<float>(cy * dx + sy * dy), static_cast<float>(-sy * dx + cy * dy),
               static_cast<float>(wz));
    }
  }
  return out;
}

SceneFrame generate_scene(const SceneGenConfig& cfg, uint64_t seed) {
  if (cfg.n_vehicles < 0 || cfg.n_agents < 0)
    throw std::invalid_argument("generate_scene: negative counts");
  if (cfg.n_agents > cfg.n_vehicles)
    throw std::invalid_argument("generate_scene: n_agents (" + std::to_string(cfg.n_agents) +
                                ") exceeds n_vehicles (" + std::to_string(cfg.n_vehicles) + ")");
  if (cfg.n_agents == 0 && !cfg.roadside_unit)
    throw std::invalid_argument("generate_scene: no agents requested");
  if (cfg.lane_ys.empty()) throw std::invalid_argument("generate_scene: need at least one lane");

  Rng rng(mix_seed(seed, "scene"));
  SceneFrame f;
  f.frame_id = 0;

  // place vehicle boxes on lanes, rejecting overlaps
  for (int v = 0; v < cfg.n_vehicles; ++v) {
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_place_retries && !placed; ++attempt) {
      geom::Box7 b;
      int lane = rng.uniform_int(0, static_cast<int>(cfg.lane_ys.size()) - 1);
      bool forward = rng.uniform() < 0.5;
      b.w = 1.6 + rng.uniform(-0.15, 0.15);
      b.l = 3.9 + rng.uniform(-0.35, 0.35);
      b.h = 1.56 + rng.uniform(-0.1, 0.1);
      b.x = rng.uniform(cfg.x_min + b.l, cfg.x_max - b.l);
      b.y = cfg.lane_ys[static_cast<size_t>(lane)] + rng.uniform(-0.3, 0.3);
      b.z = b.h * 0.5;
      b.theta = (forward ? 0.0 : geom::kPi) + rng.uniform(-0.05, 0.05);
      b.theta = geom::wrap_angle(b.theta);
      bool clash = false;
      for (const auto& other : f.gt_boxes) {
        // padded copy keeps a physical gap between parked vehicles
        geom::Box7 pa = b, pb = other;
        pa.w += 0.6;
        pa.l += 0.6;
        pb.w += 0.6;
        pb.l += 0.6;
        if (geom::rotated_iou_bev(pa, pb) > 0.0) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        f.gt_boxes.push_back(b);
        placed = true;
      }
    }
    if (!placed)
      throw std::runtime_error("generate_scene: could not place vehicle " + std::to_string(v) +
                               " after " + std::to_string(cfg.max_place_retries) + " retries");
  }

  // sensors ride on the first n_agents vehicles; ego is agent 0
  int next_id = 0;
  for (int a = 0; a < cfg.n_agents; ++a) {
    const auto& b = f.gt_boxes[static_cast<size_t>(a)];
    AgentObs obs;
    obs.id = next_id++;
    obs.kind = AgentKind::Vehicle;
    obs.pose = {b.x, b.y, cfg.sensor_height_vehicle, b.theta};
    Rng ray_rng(mix_seed(seed, "rays-agent-" + std::to_string(obs.id)));
    obs.cloud = cast_rays(obs.pose, cfg.rings_vehicle, cfg.elev_min_vehicle_deg,
                          cfg.elev_max_vehicle_deg, cfg.azimuth_step_deg, cfg.max_range,
                          f.gt_boxes, a, cfg.noise_sigma, ray_rng);
    f.agents.push_back(std::move(obs));
  }
  if (cfg.roadside_unit) {
    AgentObs obs;
    obs.id = next_id++;
    obs.kind = AgentKind::Infrastructure;
    double rx = rng.uniform(cfg.x_min + 2.0, cfg.x_max - 2.0);
    double ry = cfg.y_max - 1.0;
    obs.pose = {rx, ry, cfg.sensor_height_infra, std::atan2(-ry, -rx)};
    Rng ray_rng(mix_seed(seed, "rays-agent-" + std::to_string(obs.id)));
    obs.cloud = cast_rays(obs.pose, cfg.rings_infra, cfg.elev_min_infra_deg,
                          cfg.elev_max_infra_deg, cfg.azimuth_step_deg, cfg.max_range, f.gt_boxes,
                          -1, cfg.noise_sigma, ray_rng);
    f.agents.push_back(std::move(obs));
  }

  f.validate();
  return f;
}

void save_frame(const SceneFrame& f, const std::string& path) {
  f.validate();
  nlohmann::json j;
  j["version"] = 1;
  j["frame_id"] = f.frame_id;
  j["agents"] = nlohmann::json::array();
  for (const auto& a : f.agents) {
    nlohmann::json ja;
    ja["id"] = a.id;
    ja["kind"] = (a.kind == AgentKind::Vehicle) ? "V" : "I";
    ja["pose"] = {a.pose.x, a.pose.y, a.pose.z, a.pose.yaw};
    ja["points"] = encode_points(a.cloud);
    j["agents"].push_back(std::move(ja));
  }
  j["gt_boxes"] = nlohmann::json::array();
  for (const auto& b : f.gt_boxes) j["gt_boxes"].push_back({b.x, b.y, b.z, b.w, b.l, b.h, b.theta});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_frame: cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_frame: write failed for " + path);
}

SceneFrame load_frame(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_frame: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_frame: " + path + ": " + e.what());
  }
  auto need = [&](const nlohmann::json& obj, const char* key) -> const nlohmann::json& {
    if (!obj.contains(key))
      throw std::runtime_error("load_frame: " + path + ": missing field '" + key + "'");
    return obj.at(key);
  };
  if (need(j, "version").get<int>() != 1)
    throw std::runtime_error("load_frame: " + path + ": unsupported version " +
                             j["version"].dump());
  SceneFrame f;
  f.frame_id = need(j, "frame_id").get<int>();
  for (const auto& ja : need(j, "agents")) {
    AgentObs a;
    a.id = need(ja, "id").get<int>();
    std::string kind = need(ja, "kind").get<std::string>();
    if (kind == "V")
      a.kind = AgentKind::Vehicle;
    else if (kind == "I")
      a.kind = AgentKind::Infrastructure;
    else
      throw std::runtime_error("load_frame: " + path + ": agent kind must be \"V\" or \"I\", got '" +
                               kind + "'");
    const auto& jp = need(ja, "pose");
    if (!jp.is_array() || jp.size() != 4)
      throw std::runtime_error("load_frame: " + path + ": pose must be [x,y,z,yaw]");
    a.pose = {jp[0].get<double>(), jp[1].get<double>(), jp[2].get<double>(), jp[3].get<double>()};
    a.cloud = decode_points(need(ja, "points").get<std::string>());
    f.agents.push_back(std::move(a));
  }
  for (const auto& jb : need(j, "gt_boxes")) {
    if (!jb.is_array() || jb.size() != 7)
      throw std::runtime_error("load_frame: " + path + ": gt box must be [x,y,z,w,l,h,theta]");
    geom::Box7 b{jb[0].get<double>(), jb[1].get<double>(), jb[2].get<double>(),
                 jb[3].get<double>(), jb[4].get<double>(), jb[5].get<double>(),
                 jb[6].get<double>()};
    f.gt_boxes.push_back(b);
  }
  f.validate();
  return f;
}

geom::PointCloud fuse_clouds_into_ego(const SceneFrame& f, int ego_index) {
  if (ego_index < 0 || ego_index >= static_cast<int>(f.agents.size()))
    throw std::invalid_argument("fuse_clouds_into_ego: bad ego index " + std::to_string(ego_index));
  const auto& ego = f.agents[static_cast<size_t>(ego_index)];
  geom::PointCloud fused = ego.cloud;
  for (size_t i = 0; i < f.agents.size(); ++i) {
    if (static_cast<int>(i) == ego_index) continue;
    auto t = geom::relative_transform(ego.pose, f.agents[i].pose);
    fused.append(geom::transform_points(f.agents[i].cloud, t));
  }
  return fused;
}

void save_dataset(const std::vector<SceneFrame>& frames, const std::string& dir, uint64_t seed,
                  const std::string& label) {
  std::filesystem::create_directories(std::filesystem::path(dir) / "frames");
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["n_frames"] = frames.size();
  manifest["seed"] = seed;
  manifest["label"] = label;
  auto names = nlohmann::json::array();
  for (const auto& f : frames) {
    char name[64];
    std::snprintf(name, sizeof(name), "frames/frame_%05d.json", f.frame_id);
    save_frame(f, (std::filesystem::path(dir) / name).string());
    names.push_back(name);
  }
  manifest["frames"] = std::move(names);
  std::string mpath = (std::filesystem::path(dir) / "manifest.json").string();
  std::ofstream out(mpath, std::ios::binary);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + mpath + " for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_dataset: write failed for " + mpath);
}

std::vector<SceneFrame> load_dataset(const std::string& dir) {
  std::string mpath = (std::filesystem::path(dir) / "manifest.json").string();
  std::ifstream in(mpath, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + mpath);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("load_dataset: " + mpath + ": " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"].get<int>() != 1)
    throw std::runtime_error("load_dataset: " + mpath + ": unsupported manifest version");
  if (!manifest.contains("frames") || !manifest["frames"].is_array())
    throw std::runtime_error("load_dataset: " + mpath + ": missing 'frames' array");
  std::vector<SceneFrame> frames;
  for (const auto& name : manifest["frames"])
    frames.push_back(load_frame((std::filesystem::path(dir) / name.get<std::string>()).string()));
  return frames;
}

}  // namespace coopercept::sim
