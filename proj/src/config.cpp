#include "coopercept/config.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace coopercept {

namespace {

std::string fmt_f(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
std::string fmt_i(int64_t v) { return std::to_string(v); }
std::string fmt_b(bool v) { return v ? "true" : "false"; }
std::string fmt_u64(uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%" PRIu64, v);
  return buf;
}
std::string fmt_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}
std::string fmt_doubles(const std::vector<double>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += fmt_f(v[i]);
  }
  return s;
}

double parse_f(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double d;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "': not a number: '" + v + "'");
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key '" + key + "': trailing characters in '" + v + "'");
  return d;
}
int64_t parse_i(const std::string& key, const std::string& v) {
  size_t pos = 0;
  long long d;
  try {
    d = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "': not an integer: '" + v + "'");
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key '" + key + "': trailing characters in '" + v + "'");
  return d;
}
uint64_t parse_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  unsigned long long d;
  try {
    d = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "': not an unsigned integer: '" + v + "'");
  }
  if (pos != v.size())
    throw std::invalid_argument("config: key '" + key + "': trailing characters in '" + v + "'");
  return d;
}
bool parse_b(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key + "': expected true/false, got '" + v + "'");
}
std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<int>(parse_i(key, item)));
  return out;
}
std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
  std::vector<double> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(parse_f(key, item));
  return out;
}

struct KeyDef {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> t;
    auto add = [&t](const std::string& k, std::function<std::string(const RunConfig&)> g,
                    std::function<void(RunConfig&, const std::string&)> s) {
      t.push_back({k, std::move(g), std::move(s)});
    };
#define F_STR(key, field)                                              \
  add(key, [](const RunConfig& c) { return c.field; },                 \
      [](RunConfig& c, const std::string& v) { c.field = v; })
#define F_INT(key, field)                                              \
  add(key, [](const RunConfig& c) { return fmt_i(c.field); },          \
      [](RunConfig& c, const std::string& v) {                         \
        c.field = static_cast<decltype(c.field)>(parse_i(key, v));     \
      })
#define F_DBL(key, field)                                              \
  add(key, [](const RunConfig& c) { return fmt_f(c.field); },          \
      [](RunConfig& c, const std::string& v) {                         \
        c.field = static_cast<decltype(c.field)>(parse_f(key, v));     \
      })
#define F_BOOL(key, field)                                             \
  add(key, [](const RunConfig& c) { return fmt_b(c.field); },          \
      [](RunConfig& c, const std::string& v) { c.field = parse_b(key, v); })

    // Setting the preset key applies the whole preset, so a partial config
    // file can start from one and override individual keys after it (a full
    // dump lists preset first, so round-trips stay exact).
    add("preset", [](const RunConfig& c) { return c.preset; },
        [](RunConfig& c, const std::string& v) { c.apply_preset(v); });
    add("seed", [](const RunConfig& c) { return fmt_u64(c.seed); },
        [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); });
    F_STR("strategy", strategy);
    F_STR("data_dir", data_dir);
    F_STR("out_dir", out_dir);
    F_INT("n_frames", n_frames);
    F_INT("threads", threads);

    F_INT("scene.n_vehicles", scene.n_vehicles);
    F_INT("scene.n_agents", scene.n_agents);
    F_BOOL("scene.roadside_unit", scene.roadside_unit);
    F_DBL("scene.x_min", scene.x_min);
    F_DBL("scene.x_max", scene.x_max);
    F_DBL("scene.y_min", scene.y_min);
    F_DBL("scene.y_max", scene.y_max);
    add("scene.lane_ys", [](const RunConfig& c) { return fmt_doubles(c.scene.lane_ys); },
        [](RunConfig& c, const std::string& v) { c.scene.lane_ys = parse_doubles("scene.lane_ys", v); });
    F_DBL("scene.azimuth_step_deg", scene.azimuth_step_deg);
    F_INT("scene.rings_vehicle", scene.rings_vehicle);
    F_INT("scene.rings_infra", scene.rings_infra);
    F_DBL("scene.elev_min_vehicle_deg", scene.elev_min_vehicle_deg);
    F_DBL("scene.elev_max_vehicle_deg", scene.elev_max_vehicle_deg);
    F_DBL("scene.elev_min_infra_deg", scene.elev_min_infra_deg);
    F_DBL("scene.elev_max_infra_deg", scene.elev_max_infra_deg);
    F_DBL("scene.max_range", scene.max_range);
    F_DBL("scene.noise_sigma", scene.noise_sigma);
    F_DBL("scene.sensor_height_vehicle", scene.sensor_height_vehicle);
    F_DBL("scene.sensor_height_infra", scene.sensor_height_infra);

    F_DBL("voxel.x_min", voxels.x_min);
    F_DBL("voxel.x_max", voxels.x_max);
    F_DBL("voxel.y_min", voxels.y_min);
    F_DBL("voxel.y_max", voxels.y_max);
    F_DBL("voxel.z_min", voxels.z_min);
    F_DBL("voxel.z_max", voxels.z_max);
    F_DBL("voxel.size_xy", voxels.voxel_xy);
    F_DBL("voxel.size_z", voxels.voxel_z);
    F_INT("voxel.max_points_per_pillar", voxels.max_points_per_pillar);
    F_INT("voxel.max_pillars", voxels.max_pillars);

    add("model.stage_channels", [](const RunConfig& c) { return fmt_ints(c.stage_channels); },
        [](RunConfig& c, const std::string& v) {
          c.stage_channels = parse_ints("model.stage_channels", v);
        });
    add("model.blocks_teacher", [](const RunConfig& c) { return fmt_ints(c.blocks_teacher); },
        [](RunConfig& c, const std::string& v) {
          c.blocks_teacher = parse_ints("model.blocks_teacher", v);
        });
    add("model.blocks_student", [](const RunConfig& c) { return fmt_ints(c.blocks_student); },
        [](RunConfig& c, const std::string& v) {
          c.blocks_student = parse_ints("model.blocks_student", v);
        });
    F_INT("fusion.model_dim", fusion_dim);
    F_INT("fusion.heads", fusion_heads);
    F_BOOL("fusion.ego_query", ego_query);
    F_DBL("channel.range_m", channel.comm_range_m);
    F_INT("channel.rate", channel.compression_rate);

    F_DBL("anchor.w", anchors.w);
    F_DBL("anchor.l", anchors.l);
    F_DBL("anchor.h", anchors.h);
    F_DBL("anchor.z_center", anchors.z_center);
    F_DBL("assign.pos_iou", pos_iou);
    F_DBL("assign.neg_iou", neg_iou);
    F_DBL("decode.score_thresh", score_thresh);
    F_DBL("decode.nms_iou", nms_iou);

    F_DBL("kd.temperature", kd.temperature);
    F_DBL("kd.lambda_det", kd.lambda_det);
    F_DBL("kd.lambda_kd", kd.lambda_kd);
    F_BOOL("kd.spatial_view", kd.spatial_view);

    F_INT("train.epochs", train.epochs);
    F_DBL("train.lr", train.lr);
    F_INT("train.lr_step_epochs", train.lr_step_epochs);
    F_DBL("train.lr_decay", train.lr_decay);

    F_BOOL("ablation.use_msa", use_msa);
    F_BOOL("ablation.use_sparse", use_sparse);
#undef F_STR
#undef F_INT
#undef F_DBL
#undef F_BOOL
    return t;
  }();
  return defs;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& d : key_table()) out.push_back(d.key);
  return out;
}

int RunConfig::feature_stride() const {
  size_t n = stage_channels.size();
  if (n < 3) throw std::invalid_argument("RunConfig: need >= 3 encoder stages");
  return 1 << (n - 3);  // down 2^(n-1), neck up x4
}

void RunConfig::validate() const {
  if (strategy != "none" && strategy != "late" && strategy != "early" && strategy != "ahd")
    throw std::invalid_argument("RunConfig: unknown strategy '" + strategy + "'");
  voxels.validate();
  (void)feature_stride();
  if (fusion_heads < 1 || fusion_dim < fusion_heads)
    throw std::invalid_argument("RunConfig: bad fusion dims");
  if (channel.compression_rate < 1)
    throw std::invalid_argument("RunConfig: compression rate must be >= 1");
  int neck = stage_channels[stage_channels.size() - 2] + stage_channels.back() / 2;
  if (neck % channel.compression_rate != 0)
    throw std::invalid_argument("RunConfig: compression rate " +
                                std::to_string(channel.compression_rate) +
                                " does not divide feature width " + std::to_string(neck));
  if (kd.temperature <= 0.0f) throw std::invalid_argument("RunConfig: kd.temperature must be > 0");
  if (kd.lambda_det < 0.0f || kd.lambda_kd < 0.0f)
    throw std::invalid_argument("RunConfig: loss weights must be >= 0");
  if (train.epochs < 0 || train.lr <= 0.0f)
    throw std::invalid_argument("RunConfig: bad training parameters");
}

void RunConfig::apply_preset(const std::string& name) {
  preset = name;
  if (name == "paper") {
    voxels = VoxelConfig{};  // +-140.8 x +-38.4, 0.4 m cells
    stage_channels = {32, 64, 128, 256, 256};
    blocks_teacher.clear();
    blocks_student.clear();
    fusion_dim = 256;
    fusion_heads = 3;
    channel.compression_rate = 32;
    channel.comm_range_m = 70.0;
    scene = sim::SceneGenConfig{};
    scene.n_vehicles = 12;
    scene.n_agents = 3;
    scene.x_min = -60.0;
    scene.x_max = 60.0;
    scene.y_min = -12.0;
    scene.y_max = 12.0;
    train.epochs = 40;
    train.lr_step_epochs = 20;
  } else if (name == "tiny") {
    voxels = VoxelConfig{};
    voxels.x_min = -9.6;
    voxels.x_max = 9.6;
    voxels.y_min = -9.6;
    voxels.y_max = 9.6;
    voxels.max_points_per_pillar = 16;
    voxels.max_pillars = 2000;
    stage_channels = {8, 16, 32, 32, 32};
    blocks_teacher.clear();
    blocks_student.clear();
    fusion_dim = 32;
    fusion_heads = 3;
    channel.compression_rate = 16;
    channel.comm_range_m = 70.0;
    scene = sim::SceneGenConfig{};
    scene.n_vehicles = 5;
    scene.n_agents = 3;
    scene.x_min = -9.6;
    scene.x_max = 9.6;
    scene.y_min = -9.6;
    scene.y_max = 9.6;
    scene.lane_ys = {-2.2, 2.2};
    scene.azimuth_step_deg = 1.0;
    scene.rings_vehicle = 10;
    scene.rings_infra = 14;
    scene.max_range = 40.0;
    train.epochs = 20;
    train.lr_step_epochs = 12;
  } else {
    throw std::invalid_argument("RunConfig: unknown preset '" + name + "' (expected paper|tiny)");
  }
}

RunConfig RunConfig::for_preset(const std::string& name, uint64_t seed_) {
  RunConfig c;
  c.apply_preset(name);
  c.seed = seed_;
  return c;
}

void RunConfig::set_key(const std::string& key, const std::string& value) {
  for (const auto& d : key_table()) {
    if (d.key == key) {
      d.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& d : key_table()) {
    out += d.key;
    out += '=';
    out += d.get(*this);
    out += '\n';
  }
  return out;
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos) continue;
    size_t end = line.find_last_not_of(" \t\r");
    std::string s = line.substr(start, end - start + 1);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + s + "'");
    try {
      set_key(s.substr(0, eq), s.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("config: cannot open " + path + " for writing");
  out << dump();
  if (!out) throw std::runtime_error("config: write failed for " + path);
}

}  // namespace coopercept
