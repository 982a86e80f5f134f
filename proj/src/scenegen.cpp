#include "fedrsu/scenegen.hpp"

#include "fedrsu/binary_io.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

namespace fedrsu {

namespace {

constexpr double kBackgroundHeight = 4.0;  // meters of clutter above the ground threshold
constexpr double kGroundMargin = 0.05;

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

enum Split : std::uint64_t { kTrain = 0, kVal = 1, kTest = 2 };

std::uint64_t split_sample_seed(Split split, std::size_t index) {
  return static_cast<std::uint64_t>(split) * 1'000'000ULL + index;
}

}  // namespace

void ClientProfile::validate() const {
  require(!client_id.empty(), "client_id must be nonempty");
  require(num_train > 0, "num_train must be positive");
  require(num_val > 0, "num_val must be positive");
  require(num_test > 0, "num_test must be positive");
  require(points_per_frame > 0, "points_per_frame must be positive");
  require(perception_range > 0.0, "perception_range must be positive");
  require(num_objects >= 0, "num_objects must be nonnegative");
  require(min_speed >= 0.0 && max_speed >= min_speed, "object speed range must satisfy 0 <= min <= max");
  require(dynamic_point_ratio >= 0.0 && dynamic_point_ratio <= 1.0, "dynamic_point_ratio must be in [0,1]");
  require(position_noise_sigma >= 0.0, "position_noise_sigma must be nonnegative");
  require(ego_motion_sigma >= 0.0, "ego_motion_sigma must be nonnegative");
  require(pixel_noise_sigma >= 0.0, "pixel_noise_sigma must be nonnegative");
  require(max_yaw_rate_deg >= 0.0 && max_yaw_rate_deg <= 5.0, "max_yaw_rate_deg must be in [0,5]");
  require(std::isfinite(ground_threshold), "ground_threshold must be finite");
}

void FramePair::validate() const {
  require(frame_interval > 0.0, "frame_interval must be positive");
  require(all_finite(source) && all_finite(target), "point clouds must be finite");
  if (optical) {
    require(optical->rows() == source.rows(), "optical flow length must match source");
    require(out_of_view.size() == static_cast<std::size_t>(source.rows()), "out_of_view length must match source");
  }
  if (gt_flow) require(gt_flow->rows() == source.rows(), "gt_flow length must match source");
}

CameraModel overhead_camera(const ClientProfile& profile) {
  CameraModel cam;
  const double height = profile.perception_range + 10.0;
  // Camera axes: x right, y down, z along the viewing direction (world -z).
  cam.world_to_camera.rotation = Eigen::Vector3d(1.0, -1.0, -1.0).asDiagonal();
  cam.world_to_camera.translation = Eigen::Vector3d(0.0, 0.0, height);
  cam.fx = cam.fy = 0.9 * 0.5 * cam.height * height / profile.perception_range;
  cam.cx = 0.5 * cam.width;
  cam.cy = 0.5 * cam.height;
  return cam;
}

std::optional<Eigen::Vector2d> project_point(const CameraModel& cam, const Point3& p_world) {
  const Point3 p = cam.world_to_camera * p_world;
  if (p.z() <= 0.0) return std::nullopt;
  const double u = cam.fx * p.x() / p.z() + cam.cx;
  const double v = cam.fy * p.y() / p.z() + cam.cy;
  if (u < 0.0 || v < 0.0 || u >= cam.width || v >= cam.height) return std::nullopt;
  return Eigen::Vector2d(u, v);
}

OpticalFlowResult synth_optical_flow(const PointCloud& source, const FlowField& motion, const CameraModel& cam,
                                     double pixel_noise_sigma, std::uint64_t seed) {
  Rng rng(seed);
  OpticalFlowResult out;
  out.flow = OpticalFlow::Zero(source.rows(), 2);
  out.out_of_view.assign(static_cast<std::size_t>(source.rows()), 0);
  for (Eigen::Index i = 0; i < source.rows(); ++i) {
    const Point3 p = source.row(i).transpose();
    const Point3 q = p + motion.row(i).transpose();
    const auto a = project_point(cam, p);
    const auto b = project_point(cam, q);
    if (!a || !b) {
      out.out_of_view[static_cast<std::size_t>(i)] = 1;
      continue;
    }
    Eigen::Vector2d d = *b - *a;
    if (pixel_noise_sigma > 0.0) {
      d.x() += rng.normal(0.0, pixel_noise_sigma);
      d.y() += rng.normal(0.0, pixel_noise_sigma);
    }
    out.flow.row(i) = d.transpose();
  }
  return out;
}

FramePair generate_frame_pair(const ClientProfile& profile, std::uint64_t sample_seed) {
  profile.validate();
  Rng rng(derive_seed({profile.seed, hash_string(profile.client_id), sample_seed}));

  const int n = profile.points_per_frame;
  const int n_dynamic =
      profile.num_objects > 0 ? static_cast<int>(std::lround(profile.dynamic_point_ratio * n)) : 0;
  const int n_background = n - n_dynamic;
  const double range = profile.perception_range;
  const double floor_z = profile.ground_threshold + kGroundMargin;

  PointCloud source(n, 3);
  FlowField flow = FlowField::Zero(n, 3);

  for (int i = 0; i < n_background; ++i) {
    source.row(i) << rng.uniform(-range, range), rng.uniform(-range, range),
        rng.uniform(floor_z, floor_z + kBackgroundHeight);
  }

  int row = n_background;
  for (int o = 0; o < profile.num_objects; ++o) {
    const int count = n_dynamic / profile.num_objects + (o < n_dynamic % profile.num_objects ? 1 : 0);
    const double length = rng.uniform(1.5, 5.0);
    const double width = rng.uniform(1.5, 2.5);
    const double height = rng.uniform(1.5, 2.5);
    const double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const Point3 center(rng.uniform(-0.7 * range, 0.7 * range), rng.uniform(-0.7 * range, 0.7 * range),
                        floor_z + 0.5 * height);
    const double speed = rng.uniform(profile.min_speed, profile.max_speed);
    const double max_yaw = profile.max_yaw_rate_deg * std::numbers::pi / 180.0;
    const double dyaw = max_yaw > 0.0 ? rng.uniform(-max_yaw, max_yaw) : 0.0;

    const RigidTransform pose = RigidTransform::yaw(heading, center);
    PointCloud body(count, 3);
    for (int j = 0; j < count; ++j) {
      const Point3 local(rng.uniform(-0.5 * length, 0.5 * length), rng.uniform(-0.5 * width, 0.5 * width),
                         rng.uniform(-0.5 * height, 0.5 * height));
      body.row(j) = (pose * local).transpose();
    }
    const Point3 step = speed * kFrameInterval * Point3(std::cos(heading), std::sin(heading), 0.0);
    const RigidTransform motion = RigidTransform::yaw_about(dyaw, center, step);
    source.middleRows(row, count) = body;
    flow.middleRows(row, count) = flow_from_rigid(motion, body);
    row += count;
  }

  FramePair pair;
  PointCloud target = source + flow;

  if (profile.ego_motion_sigma > 0.0) {
    const double s = profile.ego_motion_sigma;
    auto ego = [&] {
      const Point3 t(rng.normal(0.0, s), rng.normal(0.0, s), rng.normal(0.0, 0.2 * s));
      return RigidTransform::yaw(rng.normal(0.0, 0.02 * s), t);
    };
    const RigidTransform ego_source = ego();
    const RigidTransform ego_target = ego();
    source = apply_rigid(ego_source, source);
    target = apply_rigid(ego_target, target);
    flow = target - source;
  }

  if (profile.has_camera) {
    const auto optical = synth_optical_flow(source, flow, overhead_camera(profile), profile.pixel_noise_sigma,
                                            derive_seed({profile.seed, sample_seed, hash_string("optical")}));
    pair.optical = optical.flow;
    pair.out_of_view = optical.out_of_view;
  }

  if (profile.position_noise_sigma > 0.0) {
    for (Eigen::Index i = 0; i < source.size(); ++i) source.data()[i] += rng.normal(0.0, profile.position_noise_sigma);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] += rng.normal(0.0, profile.position_noise_sigma);
  }

  pair.source = std::move(source);
  pair.target = std::move(target);
  pair.gt_flow = std::move(flow);
  return pair;
}

DownsampleResult downsample(const PointCloud& cloud, int n, std::uint64_t seed) {
  if (cloud.rows() == 0) throw std::invalid_argument("downsample: empty input cloud");
  if (n <= 0) throw std::invalid_argument("downsample: n must be positive");
  Rng rng(seed);
  const int size = static_cast<int>(cloud.rows());
  std::vector<int> all(static_cast<std::size_t>(size));
  std::iota(all.begin(), all.end(), 0);
  DownsampleResult out;
  if (n <= size) {
    // Partial Fisher-Yates: the first n slots become a uniform sample without replacement.
    for (int i = 0; i < n; ++i) {
      const int j = i + static_cast<int>(rng.index(static_cast<std::uint64_t>(size - i)));
      std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
    }
    all.resize(static_cast<std::size_t>(n));
    out.index_map = std::move(all);
  } else {
    rng.shuffle(all.begin(), all.end());
    out.index_map = std::move(all);
    while (static_cast<int>(out.index_map.size()) < n) {
      out.index_map.push_back(static_cast<int>(rng.index(static_cast<std::uint64_t>(size))));
    }
  }
  out.cloud = select_rows(cloud, out.index_map);
  return out;
}

FramePair downsample_pair(const FramePair& pair, int n, std::uint64_t seed, TargetSampling sampling) {
  const DownsampleResult src = downsample(pair.source, n, seed);
  FramePair out;
  out.frame_interval = pair.frame_interval;
  out.source = src.cloud;
  if (sampling == TargetSampling::kShared && pair.target.rows() == pair.source.rows()) {
    out.target = select_rows(pair.target, src.index_map);
  } else {
    out.target = downsample(pair.target, n, derive_seed({seed, 1})).cloud;
  }
  if (pair.optical) {
    out.optical = select_rows(*pair.optical, src.index_map);
    out.out_of_view.reserve(src.index_map.size());
    for (int i : src.index_map) out.out_of_view.push_back(pair.out_of_view[static_cast<std::size_t>(i)]);
  }
  if (pair.gt_flow) out.gt_flow = select_rows(*pair.gt_flow, src.index_map);
  return out;
}

ClientDataset build_client_dataset(const ClientProfile& profile) {
  profile.validate();
  ClientDataset data;
  data.profile = profile;
  for (int i = 0; i < profile.num_train; ++i) {
    FramePair pair = generate_frame_pair(profile, split_sample_seed(kTrain, static_cast<std::size_t>(i)));
    pair.gt_flow.reset();
    data.train.push_back(std::move(pair));
  }
  for (int i = 0; i < profile.num_val; ++i) {
    data.val.push_back(generate_frame_pair(profile, split_sample_seed(kVal, static_cast<std::size_t>(i))));
  }
  for (int i = 0; i < profile.num_test; ++i) {
    data.test.push_back(generate_frame_pair(profile, split_sample_seed(kTest, static_cast<std::size_t>(i))));
  }
  return data;
}

std::vector<ClientDataset> build_federation(const std::vector<ClientProfile>& profiles) {
  std::set<std::string> seen;
  for (const auto& p : profiles) {
    if (!seen.insert(p.client_id).second) throw std::invalid_argument("duplicate client id: " + p.client_id);
  }
  std::vector<ClientDataset> out;
  out.reserve(profiles.size());
  for (const auto& p : profiles) out.push_back(build_client_dataset(p));
  return out;
}

ClientDataset downsample_dataset(const ClientDataset& data, int n, std::uint64_t seed, TargetSampling sampling) {
  ClientDataset out;
  out.profile = data.profile;
  auto convert = [&](const std::vector<FramePair>& in, Split split, std::vector<FramePair>& dst) {
    for (std::size_t i = 0; i < in.size(); ++i) {
      dst.push_back(downsample_pair(in[i], n, derive_seed({seed, hash_string(data.profile.client_id), split, i}),
                                   sampling));
    }
  };
  convert(data.train, kTrain, out.train);
  convert(data.val, kVal, out.val);
  convert(data.test, kTest, out.test);
  return out;
}

DatasetStats dataset_stats(const ClientDataset& data) {
  DatasetStats stats;
  double points = 0.0;
  double norm_sum = 0.0;
  double dynamic = 0.0;
  double labelled = 0.0;
  std::size_t pairs = 0;
  for (const auto* split : {&data.val, &data.test}) {
    for (const auto& pair : *split) {
      ++pairs;
      points += static_cast<double>(pair.source.rows());
      if (!pair.gt_flow) continue;
      for (Eigen::Index i = 0; i < pair.gt_flow->rows(); ++i) {
        const double norm = pair.gt_flow->row(i).norm();
        norm_sum += norm;
        if (norm > 0.0) dynamic += 1.0;
        labelled += 1.0;
      }
    }
  }
  if (pairs > 0) stats.mean_points = points / static_cast<double>(pairs);
  if (labelled > 0) {
    stats.mean_flow_norm = norm_sum / labelled;
    stats.dynamic_ratio = dynamic / labelled;
  }
  return stats;
}

std::vector<ClientProfile> default_federation(std::uint64_t seed) {
  struct Row {
    const char* id;
    int points;
    double range;
    int objects;
    double min_speed;
    double max_speed;
    double ratio;
  };
  static constexpr Row rows[] = {
      {"rsu01", 512, 20.0, 2, 0.0, 3.0, 0.15},   {"rsu02", 768, 24.0, 3, 1.0, 5.0, 0.25},
      {"rsu03", 1024, 28.0, 4, 2.0, 7.0, 0.30},  {"rsu04", 1536, 32.0, 5, 3.0, 10.0, 0.35},
      {"rsu05", 2048, 36.0, 3, 0.0, 4.0, 0.20},  {"rsu06", 2560, 40.0, 6, 4.0, 10.0, 0.40},
      {"rsu07", 3072, 44.0, 4, 1.0, 6.0, 0.25},  {"rsu08", 4096, 48.0, 8, 5.0, 10.0, 0.45},
  };
  std::vector<ClientProfile> out;
  for (std::size_t i = 0; i < std::size(rows); ++i) {
    ClientProfile p;
    p.client_id = rows[i].id;
    p.points_per_frame = rows[i].points;
    p.perception_range = rows[i].range;
    p.num_objects = rows[i].objects;
    p.min_speed = rows[i].min_speed;
    p.max_speed = rows[i].max_speed;
    p.dynamic_point_ratio = rows[i].ratio;
    p.position_noise_sigma = 0.02;
    p.seed = derive_seed({seed, i});
    out.push_back(p);
  }
  return out;
}

std::vector<ClientProfile> default_unseen_profiles(std::uint64_t seed) {
  std::vector<ClientProfile> out(2);
  out[0].client_id = "campus01";
  out[0].points_per_frame = 1024;
  out[0].perception_range = 26.0;
  out[0].num_objects = 2;
  out[0].min_speed = 0.5;
  out[0].max_speed = 3.0;
  out[0].dynamic_point_ratio = 0.10;
  out[1].client_id = "campus02";
  out[1].points_per_frame = 2048;
  out[1].perception_range = 38.0;
  out[1].num_objects = 3;
  out[1].min_speed = 1.0;
  out[1].max_speed = 5.0;
  out[1].dynamic_point_ratio = 0.12;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].position_noise_sigma = 0.02;
    out[i].seed = derive_seed({seed, 100 + i});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export / import

namespace {

using nlohmann::json;

json profile_to_json(const ClientProfile& p) {
  return json{{"client_id", p.client_id},
              {"num_train", p.num_train},
              {"num_val", p.num_val},
              {"num_test", p.num_test},
              {"points_per_frame", p.points_per_frame},
              {"perception_range", p.perception_range},
              {"num_objects", p.num_objects},
              {"min_speed", p.min_speed},
              {"max_speed", p.max_speed},
              {"dynamic_point_ratio", p.dynamic_point_ratio},
              {"has_camera", p.has_camera},
              {"position_noise_sigma", p.position_noise_sigma},
              {"ego_motion_sigma", p.ego_motion_sigma},
              {"pixel_noise_sigma", p.pixel_noise_sigma},
              {"max_yaw_rate_deg", p.max_yaw_rate_deg},
              {"ground_threshold", p.ground_threshold},
              {"seed", p.seed}};
}

ClientProfile profile_from_json(const json& j) {
  ClientProfile p;
  p.client_id = j.at("client_id").get<std::string>();
  p.num_train = j.at("num_train").get<int>();
  p.num_val = j.at("num_val").get<int>();
  p.num_test = j.at("num_test").get<int>();
  p.points_per_frame = j.at("points_per_frame").get<int>();
  p.perception_range = j.at("perception_range").get<double>();
  p.num_objects = j.at("num_objects").get<int>();
  p.min_speed = j.at("min_speed").get<double>();
  p.max_speed = j.at("max_speed").get<double>();
  p.dynamic_point_ratio = j.at("dynamic_point_ratio").get<double>();
  p.has_camera = j.at("has_camera").get<bool>();
  p.position_noise_sigma = j.at("position_noise_sigma").get<double>();
  p.ego_motion_sigma = j.at("ego_motion_sigma").get<double>();
  p.pixel_noise_sigma = j.at("pixel_noise_sigma").get<double>();
  p.max_yaw_rate_deg = j.at("max_yaw_rate_deg").get<double>();
  p.ground_threshold = j.at("ground_threshold").get<double>();
  p.seed = j.at("seed").get<std::uint64_t>();
  return p;
}

std::string array_name(const char* split, std::size_t index, const char* array) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%04zu_%s", split, index, array);
  return buf;
}

}  // namespace

void export_dataset(const ClientDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "fedrsu-dataset";
  manifest["version"] = 1;
  manifest["dtype"] = "float32-le";
  manifest["profile"] = profile_to_json(data.profile);
  auto dump = [&](const char* split, const std::vector<FramePair>& pairs) {
    json entries = json::array();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const FramePair& pair = pairs[i];
      json e;
      e["source_points"] = pair.source.rows();
      e["target_points"] = pair.target.rows();
      e["frame_interval"] = pair.frame_interval;
      e["has_optical"] = pair.optical.has_value();
      e["has_gt_flow"] = pair.gt_flow.has_value();
      write_f32(dir / (array_name(split, i, "source") + ".f32"), pair.source);
      write_f32(dir / (array_name(split, i, "target") + ".f32"), pair.target);
      if (pair.optical) {
        write_f32(dir / (array_name(split, i, "optical") + ".f32"), *pair.optical);
        write_u8(dir / (array_name(split, i, "out_of_view") + ".u8"), pair.out_of_view);
      }
      if (pair.gt_flow) write_f32(dir / (array_name(split, i, "gt_flow") + ".f32"), *pair.gt_flow);
      entries.push_back(e);
    }
    manifest["splits"][split] = entries;
  };
  dump("train", data.train);
  dump("val", data.val);
  dump("test", data.test);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

ClientDataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing dataset manifest: " + (dir / "manifest.json").string());
  const json manifest = json::parse(in);
  if (manifest.value("format", "") != "fedrsu-dataset") {
    throw std::runtime_error("not a dataset manifest: " + (dir / "manifest.json").string());
  }
  ClientDataset data;
  data.profile = profile_from_json(manifest.at("profile"));
  auto load = [&](const char* split, std::vector<FramePair>& pairs) {
    const json& entries = manifest.at("splits").at(split);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      const json& e = entries[i];
      const auto n_src = e.at("source_points").get<Eigen::Index>();
      const auto n_tgt = e.at("target_points").get<Eigen::Index>();
      FramePair pair;
      pair.frame_interval = e.at("frame_interval").get<double>();
      pair.source = read_f32<PointCloud>(dir / (array_name(split, i, "source") + ".f32"), n_src);
      pair.target = read_f32<PointCloud>(dir / (array_name(split, i, "target") + ".f32"), n_tgt);
      if (e.at("has_optical").get<bool>()) {
        pair.optical = read_f32<OpticalFlow>(dir / (array_name(split, i, "optical") + ".f32"), n_src);
        pair.out_of_view = read_u8(dir / (array_name(split, i, "out_of_view") + ".u8"), n_src);
      }
      if (e.at("has_gt_flow").get<bool>()) {
        pair.gt_flow = read_f32<FlowField>(dir / (array_name(split, i, "gt_flow") + ".f32"), n_src);
      }
      pair.validate();
      pairs.push_back(std::move(pair));
    }
  };
  load("train", data.train);
  load("val", data.val);
  load("test", data.test);
  return data;
}

}  // namespace fedrsu
