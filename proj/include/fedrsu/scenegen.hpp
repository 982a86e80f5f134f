#pragma once

#include "fedrsu/geometry.hpp"
#include "fedrsu/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace fedrsu {

/// Heterogeneity knobs of one simulated roadside unit.
struct ClientProfile {
  std::string client_id;
  int num_train = 16;
  int num_val = 2;
  int num_test = 4;
  int points_per_frame = 1024;
  double perception_range = 30.0;  // half-width of the square scene, meters
  int num_objects = 4;
  double min_speed = 1.0;  // m/s
  double max_speed = 8.0;
  double dynamic_point_ratio = 0.25;
  bool has_camera = true;
  double position_noise_sigma = 0.0;  // meters, per frame
  double ego_motion_sigma = 0.0;      // meters; > 0 models a vehicle-mounted sensor
  double pixel_noise_sigma = 1.0;     // optical-flow noise, pixels
  double max_yaw_rate_deg = 3.0;      // per-frame object yaw change bound
  double ground_threshold = 0.3;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct CameraModel {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 960.0;
  double cy = 640.0;
  RigidTransform world_to_camera;
  int width = 1920;
  int height = 1280;
};

/// Downward-looking camera above the scene centre whose image covers the profile's range.
CameraModel overhead_camera(const ClientProfile& profile);

/// Pinhole projection; nullopt when behind the camera or outside the image.
std::optional<Eigen::Vector2d> project_point(const CameraModel& cam, const Point3& p_world);

using OpticalFlow = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;

struct OpticalFlowResult {
  OpticalFlow flow;
  std::vector<std::uint8_t> out_of_view;  // 1 when the point leaves the image in either frame
};

/// Projected pixel displacement of each point under its motion, plus Gaussian pixel noise.
OpticalFlowResult synth_optical_flow(const PointCloud& source, const FlowField& motion, const CameraModel& cam,
                                     double pixel_noise_sigma, std::uint64_t seed);

inline constexpr double kFrameInterval = 0.1;  // seconds

struct FramePair {
  PointCloud source;
  PointCloud target;
  std::optional<OpticalFlow> optical;
  std::vector<std::uint8_t> out_of_view;  // populated together with `optical`
  std::optional<FlowField> gt_flow;
  double frame_interval = kFrameInterval;

  /// Throws std::invalid_argument when a field violates the pair invariants.
  void validate() const;
};

FramePair generate_frame_pair(const ClientProfile& profile, std::uint64_t sample_seed);

struct DownsampleResult {
  PointCloud cloud;
  std::vector<int> index_map;  // row i of `cloud` is row index_map[i] of the input
};

/// Exactly n points; without replacement when n <= |c|, with replacement otherwise.
DownsampleResult downsample(const PointCloud& cloud, int n, std::uint64_t seed);

/// kShared: the target reuses the source index map when both frames have the same size,
/// keeping row correspondence. kIndependent: the target is sampled on its own.
enum class TargetSampling { kShared, kIndependent };

/// Downsamples source (and every per-source array) to n points.
FramePair downsample_pair(const FramePair& pair, int n, std::uint64_t seed,
                          TargetSampling sampling = TargetSampling::kShared);

struct ClientDataset {
  ClientProfile profile;
  std::vector<FramePair> train;  // self-supervised: no gt_flow
  std::vector<FramePair> val;
  std::vector<FramePair> test;

  std::size_t data_size() const { return train.size(); }
};

struct DatasetStats {
  double mean_points = 0.0;
  double mean_flow_norm = 0.0;
  double dynamic_ratio = 0.0;
};

/// Statistics over the labelled (val + test) pairs.
DatasetStats dataset_stats(const ClientDataset& data);

ClientDataset build_client_dataset(const ClientProfile& profile);

/// Throws std::invalid_argument("duplicate client id: <id>") on repeated ids.
std::vector<ClientDataset> build_federation(const std::vector<ClientProfile>& profiles);

/// Same dataset with every pair downsampled to n points (seeded per split and index).
ClientDataset downsample_dataset(const ClientDataset& data, int n, std::uint64_t seed,
                                 TargetSampling sampling = TargetSampling::kShared);

/// Eight heterogeneous roadside units: 512-4096 points per frame, speeds 0-10 m/s.
std::vector<ClientProfile> default_federation(std::uint64_t seed);

/// Two sparse-traffic profiles used as held-out (unseen) clients.
std::vector<ClientProfile> default_unseen_profiles(std::uint64_t seed);

// Export format: one directory per client holding manifest.json plus flat
// little-endian float32 arrays (<split>_<index>_<array>.f32).
void export_dataset(const ClientDataset& data, const std::filesystem::path& dir);
ClientDataset import_dataset(const std::filesystem::path& dir);

}  // namespace fedrsu
