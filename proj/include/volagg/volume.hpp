#pragma once

// Metric voxel grids, per-view back-projection and cross-view softmax
// aggregation.
//
// Volume data is laid out [K, L, L, L] with voxel index (i, j, l) along the
// world x, y, z axes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "volagg/calib.hpp"
#include "volagg/tensor.hpp"

namespace volagg::volume {

struct VolumeConfig {
  double side_length = 2500.0;  // mm
  std::size_t resolution = 16;  // L
  std::size_t channels = 8;     // K

  std::size_t voxels() const { return resolution * resolution * resolution; }
  bool operator==(const VolumeConfig&) const = default;
};

// Throws Config for non-positive side length, resolution or channels.
void validate(const VolumeConfig& config);

struct FeatureVolume {
  ad::Tensor data;                  // [K,L,L,L]
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  VolumeConfig config;
  std::vector<std::uint8_t> mask;   // [L,L,L]; 1 where any view sampled a value
  std::string source_id;            // camera id for per-view volumes
};

// Coordinate of voxel index i along one axis.
double voxel_coordinate(double center, std::size_t index, const VolumeConfig& config);

// Voxel centers [L,L,L,3] in mm.
ad::Tensor make_grid(const Eigen::Vector3d& center, const VolumeConfig& config);

// Fills V_c by projecting every voxel center into the view and bilinearly
// sampling the feature map. Voxels behind the camera or outside the sampling
// hull are masked and zero. Differentiable with respect to the map and grid.
FeatureVolume backproject(const calib::FeatureMap& map, const calib::ProjectionMatrix& P, const ad::Tensor& grid,
                          const Eigen::Vector3d& center, const VolumeConfig& config);

// Back-projects several views. When no tape is active and `parallel` is set
// the views run on separate threads; results are identical to serial runs.
std::vector<FeatureVolume> backproject_views(const std::vector<calib::FeatureMap>& maps,
                                             const std::vector<calib::ProjectionMatrix>& projections,
                                             const ad::Tensor& grid, const Eigen::Vector3d& center,
                                             const VolumeConfig& config, bool parallel = false);

// Per voxel and channel: softmax across the views that see the voxel, then
// the weighted sum of their values. Views are reduced in ascending source_id
// order so the result does not depend on the order of `volumes`.
// Throws ConfigMismatch when configs or centers differ, InvalidInput for an
// empty list.
FeatureVolume aggregate_softmax(const std::vector<FeatureVolume>& volumes);

// Softmax weights at one voxel/channel across the given volumes, in input
// order; 0 for views that do not see the voxel.
std::vector<double> softmax_weights(const std::vector<FeatureVolume>& volumes, std::size_t channel,
                                    std::size_t voxel);

// Debug dump: <stem>.json (center, config, source id, mask) and
// <stem>.bin (blob of the data tensor).
void dump_volume(const FeatureVolume& volume, const std::filesystem::path& stem);

}  // namespace volagg::volume
