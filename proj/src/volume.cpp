#include "volagg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <numeric>
#include <sstream>

#include "volagg/error.hpp"
#include "volagg/json_util.hpp"

namespace volagg::volume {

void validate(const VolumeConfig& c) {
  if (!(c.side_length > 0.0) || !std::isfinite(c.side_length)) {
    fail(ErrorKind::Config, "volume: side_length must be a positive finite number of mm");
  }
  if (c.resolution < 1) fail(ErrorKind::Config, "volume: resolution must be >= 1");
  if (c.channels < 1) fail(ErrorKind::Config, "volume: channels must be >= 1");
}

double voxel_coordinate(double center, std::size_t index, const VolumeConfig& config) {
  const double L = static_cast<double>(config.resolution);
  return center + ((static_cast<double>(index) + 0.5) / L - 0.5) * config.side_length;
}

ad::Tensor make_grid(const Eigen::Vector3d& center, const VolumeConfig& config) {
  validate(config);
  const std::size_t L = config.resolution;
  std::vector<double> g(L * L * L * 3);
  std::size_t o = 0;
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t l = 0; l < L; ++l) {
        g[o++] = voxel_coordinate(center.x(), i, config);
        g[o++] = voxel_coordinate(center.y(), j, config);
        g[o++] = voxel_coordinate(center.z(), l, config);
      }
  return ad::Tensor({L, L, L, 3}, std::move(g));
}

FeatureVolume backproject(const calib::FeatureMap& map, const calib::ProjectionMatrix& P, const ad::Tensor& grid,
                          const Eigen::Vector3d& center, const VolumeConfig& config) {
  validate(config);
  const std::size_t L = config.resolution, N = config.voxels(), K = config.channels;
  if (grid.shape() != ad::Shape{L, L, L, 3}) {
    fail(ErrorKind::DimensionMismatch, "backproject: grid must be " + ad::shape_str({L, L, L, 3}) + ", got " +
                                           ad::shape_str(grid.shape()));
  }
  if (map.data.rank() != 3 || map.channels() != K) {
    fail(ErrorKind::DimensionMismatch, "backproject: feature map " + ad::shape_str(map.data.shape()) +
                                           " does not have " + std::to_string(K) + " channels");
  }
  const std::size_t h = map.height(), w = map.width();
  const auto gd = grid.data();
  const auto md = map.data.data();

  std::vector<calib::BilinearStencil> stencils(N);
  std::vector<double> out(K * N, 0.0);
  std::vector<std::uint8_t> mask(N, 0);
  for (std::size_t n = 0; n < N; ++n) {
    const Eigen::Vector3d X(gd[3 * n], gd[3 * n + 1], gd[3 * n + 2]);
    const auto proj = calib::try_project(P, X);
    if (ad::branch::recording()) ad::branch::note(proj ? 3 : 4);
    if (!proj) continue;
    const auto s = calib::bilinear_stencil(h, w, map.image_to_feature_scale, proj->pixel);
    if (!s.visible) continue;
    stencils[n] = s;
    mask[n] = 1;
    for (std::size_t k = 0; k < K; ++k) out[k * N + n] = s.sample(md.data() + k * h * w, w);
  }

  FeatureVolume vol;
  vol.center = center;
  vol.config = config;
  vol.source_id = P.source_id;
  const bool rec = ad::should_record({&map.data, &grid});
  vol.data = ad::make_result({K, L, L, L}, std::move(out), rec);
  if (rec) {
    ad::Tensor y = vol.data, m = map.data, g = grid;
    ad::record("backproject", {&y}, [y, m, g, P, stencils = std::move(stencils), mask, K, N, h, w]() {
      const auto gy = ad::upstream(y.impl());
      double* gm = ad::grad_target(m);
      double* gg = ad::grad_target(g);
      const auto md = m.data();
      const auto gd = g.data();
      for (std::size_t n = 0; n < N; ++n) {
        if (!mask[n]) continue;
        const auto& s = stencils[n];
        double d_col = 0.0, d_row = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
          const double up = gy[k * N + n];
          if (up == 0.0) continue;
          const std::size_t base = k * h * w;
          const std::size_t i00 = base + s.row0 * w + s.col0, i01 = base + s.row0 * w + s.col1;
          const std::size_t i10 = base + s.row1 * w + s.col0, i11 = base + s.row1 * w + s.col1;
          if (gm) {
            gm[i00] += up * s.w00();
            gm[i01] += up * s.w01();
            gm[i10] += up * s.w10();
            gm[i11] += up * s.w11();
          }
          if (gg) {
            d_col += up * ((1.0 - s.frac_row) * (md[i01] - md[i00]) + s.frac_row * (md[i11] - md[i10]));
            d_row += up * ((1.0 - s.frac_col) * (md[i10] - md[i00]) + s.frac_col * (md[i11] - md[i01]));
          }
        }
        if (gg) {
          // Degenerate one-cell axes have no slope.
          if (s.col0 == s.col1) d_col = 0.0;
          if (s.row0 == s.row1) d_row = 0.0;
          const Eigen::Vector3d X(gd[3 * n], gd[3 * n + 1], gd[3 * n + 2]);
          const auto J = calib::project_jacobian(P, X);
          const Eigen::Vector3d gx = J.transpose() * Eigen::Vector2d(d_col * s.scale, d_row * s.scale);
          for (int a = 0; a < 3; ++a) gg[3 * n + a] += gx[a];
        }
      }
    });
  }
  vol.mask = std::move(mask);
  return vol;
}

std::vector<FeatureVolume> backproject_views(const std::vector<calib::FeatureMap>& maps,
                                             const std::vector<calib::ProjectionMatrix>& projections,
                                             const ad::Tensor& grid, const Eigen::Vector3d& center,
                                             const VolumeConfig& config, bool parallel) {
  if (maps.size() != projections.size()) {
    fail(ErrorKind::DimensionMismatch, "backproject: " + std::to_string(maps.size()) + " feature maps for " +
                                           std::to_string(projections.size()) + " cameras");
  }
  std::vector<FeatureVolume> out(maps.size());
  // Recording must stay on the thread that owns the tape.
  if (parallel && ad::active_tape() == nullptr && !ad::branch::recording()) {
    std::vector<std::future<FeatureVolume>> jobs;
    for (std::size_t c = 0; c < maps.size(); ++c) {
      jobs.push_back(std::async(std::launch::async, [&, c] { return backproject(maps[c], projections[c], grid, center, config); }));
    }
    for (std::size_t c = 0; c < maps.size(); ++c) out[c] = jobs[c].get();
  } else {
    for (std::size_t c = 0; c < maps.size(); ++c) out[c] = backproject(maps[c], projections[c], grid, center, config);
  }
  return out;
}

namespace {

void check_compatible(const std::vector<FeatureVolume>& volumes) {
  if (volumes.empty()) fail(ErrorKind::InvalidInput, "aggregate: at least one volume required");
  const auto& ref = volumes.front();
  for (const auto& v : volumes) {
    if (!(v.config == ref.config) || v.center != ref.center) {
      std::ostringstream os;
      os << "aggregate: volume '" << v.source_id << "' (side " << v.config.side_length << ", L "
         << v.config.resolution << ", K " << v.config.channels << ", center " << v.center.transpose()
         << ") does not match volume '" << ref.source_id << "' (side " << ref.config.side_length << ", L "
         << ref.config.resolution << ", K " << ref.config.channels << ", center " << ref.center.transpose() << ")";
      fail(ErrorKind::ConfigMismatch, os.str());
    }
    const ad::Shape expect{ref.config.channels, ref.config.resolution, ref.config.resolution, ref.config.resolution};
    if (v.data.shape() != expect || v.mask.size() != ref.config.voxels()) {
      fail(ErrorKind::DimensionMismatch, "aggregate: volume '" + v.source_id + "' has data " +
                                             ad::shape_str(v.data.shape()) + ", expected " + ad::shape_str(expect));
    }
  }
}

std::vector<std::size_t> reduction_order(const std::vector<FeatureVolume>& volumes) {
  std::vector<std::size_t> order(volumes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return volumes[a].source_id < volumes[b].source_id; });
  return order;
}

// Weights for one voxel/channel in `order`; returns false when no view sees it.
bool weights_at(const std::vector<FeatureVolume>& volumes, const std::vector<std::size_t>& order,
                std::size_t offset, std::size_t voxel, std::vector<double>& weights) {
  double peak = -std::numeric_limits<double>::infinity();
  bool any = false;
  for (std::size_t c : order) {
    if (!volumes[c].mask[voxel]) continue;
    any = true;
    peak = std::max(peak, volumes[c].data.data()[offset]);
  }
  std::fill(weights.begin(), weights.end(), 0.0);
  if (!any) return false;
  double denom = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& v = volumes[order[r]];
    if (!v.mask[voxel]) continue;
    weights[r] = std::exp(v.data.data()[offset] - peak);
    denom += weights[r];
  }
  for (auto& wr : weights) wr /= denom;
  return true;
}

}  // namespace

FeatureVolume aggregate_softmax(const std::vector<FeatureVolume>& volumes) {
  check_compatible(volumes);
  const auto& ref = volumes.front();
  const std::size_t K = ref.config.channels, N = ref.config.voxels(), C = volumes.size();
  const auto order = reduction_order(volumes);

  std::vector<double> out(K * N, 0.0);
  std::vector<double> weights(C);
  std::vector<double> all_weights(C * K * N, 0.0);  // [rank, k, voxel]
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = k * N + n;
      if (!weights_at(volumes, order, off, n, weights)) continue;
      double acc = 0.0;
      for (std::size_t r = 0; r < C; ++r) {
        if (weights[r] == 0.0 && !volumes[order[r]].mask[n]) continue;
        acc += weights[r] * volumes[order[r]].data.data()[off];
        all_weights[r * K * N + off] = weights[r];
      }
      out[off] = acc;
    }

  FeatureVolume agg;
  agg.center = ref.center;
  agg.config = ref.config;
  agg.source_id = "aggregate";
  agg.mask.assign(N, 0);
  for (const auto& v : volumes)
    for (std::size_t n = 0; n < N; ++n) agg.mask[n] |= v.mask[n];

  std::vector<ad::Tensor> inputs;
  for (std::size_t c : order) inputs.push_back(volumes[c].data);
  const bool rec = ad::should_record(std::span<const ad::Tensor>(inputs));
  agg.data = ad::make_result({K, ref.config.resolution, ref.config.resolution, ref.config.resolution},
                             std::move(out), rec);
  if (rec) {
    ad::Tensor y = agg.data;
    ad::record("aggregate_softmax", {&y}, [y, inputs, all_weights = std::move(all_weights), K, N]() {
      const auto gy = ad::upstream(y.impl());
      const auto yd = y.data();
      for (std::size_t r = 0; r < inputs.size(); ++r) {
        double* gv = ad::grad_target(inputs[r]);
        if (!gv) continue;
        const auto vd = inputs[r].data();
        const double* wr = all_weights.data() + r * K * N;
        // d out / d v_r = w_r (1 + v_r - out)
        for (std::size_t i = 0; i < K * N; ++i) {
          if (wr[i] == 0.0) continue;
          gv[i] += gy[i] * wr[i] * (1.0 + vd[i] - yd[i]);
        }
      }
    });
  }
  return agg;
}

std::vector<double> softmax_weights(const std::vector<FeatureVolume>& volumes, std::size_t channel,
                                    std::size_t voxel) {
  check_compatible(volumes);
  const auto order = reduction_order(volumes);
  std::vector<double> ranked(volumes.size());
  weights_at(volumes, order, channel * volumes.front().config.voxels() + voxel, voxel, ranked);
  std::vector<double> out(volumes.size());
  for (std::size_t r = 0; r < order.size(); ++r) out[order[r]] = ranked[r];
  return out;
}

void dump_volume(const FeatureVolume& volume, const std::filesystem::path& stem) {
  io::Json j;
  j["source_id"] = volume.source_id;
  j["center"] = io::vector_to_json(volume.center);
  j["side_length"] = volume.config.side_length;
  j["resolution"] = volume.config.resolution;
  j["channels"] = volume.config.channels;
  j["mask"] = volume.mask;
  j["data_file"] = stem.filename().string() + ".bin";
  io::write_json_file(stem.string() + ".json", j);
  const auto d = volume.data.data();
  io::write_blob_file(stem.string() + ".bin", volume.data.shape(), std::vector<double>(d.begin(), d.end()));
}

}  // namespace volagg::volume
