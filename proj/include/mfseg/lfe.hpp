#pragma once

// Local feature extraction: voxelize a raw cloud, decorate each point relative
// to its voxel centroid, run a shared point-wise network and max-pool per voxel.
// Every occupied voxel becomes one feature point.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "mfseg/geometry.hpp"
#include "mfseg/nn.hpp"

namespace mfseg {

inline constexpr std::uint16_t kUnlabeled = 0xFFFF;

/// One sensor sweep. Stored in single precision, like the sensor data it models.
struct RawPointCloud {
    std::vector<Eigen::Vector3f> coords;  // sensor frame, meters
    std::vector<float> intensity;         // [0, 1]
    std::vector<float> timestamp;         // seconds relative to the cloud's capture time
    std::vector<std::uint16_t> labels;    // empty when unlabeled; kUnlabeled marks single points
    Pose pose;                            // sensor -> world
    double capture_time = 0.0;            // seconds

    std::size_t size() const { return coords.size(); }
    bool labeled() const { return !labels.empty(); }

    void validate(std::size_t num_classes) const {
        const std::size_t n = coords.size();
        if (intensity.size() != n || timestamp.size() != n || (!labels.empty() && labels.size() != n))
            throw std::invalid_argument("point cloud arrays have inconsistent lengths");
        for (auto l : labels)
            if (l != kUnlabeled && l >= num_classes)
                throw std::invalid_argument("label " + std::to_string(l) + " outside [0, " +
                                            std::to_string(num_classes) + ")");
        pose.validate();
    }

    Vec3 point(std::size_t i) const { return coords[i].cast<double>(); }

    bool operator==(const RawPointCloud& o) const {
        return coords == o.coords && intensity == o.intensity && timestamp == o.timestamp && labels == o.labels &&
               pose == o.pose && capture_time == o.capture_time;
    }
};

/// Output of the local feature extractor (and of aggregation): one row per
/// occupied voxel with a sub-voxel coordinate.
struct FeatureCloud {
    std::vector<Vec3> coords;         // M x 3, in the frame given by `pose`
    Value features;                   // M x D
    std::vector<double> timestamps;   // relative to capture_time
    double voxel_size = 0.2;
    Pose pose;
    double capture_time = 0.0;

    std::size_t size() const { return coords.size(); }
    std::size_t dim() const { return features.shape().size() == 2 ? features.shape()[1] : 0; }
};

struct LfeConfig {
    double voxel_size = 0.2;
    std::vector<std::size_t> channels{128, 128, 128, 128};
    std::size_t out_dim() const { return channels.back(); }
};

inline constexpr std::size_t kDecoratedDim = 5;  // dx, dy, dz, intensity, timestamp

inline void add_lfe_params(ParamSet& params, const LfeConfig& cfg, std::mt19937_64& rng) {
    std::vector<std::size_t> dims{kDecoratedDim};
    dims.insert(dims.end(), cfg.channels.begin(), cfg.channels.end());
    nn::add_mlp(params, "lfe", dims, rng);
}

struct DecoratedPoint {
    Vec3 coord;
    double intensity = 0.0;
    double timestamp = 0.0;
};

/// Per-point inputs [x-cx, y-cy, z-cz, intensity, timestamp] for one voxel,
/// where (cx, cy, cz) is the centroid of the voxel's points.
inline std::vector<std::array<double, kDecoratedDim>> decorate_points(std::span<const DecoratedPoint> pts) {
    if (pts.empty()) throw std::invalid_argument("decorate_points: empty voxel");
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : pts) centroid += p.coord;
    centroid /= static_cast<double>(pts.size());
    std::vector<std::array<double, kDecoratedDim>> rows;
    rows.reserve(pts.size());
    for (const auto& p : pts) {
        const Vec3 d = p.coord - centroid;
        rows.push_back({d.x(), d.y(), d.z(), p.intensity, p.timestamp});
    }
    return rows;
}

/// Voxel grouping of a raw cloud in canonical order: voxels sorted by key,
/// points within a voxel sorted by value with exact duplicates dropped.
struct VoxelGrouping {
    std::vector<VoxelKey> keys;             // one per voxel
    std::vector<std::size_t> offsets;       // voxel v owns order[offsets[v] .. offsets[v+1])
    std::vector<std::size_t> order;         // point indices
    std::vector<std::size_t> point_voxel;   // per input point, its voxel (duplicates included)
};

inline VoxelGrouping group_points(const RawPointCloud& cloud, double voxel_size) {
    require_voxel_size(voxel_size);
    const std::size_t n = cloud.size();
    std::vector<VoxelKey> keys(n);
    for (std::size_t i = 0; i < n; ++i) keys[i] = voxel_key(cloud.point(i), voxel_size);
    auto tuple_of = [&](std::size_t i) {
        const auto& c = cloud.coords[i];
        return std::make_tuple(keys[i], c.x(), c.y(), c.z(), cloud.intensity[i], cloud.timestamp[i]);
    };
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const auto ta = tuple_of(a), tb = tuple_of(b);
        return ta < tb || (ta == tb && a < b);
    });

    VoxelGrouping g;
    g.point_voxel.assign(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = idx[j];
        const bool new_voxel = g.keys.empty() || g.keys.back() != keys[i];
        if (new_voxel) {
            g.keys.push_back(keys[i]);
            g.offsets.push_back(g.order.size());
        }
        g.point_voxel[i] = g.keys.size() - 1;
        if (!new_voxel && tuple_of(g.order.back()) == tuple_of(i)) continue;  // exact duplicate
        g.order.push_back(i);
    }
    g.offsets.push_back(g.order.size());
    return g;
}

/// Runs the local feature extractor. An empty cloud yields an empty FeatureCloud,
/// i.e. the identity element downstream.
inline FeatureCloud extract(Tape& tape, const RawPointCloud& cloud, const ParamView& params, const LfeConfig& cfg) {
    const std::size_t dout = params["lfe." + std::to_string(cfg.channels.size() - 1) + ".bias"].size();
    FeatureCloud out;
    out.voxel_size = cfg.voxel_size;
    out.pose = cloud.pose;
    out.capture_time = cloud.capture_time;
    if (cloud.size() == 0) {
        require_voxel_size(cfg.voxel_size);
        out.features = Value(Array({0, dout}));
        return out;
    }

    const VoxelGrouping g = group_points(cloud, cfg.voxel_size);
    const std::size_t m = g.keys.size(), rows = g.order.size();
    Array input({rows, kDecoratedDim});
    out.coords.reserve(m);
    out.timestamps.reserve(m);
    std::vector<DecoratedPoint> pts;
    for (std::size_t v = 0; v < m; ++v) {
        pts.clear();
        double tmax = -std::numeric_limits<double>::infinity();
        for (std::size_t j = g.offsets[v]; j < g.offsets[v + 1]; ++j) {
            const std::size_t i = g.order[j];
            pts.push_back({cloud.point(i), cloud.intensity[i], cloud.timestamp[i]});
            tmax = std::max(tmax, static_cast<double>(cloud.timestamp[i]));
        }
        const auto dec = decorate_points(pts);
        for (std::size_t r = 0; r < dec.size(); ++r)
            std::copy(dec[r].begin(), dec[r].end(), input.data.begin() + static_cast<std::ptrdiff_t>((g.offsets[v] + r) * kDecoratedDim));
        Vec3 centroid = Vec3::Zero();
        for (const auto& p : pts) centroid += p.coord;
        out.coords.push_back(centroid / static_cast<double>(pts.size()));
        out.timestamps.push_back(tmax);
    }

    const Value x = nn::mlp(tape, params, "lfe", cfg.channels.size(), Value(std::move(input)));
    out.features = ops::segment_max(tape, x, g.offsets);
    return out;
}

}  // namespace mfseg
