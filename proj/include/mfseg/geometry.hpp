#pragma once

// Rigid poses, ego-motion transforms, voxel hashing and exact k-nearest neighbors.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace mfseg {

class GeometryError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Vec3 = Eigen::Vector3d;

/// Sensor-to-world rigid transform.
struct Pose {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Vec3 translation = Vec3::Zero();

    static Pose identity() { return {}; }

    static Pose from_yaw(double yaw, const Vec3& t) {
        Pose p;
        p.rotation = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
        p.translation = t;
        return p;
    }

    static Pose translation_only(const Vec3& t) {
        Pose p;
        p.translation = t;
        return p;
    }

    Vec3 apply(const Vec3& c) const { return rotation * c + translation; }

    bool is_valid(double tol = 1e-9) const {
        if (!rotation.allFinite() || !translation.allFinite()) return false;
        const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
        return ortho <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
    }

    void validate(double tol = 1e-9) const {
        if (!is_valid(tol)) throw GeometryError("pose rotation is not orthonormal with det +1");
    }

    /// Bitwise equality.
    bool operator==(const Pose& o) const { return rotation == o.rotation && translation == o.translation; }

    Eigen::Matrix4d homogeneous() const {
        Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
        m.topLeftCorner<3, 3>() = rotation;
        m.topRightCorner<3, 1>() = translation;
        return m;
    }
};

/// a then-applied-after b: (a ∘ b)(c) = a(b(c)).
inline Pose compose(const Pose& a, const Pose& b) {
    a.validate();
    b.validate();
    Pose out;
    out.rotation = a.rotation * b.rotation;
    out.translation = a.rotation * b.translation + a.translation;
    return out;
}

inline Pose invert(const Pose& a) {
    a.validate();
    Pose out;
    out.rotation = a.rotation.transpose();
    out.translation = -(out.rotation * a.translation);
    return out;
}

/// Maps coordinates expressed in the `src` sensor frame into the `dst` sensor
/// frame: c -> dst^-1 * src * c. Identical poses return the input unchanged.
inline std::vector<Vec3> transform_coords(std::span<const Vec3> coords, const Pose& src, const Pose& dst) {
    if (src == dst) {
        src.validate();
        return {coords.begin(), coords.end()};
    }
    const Pose rel = compose(invert(dst), src);
    std::vector<Vec3> out;
    out.reserve(coords.size());
    for (const auto& c : coords) out.push_back(rel.apply(c));
    return out;
}

struct VoxelKey {
    std::int64_t ix = 0, iy = 0, iz = 0;
    auto operator<=>(const VoxelKey&) const = default;
};

struct VoxelKeyHash {
    std::size_t operator()(const VoxelKey& k) const noexcept {
        // Large primes spatial hash; collisions only cost time.
        return static_cast<std::size_t>(k.ix * 73856093LL ^ k.iy * 19349669LL ^ k.iz * 83492791LL);
    }
};

inline void require_voxel_size(double s) {
    if (!(s > 0.0) || !std::isfinite(s)) throw GeometryError("voxel size must be positive, got " + std::to_string(s));
}

/// Floor-quantized cell of `c` (negative coordinates round toward -inf).
inline VoxelKey voxel_key(const Vec3& c, double s) {
    return {static_cast<std::int64_t>(std::floor(c.x() / s)), static_cast<std::int64_t>(std::floor(c.y() / s)),
            static_cast<std::int64_t>(std::floor(c.z() / s))};
}

inline std::vector<VoxelKey> voxelize(std::span<const Vec3> coords, double voxel_size) {
    require_voxel_size(voxel_size);
    std::vector<VoxelKey> keys;
    keys.reserve(coords.size());
    for (const auto& c : coords) keys.push_back(voxel_key(c, voxel_size));
    return keys;
}

inline Vec3 voxel_center(const VoxelKey& k, double s) {
    return {(static_cast<double>(k.ix) + 0.5) * s, (static_cast<double>(k.iy) + 0.5) * s,
            (static_cast<double>(k.iz) + 0.5) * s};
}

/// Buckets of point indices per voxel key; buckets keep ascending index order.
class VoxelIndex {
public:
    VoxelIndex(std::span<const Vec3> coords, double voxel_size) : voxel_size_(voxel_size) {
        const auto keys = voxelize(coords, voxel_size);
        buckets_.reserve(keys.size());
        for (std::size_t i = 0; i < keys.size(); ++i) buckets_[keys[i]].push_back(i);
    }

    double voxel_size() const { return voxel_size_; }
    std::size_t num_voxels() const { return buckets_.size(); }

    std::span<const std::size_t> find(const VoxelKey& key) const {
        auto it = buckets_.find(key);
        if (it == buckets_.end()) return {};
        return it->second;
    }

    /// Keys in ascending order.
    std::vector<VoxelKey> sorted_keys() const {
        std::vector<VoxelKey> keys;
        keys.reserve(buckets_.size());
        for (const auto& [k, _] : buckets_) keys.push_back(k);
        std::sort(keys.begin(), keys.end());
        return keys;
    }

private:
    double voxel_size_;
    std::unordered_map<VoxelKey, std::vector<std::size_t>, VoxelKeyHash> buckets_;
};

struct Neighbor {
    std::size_t index = 0;
    Vec3 offset = Vec3::Zero();  // ref - query
    double dist2 = 0.0;
};

namespace detail {

inline bool closer(const Neighbor& a, const Neighbor& b) {
    return a.dist2 < b.dist2 || (a.dist2 == b.dist2 && a.index < b.index);
}

inline Neighbor make_neighbor(const Vec3& q, const Vec3& r, std::size_t i) {
    const Vec3 off = r - q;
    return {i, off, off.squaredNorm()};
}

}  // namespace detail

/// Exhaustive k-nearest-neighbor scan. Results per query are sorted by distance
/// with ties broken by the lower reference index; k is clamped to |ref|.
inline std::vector<std::vector<Neighbor>> knn(std::span<const Vec3> queries, std::span<const Vec3> ref,
                                              std::size_t k) {
    if (k < 1) throw GeometryError("knn: k must be >= 1");
    if (ref.empty()) throw GeometryError("knn: empty reference set");
    const std::size_t kk = std::min(k, ref.size());
    std::vector<std::vector<Neighbor>> out(queries.size());
    std::vector<Neighbor> all(ref.size());
    for (std::size_t q = 0; q < queries.size(); ++q) {
        for (std::size_t i = 0; i < ref.size(); ++i) all[i] = detail::make_neighbor(queries[q], ref[i], i);
        std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk), all.end(), detail::closer);
        out[q].assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(kk));
    }
    return out;
}

/// Voxel-grid accelerated exact KNN. Returns the same neighbors, in the same
/// order, as the exhaustive scan.
class KnnGrid {
public:
    KnnGrid(std::span<const Vec3> ref, double cell) : ref_(ref.begin(), ref.end()), cell_(cell) {
        require_voxel_size(cell);
        if (ref_.empty()) throw GeometryError("knn: empty reference set");
        lo_ = hi_ = voxel_key(ref_[0], cell_);
        for (std::size_t i = 0; i < ref_.size(); ++i) {
            const auto key = voxel_key(ref_[i], cell_);
            cells_[key].push_back(i);
            lo_ = {std::min(lo_.ix, key.ix), std::min(lo_.iy, key.iy), std::min(lo_.iz, key.iz)};
            hi_ = {std::max(hi_.ix, key.ix), std::max(hi_.iy, key.iy), std::max(hi_.iz, key.iz)};
        }
    }

    std::size_t size() const { return ref_.size(); }

    std::vector<Neighbor> query(const Vec3& q, std::size_t k) const {
        if (k < 1) throw GeometryError("knn: k must be >= 1");
        const std::size_t kk = std::min(k, ref_.size());
        const VoxelKey c = voxel_key(q, cell_);
        std::vector<Neighbor> best;
        best.reserve(kk + 1);
        // Rings beyond this radius cannot contain any occupied cell.
        const std::int64_t max_ring = std::max({std::abs(c.ix - lo_.ix), std::abs(c.ix - hi_.ix),
                                                std::abs(c.iy - lo_.iy), std::abs(c.iy - hi_.iy),
                                                std::abs(c.iz - lo_.iz), std::abs(c.iz - hi_.iz)});
        for (std::int64_t ring = 0; ring <= max_ring; ++ring) {
            scan_ring(c, ring, q, kk, best);
            if (best.size() == kk) {
                // Every unscanned point lies outside the (2*ring+1)^3 block around c.
                const double bound = block_clearance(q, c, ring);
                if (best.back().dist2 < bound * bound * (1.0 - 1e-12)) break;
            }
        }
        return best;
    }

    std::vector<std::vector<Neighbor>> query_all(std::span<const Vec3> queries, std::size_t k) const {
        std::vector<std::vector<Neighbor>> out;
        out.reserve(queries.size());
        for (const auto& q : queries) out.push_back(query(q, k));
        return out;
    }

private:
    double block_clearance(const Vec3& q, const VoxelKey& c, std::int64_t ring) const {
        const double r = static_cast<double>(ring);
        double m = std::numeric_limits<double>::infinity();
        const double base[3] = {static_cast<double>(c.ix), static_cast<double>(c.iy), static_cast<double>(c.iz)};
        for (int a = 0; a < 3; ++a) {
            const double lower = (base[a] - r) * cell_, upper = (base[a] + r + 1.0) * cell_;
            m = std::min({m, q[a] - lower, upper - q[a]});
        }
        return std::max(m, 0.0);
    }

    void visit_cell(const VoxelKey& key, const Vec3& q, std::size_t kk, std::vector<Neighbor>& best) const {
        auto it = cells_.find(key);
        if (it == cells_.end()) return;
        for (std::size_t i : it->second) {
            const Neighbor n = detail::make_neighbor(q, ref_[i], i);
            if (best.size() == kk && !detail::closer(n, best.back())) continue;
            best.insert(std::upper_bound(best.begin(), best.end(), n, detail::closer), n);
            if (best.size() > kk) best.pop_back();
        }
    }

    void scan_ring(const VoxelKey& c, std::int64_t ring, const Vec3& q, std::size_t kk,
                   std::vector<Neighbor>& best) const {
        for (std::int64_t dx = -ring; dx <= ring; ++dx)
            for (std::int64_t dy = -ring; dy <= ring; ++dy) {
                const bool edge = std::abs(dx) == ring || std::abs(dy) == ring;
                const std::int64_t step = edge ? 1 : std::max<std::int64_t>(2 * ring, 1);
                for (std::int64_t dz = -ring; dz <= ring; dz += step)
                    visit_cell({c.ix + dx, c.iy + dy, c.iz + dz}, q, kk, best);
            }
    }

    std::vector<Vec3> ref_;
    double cell_;
    VoxelKey lo_, hi_;
    std::unordered_map<VoxelKey, std::vector<std::size_t>, VoxelKeyHash> cells_;
};

}  // namespace mfseg
