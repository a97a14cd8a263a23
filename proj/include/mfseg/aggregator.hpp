#pragma once

// Feature-space monoid: ego-corrected association of feature clouds and the
// symmetrized binary aggregator, plus the sliding-window streaming state.
//
// ZERO (the identity) is an explicit tag, never an all-zeros vector: a feature
// paired with ZERO passes through bit-for-bit, coordinate and timestamp included.

#include <algorithm>
#include <array>
#include <deque>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfseg/geometry.hpp"
#include "mfseg/lfe.hpp"
#include "mfseg/nn.hpp"

namespace mfseg {

class AggregationError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

struct AggregatorConfig {
    std::size_t feature_dim = 128;
    std::size_t hidden = 128;
};

/// Appended to each feature before h: offset from voxel center (3) and relative time (1).
inline constexpr std::size_t kPairContextDim = 4;

inline void add_aggregator_params(ParamSet& params, const AggregatorConfig& cfg, std::mt19937_64& rng) {
    const std::size_t d = cfg.feature_dim, in = 2 * (d + kPairContextDim);
    nn::add_mlp(params, "agg.h", {in, cfg.hidden, cfg.hidden, d}, rng);
    nn::add_mlp(params, "agg.g", {d, cfg.hidden, cfg.hidden, d}, rng);
}

inline bool has_aggregator_params(const ParamSet& params) { return params.contains("agg.g.0.weight"); }

/// Batched merge of P pairs that are both non-ZERO:
/// g((h([x|cx], [y|cy]) + h([y|cy], [x|cx])) / 2). `ctx_*` are P x 4.
inline Value merge_pairs(Tape& t, const Value& x, const Value& y, const Value& ctx_x, const Value& ctx_y,
                         const ParamView& params) {
    const Value xt = ops::concat_cols(t, {x, ctx_x});
    const Value yt = ops::concat_cols(t, {y, ctx_y});
    const Value hxy = nn::mlp(t, params, "agg.h", 3, ops::concat_cols(t, {xt, yt}));
    const Value hyx = nn::mlp(t, params, "agg.h", 3, ops::concat_cols(t, {yt, xt}));
    return nn::mlp(t, params, "agg.g", 3, ops::scale(t, ops::add(t, hxy, hyx), 0.5));
}

inline std::size_t aggregator_dim(const ParamView& params) { return params["agg.g.2.bias"].size(); }

/// A D-dimensional feature, or ZERO when empty.
using Feature = std::optional<std::vector<double>>;

struct PairContext {
    Vec3 offset_x = Vec3::Zero(), offset_y = Vec3::Zero();
    double t_x = 0.0, t_y = 0.0;
};

/// x ⊙ y for a single pair: x + y when either side is ZERO, the symmetrized
/// network otherwise.
inline Feature aggregate_pair(const Feature& x, const Feature& y, const PairContext& ctx, const ParamView& params) {
    const std::size_t d = aggregator_dim(params);
    for (const Feature* f : {&x, &y})
        if (*f && (*f)->size() != d)
            throw DimensionError("aggregate_pair: feature of dimension " + std::to_string((*f)->size()) +
                                 ", aggregator expects " + std::to_string(d));
    if (!x) return y;
    if (!y) return x;
    Tape tape(false);
    const Value vx(Array::matrix(1, d, *x)), vy(Array::matrix(1, d, *y));
    const Value cx(Array::matrix(1, kPairContextDim, {ctx.offset_x.x(), ctx.offset_x.y(), ctx.offset_x.z(), ctx.t_x}));
    const Value cy(Array::matrix(1, kPairContextDim, {ctx.offset_y.x(), ctx.offset_y.y(), ctx.offset_y.z(), ctx.t_y}));
    const Value out = merge_pairs(tape, vx, vy, cx, cy, params);
    return std::vector<double>(out.data().begin(), out.data().end());
}

/// Work counters for one aggregation call; depend only on feature counts.
struct AggregationStats {
    std::size_t frames = 0;
    std::size_t rows_associated = 0;
    std::size_t pairs_merged = 0;
    std::size_t rows_coalesced = 0;
    std::size_t rows_materialized = 0;  // rows written into new feature buffers

    AggregationStats& operator+=(const AggregationStats& o) {
        frames += o.frames;
        rows_associated += o.rows_associated;
        pairs_merged += o.pairs_merged;
        rows_coalesced += o.rows_coalesced;
        rows_materialized += o.rows_materialized;
        return *this;
    }
    bool operator==(const AggregationStats&) const = default;
};

struct AssociatedPairs {
    struct Entry {
        VoxelKey key;
        std::optional<std::size_t> x, y;  // row in prev / curr; nullopt is ZERO
        Vec3 offset_x = Vec3::Zero(), offset_y = Vec3::Zero();
        double t_x = 0.0, t_y = 0.0;  // relative to curr.capture_time
        Vec3 coord_x = Vec3::Zero(), coord_y = Vec3::Zero();
    };
    std::vector<Entry> entries;  // ascending key
    double voxel_size = 0.0;

    std::size_t merged_count() const {
        return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const Entry& e) { return e.x && e.y; }));
    }
};

/// Maps prev's coordinates into curr's frame (T_curr^-1 T_prev), voxelizes both
/// sides and pairs co-located features. Unmatched sides are ZERO.
inline AssociatedPairs associate(const FeatureCloud& prev, const FeatureCloud& curr, double voxel_size) {
    require_voxel_size(voxel_size);
    if (prev.voxel_size != voxel_size || curr.voxel_size != voxel_size)
        throw std::invalid_argument("associate: voxel size must match the feature extractor's");
    const std::vector<Vec3> prev_coords = transform_coords(prev.coords, prev.pose, curr.pose);
    const double prev_shift = prev.capture_time - curr.capture_time;

    struct Item {
        VoxelKey key;
        bool from_curr;
        std::size_t row;
    };
    std::vector<Item> items;
    items.reserve(prev.size() + curr.size());
    for (std::size_t i = 0; i < prev.size(); ++i) items.push_back({voxel_key(prev_coords[i], voxel_size), false, i});
    for (std::size_t i = 0; i < curr.size(); ++i) items.push_back({voxel_key(curr.coords[i], voxel_size), true, i});
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
        return a.key < b.key || (a.key == b.key && (a.from_curr < b.from_curr || (a.from_curr == b.from_curr && a.row < b.row)));
    });

    AssociatedPairs out;
    out.voxel_size = voxel_size;
    for (std::size_t j = 0; j < items.size(); ++j) {
        const Item& it = items[j];
        if (out.entries.empty() || out.entries.back().key != it.key) {
            out.entries.emplace_back();
            out.entries.back().key = it.key;
        }
        auto& e = out.entries.back();
        const Vec3 center = voxel_center(it.key, voxel_size);
        if (!it.from_curr) {
            if (e.x) throw AggregationError("associate: two previous features share a voxel");
            e.x = it.row;
            e.coord_x = prev_coords[it.row];
            e.offset_x = e.coord_x - center;
            e.t_x = prev.timestamps[it.row] + prev_shift;
        } else {
            if (e.y) throw AggregationError("associate: two current features share a voxel");
            e.y = it.row;
            e.coord_y = curr.coords[it.row];
            e.offset_y = e.coord_y - center;
            e.t_y = curr.timestamps[it.row];
        }
    }
    return out;
}

namespace detail {

inline Value context_rows(const std::vector<std::array<double, kPairContextDim>>& rows) {
    Array a({rows.size(), kPairContextDim});
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(rows[r].begin(), rows[r].end(), a.data.begin() + static_cast<std::ptrdiff_t>(r * kPairContextDim));
    return Value(std::move(a));
}

inline std::array<double, kPairContextDim> context_of(const Vec3& off, double t) {
    return {off.x(), off.y(), off.z(), t};
}

inline std::vector<std::int64_t> as_index(const std::vector<std::size_t>& v) {
    return {v.begin(), v.end()};
}

}  // namespace detail

/// Merges rows of `cloud` that share a voxel key (left fold in row order), so
/// the result has at most one row per voxel. Needed after a rigid transform,
/// since the source grid and the target grid need not align.
inline FeatureCloud coalesce(Tape& t, const FeatureCloud& cloud, const ParamView& params,
                             AggregationStats* stats = nullptr) {
    const double s = cloud.voxel_size;
    const auto keys = voxelize(cloud.coords, s);
    std::vector<std::size_t> order(cloud.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return keys[a] < keys[b] || (keys[a] == keys[b] && a < b);
    });
    bool any_dup = false;
    for (std::size_t j = 1; j < order.size(); ++j) any_dup = any_dup || keys[order[j]] == keys[order[j - 1]];
    if (!any_dup) return cloud;

    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t j = 0; j < order.size(); ++j) {
        if (j == 0 || keys[order[j]] != keys[order[j - 1]]) groups.emplace_back();
        groups.back().push_back(order[j]);
    }

    // Each group is folded left; round r merges the running result with member r+1
    // for every group that has one. Rows of `pool` index into [cloud | round outputs...].
    std::vector<Value> pool{cloud.features};
    std::size_t pool_rows = cloud.size();
    std::vector<std::int64_t> current(groups.size());
    std::vector<Vec3> acc_coord(groups.size());
    std::vector<double> acc_time(groups.size());
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        current[gi] = static_cast<std::int64_t>(groups[gi][0]);
        acc_coord[gi] = cloud.coords[groups[gi][0]];
        acc_time[gi] = cloud.timestamps[groups[gi][0]];
    }
    for (std::size_t round = 1;; ++round) {
        std::vector<std::size_t> active;
        for (std::size_t gi = 0; gi < groups.size(); ++gi)
            if (groups[gi].size() > round) active.push_back(gi);
        if (active.empty()) break;
        const Value all = pool.size() == 1 ? pool[0] : ops::concat_rows(t, pool);
        std::vector<std::int64_t> xi, yi;
        std::vector<std::array<double, kPairContextDim>> cx, cy;
        for (std::size_t gi : active) {
            const std::size_t row = groups[gi][round];
            const Vec3 center = voxel_center(keys[row], s);
            xi.push_back(current[gi]);
            yi.push_back(static_cast<std::int64_t>(row));
            cx.push_back(detail::context_of(acc_coord[gi] - center, acc_time[gi]));
            cy.push_back(detail::context_of(cloud.coords[row] - center, cloud.timestamps[row]));
        }
        const Value merged = merge_pairs(t, ops::gather_rows(t, all, xi), ops::gather_rows(t, cloud.features, yi),
                                         detail::context_rows(cx), detail::context_rows(cy), params);
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t gi = active[a], row = groups[gi][round];
            current[gi] = static_cast<std::int64_t>(pool_rows + a);
            acc_coord[gi] = voxel_center(keys[row], s);
            acc_time[gi] = std::max(acc_time[gi], cloud.timestamps[row]);
        }
        pool.push_back(merged);
        pool_rows += active.size();
        if (stats) {
            stats->rows_coalesced += active.size();
            stats->rows_materialized += 3 * active.size();
        }
    }

    FeatureCloud out;
    out.voxel_size = s;
    out.pose = cloud.pose;
    out.capture_time = cloud.capture_time;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        out.coords.push_back(acc_coord[gi]);
        out.timestamps.push_back(acc_time[gi]);
    }
    out.features = ops::gather_rows(t, ops::concat_rows(t, pool), current);
    if (stats) stats->rows_materialized += groups.size();
    return out;
}

/// Re-expresses a cloud in the target sensor frame and time base.
inline FeatureCloud to_frame(Tape& t, const FeatureCloud& cloud, const Pose& target_pose, double target_time,
                             const ParamView& params, AggregationStats* stats = nullptr) {
    FeatureCloud out;
    out.voxel_size = cloud.voxel_size;
    out.features = cloud.features;
    out.coords = transform_coords(cloud.coords, cloud.pose, target_pose);
    out.pose = target_pose;
    out.capture_time = target_time;
    const double shift = cloud.capture_time - target_time;
    out.timestamps = cloud.timestamps;
    if (shift != 0.0)
        for (double& ts : out.timestamps) ts += shift;
    if (cloud.pose == target_pose) return out;
    return coalesce(t, out, params, stats);
}

/// prev ⊙ curr over associated voxels, expressed in curr's frame. Merged rows
/// sit at their voxel center with the later timestamp; rows paired with ZERO keep
/// their coordinate and timestamp.
inline FeatureCloud combine(Tape& t, const FeatureCloud& prev, const FeatureCloud& curr, const ParamView& params,
                            AggregationStats* stats = nullptr) {
    const AssociatedPairs pairs = associate(prev, curr, curr.voxel_size);
    const std::size_t np = prev.size(), nc = curr.size();
    std::vector<std::int64_t> xi, yi, out_index;
    std::vector<std::array<double, kPairContextDim>> cx, cy;
    FeatureCloud out;
    out.voxel_size = curr.voxel_size;
    out.pose = curr.pose;
    out.capture_time = curr.capture_time;
    out.coords.reserve(pairs.entries.size());
    out.timestamps.reserve(pairs.entries.size());
    std::size_t merged = 0;
    for (const auto& e : pairs.entries) {
        if (e.x && e.y) {
            xi.push_back(static_cast<std::int64_t>(*e.x));
            yi.push_back(static_cast<std::int64_t>(*e.y));
            cx.push_back(detail::context_of(e.offset_x, e.t_x));
            cy.push_back(detail::context_of(e.offset_y, e.t_y));
            out_index.push_back(static_cast<std::int64_t>(np + nc + merged++));
            out.coords.push_back(voxel_center(e.key, pairs.voxel_size));
            out.timestamps.push_back(std::max(e.t_x, e.t_y));
        } else if (e.x) {
            out_index.push_back(static_cast<std::int64_t>(*e.x));
            out.coords.push_back(e.coord_x);
            out.timestamps.push_back(e.t_x);
        } else {
            out_index.push_back(static_cast<std::int64_t>(np + *e.y));
            out.coords.push_back(e.coord_y);
            out.timestamps.push_back(e.t_y);
        }
    }
    std::vector<Value> sources{prev.features, curr.features};
    if (merged > 0)
        sources.push_back(merge_pairs(t, ops::gather_rows(t, prev.features, xi), ops::gather_rows(t, curr.features, yi),
                                      detail::context_rows(cx), detail::context_rows(cy), params));
    out.features = ops::gather_rows(t, ops::concat_rows(t, sources), out_index);
    if (stats) {
        stats->rows_associated += np + nc;
        stats->pairs_merged += merged;
        stats->rows_materialized += pairs.entries.size() + 3 * merged;
    }
    return out;
}

/// Left fold in the given order: the running result is carried into each next
/// cloud's frame (ego-corrected) before merging, so the result lives in the last
/// cloud's frame. This is the streaming fold; extending it by one frame is one combine.
inline FeatureCloud fold(Tape& t, const std::vector<FeatureCloud>& clouds, const ParamView& params,
                         AggregationStats* stats = nullptr) {
    if (clouds.empty()) throw std::invalid_argument("fold: no clouds");
    FeatureCloud acc = clouds[0];
    for (std::size_t j = 1; j < clouds.size(); ++j)
        acc = combine(t, to_frame(t, acc, clouds[j].pose, clouds[j].capture_time, params, stats), clouds[j], params,
                      stats);
    if (stats) stats->frames += clouds.size();
    return acc;
}

/// Left fold after mapping every cloud into one target frame first:
/// ((c0 ⊙ c1) ⊙ c2) ⊙ ... with all grids aligned to the target.
inline FeatureCloud fold_aligned(Tape& t, const std::vector<FeatureCloud>& clouds, const Pose& target_pose,
                                 double target_time, const ParamView& params, AggregationStats* stats = nullptr) {
    if (clouds.empty()) throw std::invalid_argument("fold: no clouds");
    FeatureCloud acc = to_frame(t, clouds[0], target_pose, target_time, params, stats);
    for (std::size_t j = 1; j < clouds.size(); ++j)
        acc = combine(t, acc, to_frame(t, clouds[j], target_pose, target_time, params, stats), params, stats);
    if (stats) stats->frames += clouds.size();
    return acc;
}

/// Streaming state: cached per-frame extractor outputs and their fold in the
/// newest frame's coordinates.
struct AggregatorState {
    std::size_t max_frames = 10;
    std::deque<FeatureCloud> window;  // capture order, oldest first
    FeatureCloud fused;
    Pose current_pose;
    std::size_t frame_count = 0;
    AggregationStats last_stats;

    explicit AggregatorState(std::size_t max = 10) : max_frames(max) {
        if (max_frames < 1) throw std::invalid_argument("max_frames must be >= 1");
    }
};

/// Appends a frame (evicting the oldest beyond max_frames) and updates the fold
/// of the window. Without eviction the old fold is a prefix of the new one and is
/// extended by a single combine; after an eviction the window is re-folded.
inline AggregatorState step(Tape& t, AggregatorState state, FeatureCloud new_frame, const ParamView& params) {
    new_frame.pose.validate();
    state.window.push_back(std::move(new_frame));
    bool evicted = false;
    while (state.window.size() > state.max_frames) {
        state.window.pop_front();
        evicted = true;
    }
    const FeatureCloud& newest = state.window.back();
    state.last_stats = {};
    if (state.window.size() == 1) {
        state.fused = newest;
        state.last_stats.frames = 1;
    } else if (!evicted) {
        state.fused = combine(t, to_frame(t, state.fused, newest.pose, newest.capture_time, params, &state.last_stats),
                              newest, params, &state.last_stats);
        state.last_stats.frames = 1;
    } else {
        const std::vector<FeatureCloud> ordered(state.window.begin(), state.window.end());
        state.fused = fold(t, ordered, params, &state.last_stats);
    }
    state.current_pose = newest.pose;
    ++state.frame_count;
    return state;
}

}  // namespace mfseg
