#pragma once

// Multi-scale grid-pool encoder over a fused feature cloud, and the point
// decoder that queries it with KNN instead of upsampling.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfseg/geometry.hpp"
#include "mfseg/lfe.hpp"
#include "mfseg/nn.hpp"

namespace mfseg {

struct EncoderConfig {
    std::size_t scales = 3;
    std::size_t channels = 128;
};

struct DecoderConfig {
    std::size_t k = 3;
    std::vector<std::size_t> hidden{1024, 512, 256, 128, 64};
    std::size_t num_classes = 6;
    bool grid_knn = true;  // exact either way; the grid is only faster
    double grid_cell_floor = 0.8;  // m; sparse fine scales otherwise walk many empty rings
};

struct MultiScaleFeatures {
    struct Scale {
        double voxel_size = 0.0;
        std::vector<Vec3> coords;
        Value features;  // M_s x D_s
        std::size_t size() const { return coords.size(); }
        std::size_t dim() const { return features.shape()[1]; }
    };
    std::vector<Scale> scales;
};

inline void add_encoder_params(ParamSet& params, std::size_t input_dim, const EncoderConfig& cfg,
                               std::mt19937_64& rng) {
    for (std::size_t s = 0; s < cfg.scales; ++s)
        nn::add_mlp(params, "enc." + std::to_string(s), {s == 0 ? input_dim : cfg.channels, cfg.channels, cfg.channels},
                    rng);
}

inline std::size_t decoder_input_dim(const EncoderConfig& enc, const DecoderConfig& dec) {
    return enc.scales * dec.k * (enc.channels + 3);
}

inline void add_decoder_params(ParamSet& params, const EncoderConfig& enc, const DecoderConfig& dec,
                               std::mt19937_64& rng) {
    std::vector<std::size_t> dims{decoder_input_dim(enc, dec)};
    dims.insert(dims.end(), dec.hidden.begin(), dec.hidden.end());
    dims.push_back(dec.num_classes);
    nn::add_mlp(params, "dec", dims, rng);
}

/// Scale 0 is the fused cloud after a 2-layer FCN; each coarser scale max-pools
/// the previous one on a grid of twice the voxel size (coordinates become group
/// centroids) and applies its own 2-layer FCN.
inline MultiScaleFeatures encode(Tape& t, const FeatureCloud& fused, const ParamView& params, const EncoderConfig& cfg) {
    if (fused.size() == 0) throw std::invalid_argument("encode: empty feature cloud");
    if (cfg.scales < 1) throw std::invalid_argument("encode: at least one scale required");
    MultiScaleFeatures ms;
    ms.scales.push_back({fused.voxel_size, fused.coords, nn::mlp(t, params, "enc.0", 2, fused.features)});
    for (std::size_t s = 1; s < cfg.scales; ++s) {
        const auto& prev = ms.scales.back();
        const double size = prev.voxel_size * 2.0;
        const auto keys = voxelize(prev.coords, size);
        std::vector<std::size_t> order(keys.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return keys[a] < keys[b] || (keys[a] == keys[b] && a < b);
        });
        std::vector<std::size_t> offsets;
        std::vector<Vec3> coords;
        for (std::size_t j = 0; j < order.size(); ++j) {
            if (j == 0 || keys[order[j]] != keys[order[j - 1]]) {
                offsets.push_back(j);
                coords.push_back(Vec3::Zero());
            }
            coords.back() += prev.coords[order[j]];
        }
        offsets.push_back(order.size());
        for (std::size_t g = 0; g < coords.size(); ++g) coords[g] /= static_cast<double>(offsets[g + 1] - offsets[g]);
        const Value pooled = ops::segment_max(t, ops::gather_rows(t, prev.features, {order.begin(), order.end()}), offsets);
        ms.scales.push_back({size, std::move(coords), nn::mlp(t, params, "enc." + std::to_string(s), 2, pooled)});
    }
    return ms;
}

/// Per scale, per query: up to k neighbors sorted by distance (index tiebreak).
using NeighborTable = std::vector<std::vector<std::vector<Neighbor>>>;

/// Grid cell for a scale: twice its voxel size, at least `floor`, and wide enough
/// that about 8 points share a cell if the cloud filled its xy bounding box.
inline double knn_cell(std::span<const Vec3> coords, double voxel_size, double floor) {
    double cell = std::max(2.0 * voxel_size, floor);
    if (coords.size() > 1) {
        Vec3 lo = coords[0], hi = coords[0];
        for (const auto& c : coords) {
            lo = lo.cwiseMin(c);
            hi = hi.cwiseMax(c);
        }
        const double area = (hi.x() - lo.x()) * (hi.y() - lo.y());
        cell = std::max(cell, std::sqrt(8.0 * area / static_cast<double>(coords.size())));
    }
    return cell;
}

inline NeighborTable find_neighbors(std::span<const Vec3> queries, const MultiScaleFeatures& ms, std::size_t k,
                                    bool use_grid, double cell_floor = 0.8) {
    NeighborTable table;
    for (const auto& scale : ms.scales) {
        if (use_grid)
            table.push_back(KnnGrid(scale.coords, knn_cell(scale.coords, scale.voxel_size, cell_floor)).query_all(queries, k));
        else
            table.push_back(knn(queries, scale.coords, k));
    }
    return table;
}

/// Logits [Q x C] from gathered blocks [feature | encoder coord - query coord]
/// per scale and neighbor. Missing neighbors (scale smaller than k) are zero blocks.
inline Value decode_neighbors(Tape& t, const NeighborTable& table, const MultiScaleFeatures& ms,
                              const ParamView& params, const DecoderConfig& cfg) {
    if (table.size() != ms.scales.size()) throw std::invalid_argument("decode: neighbor table does not match scales");
    const std::size_t q = table.empty() ? 0 : table[0].size();
    if (q == 0) throw std::invalid_argument("decode: no query points");
    std::vector<Value> pieces;
    for (std::size_t s = 0; s < ms.scales.size(); ++s) {
        for (std::size_t j = 0; j < cfg.k; ++j) {
            std::vector<std::int64_t> idx(q, -1);
            Array off({q, 3});
            for (std::size_t r = 0; r < q; ++r) {
                const auto& nb = table[s][r];
                if (j >= nb.size()) continue;
                idx[r] = static_cast<std::int64_t>(nb[j].index);
                for (int a = 0; a < 3; ++a) off.data[r * 3 + static_cast<std::size_t>(a)] = nb[j].offset[a];
            }
            pieces.push_back(ops::gather_rows(t, ms.scales[s].features, std::move(idx)));
            pieces.push_back(Value(std::move(off)));
        }
    }
    return nn::mlp(t, params, "dec", cfg.hidden.size() + 1, ops::concat_cols(t, pieces));
}

inline Value decode(Tape& t, std::span<const Vec3> queries, const MultiScaleFeatures& ms, const ParamView& params,
                    const DecoderConfig& cfg) {
    if (cfg.k < 1) throw std::invalid_argument("decode: k must be >= 1");
    return decode_neighbors(t, find_neighbors(queries, ms, cfg.k, cfg.grid_knn, cfg.grid_cell_floor), ms, params, cfg);
}

}  // namespace mfseg
