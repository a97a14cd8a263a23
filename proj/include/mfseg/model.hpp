#pragma once

// Full segmentation model: parameter layout and the shared forward paths.

#include <algorithm>
#include <chrono>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mfseg/aggregator.hpp"
#include "mfseg/encdec.hpp"
#include "mfseg/lfe.hpp"

namespace mfseg {

struct ModelConfig {
    LfeConfig lfe;
    std::size_t agg_hidden = 128;
    EncoderConfig enc;
    DecoderConfig dec;

    AggregatorConfig aggregator() const { return {lfe.out_dim(), agg_hidden}; }

    /// Narrow widths for fast tests; same topology.
    static ModelConfig tiny(std::size_t width = 8, std::size_t num_classes = 3) {
        ModelConfig c;
        c.lfe.channels = {width, width, width, width};
        c.agg_hidden = width;
        c.enc.channels = width;
        c.dec.hidden = {2 * width, width, width, width, width};
        c.dec.num_classes = num_classes;
        return c;
    }
};

/// Parameters for extractor, encoder and decoder. Aggregator parameters are
/// added separately (they are only trained in the second stage).
inline ParamSet init_backbone(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ParamSet params;
    add_lfe_params(params, cfg.lfe, rng);
    add_encoder_params(params, cfg.lfe.out_dim(), cfg.enc, rng);
    add_decoder_params(params, cfg.enc, cfg.dec, rng);
    return params;
}

/// Adds freshly initialized aggregator parameters (seeded independently of the backbone).
inline void init_aggregator(ParamSet& params, const ModelConfig& cfg, std::uint64_t seed) {
    if (has_aggregator_params(params)) return;
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
    add_aggregator_params(params, cfg.aggregator(), rng);
}

inline ParamSet init_model(const ModelConfig& cfg, std::uint64_t seed) {
    ParamSet p = init_backbone(cfg, seed);
    init_aggregator(p, cfg, seed);
    return p;
}

/// Concatenates a window of raw clouds at the input level, ego-corrected into the
/// last cloud's sensor frame; timestamps become relative to the last capture.
inline RawPointCloud concat_frames(std::span<const RawPointCloud> frames) {
    if (frames.empty()) throw std::invalid_argument("concat_frames: no frames");
    const RawPointCloud& last = frames.back();
    RawPointCloud out;
    out.pose = last.pose;
    out.capture_time = last.capture_time;
    const bool labeled = std::all_of(frames.begin(), frames.end(), [](const auto& f) { return f.labeled() || f.size() == 0; });
    for (const auto& f : frames) {
        const bool same = f.pose == last.pose;
        const Pose rel = same ? Pose::identity() : compose(invert(last.pose), f.pose);
        const float shift = static_cast<float>(f.capture_time - last.capture_time);
        for (std::size_t i = 0; i < f.size(); ++i) {
            out.coords.push_back(same ? f.coords[i] : rel.apply(f.point(i)).cast<float>().eval());
            out.intensity.push_back(f.intensity[i]);
            out.timestamp.push_back(f.timestamp[i] + shift);
            if (labeled) out.labels.push_back(f.labels[i]);
        }
    }
    return out;
}

inline std::vector<Vec3> point_coords(const RawPointCloud& cloud) {
    std::vector<Vec3> out;
    out.reserve(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) out.push_back(cloud.point(i));
    return out;
}

/// Wall time per pipeline component, milliseconds.
struct ComponentTimes {
    double lfe = 0.0;
    double aggregate = 0.0;
    double encode = 0.0;
    double knn = 0.0;
    double decode = 0.0;

    double total() const { return lfe + aggregate + encode + knn + decode; }
    ComponentTimes& operator+=(const ComponentTimes& o) {
        lfe += o.lfe;
        aggregate += o.aggregate;
        encode += o.encode;
        knn += o.knn;
        decode += o.decode;
        return *this;
    }
};

class Stopwatch {
public:
    Stopwatch() : start_(std::chrono::steady_clock::now()) {}
    double lap_ms() {
        const auto now = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(now - start_).count();
        start_ = now;
        return ms;
    }

private:
    std::chrono::steady_clock::time_point start_;
};

/// Encoder + KNN + decoder on a fused cloud for the given query points.
inline Value segment_head(Tape& t, const FeatureCloud& fused, std::span<const Vec3> queries, const ParamView& params,
                          const ModelConfig& cfg, ComponentTimes* times = nullptr) {
    Stopwatch sw;
    const MultiScaleFeatures ms = encode(t, fused, params, cfg.enc);
    if (times) times->encode += sw.lap_ms();
    const NeighborTable table = find_neighbors(queries, ms, cfg.dec.k, cfg.dec.grid_knn, cfg.dec.grid_cell_floor);
    if (times) times->knn += sw.lap_ms();
    Value logits = decode_neighbors(t, table, ms, params, cfg.dec);
    if (times) times->decode += sw.lap_ms();
    return logits;
}

/// Logits for exactly the points of the newest frame in `window`, given an
/// already fused feature cloud. Older raw frames are never touched.
inline Value predict_current(Tape& t, std::span<const RawPointCloud> window, const FeatureCloud& fused,
                             const ParamView& params, const ModelConfig& cfg, ComponentTimes* times = nullptr) {
    if (window.empty()) throw std::invalid_argument("predict_current: empty window");
    const auto queries = point_coords(window.back());
    return segment_head(t, fused, queries, params, cfg, times);
}

/// How a window of frames is turned into the fused feature cloud.
enum class FusionMode {
    kSingleFrame,    // extractor on the newest frame only
    kConcatenation,  // extractor on the ego-corrected concatenation
    kAggregation,    // per-frame extractor, folded with the aggregator
};

inline FeatureCloud fuse_window(Tape& t, std::span<const RawPointCloud> frames, FusionMode mode,
                                const ParamView& params, const ModelConfig& cfg, ComponentTimes* times = nullptr,
                                AggregationStats* stats = nullptr) {
    Stopwatch sw;
    FeatureCloud fused;
    switch (mode) {
        case FusionMode::kSingleFrame:
            fused = extract(t, frames.back(), params, cfg.lfe);
            if (times) times->lfe += sw.lap_ms();
            break;
        case FusionMode::kConcatenation:
            fused = extract(t, concat_frames(frames), params, cfg.lfe);
            if (times) times->lfe += sw.lap_ms();
            break;
        case FusionMode::kAggregation: {
            std::vector<FeatureCloud> clouds;
            for (const auto& f : frames) clouds.push_back(extract(t, f, params, cfg.lfe));
            if (times) times->lfe += sw.lap_ms();
            fused = fold(t, clouds, params, stats);
            if (times) times->aggregate += sw.lap_ms();
            break;
        }
    }
    return fused;
}

}  // namespace mfseg
