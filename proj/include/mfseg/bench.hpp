#pragma once

// Latency benchmark: streaming aggregation vs input concatenation over growing
// frame counts, per-component timings and aggregation work counters.

#include <algorithm>
#include <cmath>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfseg/model.hpp"

namespace mfseg::bench {

struct BenchConfig {
    std::size_t max_frames = 10;
    std::size_t repeats = 7;  // timed runs per point, median reported
    std::size_t warmups = 2;
    std::size_t max_queries = 0;  // 0: every current-frame point is queried
};

struct Timing {
    ComponentTimes components;  // from the run with the median total
    double total = 0.0;         // median wall time of a full step
};

struct FramePoint {
    std::size_t frames = 0;
    std::size_t raw_points = 0;      // points that contributed to the step's input
    std::size_t fused_rows = 0;
    Timing timing;
    AggregationStats counters;       // streaming only
};

struct LatencyReport {
    BenchConfig config;
    std::vector<FramePoint> streaming;
    std::vector<FramePoint> concatenation;
    double streaming_slope = 0.0;      // ms per frame
    double concatenation_slope = 0.0;

    double slope_ratio() const {
        return concatenation_slope != 0.0 ? streaming_slope / concatenation_slope : INFINITY;
    }
};

/// Least-squares slope of y against x.
inline double fitted_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fitted_slope: need two or more points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    return sxy / sxx;
}

template <typename Fn>
Timing time_median(const BenchConfig& cfg, Fn&& run) {
    if (cfg.repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
    for (std::size_t i = 0; i < cfg.warmups; ++i) {
        ComponentTimes sink;
        run(sink);
    }
    std::vector<Timing> runs;
    for (std::size_t i = 0; i < cfg.repeats; ++i) {
        Timing t;
        Stopwatch sw;
        run(t.components);
        t.total = sw.lap_ms();
        runs.push_back(t);
    }
    std::sort(runs.begin(), runs.end(), [](const Timing& a, const Timing& b) { return a.total < b.total; });
    return runs[runs.size() / 2];
}

inline std::vector<Vec3> query_points(const RawPointCloud& cur, std::size_t limit) {
    const std::size_t n = limit == 0 ? cur.size() : std::min(limit, cur.size());
    std::vector<Vec3> q;
    q.reserve(n);
    // Evenly strided subset, deterministic.
    for (std::size_t j = 0; j < n; ++j) q.push_back(cur.point(j * cur.size() / n));
    return q;
}

/// Streaming step at frame f: extractor on the new frame only, one aggregator step
/// over the cached window, then the head. Concatenation at frame f: extractor on
/// the ego-corrected concatenation of all f frames, then the head. Inputs are
/// preloaded; nothing is read from disk while timing.
inline LatencyReport run(std::span<const RawPointCloud> frames, const ParamSet& params, const ModelConfig& model,
                         const BenchConfig& cfg) {
    if (cfg.repeats < 5) throw std::invalid_argument("bench: at least 5 timed repeats are required");
    if (cfg.max_frames < 1) throw std::invalid_argument("bench: max_frames must be >= 1");
    if (frames.size() < cfg.max_frames)
        throw std::invalid_argument("bench: sequence has " + std::to_string(frames.size()) + " frames, need " +
                                    std::to_string(cfg.max_frames));
    const ParamView view = constant_view(params);
    LatencyReport rep;
    rep.config = cfg;

    AggregatorState state(cfg.max_frames);
    std::size_t cumulative = 0;
    for (std::size_t f = 1; f <= cfg.max_frames; ++f) {
        const RawPointCloud& cur = frames[f - 1];
        const auto queries = query_points(cur, cfg.max_queries);
        cumulative += cur.size();

        FramePoint s;
        s.frames = f;
        s.raw_points = cur.size();
        AggregatorState next(cfg.max_frames);
        s.timing = time_median(cfg, [&](ComponentTimes& ct) {
            Tape t(false);
            Stopwatch sw;
            FeatureCloud fc = extract(t, cur, view, model.lfe);
            ct.lfe += sw.lap_ms();
            next = step(t, state, std::move(fc), view);
            ct.aggregate += sw.lap_ms();
            const Value logits = segment_head(t, next.fused, queries, view, model, &ct);
            if (logits.rows() != queries.size()) throw std::logic_error("bench: logits row count mismatch");
        });
        state = std::move(next);
        s.fused_rows = state.fused.size();
        s.counters = state.last_stats;
        rep.streaming.push_back(s);

        FramePoint c;
        c.frames = f;
        c.raw_points = cumulative;
        const auto window = frames.subspan(0, f);
        c.timing = time_median(cfg, [&](ComponentTimes& ct) {
            Tape t(false);
            Stopwatch sw;
            const FeatureCloud fused = extract(t, concat_frames(window), view, model.lfe);
            ct.lfe += sw.lap_ms();
            c.fused_rows = fused.size();
            const Value logits = segment_head(t, fused, queries, view, model, &ct);
            if (logits.rows() != queries.size()) throw std::logic_error("bench: logits row count mismatch");
        });
        rep.concatenation.push_back(c);
    }
    if (cfg.max_frames >= 2) {
        std::vector<double> x, ys, yc;
        for (std::size_t i = 0; i < cfg.max_frames; ++i) {
            x.push_back(static_cast<double>(i + 1));
            ys.push_back(rep.streaming[i].timing.total);
            yc.push_back(rep.concatenation[i].timing.total);
        }
        rep.streaming_slope = fitted_slope(x, ys);
        rep.concatenation_slope = fitted_slope(x, yc);
    }
    return rep;
}

inline const char* const kComponents[] = {"lfe", "associate+aggregate", "encode", "knn", "decode"};

inline std::vector<double> component_values(const ComponentTimes& t) {
    return {t.lfe, t.aggregate, t.encode, t.knn, t.decode};
}

inline nlohmann::json to_json(const LatencyReport& r) {
    auto series = [](const std::vector<FramePoint>& pts, bool counters) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : pts) {
            nlohmann::json comp;
            const auto vals = component_values(p.timing.components);
            for (std::size_t i = 0; i < vals.size(); ++i) comp[kComponents[i]] = vals[i];
            nlohmann::json e{{"frames", p.frames},
                             {"raw_points", p.raw_points},
                             {"fused_rows", p.fused_rows},
                             {"total_ms", p.timing.total},
                             {"components_ms", comp}};
            if (counters)
                e["counters"] = {{"frames_folded", p.counters.frames},
                                 {"rows_associated", p.counters.rows_associated},
                                 {"pairs_merged", p.counters.pairs_merged},
                                 {"rows_coalesced", p.counters.rows_coalesced},
                                 {"rows_materialized", p.counters.rows_materialized}};
            arr.push_back(e);
        }
        return arr;
    };
    return {{"repeats", r.config.repeats},
            {"warmups", r.config.warmups},
            {"max_frames", r.config.max_frames},
            {"max_queries", r.config.max_queries},
            {"streaming", series(r.streaming, true)},
            {"concatenation", series(r.concatenation, false)},
            {"slope_ms_per_frame", {{"streaming", r.streaming_slope}, {"concatenation", r.concatenation_slope}}},
            {"slope_ratio", r.slope_ratio()}};
}

/// Columns: mode, frames, component, ms (component "total" is the median step time).
inline void write_csv(const LatencyReport& r, std::ostream& out) {
    out << "mode,frames,component,ms\n";
    auto rows = [&](const char* mode, const std::vector<FramePoint>& pts) {
        for (const auto& p : pts) {
            const auto vals = component_values(p.timing.components);
            for (std::size_t i = 0; i < vals.size(); ++i)
                out << mode << "," << p.frames << "," << kComponents[i] << "," << vals[i] << "\n";
            out << mode << "," << p.frames << ",total," << p.timing.total << "\n";
        }
    };
    rows("streaming", r.streaming);
    rows("concatenation", r.concatenation);
}

/// Largest relative gap between the component sum and the measured total.
inline double worst_accounting_gap(const LatencyReport& r) {
    double worst = 0.0;
    for (const auto* series : {&r.streaming, &r.concatenation})
        for (const auto& p : *series)
            if (p.timing.total > 0.0)
                worst = std::max(worst, std::abs(p.timing.components.total() - p.timing.total) / p.timing.total);
    return worst;
}

}  // namespace mfseg::bench
