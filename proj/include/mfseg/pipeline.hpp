#pragma once

// Glue shared by the CLI, the demo and the acceptance run: synthetic datasets in
// memory, checkpoints with their config sidecar, and the single-frame vs
// multi-frame comparison protocol.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfseg/data_synth.hpp"
#include "mfseg/sequence_io.hpp"
#include "mfseg/training.hpp"

namespace mfseg {

inline io::Sequence make_sequence(const synth::SceneSpec& spec) {
    io::Sequence seq;
    seq.frames = synth::generate(spec);
    seq.num_classes = synth::kNumClasses;
    seq.class_names.assign(synth::kClassNames.begin(), synth::kClassNames.end());
    seq.frame_period = spec.frame_period;
    return seq;
}

inline std::vector<io::Sequence> make_dataset(const synth::DatasetSpec& spec) {
    std::vector<io::Sequence> out;
    out.reserve(spec.sequences);
    for (std::size_t i = 0; i < spec.sequences; ++i) out.push_back(make_sequence(spec.sequence(i)));
    return out;
}

/// 200 training sequences of 5 frames with about 4k points each after occlusion.
inline synth::DatasetSpec default_train_spec() {
    synth::DatasetSpec d;
    d.sequences = 200;
    d.first_seed = 1000;
    d.scene.frames = 5;
    d.scene.points_per_frame = 9000;  // candidates before visibility culling
    return d;
}

/// Held-out scenes from a disjoint seed range.
inline synth::DatasetSpec default_test_spec() {
    synth::DatasetSpec d = default_train_spec();
    d.sequences = 50;
    d.first_seed = 90000;
    return d;
}

/// Reduced widths and supervised-query count that fit a single CPU core; the
/// schedule shape (one-cycle, AdamW, two stages) is unchanged.
inline TrainConfig desk_profile() {
    TrainConfig c;
    c.width = 32;
    c.decoder_hidden = {128, 64, 32, 16, 8};
    c.train_queries = 512;
    c.stage1_epochs = 12;
    c.stage2_epochs = 4;
    c.max_frames = 5;
    return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: parameters in `path`, training config and stage in `path.json`.

struct Checkpoint {
    ParamSet params;
    TrainConfig config;
    int stage = 0;
};

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void save(const Checkpoint& ck, const std::string& path) {
    save_checkpoint(ck.params, path);
    std::ofstream os(sidecar_path(path));
    if (!os) throw CheckpointError("cannot write '" + sidecar_path(path) + "'");
    os << nlohmann::json{{"config", ck.config}, {"stage", ck.stage}}.dump(2) << "\n";
}

inline Checkpoint load(const std::string& path) {
    Checkpoint ck;
    ck.params = load_checkpoint(path);
    std::ifstream is(sidecar_path(path));
    if (!is) throw CheckpointError("missing config sidecar '" + sidecar_path(path) + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
        ck.config = j.at("config").get<TrainConfig>();
        ck.stage = j.at("stage").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("bad config sidecar: ") + e.what());
    }
    return ck;
}

/// The mode a checkpoint was trained for: one frame, concatenated input after
/// stage 1, aggregation once stage 2 has run.
inline FusionMode natural_mode(const Checkpoint& ck) {
    if (ck.config.max_frames == 1) return FusionMode::kSingleFrame;
    return ck.stage >= 2 ? FusionMode::kAggregation : FusionMode::kConcatenation;
}

inline const char* mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::kSingleFrame: return "single";
        case FusionMode::kConcatenation: return "concatenation";
        case FusionMode::kAggregation: return "aggregation";
    }
    return "?";
}

inline std::optional<FusionMode> parse_mode(const std::string& s) {
    if (s == "single") return FusionMode::kSingleFrame;
    if (s == "concatenation") return FusionMode::kConcatenation;
    if (s == "aggregation") return FusionMode::kAggregation;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Comparison protocol

struct Comparison {
    EvalReport single;      // separately trained one-frame model
    EvalReport multi;       // stage 1 on concatenated windows, then stage 2, evaluated with aggregation
    TripletReport triplet_start;  // held-out, stage-1 weights with fresh aggregator
    TripletReport triplet_end;    // held-out, after stage 2
    double single_train_s = 0.0, stage1_train_s = 0.0, stage2_train_s = 0.0;

    double gain() const { return 100.0 * (multi.miou - single.miou); }
    double vru_gain() const { return 100.0 * (multi.vru_miou - single.vru_miou); }
};

inline nlohmann::json to_json(const Comparison& c) {
    const std::vector<std::string> names(synth::kClassNames.begin(), synth::kClassNames.end());
    return {{"single_miou", c.single.miou},
            {"multi_miou", c.multi.miou},
            {"single_vru_miou", c.single.vru_miou},
            {"multi_vru_miou", c.multi.vru_miou},
            {"gain_points", c.gain()},
            {"vru_gain_points", c.vru_gain()},
            {"triplet_cosine_stage2_start", c.triplet_start.mean_cosine},
            {"triplet_cosine_stage2_end", c.triplet_end.mean_cosine},
            {"class_iou", {{"single", to_json(c.single, names).at("class_iou")},
                           {"multi", to_json(c.multi, names).at("class_iou")}}},
            {"train_seconds", {{"single", c.single_train_s}, {"stage1", c.stage1_train_s}, {"stage2", c.stage2_train_s}}}};
}

inline Comparison compare_single_vs_multi(const std::vector<io::Sequence>& train, const std::vector<io::Sequence>& test,
                                          const TrainConfig& cfg, const TrainHooks& hooks = {}) {
    Comparison c;
    TrainConfig single = cfg;
    single.max_frames = 1;
    Stopwatch sw;
    const ParamSet ps = train_stage1(train, single, hooks);
    c.single_train_s = sw.lap_ms() / 1000.0;
    c.single = evaluate(test, ps, single, FusionMode::kSingleFrame);

    sw.lap_ms();
    ParamSet p1 = train_stage1(train, cfg, hooks);
    c.stage1_train_s = sw.lap_ms() / 1000.0;
    init_aggregator(p1, cfg.model(), cfg.seed);
    const std::uint64_t triplet_seed = cfg.seed + 7;
    c.triplet_start = triplet_cosine(test, p1, cfg, triplet_seed, hooks.warn);
    sw.lap_ms();
    const ParamSet p2 = train_stage2(train, cfg, std::move(p1), hooks);
    c.stage2_train_s = sw.lap_ms() / 1000.0;
    c.multi = evaluate(test, p2, cfg, FusionMode::kAggregation);
    c.triplet_end = triplet_cosine(test, p2, cfg, triplet_seed, hooks.warn);
    return c;
}

}  // namespace mfseg
