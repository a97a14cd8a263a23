#pragma once

// Two-stage training, the three-branch auxiliary loss and evaluation.
//
// Each training or evaluation sample is one sequence: its last frame is the
// current frame (the one whose points are predicted) and the window is the last
// min(frames, max_frames) frames.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfseg/metrics.hpp"
#include "mfseg/model.hpp"
#include "mfseg/sequence_io.hpp"

namespace mfseg {

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
    return [](const std::string& msg) { std::cerr << msg << "\n"; };
}

struct TrainConfig {
    std::size_t stage1_epochs = 50;
    std::size_t stage2_epochs = 20;
    double max_lr_stage1 = 0.002;
    double max_lr_stage2 = 0.001;
    std::size_t max_frames = 10;
    double lfe_voxel_size = 0.2;
    double aux_weight = 1.0;
    std::size_t k = 3;
    std::size_t scales = 3;
    std::uint64_t seed = 0;
    std::size_t num_classes = 6;

    // Network widths (extractor, aggregator hidden, encoder) and decoder hidden sizes.
    std::size_t width = 128;
    std::vector<std::size_t> decoder_hidden{1024, 512, 256, 128, 64};
    // Current-frame points supervised per step; 0 uses all labeled points.
    std::size_t train_queries = 0;
    // Random yaw rotation and mirror flip applied per sample.
    bool augment = false;
    AdamWOptions adamw;

    void validate() const {
        if (stage1_epochs < 1 || stage2_epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
        if (!(aux_weight >= 0.0)) throw std::invalid_argument("train config: aux weight must be >= 0");
        if (max_frames < 1) throw std::invalid_argument("train config: max_frames must be >= 1");
        if (k < 1 || scales < 1 || width < 1 || num_classes < 2)
            throw std::invalid_argument("train config: k, scales, width must be >= 1 and classes >= 2");
        require_voxel_size(lfe_voxel_size);
    }

    ModelConfig model() const {
        ModelConfig m;
        m.lfe.voxel_size = lfe_voxel_size;
        m.lfe.channels.assign(4, width);
        m.agg_hidden = width;
        m.enc.scales = scales;
        m.enc.channels = width;
        m.dec.k = k;
        m.dec.hidden = decoder_hidden;
        m.dec.num_classes = num_classes;
        return m;
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"stage1_epochs", c.stage1_epochs}, {"stage2_epochs", c.stage2_epochs}, {"max_lr_stage1", c.max_lr_stage1},
         {"max_lr_stage2", c.max_lr_stage2}, {"max_frames", c.max_frames},       {"lfe_voxel_size", c.lfe_voxel_size},
         {"aux_weight", c.aux_weight},       {"k", c.k},                         {"scales", c.scales},
         {"seed", c.seed},                   {"num_classes", c.num_classes},     {"width", c.width},
         {"decoder_hidden", c.decoder_hidden}, {"train_queries", c.train_queries}, {"augment", c.augment},
         {"weight_decay", c.adamw.weight_decay}};
}

/// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    static const std::vector<std::string> known{
        "stage1_epochs", "stage2_epochs", "max_lr_stage1", "max_lr_stage2", "max_frames", "lfe_voxel_size",
        "aux_weight",    "k",             "scales",        "seed",          "num_classes", "width",
        "decoder_hidden", "train_queries", "augment",      "weight_decay"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("train config: unknown key '" + key + "'");
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("stage1_epochs", c.stage1_epochs);
    get("stage2_epochs", c.stage2_epochs);
    get("max_lr_stage1", c.max_lr_stage1);
    get("max_lr_stage2", c.max_lr_stage2);
    get("max_frames", c.max_frames);
    get("lfe_voxel_size", c.lfe_voxel_size);
    get("aux_weight", c.aux_weight);
    get("k", c.k);
    get("scales", c.scales);
    get("seed", c.seed);
    get("num_classes", c.num_classes);
    get("width", c.width);
    get("decoder_hidden", c.decoder_hidden);
    get("train_queries", c.train_queries);
    get("augment", c.augment);
    get("weight_decay", c.adamw.weight_decay);
}

/// Frames of the sample window for a sequence.
inline std::span<const RawPointCloud> sample_window(const io::Sequence& seq, std::size_t max_frames) {
    if (seq.frames.empty()) throw std::invalid_argument("sequence has no frames");
    const std::size_t n = std::min(seq.frames.size(), max_frames);
    return std::span<const RawPointCloud>(seq.frames).subspan(seq.frames.size() - n, n);
}

/// Applies the same yaw rotation (and optional mirror across the x axis) to every
/// frame's sensor coordinates, conjugating the poses so relative motion stays rigid.
inline std::vector<RawPointCloud> augment_window(std::span<const RawPointCloud> frames, double yaw, bool flip) {
    Eigen::Matrix3d a = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
    if (flip) a = a * Eigen::Vector3d(1.0, -1.0, 1.0).asDiagonal();
    std::vector<RawPointCloud> out(frames.begin(), frames.end());
    for (auto& f : out) {
        for (auto& c : f.coords) c = (a * c.cast<double>()).cast<float>();
        f.pose.rotation = a * f.pose.rotation * a.transpose();
        f.pose.translation = a * f.pose.translation;
    }
    return out;
}

/// Labeled current-frame points, subsampled to at most `limit` (0 = all) in ascending order.
inline std::vector<std::size_t> select_queries(const RawPointCloud& current, std::size_t limit, std::mt19937_64& rng) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < current.size(); ++i)
        if (current.labeled() && current.labels[i] != kUnlabeled) idx.push_back(i);
    if (limit > 0 && idx.size() > limit) {
        for (std::size_t i = 0; i < limit; ++i) {
            std::uniform_int_distribution<std::size_t> d(i, idx.size() - 1);
            std::swap(idx[i], idx[d(rng)]);
        }
        idx.resize(limit);
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

struct Branches {
    FeatureCloud capture_order;  // (i)
    FeatureCloud permuted;       // (ii)
    FeatureCloud concatenated;   // (iii)
    std::vector<FeatureCloud> per_frame;
};

/// The three branches of the auxiliary objective for one window (all in the
/// newest frame's coordinates): (i) the streaming fold in capture order, (ii) a
/// fold in order `perm` after ego-correcting every frame into the newest frame,
/// (iii) the extractor on the ego-corrected input concatenation.
inline Branches build_branches(Tape& t, std::span<const RawPointCloud> frames, const ParamView& params,
                               const ModelConfig& cfg, const std::vector<std::size_t>& perm) {
    if (frames.size() < 2) throw std::invalid_argument("build_branches: at least two frames required");
    if (perm.size() != frames.size()) throw std::invalid_argument("build_branches: permutation length mismatch");
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t p : perm) {
        if (p >= perm.size() || seen[p]) throw std::invalid_argument("build_branches: not a permutation");
        seen[p] = true;
    }
    Branches b;
    for (const auto& f : frames) b.per_frame.push_back(extract(t, f, params, cfg.lfe));
    b.capture_order = fold(t, b.per_frame, params);
    std::vector<FeatureCloud> shuffled;
    for (std::size_t p : perm) shuffled.push_back(b.per_frame[p]);
    b.permuted = fold_aligned(t, shuffled, frames.back().pose, frames.back().capture_time, params);
    b.concatenated = extract(t, concat_frames(frames), params, cfg.lfe);
    return b;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> d(0, i - 1);
        std::swap(p[i - 1], p[d(rng)]);
    }
    return p;
}

inline Branches build_branches(Tape& t, std::span<const RawPointCloud> frames, const ParamView& params,
                               const ModelConfig& cfg, std::mt19937_64& rng) {
    return build_branches(t, frames, params, cfg, random_permutation(frames.size(), rng));
}

struct AuxLoss {
    Value loss;                  // scalar
    std::size_t triplets = 0;
    double mean_cosine = 0.0;    // mean over triplets of the three pairwise cosines
    double cosine_sum = 0.0;     // sum over triplets of that per-triplet mean
};

/// Three-way cosine loss over voxels present in all three feature clouds:
/// mean over triplets of mean over the three pairs of (1 - cos).
inline AuxLoss aux_loss(Tape& t, const FeatureCloud& a, const FeatureCloud& b, const FeatureCloud& c,
                        const Logger& warn = stderr_logger()) {
    const double s = a.voxel_size;
    if (b.voxel_size != s || c.voxel_size != s) throw std::invalid_argument("aux_loss: voxel sizes differ");
    struct Item {
        VoxelKey key;
        int branch;
        std::size_t row;
        bool operator<(const Item& o) const {
            return key < o.key || (key == o.key && (branch < o.branch || (branch == o.branch && row < o.row)));
        }
    };
    std::vector<Item> items;
    const FeatureCloud* clouds[3] = {&a, &b, &c};
    for (int br = 0; br < 3; ++br)
        for (std::size_t i = 0; i < clouds[br]->size(); ++i)
            items.push_back({voxel_key(clouds[br]->coords[i], s), br, i});
    std::sort(items.begin(), items.end());
    std::vector<std::int64_t> ia, ib, ic;
    for (std::size_t j = 0; j + 2 < items.size(); ++j) {
        const Item &x = items[j], &y = items[j + 1], &z = items[j + 2];
        if (x.key == y.key && y.key == z.key && x.branch == 0 && y.branch == 1 && z.branch == 2) {
            ia.push_back(static_cast<std::int64_t>(x.row));
            ib.push_back(static_cast<std::int64_t>(y.row));
            ic.push_back(static_cast<std::int64_t>(z.row));
            j += 2;
        }
    }
    AuxLoss out;
    out.triplets = ia.size();
    if (out.triplets == 0) {
        if (warn) warn("warning: auxiliary loss found no complete triplets; contributing 0");
        out.loss = Value(Array::scalar(0.0));
        return out;
    }
    const Value fa = ops::gather_rows(t, a.features, ia);
    const Value fb = ops::gather_rows(t, b.features, ib);
    const Value fc = ops::gather_rows(t, c.features, ic);
    const Value cos_sum = ops::add(t, ops::add(t, ops::sum(t, ops::rowwise_cosine(t, fa, fb)),
                                               ops::sum(t, ops::rowwise_cosine(t, fa, fc))),
                                   ops::sum(t, ops::rowwise_cosine(t, fb, fc)));
    const double n = static_cast<double>(out.triplets);
    // 1 - cos_sum / (3n)
    out.loss = ops::add(t, ops::scale(t, cos_sum, -1.0 / (3.0 * n)), Value(Array::scalar(1.0)));
    out.cosine_sum = cos_sum.item() / 3.0;
    out.mean_cosine = out.cosine_sum / n;
    return out;
}

inline std::vector<Vec3> gather_points(const RawPointCloud& cloud, const std::vector<std::size_t>& idx) {
    std::vector<Vec3> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(cloud.point(i));
    return out;
}

inline std::vector<std::size_t> gather_labels(const RawPointCloud& cloud, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(cloud.labels[i]);
    return out;
}

inline std::vector<std::size_t> argmax_rows(const Value& logits) {
    const std::size_t n = logits.rows(), c = logits.cols();
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * c;
        out[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    }
    return out;
}

struct LossTerms {
    Value total;
    Value ce;
    AuxLoss aux;
    Value logits;
};

/// Stage-1 objective: cross-entropy of the decoder on the concatenated window.
inline LossTerms stage1_loss(Tape& t, std::span<const RawPointCloud> frames, const std::vector<std::size_t>& queries,
                             const ParamView& params, const ModelConfig& cfg) {
    LossTerms out;
    const FeatureCloud fused = extract(t, concat_frames(frames), params, cfg.lfe);
    const auto q = gather_points(frames.back(), queries);
    out.logits = segment_head(t, fused, q, params, cfg);
    out.ce = ops::softmax_cross_entropy(t, out.logits, gather_labels(frames.back(), queries));
    out.total = out.ce;
    out.aux.loss = Value(Array::scalar(0.0));
    return out;
}

/// Stage-2 objective: cross-entropy on branch (i) plus lambda times the auxiliary loss.
inline LossTerms stage2_loss(Tape& t, std::span<const RawPointCloud> frames, const std::vector<std::size_t>& queries,
                             const std::vector<std::size_t>& perm, const ParamView& params, const ModelConfig& cfg,
                             double lambda, const Logger& warn = stderr_logger()) {
    LossTerms out;
    const Branches b = build_branches(t, frames, params, cfg, perm);
    const auto q = gather_points(frames.back(), queries);
    out.logits = segment_head(t, b.capture_order, q, params, cfg);
    out.ce = ops::softmax_cross_entropy(t, out.logits, gather_labels(frames.back(), queries));
    out.aux = aux_loss(t, b.capture_order, b.permuted, b.concatenated, warn);
    out.total = lambda == 0.0 ? out.ce : ops::add(t, out.ce, ops::scale(t, out.aux.loss, lambda));
    return out;
}

struct EpochRecord {
    int stage = 1;
    std::size_t epoch = 0;
    double lr = 0.0;
    double ce_loss = 0.0;
    double aux_loss = 0.0;
    std::optional<double> mean_triplet_cosine;
    double train_miou = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
    nlohmann::json j{{"stage", r.stage},       {"epoch", r.epoch},         {"lr", r.lr},
                     {"ce_loss", r.ce_loss},   {"aux_loss", r.aux_loss},   {"train_miou", r.train_miou}};
    j["mean_triplet_cosine"] = r.mean_triplet_cosine ? nlohmann::json(*r.mean_triplet_cosine) : nlohmann::json(nullptr);
    return j;
}

struct TrainHooks {
    std::ostream* jsonl = nullptr;                               // one record per epoch
    std::function<void(const EpochRecord&)> on_epoch;           // optional progress callback
    Logger warn = stderr_logger();
};

namespace detail {

inline std::span<const RawPointCloud> maybe_augment(std::span<const RawPointCloud> window, bool augment,
                                                    std::mt19937_64& rng, std::vector<RawPointCloud>& storage) {
    if (!augment) return window;
    const double yaw = std::uniform_real_distribution<double>(-std::numbers::pi, std::numbers::pi)(rng);
    const bool flip = std::bernoulli_distribution(0.5)(rng);
    storage = augment_window(window, yaw, flip);
    return storage;
}

template <typename StepFn>
ParamSet run_stage(int stage, ParamSet params, const std::vector<io::Sequence>& data, const TrainConfig& cfg,
                   std::size_t epochs, double max_lr, std::uint64_t stream, const TrainHooks& hooks, StepFn&& step_fn) {
    if (data.empty()) throw std::invalid_argument("training: empty dataset");
    std::mt19937_64 rng(cfg.seed * 0x100000001B3ULL + stream);
    const std::size_t total = epochs * data.size();
    std::size_t step = 0;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::uniform_int_distribution<std::size_t> d(0, i - 1);
            std::swap(order[i - 1], order[d(rng)]);
        }
        EpochRecord rec;
        rec.stage = stage;
        rec.epoch = epoch;
        ConfusionMatrix conf(cfg.num_classes);
        double ce = 0.0, aux = 0.0, cos_sum = 0.0;
        std::size_t triplets = 0, samples = 0;
        for (std::size_t si : order) {
            const double lr = one_cycle_lr(step, total, max_lr);
            rec.lr = lr;
            Tape tape;
            ParamView view = bind(tape, params);
            std::vector<RawPointCloud> storage;
            const auto window = maybe_augment(sample_window(data[si], cfg.max_frames), cfg.augment, rng, storage);
            const auto queries = select_queries(window.back(), cfg.train_queries, rng);
            ++step;
            if (queries.empty()) continue;
            const LossTerms terms = step_fn(tape, window, queries, view, rng);
            tape.backward(terms.total);
            adamw_step(params, collect_gradients(tape, view), lr, cfg.adamw);
            conf.add(gather_labels(window.back(), queries), argmax_rows(terms.logits));
            ce += terms.ce.item();
            aux += terms.aux.loss.item();
            cos_sum += terms.aux.cosine_sum;
            triplets += terms.aux.triplets;
            ++samples;
        }
        rec.ce_loss = samples ? ce / static_cast<double>(samples) : 0.0;
        rec.aux_loss = samples ? aux / static_cast<double>(samples) : 0.0;
        if (stage == 2 && triplets > 0) rec.mean_triplet_cosine = cos_sum / static_cast<double>(triplets);
        rec.train_miou = conf.miou();
        if (hooks.jsonl) *hooks.jsonl << to_json(rec).dump() << "\n" << std::flush;
        if (hooks.on_epoch) hooks.on_epoch(rec);
    }
    return params;
}

}  // namespace detail

/// Input-concatenation training of extractor, encoder and decoder (aggregator bypassed).
inline ParamSet train_stage1(const std::vector<io::Sequence>& data, const TrainConfig& cfg,
                             const TrainHooks& hooks = {}) {
    cfg.validate();
    const ModelConfig model = cfg.model();
    return detail::run_stage(1, init_backbone(model, cfg.seed), data, cfg, cfg.stage1_epochs, cfg.max_lr_stage1, 1,
                             hooks,
                             [&](Tape& t, std::span<const RawPointCloud> w, const std::vector<std::size_t>& q,
                                 const ParamView& view, std::mt19937_64&) { return stage1_loss(t, w, q, view, model); });
}

/// Fine-tuning of all parameters with cross-entropy on the aggregated branch plus
/// the auxiliary loss. Aggregator parameters are initialized here if absent.
inline ParamSet train_stage2(const std::vector<io::Sequence>& data, const TrainConfig& cfg, ParamSet init,
                             const TrainHooks& hooks = {}) {
    cfg.validate();
    const ModelConfig model = cfg.model();
    init_aggregator(init, model, cfg.seed);
    init.reset_optimizer();
    for (const auto& s : data)
        if (std::min(s.frames.size(), cfg.max_frames) < 2)
            throw std::invalid_argument("stage 2 needs windows of at least two frames");
    return detail::run_stage(
        2, std::move(init), data, cfg, cfg.stage2_epochs, cfg.max_lr_stage2, 2, hooks,
        [&](Tape& t, std::span<const RawPointCloud> w, const std::vector<std::size_t>& q, const ParamView& view,
            std::mt19937_64& rng) {
            return stage2_loss(t, w, q, random_permutation(w.size(), rng), view, model, cfg.aux_weight, hooks.warn);
        });
}

struct EvalReport {
    ConfusionMatrix confusion{1};
    std::vector<std::optional<double>> class_iou;
    double miou = 0.0;
    double vru_miou = 0.0;  // mean IoU over pedestrian and cyclist
    std::size_t points = 0;
    std::size_t sequences = 0;
    ComponentTimes mean_times;  // per sequence, milliseconds
};

inline nlohmann::json to_json(const EvalReport& r, const std::vector<std::string>& names = {}) {
    nlohmann::json iou = nlohmann::json::object();
    for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
        const std::string key = c < names.size() ? names[c] : std::to_string(c);
        iou[key] = r.class_iou[c] ? nlohmann::json(*r.class_iou[c]) : nlohmann::json(nullptr);
    }
    nlohmann::json conf = nlohmann::json::array();
    for (std::size_t t = 0; t < r.confusion.num_classes(); ++t) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t p = 0; p < r.confusion.num_classes(); ++p) row.push_back(r.confusion.at(t, p));
        conf.push_back(row);
    }
    return {{"miou", r.miou},
            {"vru_miou", r.vru_miou},
            {"class_iou", iou},
            {"confusion", conf},
            {"points", r.points},
            {"sequences", r.sequences},
            {"latency_ms",
             {{"lfe", r.mean_times.lfe},
              {"associate+aggregate", r.mean_times.aggregate},
              {"encode", r.mean_times.encode},
              {"knn", r.mean_times.knn},
              {"decode", r.mean_times.decode}}}};
}

/// Pooled confusion over every labeled current-frame point.
inline EvalReport evaluate(const std::vector<io::Sequence>& data, const ParamSet& params, const TrainConfig& cfg,
                           FusionMode mode, const std::vector<std::size_t>& vru_classes = {3, 4}) {
    const ModelConfig model = cfg.model();
    const ParamView view = constant_view(params);
    EvalReport rep;
    rep.confusion = ConfusionMatrix(cfg.num_classes);
    ComponentTimes total;
    for (const auto& seq : data) {
        const auto window = sample_window(seq, mode == FusionMode::kSingleFrame ? 1 : cfg.max_frames);
        const RawPointCloud& cur = window.back();
        std::mt19937_64 unused(0);
        const auto idx = select_queries(cur, 0, unused);
        if (idx.empty()) continue;
        Tape tape(false);
        const FeatureCloud fused = fuse_window(tape, window, mode, view, model, &total);
        const Value logits = segment_head(tape, fused, gather_points(cur, idx), view, model, &total);
        rep.confusion.add(gather_labels(cur, idx), argmax_rows(logits));
        rep.points += idx.size();
        ++rep.sequences;
    }
    for (std::size_t c = 0; c < cfg.num_classes; ++c) rep.class_iou.push_back(rep.confusion.iou(c));
    rep.miou = rep.confusion.miou();
    rep.vru_miou = rep.confusion.mean_iou(vru_classes);
    if (rep.sequences) {
        const double n = static_cast<double>(rep.sequences);
        rep.mean_times = {total.lfe / n, total.aggregate / n, total.encode / n, total.knn / n, total.decode / n};
    }
    return rep;
}

struct TripletReport {
    double mean_cosine = 0.0;
    std::size_t triplets = 0;
    std::size_t windows = 0;
};

/// Pooled mean triplet cosine over the windows of `data`, with permutations drawn from `seed`.
inline TripletReport triplet_cosine(const std::vector<io::Sequence>& data, const ParamSet& params,
                                    const TrainConfig& cfg, std::uint64_t seed, const Logger& warn = stderr_logger()) {
    const ModelConfig model = cfg.model();
    const ParamView view = constant_view(params);
    std::mt19937_64 rng(seed);
    TripletReport rep;
    double sum = 0.0;
    for (const auto& seq : data) {
        const auto window = sample_window(seq, cfg.max_frames);
        if (window.size() < 2) continue;
        Tape tape(false);
        const Branches b = build_branches(tape, window, view, model, rng);
        const AuxLoss a = aux_loss(tape, b.capture_order, b.permuted, b.concatenated, warn);
        sum += a.cosine_sum;
        rep.triplets += a.triplets;
        ++rep.windows;
    }
    rep.mean_cosine = rep.triplets ? sum / static_cast<double>(rep.triplets) : 0.0;
    return rep;
}

}  // namespace mfseg
