#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "mfseg/pipeline.hpp"
#include "mfseg/props.hpp"

using namespace mfseg;

namespace {

TrainConfig toy_config(std::size_t width = 6) {
    TrainConfig c;
    c.width = width;
    c.decoder_hidden = {2 * width, width, width, width, width};
    c.stage1_epochs = 1;
    c.stage2_epochs = 1;
    c.max_frames = 3;
    c.train_queries = 128;
    return c;
}

std::vector<io::Sequence> toy_data(std::size_t n, std::uint64_t seed, std::size_t frames = 3, std::size_t budget = 1200) {
    synth::DatasetSpec d;
    d.sequences = n;
    d.first_seed = seed;
    d.scene.frames = frames;
    d.scene.points_per_frame = budget;
    return make_dataset(d);
}

FeatureCloud cloud_at(const std::vector<Vec3>& coords, Array features) {
    FeatureCloud fc;
    fc.coords = coords;
    fc.timestamps.assign(coords.size(), 0.0);
    fc.features = Value(std::move(features));
    return fc;
}

double mean_stage1_loss(const std::vector<io::Sequence>& data, const ParamSet& params, const TrainConfig& cfg) {
    const ModelConfig m = cfg.model();
    double sum = 0.0;
    for (const auto& s : data) {
        Tape t(false);
        const auto w = sample_window(s, cfg.max_frames);
        std::mt19937_64 rng(0);
        sum += stage1_loss(t, w, select_queries(w.back(), 0, rng), constant_view(params), m).ce.item();
    }
    return sum / static_cast<double>(data.size());
}

bool same_cloud(const FeatureCloud& a, const FeatureCloud& b) {
    return a.coords == b.coords && a.features.array() == b.features.array() && a.timestamps == b.timestamps;
}

// Two spatially separated clusters whose class is also encoded in intensity.
io::Sequence separable_sequence(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.f, 2.f);
    RawPointCloud f;
    for (int i = 0; i < 600; ++i) {
        const bool one = i % 2;
        f.coords.emplace_back(u(rng) + (one ? 3.f : -5.f), u(rng), u(rng) * 0.5f);
        f.intensity.push_back(one ? 0.9f : 0.1f);
        f.timestamp.push_back(0.f);
        f.labels.push_back(one ? 1 : 0);
    }
    io::Sequence s;
    s.frames = {f};
    s.num_classes = 2;
    s.class_names = {"a", "b"};
    return s;
}

}  // namespace

TEST_CASE("branches: two frames with identity permutation agree bitwise") {
    const auto data = toy_data(1, 31, 2);
    const ModelConfig m = props::tiny_model(6, 6);
    const ParamSet p = init_model(m, 1);
    Tape t(false);
    const Branches b = build_branches(t, data[0].frames, constant_view(p), m, std::vector<std::size_t>{0, 1});
    CHECK(same_cloud(b.capture_order, b.permuted));
    CHECK_THROWS(build_branches(t, data[0].frames, constant_view(p), m, std::vector<std::size_t>{0, 0}));
    CHECK_THROWS(build_branches(t, std::span(data[0].frames).first(1), constant_view(p), m, std::vector<std::size_t>{0}));
}

TEST_CASE("branches: an empty newest frame leaves the first frame's features") {
    auto data = toy_data(1, 32, 2);
    RawPointCloud& second = data[0].frames[1];
    second.pose = data[0].frames[0].pose;
    second.coords.clear();
    second.intensity.clear();
    second.timestamp.clear();
    second.labels.clear();
    const ModelConfig m = props::tiny_model(6, 6);
    const ParamSet p = init_model(m, 2);
    Tape t(false);
    const Branches b = build_branches(t, data[0].frames, constant_view(p), m, std::vector<std::size_t>{0, 1});
    const FeatureCloud alone = extract(t, data[0].frames[0], constant_view(p), m.lfe);
    CHECK(b.capture_order.coords == alone.coords);
    CHECK(b.capture_order.features.array() == alone.features.array());
}

TEST_CASE("branches: static three-frame scene, aggregated voxels cover the concatenation") {
    synth::SceneSpec s;
    s.seed = 33;
    s.frames = 3;
    s.ego_speed = 0.0;
    s.points_per_frame = 3000;
    s.objects = synth::random_layout(33);
    for (auto& o : s.objects) o.velocity = Vec3::Zero();
    const auto frames = synth::generate(s);
    const ModelConfig m = props::tiny_model(6, 6);
    const ParamSet p = init_model(m, 3);
    Tape t(false);
    const Branches b = build_branches(t, frames, constant_view(p), m, std::vector<std::size_t>{2, 0, 1});
    const auto ki = voxelize(b.capture_order.coords, 0.2), kiii = voxelize(b.concatenated.coords, 0.2);
    const std::set<VoxelKey> in_i(ki.begin(), ki.end());
    std::size_t hit = 0;
    for (const auto& k : kiii) hit += in_i.count(k);
    INFO(hit << "/" << kiii.size());
    CHECK(static_cast<double>(hit) >= 0.95 * static_cast<double>(kiii.size()));
}

TEST_CASE("aux_loss: hand values") {
    const std::vector<Vec3> c{{0.1, 0.1, 0.1}, {1.1, 0.1, 0.1}};
    const Array a = Array::matrix(2, 3, {1, 2, 3, -1, 0.5, 4});
    Array neg = a;
    for (auto& v : neg.data) v = -v;
    Tape t(false);
    const AuxLoss opposite = aux_loss(t, cloud_at(c, a), cloud_at(c, a), cloud_at(c, neg));
    CHECK(opposite.triplets == 2);
    CHECK(opposite.loss.item() == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
    CHECK(aux_loss(t, cloud_at(c, a), cloud_at(c, a), cloud_at(c, a)).loss.item() == doctest::Approx(0.0).epsilon(1e-14));
    std::string warned;
    const AuxLoss none = aux_loss(t, cloud_at({c[0]}, Array::matrix(1, 3, {1, 1, 1})), cloud_at({c[1]}, Array::matrix(1, 3, {1, 1, 1})),
                                  cloud_at({c[1]}, Array::matrix(1, 3, {1, 1, 1})), [&](const std::string& m) { warned = m; });
    CHECK(none.triplets == 0);
    CHECK(none.loss.item() == 0.0);
    CHECK_FALSE(warned.empty());
}

TEST_CASE("aux_loss: matches a scalar recomputation on partial overlaps") {
    std::mt19937_64 rng(34);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<FeatureCloud> clouds;
        for (int br = 0; br < 3; ++br) {
            std::set<VoxelKey> used;
            std::vector<Vec3> coords;
            while (coords.size() < 40) {
                const VoxelKey k{static_cast<std::int64_t>(rng() % 8), static_cast<std::int64_t>(rng() % 8), 0};
                if (used.insert(k).second) coords.push_back(voxel_center(k, 0.2));
            }
            clouds.push_back(cloud_at(coords, props::random_array({40, 5}, rng)));
        }
        std::map<VoxelKey, std::size_t> rows[3];
        for (int br = 0; br < 3; ++br)
            for (std::size_t i = 0; i < 40; ++i) rows[br][voxel_key(clouds[br].coords[i], 0.2)] = i;
        auto cos = [&](int x, std::size_t i, int y, std::size_t j) {
            double d = 0, nx = 0, ny = 0;
            for (std::size_t c = 0; c < 5; ++c) {
                const double a = clouds[x].features.data()[i * 5 + c], b = clouds[y].features.data()[j * 5 + c];
                d += a * b;
                nx += a * a;
                ny += b * b;
            }
            return d / std::max(std::sqrt(nx) * std::sqrt(ny), 1e-8);
        };
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& [k, i] : rows[0]) {
            if (!rows[1].count(k) || !rows[2].count(k)) continue;
            const std::size_t j = rows[1][k], l = rows[2][k];
            sum += 1.0 - (cos(0, i, 1, j) + cos(0, i, 2, l) + cos(1, j, 2, l)) / 3.0;
            ++n;
        }
        Tape t(false);
        const AuxLoss r = aux_loss(t, clouds[0], clouds[1], clouds[2]);
        CHECK(r.triplets == n);
        if (n) CHECK(r.loss.item() == doctest::Approx(sum / static_cast<double>(n)).epsilon(1e-12));
    }
}

TEST_CASE("stage 2 with zero auxiliary weight is plain cross-entropy") {
    const auto data = toy_data(1, 35, 3);
    const ModelConfig m = props::tiny_model(4, 6);
    const ParamSet p = init_model(m, 5);
    std::mt19937_64 rng(1);
    const auto q = select_queries(data[0].frames.back(), 64, rng);
    const std::vector<std::size_t> perm{1, 2, 0};

    Tape t1;
    const ParamView v1 = bind(t1, p);
    const LossTerms zero = stage2_loss(t1, data[0].frames, q, perm, v1, m, 0.0);
    CHECK(zero.total.item() == zero.ce.item());
    t1.backward(zero.total);

    Tape t2;
    const ParamView v2 = bind(t2, p);
    const LossTerms plain = stage2_loss(t2, data[0].frames, q, perm, v2, m, 1.0);
    t2.backward(plain.ce);
    CHECK(plain.ce.item() == zero.ce.item());
    CHECK(plain.total.item() > plain.ce.item());
    CHECK(collect_gradients(t1, v1) == collect_gradients(t2, v2));
}

TEST_CASE("stage 2 gradients match finite differences") {
    const auto r = props::stage2_gradients(36);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("one epoch on a toy set lowers the loss") {
    const auto data = toy_data(5, 37);
    const TrainConfig cfg = toy_config();
    const double before = mean_stage1_loss(data, init_backbone(cfg.model(), cfg.seed), cfg);
    const ParamSet after = train_stage1(data, cfg);
    const double loss = mean_stage1_loss(data, after, cfg);
    INFO(before << " -> " << loss);
    CHECK(loss < before);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto data = toy_data(3, 38);
    TrainConfig cfg = toy_config(4);
    const ParamSet a = train_stage1(data, cfg), b = train_stage1(data, cfg);
    CHECK(a.same_values(b));
    const ParamSet a2 = train_stage2(data, cfg, a), b2 = train_stage2(data, cfg, b);
    CHECK(a2.same_values(b2));
    cfg.seed = 1;
    CHECK_FALSE(train_stage1(data, cfg).same_values(a));
}

TEST_CASE("a separable toy set is learned") {
    std::vector<io::Sequence> data;
    for (std::uint64_t s = 0; s < 4; ++s) data.push_back(separable_sequence(s));
    TrainConfig cfg = toy_config(8);
    cfg.num_classes = 2;
    cfg.max_frames = 1;
    cfg.stage1_epochs = 15;
    cfg.train_queries = 0;
    const ParamSet p = train_stage1(data, cfg);
    const EvalReport r = evaluate({separable_sequence(99)}, p, cfg, FusionMode::kSingleFrame);
    INFO(r.miou);
    CHECK(r.miou > 0.9);
}

TEST_CASE("stage 2 raises the mean triplet cosine") {
    const auto data = toy_data(6, 39);
    TrainConfig cfg = toy_config(6);
    cfg.stage1_epochs = 2;
    cfg.stage2_epochs = 3;
    ParamSet p1 = train_stage1(data, cfg);
    init_aggregator(p1, cfg.model(), cfg.seed);
    const double before = triplet_cosine(data, p1, cfg, 5).mean_cosine;
    const ParamSet p2 = train_stage2(data, cfg, p1);
    const double after = triplet_cosine(data, p2, cfg, 5).mean_cosine;
    INFO(before << " -> " << after);
    CHECK(after > before);
}

TEST_CASE("evaluate does not depend on sequence order") {
    const auto data = toy_data(4, 40);
    const TrainConfig cfg = toy_config(4);
    const ParamSet p = init_model(cfg.model(), 2);
    auto reversed = data;
    std::reverse(reversed.begin(), reversed.end());
    for (FusionMode mode : {FusionMode::kSingleFrame, FusionMode::kConcatenation, FusionMode::kAggregation}) {
        const EvalReport a = evaluate(data, p, cfg, mode), b = evaluate(reversed, p, cfg, mode);
        CHECK(a.confusion.counts() == b.confusion.counts());
        CHECK(a.miou == b.miou);
    }
}

TEST_CASE("config: json round trip and validation") {
    TrainConfig c = toy_config(9);
    c.aux_weight = 0.25;
    c.seed = 77;
    const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(c));
    c.aux_weight = -1.0;
    CHECK_THROWS(c.validate());
    CHECK_THROWS(nlohmann::json({{"no_such_key", 1}}).get<TrainConfig>());
}
