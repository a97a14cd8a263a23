#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "mfseg/props.hpp"

using namespace mfseg;

namespace {

RawPointCloud random_cloud(std::mt19937_64& rng, std::size_t n, double extent) {
    RawPointCloud c;
    std::uniform_real_distribution<float> u(static_cast<float>(-extent), static_cast<float>(extent)), i01(0.f, 1.f);
    for (std::size_t i = 0; i < n; ++i) {
        c.coords.emplace_back(u(rng), u(rng), u(rng));
        c.intensity.push_back(i01(rng));
        c.timestamp.push_back(-i01(rng) * 0.1f);
    }
    return c;
}

RawPointCloud permuted(const RawPointCloud& c, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(c.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    RawPointCloud out;
    out.pose = c.pose;
    out.capture_time = c.capture_time;
    for (std::size_t i : idx) {
        out.coords.push_back(c.coords[i]);
        out.intensity.push_back(c.intensity[i]);
        out.timestamp.push_back(c.timestamp[i]);
    }
    return out;
}

struct Fixture {
    ModelConfig cfg = props::tiny_model(6, 3);
    ParamSet params = init_model(cfg, 1);
    ParamView view = constant_view(params);
};

}  // namespace

TEST_CASE("decorate_points offsets") {
    const std::vector<DecoratedPoint> one{{{1.0, 2.0, 3.0}, 0.4, -0.1}};
    const auto r1 = decorate_points(one);
    CHECK(r1[0][0] == 0.0);
    CHECK(r1[0][1] == 0.0);
    CHECK(r1[0][2] == 0.0);
    CHECK(r1[0][3] == 0.4);
    CHECK(r1[0][4] == -0.1);

    const std::vector<DecoratedPoint> two{{{0.0, 0.0, 0.0}, 0, 0}, {{0.5, -0.25, 1.0}, 0, 0}};
    const auto r2 = decorate_points(two);
    for (int a = 0; a < 3; ++a) CHECK(r2[0][a] == -r2[1][a]);

    const std::vector<DecoratedPoint> three{{{0.1, 0.7, 0.3}, 0, 0}, {{0.9, 0.2, 0.4}, 0, 0}, {{0.4, 0.6, 0.0}, 0, 0}};
    const auto r3 = decorate_points(three);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(r3[0][a] + r3[1][a] + r3[2][a]) < 1e-15);
    CHECK_THROWS(decorate_points({}));
}

TEST_CASE("extract: empty cloud is the identity image") {
    Fixture f;
    Tape t(false);
    const FeatureCloud out = extract(t, RawPointCloud{}, f.view, f.cfg.lfe);
    CHECK(out.size() == 0);
    CHECK(out.features.rows() == 0);
}

TEST_CASE("extract: one row per occupied voxel, centroid coordinates, max timestamp") {
    Fixture f;
    std::mt19937_64 rng(2);
    const RawPointCloud c = random_cloud(rng, 400, 1.0);
    Tape t(false);
    const FeatureCloud out = extract(t, c, f.view, f.cfg.lfe);
    const auto keys = voxelize(point_coords(c), f.cfg.lfe.voxel_size);
    const std::set<VoxelKey> distinct(keys.begin(), keys.end());
    CHECK(out.size() == distinct.size());
    CHECK(out.features.rows() == distinct.size());
    const auto out_keys = voxelize(out.coords, f.cfg.lfe.voxel_size);
    CHECK(std::set<VoxelKey>(out_keys.begin(), out_keys.end()).size() == out.size());
    CHECK(std::is_sorted(out_keys.begin(), out_keys.end()));
    // Recount centroid and max timestamp of the first voxel.
    Vec3 sum = Vec3::Zero();
    int n = 0;
    double tmax = -1e9;
    for (std::size_t i = 0; i < c.size(); ++i)
        if (keys[i] == out_keys[0]) {
            sum += c.point(i);
            ++n;
            tmax = std::max(tmax, static_cast<double>(c.timestamp[i]));
        }
    CHECK((out.coords[0] - sum / n).norm() < 1e-12);
    CHECK(out.timestamps[0] == tmax);
}

TEST_CASE("extract: duplicated points and permutations leave the output unchanged") {
    Fixture f;
    std::mt19937_64 rng(3);
    const RawPointCloud c = random_cloud(rng, 300, 1.5);
    Tape t(false);
    const FeatureCloud base = extract(t, c, f.view, f.cfg.lfe);

    RawPointCloud dup = c;
    for (std::size_t i = 0; i < c.size(); i += 3) {
        dup.coords.push_back(c.coords[i]);
        dup.intensity.push_back(c.intensity[i]);
        dup.timestamp.push_back(c.timestamp[i]);
    }
    const FeatureCloud d = extract(t, dup, f.view, f.cfg.lfe);
    CHECK(d.coords == base.coords);
    CHECK(d.features.array() == base.features.array());

    for (int k = 0; k < 5; ++k) {
        const FeatureCloud p = extract(t, permuted(c, rng), f.view, f.cfg.lfe);
        CHECK(p.coords == base.coords);
        CHECK(p.timestamps == base.timestamps);
        CHECK(p.features.array() == base.features.array());
    }
}

TEST_CASE("extract: parameter shape mismatch is an error") {
    Fixture f;
    ParamSet wrong = f.params;
    wrong.at("lfe.0.weight") = Array({3, 6});
    std::mt19937_64 rng(4);
    Tape t(false);
    CHECK_THROWS_AS(extract(t, random_cloud(rng, 10, 1.0), constant_view(wrong), f.cfg.lfe), DimensionError);
}

TEST_CASE("extract: dense synthetic frame is reduced below half") {
    synth::SceneSpec spec;
    spec.seed = 7;
    spec.frames = 1;
    spec.points_per_frame = 100000;
    const RawPointCloud frame = synth::generate(spec)[0];
    const VoxelGrouping g = group_points(frame, 0.2);
    INFO("N = " << frame.size() << ", M = " << g.keys.size());
    CHECK(frame.size() > 40000);
    CHECK(static_cast<double>(g.keys.size()) / static_cast<double>(frame.size()) < 0.5);
}

TEST_CASE("extract: gradients match finite differences") {
    ModelConfig cfg = props::tiny_model(3, 3);
    ParamSet lfe_only;
    std::mt19937_64 prng(5);
    add_lfe_params(lfe_only, cfg.lfe, prng);
    std::mt19937_64 rng(6);
    const RawPointCloud c = random_cloud(rng, 12, 0.3);
    const auto g = props::check_param_gradients(lfe_only, [&](Tape& t, const ParamView& v) {
        const FeatureCloud out = extract(t, c, v, cfg.lfe);
        std::mt19937_64 wr(8);
        const Value w(props::random_array(out.features.shape(), wr));
        return ops::sum(t, ops::mul(t, out.features, w));
    });
    INFO(g.worst);
    CHECK(g.max_rel_error <= 1e-4);
}
