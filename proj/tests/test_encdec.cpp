#include <numeric>
#include <random>

#include "doctest.h"
#include "mfseg/props.hpp"

using namespace mfseg;

namespace {

FeatureCloud cloud(std::vector<Vec3> coords, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    FeatureCloud fc;
    fc.features = Value(props::random_array({coords.size(), d}, rng));
    fc.timestamps.assign(coords.size(), 0.0);
    fc.coords = std::move(coords);
    return fc;
}

struct Fixture {
    ModelConfig cfg = props::tiny_model(5, 4);
    ParamSet params = init_model(cfg, 3);
    ParamView view = constant_view(params);
};

}  // namespace

TEST_CASE("encode: a single point stays a single point at every scale") {
    Fixture f;
    Tape t(false);
    const auto ms = encode(t, cloud({{1.0, -2.0, 0.5}}, f.cfg.lfe.out_dim(), 1), f.view, f.cfg.enc);
    REQUIRE(ms.scales.size() == f.cfg.enc.scales);
    for (std::size_t s = 0; s < ms.scales.size(); ++s) {
        CHECK(ms.scales[s].size() == 1);
        CHECK(ms.scales[s].dim() == f.cfg.enc.channels);
        CHECK(ms.scales[s].coords[0] == Vec3(1.0, -2.0, 0.5));
        CHECK(ms.scales[s].voxel_size == doctest::Approx(0.2 * std::pow(2.0, static_cast<double>(s))));
    }
    CHECK_THROWS(encode(t, cloud({}, f.cfg.lfe.out_dim(), 1), f.view, f.cfg.enc));
}

TEST_CASE("encode: points 10 m apart are never merged") {
    Fixture f;
    Tape t(false);
    const auto ms = encode(t, cloud({{0.05, 0.05, 0.05}, {10.05, 0.05, 0.05}}, f.cfg.lfe.out_dim(), 2), f.view, f.cfg.enc);
    for (const auto& s : ms.scales) CHECK(s.size() == 2);
}

TEST_CASE("encode: coarse scales match an occupancy recount") {
    const auto r = props::encoder_occupancy_oracle(5, 50);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("encode: coarse scales never grow") {
    Fixture f;
    std::mt19937_64 rng(6);
    Tape t(false);
    const auto ms = encode(t, cloud(props::random_points(rng, 400, 3.0), f.cfg.lfe.out_dim(), 6), f.view, f.cfg.enc);
    for (std::size_t s = 1; s < ms.scales.size(); ++s) CHECK(ms.scales[s].size() <= ms.scales[s - 1].size());
}

TEST_CASE("decode: collocated query with k = 1 and one scale sees zero offsets") {
    ModelConfig cfg = props::tiny_model(4, 3);
    cfg.enc.scales = 1;
    cfg.dec.k = 1;
    ParamSet params = init_model(cfg, 4);
    const ParamView view = constant_view(params);
    Tape t(false);
    const auto ms = encode(t, cloud({{0.3, 0.3, 0.3}}, cfg.lfe.out_dim(), 4), view, cfg.enc);
    const std::vector<Vec3> q{{0.3, 0.3, 0.3}};
    const auto table = find_neighbors(q, ms, 1, true);
    REQUIRE(table.size() == 1);
    REQUIRE(table[0][0].size() == 1);
    CHECK(table[0][0][0].offset == Vec3::Zero());
    const Value logits = decode(t, q, ms, view, cfg.dec);
    CHECK(logits.shape() == std::vector<std::size_t>{1, 3});
    CHECK(decoder_input_dim(cfg.enc, cfg.dec) == 1 * 1 * (4 + 3));
}

TEST_CASE("decode: input width is scales x k x (D + 3)") {
    EncoderConfig enc;
    DecoderConfig dec;
    CHECK(decoder_input_dim(enc, dec) == 3 * 3 * (128 + 3));
    enc.scales = 2;
    enc.channels = 7;
    dec.k = 5;
    CHECK(decoder_input_dim(enc, dec) == 2 * 5 * 10);
    Fixture f;
    CHECK(f.params.at("dec.0.weight").shape[0] == decoder_input_dim(f.cfg.enc, f.cfg.dec));
}

TEST_CASE("decode: one row per query, equivariant under query permutation") {
    Fixture f;
    std::mt19937_64 rng(7);
    Tape t(false);
    const auto ms = encode(t, cloud(props::random_points(rng, 200, 2.0), f.cfg.lfe.out_dim(), 7), f.view, f.cfg.enc);
    const auto queries = props::random_points(rng, 37, 2.5);
    const Value base = decode(t, queries, ms, f.view, f.cfg.dec);
    CHECK(base.rows() == queries.size());
    std::vector<std::size_t> perm(queries.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Vec3> pq;
    for (std::size_t i : perm) pq.push_back(queries[i]);
    const Value shuffled = decode(t, pq, ms, f.view, f.cfg.dec);
    const std::size_t c = f.cfg.dec.num_classes;
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) CHECK(shuffled.data()[i * c + j] == base.data()[perm[i] * c + j]);
    CHECK_THROWS(decode(t, std::vector<Vec3>{}, ms, f.view, f.cfg.dec));
}

TEST_CASE("decode: grid and exhaustive neighbor search give identical logits") {
    Fixture f;
    std::mt19937_64 rng(8);
    Tape t(false);
    const auto ms = encode(t, cloud(props::random_points(rng, 300, 4.0), f.cfg.lfe.out_dim(), 8), f.view, f.cfg.enc);
    const auto queries = props::random_points(rng, 50, 4.0);
    DecoderConfig scan = f.cfg.dec;
    scan.grid_knn = false;
    CHECK(decode(t, queries, ms, f.view, f.cfg.dec).array() == decode(t, queries, ms, f.view, scan).array());
}

TEST_CASE("decode: fewer encoder points than k leaves zero blocks") {
    ModelConfig cfg = props::tiny_model(4, 3);
    cfg.dec.k = 3;
    ParamSet params = init_model(cfg, 9);
    Tape t(false);
    const auto ms = encode(t, cloud({{0, 0, 0}, {0.1, 0, 0}}, cfg.lfe.out_dim(), 9), constant_view(params), cfg.enc);
    const std::vector<Vec3> q{{0.05, 0, 0}};
    const auto table = find_neighbors(q, ms, 3, true);
    CHECK(table[0][0].size() == 2);
    CHECK(decode(t, q, ms, constant_view(params), cfg.dec).rows() == 1);
}

TEST_CASE("decode: history independence") {
    const auto r = props::decoder_history_independence(3, 20000);
    INFO(r.detail);
    CHECK(r.pass);
}

TEST_CASE("encode + decode: gradients match finite differences on 20 points") {
    ModelConfig cfg = props::tiny_model(3, 3);
    ParamSet params;
    std::mt19937_64 prng(10);
    add_encoder_params(params, cfg.lfe.out_dim(), cfg.enc, prng);
    add_decoder_params(params, cfg.enc, cfg.dec, prng);
    std::mt19937_64 rng(11);
    const auto coords = props::random_points(rng, 20, 0.6);
    const Array feats = props::random_array({20, cfg.lfe.out_dim()}, rng);
    const auto queries = props::random_points(rng, 6, 0.6);
    const auto g = props::check_param_gradients(params, [&](Tape& t, const ParamView& v) {
        FeatureCloud fc;
        fc.coords = coords;
        fc.timestamps.assign(20, 0.0);
        fc.features = Value(feats);
        const auto ms = encode(t, fc, v, cfg.enc);
        return ops::softmax_cross_entropy(t, decode(t, queries, ms, v, cfg.dec), {0, 1, 2, 0, 1, 2});
    });
    INFO(g.worst);
    CHECK(g.max_rel_error <= 1e-4);
}
