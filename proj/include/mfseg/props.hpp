#pragma once

// Executable property suites: algebraic laws of the aggregator, gradient checks,
// oracle equivalences and the sequence format. Shared by `mfseg props`, the unit
// tests and the acceptance binary.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfseg/data_synth.hpp"
#include "mfseg/metrics.hpp"
#include "mfseg/model.hpp"
#include "mfseg/sequence_io.hpp"
#include "mfseg/training.hpp"

namespace mfseg::props {

struct PropResult {
    std::string suite;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

struct PropsReport {
    std::vector<PropResult> results;

    bool all_pass() const {
        return std::all_of(results.begin(), results.end(), [](const PropResult& r) { return r.pass; });
    }

    /// Timing excluded, so seeded runs compare equal.
    nlohmann::json to_json(bool with_timing = false) const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& r : results) {
            nlohmann::json j{{"suite", r.suite}, {"name", r.name}, {"pass", r.pass}, {"detail", r.detail}};
            if (with_timing) j["seconds"] = r.seconds;
            arr.push_back(j);
        }
        return {{"all_pass", all_pass()}, {"results", arr}};
    }
};

template <typename Fn>
PropResult timed(const std::string& suite, const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    PropResult r{suite, name, false, "", 0.0};
    try {
        fn(r);
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Gradient checking

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true gradient
/// is zero (dead ReLUs) from dividing roundoff by roundoff.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

using ScalarFn = std::function<Value(Tape&, const std::vector<Value>&)>;

/// Central differences with step h on every element of every input.
inline GradCheck check_gradients(const ScalarFn& fn, const std::vector<Array>& inputs, double h = 1e-5) {
    Tape tape;
    std::vector<Value> vars;
    for (const auto& a : inputs) vars.push_back(tape.variable(a));
    const Value out = fn(tape, vars);
    tape.backward(out);
    GradCheck res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto analytic = tape.grad(vars[k]);
        for (std::size_t e = 0; e < inputs[k].size(); ++e) {
            auto eval = [&](double delta) {
                std::vector<Value> consts;
                for (std::size_t j = 0; j < inputs.size(); ++j) {
                    Array a = inputs[j];
                    if (j == k) a.data[e] += delta;
                    consts.emplace_back(std::move(a));
                }
                Tape plain(false);
                return fn(plain, consts).item();
            };
            const double numeric = (eval(h) - eval(-h)) / (2.0 * h);
            const double err = relative_error(analytic[e], numeric);
            ++res.checked;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst = "input " + std::to_string(k) + "[" + std::to_string(e) + "] analytic " + fmt(analytic[e]) +
                            " numeric " + fmt(numeric);
            }
        }
    }
    return res;
}

/// Gradient check over every parameter of `params`.
inline GradCheck check_param_gradients(const ParamSet& params, const std::function<Value(Tape&, const ParamView&)>& fn,
                                       double h = 1e-5) {
    std::vector<std::string> names;
    std::vector<Array> arrays;
    for (const auto& [name, p] : params) {
        names.push_back(name);
        arrays.push_back(p.value);
    }
    return check_gradients(
        [&](Tape& t, const std::vector<Value>& vals) {
            ParamView view;
            for (std::size_t i = 0; i < names.size(); ++i) view.set(names[i], vals[i]);
            return fn(t, view);
        },
        arrays, h);
}

inline Array random_array(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : a.data) v = d(rng);
    return a;
}

/// One differentiable op (or small composite) under test.
struct OpCase {
    std::string name;
    ScalarFn fn;
    std::vector<Array> inputs;
};

/// Every differentiable op, reduced to a scalar through a fixed random projection
/// so each output element carries a distinct upstream gradient.
inline std::vector<OpCase> op_cases(std::mt19937_64& rng) {
    auto proj = [](Tape& t, const Value& v, std::uint64_t seed) {
        std::mt19937_64 r(seed);
        Array w = random_array(v.shape(), r);
        return ops::sum(t, ops::mul(t, v, Value(std::move(w))));
    };
    std::vector<OpCase> cases;
    cases.push_back({"linear",
                     [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::linear(t, v[0], v[1], v[2]), 1); },
                     {random_array({4, 3}, rng), random_array({3, 5}, rng), random_array({5}, rng)}});
    cases.push_back({"relu", [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::relu(t, v[0]), 2); },
                     {random_array({3, 4}, rng)}});
    cases.push_back({"add", [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::add(t, v[0], v[1]), 3); },
                     {random_array({2, 3}, rng), random_array({2, 3}, rng)}});
    cases.push_back({"sub", [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::sub(t, v[0], v[1]), 4); },
                     {random_array({2, 3}, rng), random_array({2, 3}, rng)}});
    cases.push_back({"mul", [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::mul(t, v[0], v[1]), 5); },
                     {random_array({2, 3}, rng), random_array({2, 3}, rng)}});
    cases.push_back({"scale", [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::scale(t, v[0], -1.7), 6); },
                     {random_array({3, 2}, rng)}});
    cases.push_back({"sum", [](Tape& t, const std::vector<Value>& v) { return ops::sum(t, v[0]); },
                     {random_array({3, 3}, rng)}});
    cases.push_back({"mean", [](Tape& t, const std::vector<Value>& v) { return ops::mean(t, v[0]); },
                     {random_array({3, 3}, rng)}});
    cases.push_back({"reshape",
                     [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::reshape(t, v[0], {3, 2}), 7); },
                     {random_array({2, 3}, rng)}});
    cases.push_back({"concat_cols",
                     [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::concat_cols(t, {v[0], v[1]}), 8); },
                     {random_array({3, 2}, rng), random_array({3, 4}, rng)}});
    cases.push_back({"concat_rows",
                     [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::concat_rows(t, {v[0], v[1]}), 9); },
                     {random_array({2, 3}, rng), random_array({4, 3}, rng)}});
    cases.push_back({"gather_rows",
                     [=](Tape& t, const std::vector<Value>& v) {
                         return proj(t, ops::gather_rows(t, v[0], {2, 0, -1, 2, 1}), 10);
                     },
                     {random_array({3, 4}, rng)}});
    cases.push_back({"segment_max",
                     [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::segment_max(t, v[0], {0, 2, 3, 6}), 11); },
                     {random_array({6, 4}, rng)}});
    cases.push_back({"rowwise_cosine",
                     [=](Tape& t, const std::vector<Value>& v) { return proj(t, ops::rowwise_cosine(t, v[0], v[1]), 12); },
                     {random_array({4, 5}, rng), random_array({4, 5}, rng)}});
    cases.push_back({"cosine_similarity",
                     [](Tape& t, const std::vector<Value>& v) { return ops::cosine_similarity(t, v[0], v[1]); },
                     {random_array({6}, rng), random_array({6}, rng)}});
    cases.push_back({"softmax_cross_entropy",
                     [](Tape& t, const std::vector<Value>& v) { return ops::softmax_cross_entropy(t, v[0], {0, 3, 1, 3, 2}); },
                     {random_array({5, 4}, rng, -3.0, 3.0)}});
    cases.push_back({"mlp_composite",
                     [](Tape& t, const std::vector<Value>& v) {
                         const Value h = ops::relu(t, ops::linear(t, v[0], v[1], v[2]));
                         const Value o = ops::linear(t, h, v[3], v[4]);
                         return ops::softmax_cross_entropy(t, o, {1, 0, 2});
                     },
                     {random_array({3, 4}, rng), random_array({4, 6}, rng), random_array({6}, rng),
                      random_array({6, 3}, rng), random_array({3}, rng)}});
    return cases;
}

// ---------------------------------------------------------------------------
// Fixtures

/// Tiny model shared by the property suites.
inline ModelConfig tiny_model(std::size_t width = 4, std::size_t classes = 3) {
    ModelConfig c = ModelConfig::tiny(width, classes);
    c.dec.hidden = {2 * width, width, width, width, width};
    return c;
}

/// Two frames of five points each; the second frame sees the same world points
/// (plus a small jitter) from a pose shifted by 0.3 m, so every voxel pairs.
inline std::vector<RawPointCloud> ten_point_instance(std::uint64_t seed, std::size_t classes = 3) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.02, 0.18), jit(-0.01, 0.01), inten(0.0, 1.0);
    std::vector<Vec3> world;
    for (int i = 0; i < 5; ++i) world.push_back(Vec3(1.0 * i, 0.6 * (i % 2), 0.0) + Vec3(u(rng), u(rng), u(rng)));
    std::vector<RawPointCloud> frames(2);
    frames[0].pose = Pose::identity();
    frames[1].pose = Pose::translation_only({0.3, 0.0, 0.0});
    frames[1].capture_time = 0.1;
    for (std::size_t f = 0; f < 2; ++f) {
        const Pose inv = invert(frames[f].pose);
        for (std::size_t i = 0; i < world.size(); ++i) {
            const Vec3 w = world[i] + (f ? Vec3(jit(rng), jit(rng), jit(rng)) : Vec3::Zero());
            frames[f].coords.push_back(inv.apply(w).cast<float>());
            frames[f].intensity.push_back(static_cast<float>(inten(rng)));
            frames[f].timestamp.push_back(0.0f);
            frames[f].labels.push_back(static_cast<std::uint16_t>(i % classes));
        }
    }
    return frames;
}

// ---------------------------------------------------------------------------
// Algebraic suite

using PairFn = std::function<Feature(const Feature&, const Feature&, const PairContext&, const ParamView&)>;

inline Feature default_pair(const Feature& x, const Feature& y, const PairContext& c, const ParamView& p) {
    return aggregate_pair(x, y, c, p);
}

/// Random (x, y, offsets, times) drawn for the algebraic checks.
struct PairCase {
    std::vector<double> x, y;
    PairContext ctx;
};

inline PairCase random_pair(std::mt19937_64& rng, std::size_t d, double voxel) {
    std::uniform_real_distribution<double> f(-2.0, 2.0), o(-voxel / 2, voxel / 2), tm(-1.0, 0.0);
    PairCase c;
    for (std::size_t i = 0; i < d; ++i) {
        c.x.push_back(f(rng));
        c.y.push_back(f(rng));
    }
    c.ctx.offset_x = {o(rng), o(rng), o(rng)};
    c.ctx.offset_y = {o(rng), o(rng), o(rng)};
    c.ctx.t_x = tm(rng);
    c.ctx.t_y = tm(rng);
    return c;
}

inline PairContext swapped(const PairContext& c) { return {c.offset_y, c.offset_x, c.t_y, c.t_x}; }

inline ParamSet algebra_params(std::uint64_t seed, std::size_t d = 128, std::size_t hidden = 128) {
    std::mt19937_64 rng(seed);
    ParamSet p;
    add_aggregator_params(p, {d, hidden}, rng);
    return p;
}

/// x ⊙ ZERO == x and ZERO ⊙ x == x bitwise; ZERO ⊙ ZERO == ZERO.
inline PropResult identity_law(std::uint64_t seed, std::size_t cases, const PairFn& pair = default_pair,
                               std::size_t d = 128) {
    return timed("algebra", "identity", [&](PropResult& r) {
        const ParamSet params = algebra_params(seed, d);
        const ParamView view = constant_view(params);
        std::mt19937_64 rng(seed + 1);
        std::size_t failures = 0;
        for (std::size_t i = 0; i < cases; ++i) {
            const PairCase c = random_pair(rng, d, 0.2);
            const Feature a = pair(c.x, std::nullopt, c.ctx, view);
            const Feature b = pair(std::nullopt, c.x, c.ctx, view);
            if (!a || *a != c.x || !b || *b != c.x) ++failures;
        }
        if (pair(std::nullopt, std::nullopt, {}, view)) ++failures;
        r.pass = failures == 0;
        r.detail = std::to_string(cases) + " cases, " + std::to_string(failures) + " not bitwise identical";
    });
}

/// max |x ⊙ y - y ⊙ x| over random cases (contexts swapped with the operands).
inline double max_commutativity_gap(std::uint64_t seed, std::size_t cases, const PairFn& pair, std::size_t d) {
    const ParamSet params = algebra_params(seed, d);
    const ParamView view = constant_view(params);
    std::mt19937_64 rng(seed + 2);
    double worst = 0.0;
    for (std::size_t i = 0; i < cases; ++i) {
        const PairCase c = random_pair(rng, d, 0.2);
        const Feature a = pair(c.x, c.y, c.ctx, view);
        const Feature b = pair(c.y, c.x, swapped(c.ctx), view);
        for (std::size_t k = 0; k < d; ++k) worst = std::max(worst, std::abs((*a)[k] - (*b)[k]));
    }
    return worst;
}

inline PropResult commutativity_law(std::uint64_t seed, std::size_t cases, const PairFn& pair = default_pair,
                                    std::size_t d = 128, double tol = 1e-12) {
    return timed("algebra", "commutativity", [&](PropResult& r) {
        const double gap = max_commutativity_gap(seed, cases, pair, d);
        r.pass = gap <= tol;
        r.detail = std::to_string(cases) + " cases, max |x.y - y.x| = " + fmt(gap) + " (tol " + fmt(tol) + ")";
    });
}

/// Deliberately asymmetric merge (h applied in one order only), for mutation checks.
inline Feature broken_symmetrization(const Feature& x, const Feature& y, const PairContext& ctx, const ParamView& params) {
    if (!x) return y;
    if (!y) return x;
    const std::size_t d = x->size();
    Tape t(false);
    const Value vx(Array::matrix(1, d, *x)), vy(Array::matrix(1, d, *y));
    const Value cx(Array::matrix(1, kPairContextDim, {ctx.offset_x.x(), ctx.offset_x.y(), ctx.offset_x.z(), ctx.t_x}));
    const Value cy(Array::matrix(1, kPairContextDim, {ctx.offset_y.x(), ctx.offset_y.y(), ctx.offset_y.z(), ctx.t_y}));
    const Value in = ops::concat_cols(t, {vx, cx, vy, cy});
    const Value out = nn::mlp(t, params, "agg.g", 3, nn::mlp(t, params, "agg.h", 3, in));
    return std::vector<double>(out.data().begin(), out.data().end());
}

// ---------------------------------------------------------------------------
// Gradient suite

inline PropResult op_gradients(std::uint64_t seed, double tol = 1e-4) {
    return timed("gradient", "ops", [&](PropResult& r) {
        std::mt19937_64 rng(seed);
        double worst = 0.0;
        std::string worst_op;
        std::size_t checked = 0;
        for (const auto& c : op_cases(rng)) {
            const GradCheck g = check_gradients(c.fn, c.inputs);
            checked += g.checked;
            if (g.max_rel_error >= worst) {
                worst = g.max_rel_error;
                worst_op = c.name + " " + g.worst;
            }
        }
        r.pass = worst <= tol;
        r.detail = std::to_string(checked) + " entries, max rel err " + fmt(worst) + " at " + worst_op;
    });
}

/// Cross-entropy + lambda * auxiliary loss on the ten-point instance, all parameters.
inline PropResult stage2_gradients(std::uint64_t seed, double tol = 1e-4) {
    return timed("gradient", "stage2_loss_10pt", [&](PropResult& r) {
        const ModelConfig cfg = tiny_model(4, 3);
        const ParamSet params = init_model(cfg, seed);
        const auto frames = ten_point_instance(seed);
        const std::vector<std::size_t> queries{0, 1, 2, 3, 4};
        const std::vector<std::size_t> perm{1, 0};
        std::size_t triplets = 0;
        const GradCheck g = check_param_gradients(params, [&](Tape& t, const ParamView& v) {
            LossTerms l = stage2_loss(t, frames, queries, perm, v, cfg, 1.0, nullptr);
            triplets = l.aux.triplets;
            return l.total;
        });
        r.pass = g.max_rel_error <= tol && triplets > 0;
        r.detail = std::to_string(g.checked) + " parameters, " + std::to_string(triplets) + " triplets, max rel err " +
                   fmt(g.max_rel_error) + (g.worst.empty() ? "" : " at " + g.worst);
    });
}

// ---------------------------------------------------------------------------
// Oracle suite

inline std::vector<Vec3> random_points(std::mt19937_64& rng, std::size_t n, double extent) {
    std::uniform_real_distribution<double> u(-extent, extent);
    std::vector<Vec3> pts;
    for (std::size_t i = 0; i < n; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
    return pts;
}

/// Brute force: all distances, stable sort by (distance, index).
inline std::vector<std::size_t> exhaustive_knn(const Vec3& q, const std::vector<Vec3>& ref, std::size_t k) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t i = 0; i < ref.size(); ++i) d.push_back({(ref[i] - q).squaredNorm(), i});
    std::sort(d.begin(), d.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(k, d.size()); ++i) out.push_back(d[i].second);
    return out;
}

/// knn (scan and grid) against brute force on random instances, including
/// grid-snapped coordinates that produce exact distance ties.
inline PropResult knn_oracle(std::uint64_t seed, std::size_t instances) {
    return timed("oracle", "knn_vs_exhaustive", [&](PropResult& r) {
        std::mt19937_64 rng(seed);
        std::size_t mismatches = 0;
        for (std::size_t inst = 0; inst < instances; ++inst) {
            const std::size_t n = 1 + rng() % 60, nq = 1 + rng() % 8, k = 1 + rng() % 6;
            const double extent = 0.2 + 3.0 * std::uniform_real_distribution<double>(0, 1)(rng);
            auto ref = random_points(rng, n, extent);
            if (inst % 4 == 0)
                for (auto& p : ref) p = (p * 4.0).array().round().matrix() / 4.0;  // ties
            auto qs = random_points(rng, nq, extent);
            if (inst % 5 == 0) qs.push_back(ref[rng() % n]);
            const double cell = std::uniform_real_distribution<double>(0.05, 1.5)(rng);
            const auto scan = knn(qs, ref, k);
            const auto grid = KnnGrid(ref, cell).query_all(qs, k);
            for (std::size_t qi = 0; qi < qs.size(); ++qi) {
                const auto expect = exhaustive_knn(qs[qi], ref, k);
                std::vector<std::size_t> a, b;
                for (const auto& nb : scan[qi]) a.push_back(nb.index);
                for (const auto& nb : grid[qi]) b.push_back(nb.index);
                if (a != expect || b != expect) ++mismatches;
            }
        }
        r.pass = mismatches == 0;
        r.detail = std::to_string(instances) + " instances, " + std::to_string(mismatches) + " query mismatches";
    });
}

/// ConfusionMatrix mIoU against a direct set-counting recomputation.
inline double recount_miou(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                           std::size_t classes) {
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t inter = 0, uni = 0, in_truth = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            const bool t = truth[i] == c, p = pred[i] == c;
            inter += t && p;
            uni += t || p;
            in_truth += t;
        }
        if (in_truth == 0) continue;
        sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++present;
    }
    return present ? sum / static_cast<double>(present) : 0.0;
}

inline PropResult miou_oracle(std::uint64_t seed, std::size_t instances) {
    return timed("oracle", "miou_vs_recount", [&](PropResult& r) {
        std::mt19937_64 rng(seed);
        double worst = 0.0;
        for (std::size_t inst = 0; inst < instances; ++inst) {
            const std::size_t classes = 2 + rng() % 6, n = 1 + rng() % 300;
            std::vector<std::size_t> truth(n), pred(n);
            for (std::size_t i = 0; i < n; ++i) {
                truth[i] = rng() % classes;
                pred[i] = rng() % 3 == 0 ? truth[i] : rng() % classes;
            }
            ConfusionMatrix cm(classes);
            cm.add(truth, pred);
            worst = std::max(worst, std::abs(cm.miou() - recount_miou(truth, pred, classes)));
        }
        r.pass = worst <= 1e-12;
        r.detail = std::to_string(instances) + " instances, max |mIoU - recount| = " + fmt(worst);
    });
}

/// Scale occupancies of the encoder against an independent voxel-set recount.
inline PropResult encoder_occupancy_oracle(std::uint64_t seed, std::size_t instances) {
    return timed("oracle", "encoder_occupancy", [&](PropResult& r) {
        std::mt19937_64 rng(seed);
        const ModelConfig cfg = tiny_model(4, 3);
        const ParamSet params = init_model(cfg, seed);
        const ParamView view = constant_view(params);
        std::size_t failures = 0;
        for (std::size_t inst = 0; inst < instances; ++inst) {
            FeatureCloud fc;
            fc.voxel_size = 0.2;
            fc.coords = random_points(rng, 100, 2.0);
            fc.timestamps.assign(100, 0.0);
            fc.features = Value(random_array({100, 4}, rng));
            Tape t(false);
            const auto ms = encode(t, fc, view, cfg.enc);
            std::vector<Vec3> level = fc.coords;
            for (std::size_t s = 0; s < ms.scales.size(); ++s) {
                if (s > 0) {
                    const double size = fc.voxel_size * std::pow(2.0, static_cast<double>(s));
                    std::map<std::array<long long, 3>, std::pair<Vec3, int>> groups;
                    for (const auto& c : level) {
                        auto [it, fresh] = groups.try_emplace({static_cast<long long>(std::floor(c.x() / size)),
                                                               static_cast<long long>(std::floor(c.y() / size)),
                                                               static_cast<long long>(std::floor(c.z() / size))},
                                                              Vec3::Zero(), 0);
                        auto& g = it->second;
                        g.first += c;
                        g.second += 1;
                    }
                    level.clear();
                    for (auto& [k, g] : groups) level.push_back(g.first / g.second);
                }
                if (ms.scales[s].size() != level.size()) ++failures;
            }
        }
        r.pass = failures == 0;
        r.detail = std::to_string(instances) + " clouds, " + std::to_string(failures) + " occupancy mismatches";
    });
}

/// Logits for the current frame are unchanged bitwise when a 1e5-point past frame
/// joins the window while the fused cloud stays fixed; row count equals the query count.
inline PropResult decoder_history_independence(std::uint64_t seed, std::size_t past_points = 100000) {
    return timed("oracle", "decoder_history_independence", [&](PropResult& r) {
        const ModelConfig cfg = tiny_model(8, 6);
        const ParamSet params = init_model(cfg, seed);
        const ParamView view = constant_view(params);
        synth::SceneSpec spec;
        spec.seed = seed;
        spec.frames = 2;
        spec.points_per_frame = 3000;
        const auto frames = synth::generate(spec);
        Tape t(false);
        const FeatureCloud fused = fold(t, {extract(t, frames[0], view, cfg.lfe), extract(t, frames[1], view, cfg.lfe)}, view);

        RawPointCloud past;
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<float> u(-30.0f, 30.0f);
        for (std::size_t i = 0; i < past_points; ++i) {
            past.coords.emplace_back(u(rng), u(rng), u(rng) / 10.0f);
            past.intensity.push_back(0.5f);
            past.timestamp.push_back(0.0f);
        }
        past.pose = frames[0].pose;
        const std::vector<RawPointCloud> short_window{frames[1]};
        const std::vector<RawPointCloud> long_window{past, frames[0], frames[1]};
        const Value a = predict_current(t, short_window, fused, view, cfg);
        const Value b = predict_current(t, long_window, fused, view, cfg);
        const bool same = a.array() == b.array();
        const bool rows = a.rows() == frames[1].size() && b.rows() == frames[1].size();
        r.pass = same && rows;
        r.detail = std::string(same ? "bitwise identical" : "logits differ") + ", rows " + std::to_string(b.rows()) +
                   " for " + std::to_string(frames[1].size()) + " queries";
    });
}

/// Static scene, 1 m ego translation per frame, sigma 0.01 m: fraction of previous
/// features paired with the current feature occupying the same world voxel. The
/// oracle maps each previous feature with 4x4 homogeneous matrices and floors.
struct AssociationScore {
    std::size_t with_counterpart = 0;
    std::size_t correct = 0;
    double rate() const { return with_counterpart ? static_cast<double>(correct) / static_cast<double>(with_counterpart) : 0.0; }
};

inline std::vector<synth::SceneObject> static_objects(const std::vector<synth::SceneObject>& objs) {
    std::vector<synth::SceneObject> out = objs;
    for (auto& o : out) o.velocity = Vec3::Zero();
    return out;
}

inline AssociationScore association_score(std::uint64_t seed, std::size_t frames_count = 5, double voxel = 0.2) {
    synth::SceneSpec spec;
    spec.seed = seed;
    spec.frames = frames_count;
    spec.ego_speed = 10.0;
    spec.frame_period = 0.1;  // 1 m per frame
    spec.noise_sigma = 0.01;
    spec.points_per_frame = 8000;
    spec.objects = static_objects(synth::random_layout(seed));
    const auto frames = synth::generate(spec);
    const ModelConfig cfg = tiny_model(4, 6);
    ParamSet params = init_model(cfg, seed);
    const ParamView view = constant_view(params);
    LfeConfig lfe = cfg.lfe;
    lfe.voxel_size = voxel;
    AssociationScore score;
    auto key_of = [voxel](const Eigen::Vector4d& p) {
        return std::array<long long, 3>{static_cast<long long>(std::floor(p.x() / voxel)),
                                        static_cast<long long>(std::floor(p.y() / voxel)),
                                        static_cast<long long>(std::floor(p.z() / voxel))};
    };
    for (std::size_t f = 1; f < frames.size(); ++f) {
        Tape t(false);
        const FeatureCloud prev = extract(t, frames[f - 1], view, lfe);
        const FeatureCloud curr = extract(t, frames[f], view, lfe);
        const FeatureCloud moved = to_frame(t, prev, curr.pose, curr.capture_time, view);
        const AssociatedPairs pairs = associate(moved, curr, voxel);

        std::map<std::array<long long, 3>, std::size_t> curr_rows;
        for (std::size_t j = 0; j < curr.size(); ++j)
            curr_rows[key_of(Eigen::Vector4d(curr.coords[j].x(), curr.coords[j].y(), curr.coords[j].z(), 1.0))] = j;
        // Rows of the moved cloud by key, to find where each original feature ended up.
        std::map<std::array<long long, 3>, std::size_t> paired_y;
        for (const auto& e : pairs.entries)
            if (e.x && e.y) paired_y[{e.key.ix, e.key.iy, e.key.iz}] = *e.y;
        const Eigen::Matrix4d rel = frames[f].pose.homogeneous().inverse() * frames[f - 1].pose.homogeneous();
        for (std::size_t i = 0; i < prev.size(); ++i) {
            const Eigen::Vector4d p = rel * Eigen::Vector4d(prev.coords[i].x(), prev.coords[i].y(), prev.coords[i].z(), 1.0);
            const auto key = key_of(p);
            const auto it = curr_rows.find(key);
            if (it == curr_rows.end()) continue;
            ++score.with_counterpart;
            const auto jt = paired_y.find(key);
            if (jt != paired_y.end() && jt->second == it->second) ++score.correct;
        }
    }
    return score;
}

inline PropResult ego_association(std::uint64_t seed, double threshold = 0.99) {
    return timed("oracle", "ego_motion_association", [&](PropResult& r) {
        const AssociationScore s = association_score(seed);
        r.pass = s.rate() >= threshold;
        r.detail = std::to_string(s.correct) + "/" + std::to_string(s.with_counterpart) + " = " + fmt(s.rate());
    });
}

// ---------------------------------------------------------------------------
// Format suite

inline io::Sequence sample_sequence(std::uint64_t seed, std::size_t frames = 3, std::size_t points = 500) {
    synth::SceneSpec spec;
    spec.seed = seed;
    spec.frames = frames;
    spec.points_per_frame = points;
    io::Sequence seq;
    seq.frames = synth::generate(spec);
    seq.num_classes = synth::kNumClasses;
    seq.class_names.assign(synth::kClassNames.begin(), synth::kClassNames.end());
    seq.frame_period = spec.frame_period;
    return seq;
}

inline std::filesystem::path scratch_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() /
               ("mfseg_" + tag + "_" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    std::filesystem::create_directories(dir);
    return dir;
}

inline PropResult format_roundtrip(std::uint64_t seed) {
    return timed("format", "roundtrip", [&](PropResult& r) {
        const auto dir = scratch_dir("rt");
        io::Sequence seq = sample_sequence(seed);
        RawPointCloud empty;
        empty.pose = seq.frames.back().pose;
        empty.capture_time = 0.3;
        seq.frames.push_back(empty);
        io::write_sequence(seq, dir);
        const io::Sequence back = io::read_sequence(dir);
        std::filesystem::remove_all(dir);
        r.pass = back == seq;
        r.detail = std::to_string(seq.frames.size()) + " frames (one empty), " + (r.pass ? "bitwise equal" : "differs");
    });
}

inline io::SequenceErrorCode read_error(const std::filesystem::path& dir) {
    try {
        io::read_sequence(dir);
    } catch (const io::SequenceError& e) {
        return e.code();
    }
    throw std::logic_error("expected a read error");
}

inline PropResult format_corruption(std::uint64_t seed) {
    return timed("format", "corruption_codes", [&](PropResult& r) {
        const io::Sequence seq = sample_sequence(seed, 2, 200);
        const auto dir = scratch_dir("bad");
        std::vector<std::string> wrong;
        auto fresh = [&] {
            std::filesystem::remove_all(dir);
            io::write_sequence(seq, dir);
        };
        const auto frame = dir / io::frame_filename(1);
        fresh();
        {
            std::fstream f(frame, std::ios::in | std::ios::out | std::ios::binary);
            f.seekp(100);
            char c;
            f.seekg(100);
            f.get(c);
            f.seekp(100);
            f.put(static_cast<char>(c ^ 0x5A));
        }
        if (read_error(dir) != io::SequenceErrorCode::kChecksum) wrong.push_back("flipped byte");
        fresh();
        std::filesystem::resize_file(frame, std::filesystem::file_size(frame) - 7);
        if (read_error(dir) != io::SequenceErrorCode::kTruncated) wrong.push_back("truncated");
        fresh();
        {
            std::ifstream in(dir / "manifest.json");
            nlohmann::json m = nlohmann::json::parse(in);
            m["format_version"] = 99;
            std::ofstream(dir / "manifest.json") << m.dump();
        }
        if (read_error(dir) != io::SequenceErrorCode::kVersionMismatch) wrong.push_back("version");
        fresh();
        std::filesystem::remove(frame);
        if (read_error(dir) != io::SequenceErrorCode::kMissingFrame) wrong.push_back("missing");
        std::filesystem::remove_all(dir);
        r.pass = wrong.empty();
        r.detail = wrong.empty() ? "checksum, truncated, version and missing-frame codes distinct and correct"
                                 : "wrong code for:" + [&] {
                                       std::string s;
                                       for (auto& w : wrong) s += " " + w;
                                       return s;
                                   }();
    });
}

// ---------------------------------------------------------------------------

struct SuiteOptions {
    std::uint64_t seed = 0;
    std::size_t algebra_cases = 10000;
    std::size_t knn_instances = 1000;
    std::size_t miou_instances = 100;
    PairFn pair = default_pair;  // swapped out by mutation checks
};

inline PropsReport run_all(const SuiteOptions& o) {
    PropsReport rep;
    rep.results.push_back(identity_law(o.seed, o.algebra_cases, o.pair));
    rep.results.push_back(commutativity_law(o.seed, o.algebra_cases, o.pair));
    rep.results.push_back(op_gradients(o.seed));
    rep.results.push_back(stage2_gradients(o.seed));
    rep.results.push_back(knn_oracle(o.seed, o.knn_instances));
    rep.results.push_back(miou_oracle(o.seed, o.miou_instances));
    rep.results.push_back(encoder_occupancy_oracle(o.seed, 20));
    rep.results.push_back(decoder_history_independence(o.seed));
    rep.results.push_back(ego_association(o.seed));
    rep.results.push_back(format_roundtrip(o.seed));
    rep.results.push_back(format_corruption(o.seed));
    return rep;
}

}  // namespace mfseg::props
