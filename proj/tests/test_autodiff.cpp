#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mfseg/props.hpp"

using namespace mfseg;

namespace {

Value constant(Array a) { return Value(std::move(a)); }

std::vector<double> naive_matmul_bias(const Array& x, const Array& w, const Array& b) {
    const std::size_t n = x.shape[0], din = x.shape[1], dout = w.shape[1];
    std::vector<double> y(n * dout);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dout; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < din; ++k) s += x.data[i * din + k] * w.data[k * dout + j];
            y[i * dout + j] = s + b.data[j];
        }
    return y;
}

}  // namespace

TEST_CASE("linear: identity weights and zero input") {
    Tape t;
    const Value y = ops::linear(t, constant(Array::matrix(1, 2, {1, 2})), constant(Array::matrix(2, 2, {1, 0, 0, 1})),
                                constant(Array::vector({0, 0})));
    CHECK(y.array() == Array::matrix(1, 2, {1, 2}));
    const Value z = ops::linear(t, constant(Array::matrix(1, 2, {0, 0})), constant(Array::matrix(2, 2, {5, -1, 7, 9})),
                                constant(Array::vector({3, 4})));
    CHECK(z.array() == Array::matrix(1, 2, {3, 4}));
}

TEST_CASE("linear: matches a triple-loop matmul") {
    std::mt19937_64 rng(11);
    const Array x = props::random_array({2, 3}, rng), w = props::random_array({3, 2}, rng),
                b = props::random_array({2}, rng);
    Tape t;
    const Value y = ops::linear(t, constant(x), constant(w), constant(b));
    const auto expect = naive_matmul_bias(x, w, b);
    REQUIRE(y.size() == expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) CHECK(y.data()[i] == doctest::Approx(expect[i]).epsilon(1e-14));
}

TEST_CASE("linear: shape mismatch names the operands") {
    Tape t;
    try {
        ops::linear(t, constant(Array::matrix(1, 2, {1, 2})), constant(Array::matrix(3, 2, {1, 0, 0, 1, 0, 0})),
                    constant(Array::vector({0, 0})));
        FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("x") != std::string::npos);
        CHECK(msg.find("W") != std::string::npos);
    }
}

TEST_CASE("relu: values and gradients") {
    Tape t;
    const Value x = t.variable(Array::vector({-1, 0, 2}));
    const Value y = ops::relu(t, x);
    CHECK(y.array() == Array::vector({0, 0, 2}));
    t.backward(ops::sum(t, y));
    CHECK(t.grad(x) == std::vector<double>{0, 0, 1});

    Tape t2;
    const Value neg = t2.variable(Array::vector({-3, -0.5, -2}));
    const Value yn = ops::relu(t2, neg);
    CHECK(yn.array() == Array::vector({0, 0, 0}));
    t2.backward(ops::sum(t2, yn));
    CHECK(t2.grad(neg) == std::vector<double>{0, 0, 0});

    Tape t3;
    const Value pos = t3.variable(Array::vector({0.5, 1, 4}));
    const Value up = Value(Array::vector({2, -3, 7}));
    t3.backward(ops::sum(t3, ops::mul(t3, ops::relu(t3, pos), up)));
    CHECK(t3.grad(pos) == std::vector<double>{2, -3, 7});
}

TEST_CASE("cosine_similarity: parallel, opposite, orthogonal, symmetric") {
    Tape t;
    const Value a = constant(Array::vector({0.3, -1.2, 2.0}));
    CHECK(ops::cosine_similarity(t, a, a).item() == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(ops::cosine_similarity(t, a, constant(Array::vector({-0.3, 1.2, -2.0}))).item() ==
          doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(ops::cosine_similarity(t, constant(Array::vector({1, 0})), constant(Array::vector({0, 1}))).item() == 0.0);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 50; ++i) {
        const Value u = constant(props::random_array({7}, rng)), v = constant(props::random_array({7}, rng));
        const double c = ops::cosine_similarity(t, u, v).item();
        CHECK(c == ops::cosine_similarity(t, v, u).item());
        CHECK(std::abs(c) <= 1.0 + 1e-15);
    }
    // eps guards a zero vector
    CHECK(ops::cosine_similarity(t, constant(Array::vector({0, 0})), constant(Array::vector({1, 1}))).item() == 0.0);
}

TEST_CASE("softmax_cross_entropy: hand values") {
    Tape t;
    const Value uniform = constant(Array::matrix(2, 4, {0.7, 0.7, 0.7, 0.7, -2, -2, -2, -2}));
    CHECK(ops::softmax_cross_entropy(t, uniform, {0, 3}).item() == std::log(4.0));
    const Value sat = constant(Array::matrix(1, 3, {30, 0, 0}));
    CHECK(ops::softmax_cross_entropy(t, sat, {0}).item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(ops::softmax_cross_entropy(t, sat, {0}).item() < 1e-12);
    const Value two = constant(Array::matrix(1, 2, {1, 2}));
    const double direct = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(2.0)));
    CHECK(ops::softmax_cross_entropy(t, two, {0}).item() == doctest::Approx(direct).epsilon(1e-15));
    CHECK_THROWS(ops::softmax_cross_entropy(t, two, {2}));
    std::mt19937_64 rng(9);
    for (int i = 0; i < 20; ++i)
        CHECK(ops::softmax_cross_entropy(t, constant(props::random_array({4, 5}, rng, -9, 9)), {0, 1, 4, 2}).item() >= 0.0);
}

TEST_CASE("backward: identity root and bias gradient") {
    Tape t;
    const Value x = t.variable(Array::scalar(3.5));
    t.backward(x);
    CHECK(t.grad(x) == std::vector<double>{1.0});

    Tape t2;
    std::mt19937_64 rng(2);
    const Value xs = t2.variable(props::random_array({4, 3}, rng));
    const Value w = t2.variable(props::random_array({3, 2}, rng));
    const Value b = t2.variable(props::random_array({2}, rng));
    t2.backward(ops::sum(t2, ops::linear(t2, xs, w, b)));
    CHECK(t2.grad(b) == std::vector<double>{4.0, 4.0});

    CHECK_THROWS_AS(t2.backward(xs), DimensionError);
}

TEST_CASE("backward: twice on the same tape gives identical gradients") {
    Tape t;
    std::mt19937_64 rng(4);
    const Value x = t.variable(props::random_array({3, 4}, rng));
    const Value w = t.variable(props::random_array({4, 2}, rng));
    const Value b = t.variable(props::random_array({2}, rng));
    const Value loss = ops::softmax_cross_entropy(t, ops::relu(t, ops::linear(t, x, w, b)), {0, 1, 1});
    t.backward(loss);
    const auto g1 = t.grad(w);
    t.backward(loss);
    CHECK(t.grad(w) == g1);
}

TEST_CASE("every op matches central finite differences") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto r = props::op_gradients(seed);
        INFO(r.detail);
        CHECK(r.pass);
    }
}

TEST_CASE("one_cycle_lr: endpoints, peak, continuity") {
    const double max_lr = 0.002;
    CHECK(one_cycle_lr(100, 1000, max_lr) == doctest::Approx(0.002).epsilon(1e-15));
    CHECK(one_cycle_lr(0, 1000, max_lr) == doctest::Approx(max_lr / 25).epsilon(1e-15));
    CHECK(one_cycle_lr(1000, 1000, max_lr) == doctest::Approx(max_lr / 1000).epsilon(1e-12));
    CHECK_THROWS(one_cycle_lr(1001, 1000, max_lr));
    CHECK_THROWS(one_cycle_lr(0, 0, max_lr));
    for (std::size_t total : {1u, 7u, 10u, 1000u}) {
        double prev = one_cycle_lr(0, total, max_lr);
        for (std::size_t s = 1; s <= total; ++s) {
            const double lr = one_cycle_lr(s, total, max_lr);
            CHECK(std::abs(lr - prev) <= max_lr);
            CHECK(lr > 0.0);
            prev = lr;
        }
    }
}

TEST_CASE("adamw: zero gradient, descent, scalar reference") {
    ParamSet p;
    p.add("w", Array::vector({1.5, -2.0}));
    AdamWOptions no_decay;
    no_decay.weight_decay = 0.0;
    adamw_step(p, {{"w", {0.0, 0.0}}}, 0.1, no_decay);
    CHECK(p.at("w") == Array::vector({1.5, -2.0}));

    ParamSet q;
    q.add("w", Array::scalar(1.0));
    adamw_step(q, {{"w", {2.0}}}, 0.01);  // d/dw w^2 at w=1
    CHECK(q.at("w").data[0] < 1.0);

    // Two steps on f(w) = 3 (w - 0.5)^2 against a scalar re-implementation.
    ParamSet r;
    r.add("w", Array::scalar(2.0));
    AdamWOptions opt;
    opt.weight_decay = 0.01;
    double w = 2.0, m = 0.0, v = 0.0;
    for (int step = 1; step <= 2; ++step) {
        const double lr = 0.05;
        const double g_lib = 6.0 * (r.at("w").data[0] - 0.5);
        adamw_step(r, {{"w", {g_lib}}}, lr, opt);
        const double g = 6.0 * (w - 0.5);
        w *= 1.0 - lr * opt.weight_decay;
        m = opt.beta1 * m + (1 - opt.beta1) * g;
        v = opt.beta2 * v + (1 - opt.beta2) * g * g;
        const double mh = m / (1 - std::pow(opt.beta1, step)), vh = v / (1 - std::pow(opt.beta2, step));
        w -= lr * mh / (std::sqrt(vh) + opt.eps);
        CHECK(r.at("w").data[0] == doctest::Approx(w).epsilon(1e-15));
    }
    CHECK_THROWS(adamw_step(r, {{"missing", {1.0}}}, 0.1));
}

TEST_CASE("checkpoint: round trip and rejection of foreign files") {
    const ParamSet p = init_model(props::tiny_model(4, 3), 3);
    const auto dir = props::scratch_dir("ckpt");
    const std::string path = (dir / "p.bin").string();
    save_checkpoint(p, path);
    const ParamSet back = load_checkpoint(path);
    CHECK(back.same_values(p));
    std::ofstream(dir / "junk.bin") << "not a checkpoint at all";
    CHECK_THROWS_AS(load_checkpoint((dir / "junk.bin").string()), CheckpointError);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("param set: unique names") {
    ParamSet p;
    p.add("a", Array::scalar(1));
    CHECK_THROWS(p.add("a", Array::scalar(2)));
}
