#include "doctest.h"
#include "mfseg/props.hpp"

using namespace mfseg;

TEST_CASE("miou: perfect prediction") {
    ConfusionMatrix cm(3);
    cm.add({0, 1, 2, 2, 1}, {0, 1, 2, 2, 1});
    CHECK(cm.miou() == 1.0);
}

TEST_CASE("miou: everything predicted as one of two balanced classes") {
    ConfusionMatrix cm(2);
    std::vector<std::size_t> truth(100), pred(100, 0);
    for (std::size_t i = 50; i < 100; ++i) truth[i] = 1;
    cm.add(truth, pred);
    CHECK(*cm.iou(0) == 0.5);
    CHECK(*cm.iou(1) == 0.0);
    CHECK(cm.miou() == 0.25);
}

TEST_CASE("miou: empty intersection") {
    ConfusionMatrix cm(2);
    cm.add({0, 0, 1}, {1, 1, 0});
    CHECK(cm.miou() == 0.0);
}

TEST_CASE("miou: classes absent from the ground truth are skipped") {
    ConfusionMatrix cm(4);
    cm.add({0, 0, 1}, {0, 0, 1});
    CHECK_FALSE(cm.iou(3).has_value());
    CHECK(cm.miou() == 1.0);
    cm.add(2, 0);  // false positive for class 0, class 2 present but never hit
    CHECK(cm.miou() == doctest::Approx((2.0 / 3.0 + 1.0 + 0.0) / 3.0));
    CHECK(cm.mean_iou({1, 3}) == 1.0);
}

TEST_CASE("confusion matrix: bookkeeping") {
    ConfusionMatrix a(3), b(3);
    a.add({0, 1}, {1, 1});
    b.add(2, 2, 5);
    a += b;
    CHECK(a.total() == 7);
    CHECK(a.at(2, 2) == 5);
    CHECK(a.truth_count(0) == 1);
    CHECK(a.pred_count(1) == 2);
    CHECK_THROWS(a.add(3, 0));
    CHECK_THROWS(a.add({0}, {0, 1}));
    ConfusionMatrix c(2);
    CHECK_THROWS(a += c);
}

TEST_CASE("miou equals a direct recount on 100 random instances") {
    const auto r = props::miou_oracle(7, 100);
    INFO(r.detail);
    CHECK(r.pass);
}
