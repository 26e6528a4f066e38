#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"

#include "cascade_detr/scoring.hpp"

using namespace cdetr;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// Two foreground classes plus no-object; logits chosen so that the softmax
// yields P(obj) = p for class 0.
LayerOutput pair_output(double p0, double iou0, double p1, double iou1) {
    auto row = [](double p) {
        // softmax([log p, -inf-ish, log(1-p)]) with a tiny class-1 mass.
        return std::vector<double>{std::log(p), -50.0, std::log(1.0 - p)};
    };
    std::vector<double> logits = row(p0);
    const auto r1 = row(p1);
    logits.insert(logits.end(), r1.begin(), r1.end());
    return LayerOutput{Tensor::from({2, 4}, {0.3, 0.3, 0.2, 0.2, 0.7, 0.7, 0.2, 0.2}),
                       Tensor::from({2, 3}, logits), Tensor::from({2, 1}, {logit(iou0), logit(iou1)})};
}

}  // namespace

TEST_CASE("objectness takes the best foreground class") {
    const Tensor logits = Tensor::from({1, 4}, {1.0, 2.0, 0.5, 0.0});
    const auto obj = objectness(logits);
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.5) + 1.0;
    CHECK(obj[0].class_id == 1);
    CHECK(obj[0].probability == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));

    const auto background = objectness(Tensor::from({1, 3}, {-10.0, -9.0, 10.0}));
    CHECK(background[0].class_id == 1);
    CHECK(background[0].probability < 1e-8);
    const auto saturated = objectness(Tensor::from({1, 3}, {40.0, 0.0, 0.0}));
    CHECK(saturated[0].probability == doctest::Approx(1.0));
    CHECK_THROWS_AS(objectness(Tensor::from({2}, {1.0, 2.0})), ShapeError);
}

TEST_CASE("recalibration arithmetic") {
    CHECK(recalibrate(1.0, 1.0, FusionMode::product) == 1.0);
    CHECK(recalibrate(0.8, 0.5, FusionMode::product) == 0.4);
    CHECK(recalibrate(0.8, 0.5, FusionMode::sum) == doctest::Approx(0.65));
    CHECK(recalibrate(0.8, 0.5, FusionMode::none) == 0.8);
    CHECK(recalibrate(0.8, 0.5, FusionMode::single) == 0.8);
    CHECK_THROWS_AS(recalibrate(1.2, 0.5, FusionMode::product), PreconditionError);
    CHECK_THROWS_AS(recalibrate(0.5, -0.1, FusionMode::sum), PreconditionError);
    CHECK_THROWS_AS(recalibrate(std::nan(""), 0.5, FusionMode::none), PreconditionError);

    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 10000; ++i) {
        const double p = u(rng), q = u(rng);
        const double s = recalibrate(p, q, FusionMode::product);
        CHECK(s <= std::min(p, q));
        CHECK(recalibrate(p, 1.0, FusionMode::product) == p);
        const double sum = recalibrate(p, q, FusionMode::sum);
        CHECK((sum >= 0.0 && sum <= 1.0));
    }
    // A non-object has zero expected IoU whatever the IoU head says.
    for (double p = 1e-2; p > 1e-12; p /= 10) CHECK(recalibrate(p, u(rng), FusionMode::product) <= p);
}

TEST_CASE("product fusion reranks a confident but poorly localized query") {
    const LayerOutput out = pair_output(0.9, 0.3, 0.6, 0.8);
    const auto product = rank_detections(out, FusionMode::product);
    const auto none = rank_detections(out, FusionMode::none);
    REQUIRE(product.size() == 2);
    CHECK(product[0].query == 1);
    CHECK(product[0].score == doctest::Approx(0.48).epsilon(1e-9));
    CHECK(product[1].score == doctest::Approx(0.27).epsilon(1e-9));
    CHECK(none[0].query == 0);
    // Scores change, boxes and classes do not.
    for (const auto& d : product) {
        const auto& twin = d.query == none[0].query ? none[0] : none[1];
        CHECK(d.box == twin.box);
        CHECK(d.class_id == twin.class_id);
    }
}

TEST_CASE("ranking is stable, truncates, and ignores monotone transforms") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const std::size_t n = 40;
    std::vector<double> boxes, logits, ious;
    for (std::size_t q = 0; q < n; ++q) {
        boxes.insert(boxes.end(), {0.5, 0.5, 0.2, 0.2});
        for (int k = 0; k < 3; ++k) logits.push_back(u(rng));
        ious.push_back(u(rng));
    }
    LayerOutput out{Tensor::from({n, 4}, boxes), Tensor::from({n, 3}, logits), Tensor::from({n, 1}, ious)};
    const auto ranked = rank_detections(out, FusionMode::none);
    for (std::size_t i = 1; i < ranked.size(); ++i) CHECK(ranked[i - 1].score >= ranked[i].score);
    CHECK(rank_detections(out, FusionMode::none, 10).size() == 10);

    // Baseline ranking: descending class probability, ties by query index.
    const auto obj = objectness(out.class_logits);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return obj[a].probability > obj[b].probability; });
    for (std::size_t i = 0; i < n; ++i) CHECK(ranked[i].query == order[i]);

    // Equal scores keep query order.
    LayerOutput ties{Tensor::from({3, 4}, std::vector<double>(12, 0.5)), Tensor::zeros({3, 3}), Tensor::zeros({3, 1})};
    const auto tied = rank_detections(ties, FusionMode::product);
    CHECK(tied[0].query == 0);
    CHECK(tied[2].query == 2);

    CHECK(parse_fusion_mode("sum") == FusionMode::sum);
    CHECK_THROWS_AS(parse_fusion_mode("max"), Error);
}
