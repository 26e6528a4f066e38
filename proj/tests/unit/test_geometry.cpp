#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"

#include "cascade_detr/geometry.hpp"
#include "support/iou_oracle.hpp"
#include "support/random.hpp"

using namespace cdetr;
using cdetr::testing::counting_iou;

namespace {

// Direct brute-force enumeration of cell centers inside the closed corners.
std::set<Cell> enumerate_cells(const Corners& c, GridShape g) {
    std::set<Cell> out;
    for (std::size_t r = 0; r < g.height; ++r)
        for (std::size_t col = 0; col < g.width; ++col) {
            const double x = (static_cast<double>(col) + 0.5) / static_cast<double>(g.width);
            const double y = (static_cast<double>(r) + 0.5) / static_cast<double>(g.height);
            if (x >= c.x1 && x <= c.x2 && y >= c.y1 && y <= c.y2) out.insert(Cell{r, col});
        }
    return out;
}

}  // namespace

TEST_CASE("iou examples") {
    const Box a{0.5, 0.5, 0.4, 0.4};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(Box{0.2, 0.2, 0.2, 0.2}, Box{0.8, 0.8, 0.2, 0.2}) == 0.0);
    // Corners (0,0)-(2,2) and (1,0)-(3,2) in a 4x4 image: overlap 2 cells, union 6.
    CHECK(iou(testing::pixel_box(0, 0, 2, 2, 4), testing::pixel_box(1, 0, 3, 2, 4)) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(counting_iou(0, 0, 2, 2, 1, 0, 3, 2, 4) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iou rejects degenerate boxes") {
    CHECK_THROWS_AS(iou(Box{0.5, 0.5, 0.0, 0.2}, Box{0.5, 0.5, 0.2, 0.2}), InvalidBoxError);
    CHECK_THROWS_AS(giou(Box{0.5, 0.5, 0.2, -0.1}, Box{0.5, 0.5, 0.2, 0.2}), InvalidBoxError);
}

TEST_CASE("iou matches the counting oracle exactly on integer-aligned boxes") {
    const testing::IouOracleReport r = testing::check_iou_oracle(1000, 2024);
    CHECK(r.pairs == 1000);
    CHECK(r.iou_mismatches == 0);
    CHECK(r.giou_violations == 0);
}

TEST_CASE("giou examples") {
    const Box a{0.3, 0.6, 0.2, 0.5};
    CHECK(giou(a, a) == doctest::Approx(1.0));
    CHECK(giou(Box{0.25, 0.5, 0.5, 1.0}, Box{0.75, 0.5, 0.5, 1.0}) == doctest::Approx(0.0).epsilon(1e-15));

    // Unit cells separated by d cells along x in a 1000-pixel image:
    // hull = (d + 1) cells, union = 2 cells, IoU = 0.
    double previous = 1.0;
    for (int d : {2, 5, 10, 100, 900}) {
        const Box p = testing::pixel_box(0, 0, 1, 1, 1000);
        const Box q = testing::pixel_box(d, 0, d + 1, 1, 1000);
        const double direct = 0.0 - ((d + 1.0) - 2.0) / (d + 1.0);
        CHECK(giou(p, q) == doctest::Approx(direct).epsilon(1e-12));
        CHECK(giou(p, q) < previous);
        previous = giou(p, q);
    }
    CHECK(previous < -0.99);
}

TEST_CASE("giou <= iou and both symmetric on random pairs") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5000; ++trial) {
        const Box a = testing::random_box(rng, 0.001);
        const Box b = testing::random_box(rng, 0.001);
        CHECK(giou(a, b) <= iou(a, b));
        CHECK(std::fabs(iou(a, b) - iou(b, a)) < 1e-12);
        CHECK(std::fabs(giou(a, b) - giou(b, a)) < 1e-12);
        CHECK(iou(a, b) >= 0.0);
        CHECK(iou(a, b) <= 1.0);
        CHECK(giou(a, b) > -1.0);
    }
}

TEST_CASE("rasterize_box examples") {
    CHECK(rasterize_box(Box{0.5, 0.5, 1.0, 1.0}, GridShape{4, 4}).size() == 16);

    bool fallback = false;
    const CellSet tiny = rasterize_box(Box{0.5, 0.5, 0.01, 0.01}, GridShape{8, 8}, fallback);
    CHECK(fallback);
    REQUIRE(tiny.size() == 1);
    CHECK(tiny[0] == Cell{4, 4});

    const Corners quarter{0.25, 0.25, 0.75, 0.75};
    const CellSet block = rasterize_box(from_corners(quarter), GridShape{8, 8});
    const auto oracle = enumerate_cells(quarter, GridShape{8, 8});
    CHECK(block.size() == 16);
    CHECK(std::set<Cell>(block.begin(), block.end()) == oracle);
    CHECK(block.front() == Cell{2, 2});
    CHECK(block.back() == Cell{5, 5});
}

TEST_CASE("rasterize_box matches brute-force enumeration") {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 3000; ++trial) {
        const GridShape g{testing::random_size(rng, 1, 12), testing::random_size(rng, 1, 12)};
        const Box b = testing::random_box(rng, 0.01);
        bool fallback = false;
        const CellSet cells = rasterize_box(b, g, fallback);
        const auto oracle = enumerate_cells(to_corners(clamp_box(b, g)), g);
        if (oracle.empty()) {
            CHECK(fallback);
            CHECK(cells.size() == 1);
        } else {
            CHECK_FALSE(fallback);
            CHECK(std::set<Cell>(cells.begin(), cells.end()) == oracle);
        }
    }
}

TEST_CASE("rasterize_box is never empty and has no duplicates") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(-0.5, 1.5);
    std::uniform_real_distribution<double> logside(-6.0, 0.3);
    for (int trial = 0; trial < 100000; ++trial) {
        const Box b{u(rng), u(rng), std::pow(10.0, logside(rng)), std::pow(10.0, logside(rng))};
        const GridShape g{1 + static_cast<std::size_t>(trial % 16), 1 + static_cast<std::size_t>((trial / 16) % 16)};
        const CellSet cells = rasterize_box(b, g);
        REQUIRE_FALSE(cells.empty());
        CHECK(std::adjacent_find(cells.begin(), cells.end()) == cells.end());
        CHECK(std::is_sorted(cells.begin(), cells.end()));
        for (const Cell& c : cells) {
            CHECK(c.row < g.height);
            CHECK(c.col < g.width);
        }
    }
}

TEST_CASE("rasterization is monotone under containment") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const GridShape g{8, 8};
    int checked = 0;
    for (int trial = 0; trial < 5000; ++trial) {
        const Box inner = testing::random_box(rng, 0.05);
        const Corners ic = to_corners(inner);
        const Corners oc{ic.x1 - 0.2 * u(rng), ic.y1 - 0.2 * u(rng), ic.x2 + 0.2 * u(rng), ic.y2 + 0.2 * u(rng)};
        bool inner_fallback = false;
        const CellSet small = rasterize_box(inner, g, inner_fallback);
        if (inner_fallback) continue;
        const CellSet big = rasterize_box(from_corners(oc), g);
        CHECK(std::includes(big.begin(), big.end(), small.begin(), small.end()));
        ++checked;
    }
    CHECK(checked > 1000);
}

TEST_CASE("clamp_box") {
    SUBCASE("in-range box unchanged") {
        const Box b{0.4, 0.6, 0.2, 0.3};
        const Box c = clamp_box(b);
        CHECK(c.cx == doctest::Approx(b.cx));
        CHECK(c.cy == doctest::Approx(b.cy));
        CHECK(c.w == doctest::Approx(b.w));
        CHECK(c.h == doctest::Approx(b.h));
    }
    SUBCASE("one-sided clip") {
        const Corners c = to_corners(clamp_box(from_corners(Corners{-0.1, 0.0, 0.5, 1.0})));
        CHECK(c.x1 == doctest::Approx(0.0));
        CHECK(c.y1 == doctest::Approx(0.0));
        CHECK(c.x2 == doctest::Approx(0.5));
        CHECK(c.y2 == doctest::Approx(1.0));
    }
    SUBCASE("box fully left of the image snaps to the left edge with floor size") {
        const GridShape g{8, 8};
        const Box snapped = clamp_box(Box{-0.5, 0.5, 0.2, 0.2}, g);
        CHECK(is_valid_box(snapped));
        CHECK(snapped.w == doctest::Approx(1.0 / 8.0));
        CHECK(snapped.h == doctest::Approx(1.0 / 8.0));
        CHECK(to_corners(snapped).x1 == doctest::Approx(0.0));
        const CellSet cells = rasterize_box(snapped, g);
        CHECK_FALSE(cells.empty());
        CHECK(cells.front().col == 0);
    }
}

TEST_CASE("support_mask rows follow rasterization") {
    const std::vector<Box> boxes{Box{0.5, 0.5, 1.0, 1.0}, Box{0.5, 0.5, 0.01, 0.01}};
    const AttentionMask m = support_mask(boxes, GridShape{4, 4});
    CHECK(m.row_count(0) == 16);
    CHECK(m.row_count(1) == 1);
    CHECK(m(1, 2 * 4 + 2));
}
