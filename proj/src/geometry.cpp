#include "cascade_detr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cdetr {

Corners to_corners(const Box& b) {
    return Corners{b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

Box from_corners(const Corners& c) {
    return Box{0.5 * (c.x1 + c.x2), 0.5 * (c.y1 + c.y2), c.x2 - c.x1, c.y2 - c.y1};
}

bool is_valid_box(const Box& b) {
    return std::isfinite(b.cx) && std::isfinite(b.cy) && std::isfinite(b.w) && std::isfinite(b.h) && b.w > 0.0 &&
           b.h > 0.0;
}

void validate_box(const Box& b) {
    if (!is_valid_box(b)) {
        throw InvalidBoxError("degenerate box (cx=" + std::to_string(b.cx) + ", cy=" + std::to_string(b.cy) +
                              ", w=" + std::to_string(b.w) + ", h=" + std::to_string(b.h) + ")");
    }
}

double area(const Box& b) { return b.w * b.h; }

namespace {

struct Overlap {
    double inter;
    double uni;
    double hull;
};

Overlap overlap(const Box& a, const Box& b) {
    validate_box(a);
    validate_box(b);
    const Corners p = to_corners(a);
    const Corners q = to_corners(b);
    const double iw = std::max(0.0, std::min(p.x2, q.x2) - std::max(p.x1, q.x1));
    const double ih = std::max(0.0, std::min(p.y2, q.y2) - std::max(p.y1, q.y1));
    const double inter = iw * ih;
    const double uni = (p.x2 - p.x1) * (p.y2 - p.y1) + (q.x2 - q.x1) * (q.y2 - q.y1) - inter;
    const double hull = (std::max(p.x2, q.x2) - std::min(p.x1, q.x1)) * (std::max(p.y2, q.y2) - std::min(p.y1, q.y1));
    return {inter, uni, hull};
}

}  // namespace

double iou(const Box& a, const Box& b) {
    const Overlap o = overlap(a, b);
    return o.inter / o.uni;
}

double giou(const Box& a, const Box& b) {
    const Overlap o = overlap(a, b);
    // The hull never undercuts the union; guard the rounding so GIoU <= IoU.
    return o.inter / o.uni - std::max(0.0, o.hull - o.uni) / o.hull;
}

Box clamp_box(const Box& b, GridShape grid) {
    validate_box(b);
    const double floor_side = 1.0 / static_cast<double>(std::max(grid.height, grid.width));
    Corners c = to_corners(b);
    c.x1 = std::clamp(c.x1, 0.0, 1.0);
    c.x2 = std::clamp(c.x2, 0.0, 1.0);
    c.y1 = std::clamp(c.y1, 0.0, 1.0);
    c.y2 = std::clamp(c.y2, 0.0, 1.0);
    if (c.x2 > c.x1 && c.y2 > c.y1) return from_corners(c);

    const double half = 0.5 * floor_side;
    return Box{std::clamp(b.cx, half, 1.0 - half), std::clamp(b.cy, half, 1.0 - half), floor_side, floor_side};
}

namespace {

// Indices i in [0, n) whose cell center (i + 0.5) / n lies in [lo, hi].
std::pair<std::size_t, std::size_t> covered_range(double lo, double hi, std::size_t n) {
    std::size_t first = n, last = 0;
    const double dn = static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double center = (static_cast<double>(i) + 0.5) / dn;
        if (center >= lo && center <= hi) {
            first = std::min(first, i);
            last = i + 1;
        }
    }
    if (first == n) return {0, 0};
    return {first, last};
}

std::size_t containing_index(double v, std::size_t n) {
    const double scaled = std::floor(v * static_cast<double>(n));
    if (scaled < 0.0) return 0;
    return std::min(n - 1, static_cast<std::size_t>(scaled));
}

}  // namespace

CellSet rasterize_box(const Box& b, GridShape grid, bool& used_fallback) {
    if (grid.height == 0 || grid.width == 0) throw PreconditionError("rasterize_box: grid must be at least 1x1");
    const Box clamped = clamp_box(b, grid);
    const Corners c = to_corners(clamped);
    const auto [r0, r1] = covered_range(c.y1, c.y2, grid.height);
    const auto [c0, c1] = covered_range(c.x1, c.x2, grid.width);
    CellSet cells;
    used_fallback = (r0 == r1 || c0 == c1);
    if (used_fallback) {
        cells.push_back(Cell{containing_index(clamped.cy, grid.height), containing_index(clamped.cx, grid.width)});
        return cells;
    }
    cells.reserve((r1 - r0) * (c1 - c0));
    for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t col = c0; col < c1; ++col) cells.push_back(Cell{r, col});
    return cells;
}

CellSet rasterize_box(const Box& b, GridShape grid) {
    bool used_fallback = false;
    return rasterize_box(b, grid, used_fallback);
}

AttentionMask support_mask(std::span<const Box> boxes, GridShape grid) {
    AttentionMask mask{boxes.size(), grid.cells(), std::vector<std::uint8_t>(boxes.size() * grid.cells(), 0)};
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        for (const Cell& cell : rasterize_box(boxes[i], grid)) mask.set(i, cell.row * grid.width + cell.col, true);
    }
    return mask;
}

std::vector<Box> boxes_from_tensor(const Tensor& t) {
    if (t.rank() != 2 || t.dim(1) != 4) throw ShapeError("boxes_from_tensor: expected [n, 4], got " + shape_str(t.shape()));
    std::vector<Box> boxes(t.dim(0));
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        boxes[i] = Box{t.at(i, 0), t.at(i, 1), t.at(i, 2), t.at(i, 3)};
    }
    return boxes;
}

Tensor boxes_to_tensor(std::span<const Box> boxes) {
    std::vector<double> values;
    values.reserve(boxes.size() * 4);
    for (const Box& b : boxes) {
        values.insert(values.end(), {b.cx, b.cy, b.w, b.h});
    }
    return Tensor::from({boxes.size(), 4}, std::move(values));
}

Tensor giou_loss_rows(const Tensor& pred, std::span<const Box> targets) {
    if (pred.rank() != 2 || pred.dim(1) != 4 || pred.dim(0) != targets.size()) {
        throw ShapeError("giou_loss_rows: predictions " + shape_str(pred.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
    }
    const std::size_t k = targets.size();
    // Per row: d loss / d (cx, cy, w, h)
    std::vector<double> out(k), partials(k * 4);
    for (std::size_t i = 0; i < k; ++i) {
        const Box p{pred.at(i, 0), pred.at(i, 1), pred.at(i, 2), pred.at(i, 3)};
        validate_box(p);
        validate_box(targets[i]);
        const Corners a = to_corners(p);
        const Corners t = to_corners(targets[i]);

        const double raw_iw = std::min(a.x2, t.x2) - std::max(a.x1, t.x1);
        const double raw_ih = std::min(a.y2, t.y2) - std::max(a.y1, t.y1);
        const double iw = std::max(0.0, raw_iw);
        const double ih = std::max(0.0, raw_ih);
        const double inter = iw * ih;
        const double area_p = p.w * p.h;
        const double uni = area_p + targets[i].w * targets[i].h - inter;
        const double cw = std::max(a.x2, t.x2) - std::min(a.x1, t.x1);
        const double ch = std::max(a.y2, t.y2) - std::min(a.y1, t.y1);
        const double hull = cw * ch;
        out[i] = 2.0 - inter / uni - uni / hull;

        const double d_inter = -(uni + inter) / (uni * uni) + 1.0 / hull;
        const double d_area = inter / (uni * uni) - 1.0 / hull;
        const double d_hull = uni / (hull * hull);

        // Partials w.r.t. corners x1, x2, y1, y2 of the prediction.
        double gx1 = 0.0, gx2 = 0.0, gy1 = 0.0, gy2 = 0.0;
        if (raw_iw > 0.0 && raw_ih > 0.0) {
            if (a.x2 <= t.x2) gx2 += d_inter * ih;
            if (a.x1 >= t.x1) gx1 -= d_inter * ih;
            if (a.y2 <= t.y2) gy2 += d_inter * iw;
            if (a.y1 >= t.y1) gy1 -= d_inter * iw;
        }
        if (a.x2 >= t.x2) gx2 += d_hull * ch;
        if (a.x1 <= t.x1) gx1 -= d_hull * ch;
        if (a.y2 >= t.y2) gy2 += d_hull * cw;
        if (a.y1 <= t.y1) gy1 -= d_hull * cw;

        partials[i * 4 + 0] = gx1 + gx2;
        partials[i * 4 + 1] = gy1 + gy2;
        partials[i * 4 + 2] = 0.5 * (gx2 - gx1) + d_area * p.h;
        partials[i * 4 + 3] = 0.5 * (gy2 - gy1) + d_area * p.w;
    }
    return Tensor::make_result(
        {k}, std::move(out), {pred},
        [pred, partials = std::move(partials), k](std::span<const double> g) mutable {
            auto gp = pred.grad_buffer();
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < 4; ++j) gp[i * 4 + j] += g[i] * partials[i * 4 + j];
        },
        "giou_loss_rows");
}

}  // namespace cdetr
