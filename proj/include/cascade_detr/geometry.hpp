#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cascade_detr/errors.hpp"
#include "cascade_detr/tensor.hpp"

namespace cdetr {

class InvalidBoxError : public Error {
public:
    explicit InvalidBoxError(const std::string& what) : Error(ErrorCode::invalid_box, what) {}
};

// Normalized center-format box; all fields relative to the image extent.
struct Box {
    double cx = 0.5;
    double cy = 0.5;
    double w = 1.0;
    double h = 1.0;

    bool operator==(const Box&) const = default;
};

struct Corners {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    bool operator==(const Corners&) const = default;
};

struct GridShape {
    std::size_t height = 1;
    std::size_t width = 1;

    std::size_t cells() const { return height * width; }
    bool operator==(const GridShape&) const = default;
};

struct Cell {
    std::size_t row = 0;
    std::size_t col = 0;

    auto operator<=>(const Cell&) const = default;
};

// Row-major ordered, duplicate-free, never empty.
using CellSet = std::vector<Cell>;

Corners to_corners(const Box& b);
Box from_corners(const Corners& c);

// Throws InvalidBoxError if w or h is not strictly positive (or any field is not finite).
void validate_box(const Box& b);
bool is_valid_box(const Box& b);

double area(const Box& b);
double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

// Intersects the box with the unit square. If either axis becomes empty the
// box is snapped to the nearest in-range point with side 1 / max(H, W).
Box clamp_box(const Box& b, GridShape grid = GridShape{8, 8});

// Cells whose centers lie inside the closed (clamped) box; falls back to the
// single cell containing the box center when that set is empty.
CellSet rasterize_box(const Box& b, GridShape grid);
// Same as rasterize_box but reports whether the fallback rule was used.
CellSet rasterize_box(const Box& b, GridShape grid, bool& used_fallback);

// One mask row per box; row i is rasterize_box(boxes[i]).
AttentionMask support_mask(std::span<const Box> boxes, GridShape grid);

// Boxes from an [n, 4] tensor of (cx, cy, w, h).
std::vector<Box> boxes_from_tensor(const Tensor& t);
Tensor boxes_to_tensor(std::span<const Box> boxes);

// Differentiable per-row 1 - GIoU between predicted [k, 4] boxes and constant
// targets; returns a [k] tensor.
Tensor giou_loss_rows(const Tensor& pred, std::span<const Box> targets);

}  // namespace cdetr
