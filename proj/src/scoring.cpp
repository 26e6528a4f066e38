#include "cascade_detr/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cdetr {

std::string to_string(FusionMode mode) {
    switch (mode) {
        case FusionMode::sum: return "sum";
        case FusionMode::single: return "single";
        case FusionMode::none: return "none";
        case FusionMode::product: break;
    }
    return "product";
}

FusionMode parse_fusion_mode(const std::string& text) {
    if (text == "product") return FusionMode::product;
    if (text == "sum") return FusionMode::sum;
    if (text == "single") return FusionMode::single;
    if (text == "none") return FusionMode::none;
    throw Error(ErrorCode::config, "unknown fusion mode '" + text + "' (product, sum, single, none)");
}

std::vector<Objectness> objectness(const Tensor& class_logits) {
    if (class_logits.rank() != 2 || class_logits.dim(1) < 2) {
        throw ShapeError("objectness: expected [n, C + 1] logits, got " + shape_str(class_logits.shape()));
    }
    const std::size_t n = class_logits.dim(0), k = class_logits.dim(1);
    std::vector<Objectness> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, class_logits.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(class_logits.at(i, j) - mx);
        std::size_t best = 0;
        for (std::size_t j = 1; j + 1 < k; ++j) {
            if (class_logits.at(i, j) > class_logits.at(i, best)) best = j;
        }
        out[i] = Objectness{best, std::exp(class_logits.at(i, best) - mx) / z};
    }
    return out;
}

double recalibrate(double p_obj, double iou_pred, FusionMode mode) {
    if (!(p_obj >= 0.0 && p_obj <= 1.0) || !(iou_pred >= 0.0 && iou_pred <= 1.0)) {
        throw PreconditionError("recalibrate: inputs must lie in [0, 1]");
    }
    switch (mode) {
        case FusionMode::product: return p_obj * iou_pred;
        case FusionMode::sum: return 0.5 * (p_obj + iou_pred);
        case FusionMode::single:
        case FusionMode::none: break;
    }
    return p_obj;
}

std::vector<ScoredDetection> rank_detections(const LayerOutput& final_layer, FusionMode mode, std::size_t top_k) {
    const std::size_t n = final_layer.boxes.dim(0);
    const std::vector<Objectness> obj = objectness(final_layer.class_logits);
    const std::vector<Box> boxes = boxes_from_tensor(final_layer.boxes);
    std::vector<ScoredDetection> dets(n);
    for (std::size_t q = 0; q < n; ++q) {
        const double iou_pred = 1.0 / (1.0 + std::exp(-final_layer.iou_logits.at(q)));
        dets[q] = ScoredDetection{boxes[q], obj[q].class_id, recalibrate(obj[q].probability, iou_pred, mode), q,
                                  obj[q].probability, iou_pred};
    }
    std::stable_sort(dets.begin(), dets.end(),
                     [](const ScoredDetection& a, const ScoredDetection& b) { return a.score > b.score; });
    if (top_k > 0 && dets.size() > top_k) dets.resize(top_k);
    return dets;
}

}  // namespace cdetr
