#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cascade_detr/geometry.hpp"
#include "cascade_detr/model.hpp"

namespace cdetr {

// How the final confidence combines P(obj) with the predicted IoU.
//   product: P * IoU (expected IoU, the default)
//   sum:     (P + IoU) / 2
//   single:  P from a class head that was also regressed toward IoU
//   none:    P alone
enum class FusionMode { product, sum, single, none };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& text);

struct ScoredDetection {
    Box box;
    std::size_t class_id = 0;
    double score = 0.0;
    std::size_t query = 0;
    double p_obj = 0.0;
    double iou_pred = 0.0;
};

struct Objectness {
    std::size_t class_id = 0;
    double probability = 0.0;
};

// Argmax over the foreground classes of the (C+1)-way softmax.
std::vector<Objectness> objectness(const Tensor& class_logits);

double recalibrate(double p_obj, double iou_pred, FusionMode mode);

// Final-layer detections sorted by score (descending, ties by query index),
// truncated to top_k when top_k > 0. No suppression step.
std::vector<ScoredDetection> rank_detections(const LayerOutput& final_layer, FusionMode mode, std::size_t top_k = 0);

}  // namespace cdetr
