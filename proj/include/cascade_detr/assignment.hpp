#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cascade_detr/geometry.hpp"
#include "cascade_detr/model.hpp"
#include "cascade_detr/tensor.hpp"

namespace cdetr {

struct GroundTruth {
    std::vector<Box> boxes;
    std::vector<std::size_t> labels;

    std::size_t size() const { return boxes.size(); }
    bool empty() const { return boxes.empty(); }
    // Equal lengths, valid boxes, labels in [0, num_classes).
    void validate(std::size_t num_classes) const;
};

enum class IouSupervision { positive_only, all };
enum class IouLossKind { l2, l1, huber };
// Which output carries the IoU regression: the dedicated IoU head, or the
// class head's probability for the matched label (single-score variant).
enum class IouTargetHead { iou_head, class_probability };

std::string to_string(IouSupervision v);
std::string to_string(IouLossKind v);
IouSupervision parse_iou_supervision(const std::string& text);
IouLossKind parse_iou_loss_kind(const std::string& text);

struct LossConfig {
    double weight_class = 1.0;      // lambda_1
    double weight_l1 = 5.0;
    double weight_giou = 2.0;
    double weight_iou_recal = 2.0;  // lambda_2
    double no_object_weight = 0.1;
    IouLossKind iou_loss = IouLossKind::l2;
    double huber_delta = 1.0;
    IouSupervision supervision = IouSupervision::positive_only;
    IouTargetHead target_head = IouTargetHead::iou_head;

    void validate() const;
};

// Dense row-major matrix of matching costs, rows = queries, cols = objects.
struct CostMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    CostMatrix() = default;
    CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct MatchPair {
    std::size_t query = 0;
    std::size_t gt = 0;

    bool operator==(const MatchPair&) const = default;
};

struct MatchResult {
    std::vector<MatchPair> pairs;      // sorted by query index
    std::vector<double> iou_targets;   // per pair, IoU(pred, gt) at match time

    // Query index -> gt index, or -1 for no-object.
    std::vector<long> assignment(std::size_t num_queries) const;
};

CostMatrix match_cost(const LayerOutput& pred, const GroundTruth& gt, const LossConfig& cfg);

// Minimum-cost one-to-one assignment (Kuhn-Munkres with potentials). Every
// column is matched when rows >= cols; every row when rows < cols. Equal-cost
// alternatives resolve toward lower row indices.
std::vector<MatchPair> hungarian(const CostMatrix& cost);
double assignment_cost(const CostMatrix& cost, const std::vector<MatchPair>& pairs);

// Hungarian matching on match_cost plus recorded IoU targets.
MatchResult match_layer(const LayerOutput& pred, const GroundTruth& gt, const LossConfig& cfg);

struct LayerLoss {
    double total = 0.0;
    double cls = 0.0;
    double box_l1 = 0.0;
    double box_giou = 0.0;
    double iou_recal = 0.0;
};

struct LossBreakdown {
    std::vector<LayerLoss> per_layer;
    LayerLoss summed;
    Tensor total;  // differentiable sum over layers
    std::vector<MatchResult> matches;
};

// Per-element penalty averaged over all residual entries.
Tensor iou_loss_variant(const Tensor& residuals, IouLossKind kind, double huber_delta = 1.0);

// Set-matching loss applied independently to every decoder layer and summed.
LossBreakdown detection_loss(const std::vector<LayerOutput>& outputs, const GroundTruth& gt, const LossConfig& cfg);

}  // namespace cdetr
