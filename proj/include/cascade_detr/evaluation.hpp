#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cascade_detr/assignment.hpp"
#include "cascade_detr/scoring.hpp"

namespace cdetr {

struct EvalImage {
    std::string dataset;
    std::string image_id;
    std::size_t width = 0;   // pixel extent, used for absolute-coordinate export
    std::size_t height = 0;
    std::vector<ScoredDetection> detections;
    GroundTruth ground_truth;
};

using EvalRecord = std::vector<EvalImage>;

constexpr std::size_t kMaxDetections = 100;

// The ten COCO thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_iou_thresholds();

// 101-point interpolated AP for one class. nullopt when the class has no
// ground truth anywhere in the record (excluded from means).
std::optional<double> average_precision(const EvalRecord& records, std::size_t class_id, double iou_threshold,
                                        std::size_t max_detections = kMaxDetections);

// Fraction of ground truth recovered at the threshold; nullopt as above.
std::optional<double> recall_at(const EvalRecord& records, std::size_t class_id, double iou_threshold,
                                std::size_t max_detections = kMaxDetections);

struct CocoSummary {
    double ap = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ar100 = 0.0;
    std::size_t classes = 0;  // classes with ground truth
};

CocoSummary coco_summary(const EvalRecord& records);

// Unweighted mean of per-dataset AP.
double uniap(const std::map<std::string, double>& per_dataset);

struct CurvePoint {
    std::size_t n = 0;
    double mean_iou = 0.0;
};

struct LabeledDetection {
    double score = 0.0;
    double iou = 0.0;  // best IoU against same-class ground truth in its image
};

struct SparsificationCurves {
    std::vector<CurvePoint> scoring;
    std::vector<CurvePoint> oracle;
};

// Each detection's IoU label for the sparsification plot.
std::vector<LabeledDetection> label_detections(const EvalRecord& records);

SparsificationCurves sparsification(const std::vector<LabeledDetection>& detections);

// Mean of the curve's values (area under the curve with unit spacing / n).
double curve_auc(const std::vector<CurvePoint>& curve);

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::filesystem::path& path);

}  // namespace cdetr
