#include "cascade_detr/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace cdetr {

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t(10);
    const double step = (0.95 - 0.5) / 9.0;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.5 + static_cast<double>(i) * step;
    return t;
}

namespace {

struct ClassCurve {
    std::size_t positives = 0;
    std::vector<double> scores;  // global score order
    std::vector<char> true_positive;
};

// Greedy per-image matching in score order: each detection takes the unmatched
// ground truth with the highest IoU at or above the threshold.
ClassCurve match_class(const EvalRecord& records, std::size_t class_id, double threshold, std::size_t max_detections) {
    const double t = std::min(threshold, 1.0 - 1e-10);
    ClassCurve curve;
    std::vector<std::pair<double, char>> all;
    for (const EvalImage& img : records) {
        std::vector<const Box*> gts;
        for (std::size_t g = 0; g < img.ground_truth.size(); ++g) {
            if (img.ground_truth.labels[g] == class_id) gts.push_back(&img.ground_truth.boxes[g]);
        }
        curve.positives += gts.size();
        std::vector<const ScoredDetection*> dets;
        for (const ScoredDetection& d : img.detections) {
            if (d.class_id == class_id) dets.push_back(&d);
        }
        std::stable_sort(dets.begin(), dets.end(),
                         [](const ScoredDetection* a, const ScoredDetection* b) { return a->score > b->score; });
        if (dets.size() > max_detections) dets.resize(max_detections);
        std::vector<char> taken(gts.size(), 0);
        for (const ScoredDetection* d : dets) {
            double best = t;
            long match = -1;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (taken[g]) continue;
                const double v = iou(d->box, *gts[g]);
                if (v < best) continue;
                best = v;
                match = static_cast<long>(g);
            }
            if (match >= 0) taken[static_cast<std::size_t>(match)] = 1;
            all.emplace_back(d->score, match >= 0 ? 1 : 0);
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (const auto& [s, tp] : all) {
        curve.scores.push_back(s);
        curve.true_positive.push_back(tp);
    }
    return curve;
}

std::set<std::size_t> classes_with_ground_truth(const EvalRecord& records) {
    std::set<std::size_t> out;
    for (const EvalImage& img : records) out.insert(img.ground_truth.labels.begin(), img.ground_truth.labels.end());
    return out;
}

double interpolated_ap(const ClassCurve& c) {
    const std::size_t n = c.true_positive.size();
    std::vector<double> recall(n), precision(n);
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        (c.true_positive[i] ? tp : fp) += 1.0;
        recall[i] = tp / static_cast<double>(c.positives);
        precision[i] = tp / (tp + fp);
    }
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double total = 0.0;
    for (std::size_t k = 0; k <= 100; ++k) {
        const double r = static_cast<double>(k) * (1.0 / 100.0);
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return total / 101.0;
}

}  // namespace

std::optional<double> average_precision(const EvalRecord& records, std::size_t class_id, double iou_threshold,
                                        std::size_t max_detections) {
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw PreconditionError("average_precision: threshold outside (0, 1]");
    const ClassCurve c = match_class(records, class_id, iou_threshold, max_detections);
    if (c.positives == 0) return std::nullopt;
    return interpolated_ap(c);
}

std::optional<double> recall_at(const EvalRecord& records, std::size_t class_id, double iou_threshold,
                                std::size_t max_detections) {
    const ClassCurve c = match_class(records, class_id, iou_threshold, max_detections);
    if (c.positives == 0) return std::nullopt;
    const double tp = std::accumulate(c.true_positive.begin(), c.true_positive.end(), 0.0);
    return tp / static_cast<double>(c.positives);
}

CocoSummary coco_summary(const EvalRecord& records) {
    if (records.empty()) throw PreconditionError("coco_summary: no images to evaluate");
    const std::set<std::size_t> classes = classes_with_ground_truth(records);
    CocoSummary s;
    s.classes = classes.size();
    if (classes.empty()) return s;
    const std::vector<double> thresholds = coco_iou_thresholds();
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
        double ap_sum = 0.0, ar_sum = 0.0;
        for (std::size_t cls : classes) {
            const ClassCurve c = match_class(records, cls, thresholds[ti], kMaxDetections);
            ap_sum += interpolated_ap(c);
            ar_sum += std::accumulate(c.true_positive.begin(), c.true_positive.end(), 0.0) / static_cast<double>(c.positives);
        }
        const double ap = ap_sum / static_cast<double>(classes.size());
        s.ap += ap;
        s.ar100 += ar_sum / static_cast<double>(classes.size());
        if (ti == 0) s.ap50 = ap;
        if (ti == 5) s.ap75 = ap;
    }
    s.ap /= static_cast<double>(thresholds.size());
    s.ar100 /= static_cast<double>(thresholds.size());
    return s;
}

double uniap(const std::map<std::string, double>& per_dataset) {
    if (per_dataset.empty()) throw PreconditionError("uniap: no datasets");
    double total = 0.0;
    for (const auto& [name, ap] : per_dataset) total += ap;
    return total / static_cast<double>(per_dataset.size());
}

std::vector<LabeledDetection> label_detections(const EvalRecord& records) {
    std::vector<LabeledDetection> out;
    for (const EvalImage& img : records) {
        for (const ScoredDetection& d : img.detections) {
            double best = 0.0;
            for (std::size_t g = 0; g < img.ground_truth.size(); ++g) {
                if (img.ground_truth.labels[g] == d.class_id) best = std::max(best, iou(d.box, img.ground_truth.boxes[g]));
            }
            out.push_back(LabeledDetection{d.score, best});
        }
    }
    return out;
}

namespace {

std::vector<CurvePoint> cumulative_mean(const std::vector<LabeledDetection>& dets, const std::vector<std::size_t>& order) {
    std::vector<CurvePoint> curve;
    curve.reserve(order.size());
    double total = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        total += dets[order[i]].iou;
        curve.push_back(CurvePoint{i + 1, total / static_cast<double>(i + 1)});
    }
    return curve;
}

}  // namespace

SparsificationCurves sparsification(const std::vector<LabeledDetection>& detections) {
    std::vector<std::size_t> by_score(detections.size());
    std::iota(by_score.begin(), by_score.end(), 0);
    std::vector<std::size_t> by_iou = by_score;
    std::stable_sort(by_score.begin(), by_score.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
    std::stable_sort(by_iou.begin(), by_iou.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].iou > detections[b].iou; });
    return SparsificationCurves{cumulative_mean(detections, by_score), cumulative_mean(detections, by_iou)};
}

double curve_auc(const std::vector<CurvePoint>& curve) {
    if (curve.empty()) return 0.0;
    double total = 0.0;
    for (const CurvePoint& p : curve) total += p.mean_iou;
    return total / static_cast<double>(curve.size());
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << "rank,mean_iou\n";
    out.precision(17);
    for (const CurvePoint& p : curve) out << p.n << ',' << p.mean_iou << '\n';
    if (!out) throw Error(ErrorCode::io, "failed writing " + path.string());
}

}  // namespace cdetr
