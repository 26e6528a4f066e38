#include "cascade_detr/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cdetr {

void GroundTruth::validate(std::size_t num_classes) const {
    if (boxes.size() != labels.size()) {
        throw PreconditionError("ground truth has " + std::to_string(boxes.size()) + " boxes but " +
                                std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        validate_box(boxes[i]);
        if (labels[i] >= num_classes) {
            throw PreconditionError("ground truth label " + std::to_string(labels[i]) + " outside [0, " +
                                    std::to_string(num_classes) + ")");
        }
    }
}

std::string to_string(IouSupervision v) { return v == IouSupervision::all ? "all" : "positive_only"; }

std::string to_string(IouLossKind v) {
    switch (v) {
        case IouLossKind::l1: return "l1";
        case IouLossKind::huber: return "huber";
        case IouLossKind::l2: break;
    }
    return "l2";
}

IouSupervision parse_iou_supervision(const std::string& text) {
    if (text == "positive_only") return IouSupervision::positive_only;
    if (text == "all") return IouSupervision::all;
    throw Error(ErrorCode::config, "unknown iou_supervision '" + text + "' (positive_only, all)");
}

IouLossKind parse_iou_loss_kind(const std::string& text) {
    if (text == "l2") return IouLossKind::l2;
    if (text == "l1") return IouLossKind::l1;
    if (text == "huber") return IouLossKind::huber;
    throw Error(ErrorCode::config, "unknown iou_loss '" + text + "' (l2, l1, huber)");
}

void LossConfig::validate() const {
    for (double w : {weight_class, weight_l1, weight_giou, weight_iou_recal, no_object_weight}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw Error(ErrorCode::config, "loss weights must be finite and >= 0");
    }
    if (!(huber_delta > 0.0)) throw Error(ErrorCode::config, "huber_delta must be > 0");
}

std::vector<long> MatchResult::assignment(std::size_t num_queries) const {
    std::vector<long> out(num_queries, -1);
    for (const MatchPair& m : pairs) out.at(m.query) = static_cast<long>(m.gt);
    return out;
}

namespace {

std::vector<std::vector<double>> class_probabilities(const Tensor& logits) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<std::vector<double>> probs(n, std::vector<double>(k));
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += (probs[i][j] = std::exp(logits.at(i, j) - mx));
        for (double& p : probs[i]) p /= z;
    }
    return probs;
}

double l1_distance(const Box& a, const Box& b) {
    return std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) + std::fabs(a.h - b.h);
}

// Predicted boxes may collapse under sigmoid saturation; keep them measurable.
Box measurable(Box b) {
    b.w = std::max(b.w, 1e-12);
    b.h = std::max(b.h, 1e-12);
    return b;
}

}  // namespace

CostMatrix match_cost(const LayerOutput& pred, const GroundTruth& gt, const LossConfig& cfg) {
    const std::size_t n = pred.boxes.dim(0);
    CostMatrix cost(n, gt.size());
    if (gt.empty()) return cost;
    const auto probs = class_probabilities(pred.class_logits);
    const std::vector<Box> boxes = boxes_from_tensor(pred.boxes);
    for (std::size_t q = 0; q < n; ++q) {
        const Box b = measurable(boxes[q]);
        for (std::size_t g = 0; g < gt.size(); ++g) {
            cost(q, g) = cfg.weight_class * -probs[q][gt.labels[g]] + cfg.weight_l1 * l1_distance(b, gt.boxes[g]) +
                         cfg.weight_giou * (1.0 - giou(b, gt.boxes[g]));
        }
    }
    return cost;
}

std::vector<MatchPair> hungarian(const CostMatrix& cost) {
    for (double v : cost.values) {
        if (!std::isfinite(v)) throw Error(ErrorCode::non_finite, "hungarian: cost matrix has non-finite entries");
    }
    if (cost.rows == 0 || cost.cols == 0) return {};

    // Potentials form over a workers x jobs matrix with workers <= jobs. The
    // objects (columns) are the workers so ties resolve to the lowest query.
    const bool transposed = cost.rows < cost.cols;
    const std::size_t n = transposed ? cost.rows : cost.cols;  // workers
    const std::size_t m = transposed ? cost.cols : cost.rows;  // jobs
    auto a = [&](std::size_t worker, std::size_t job) {
        return transposed ? cost(worker, job) : cost(job, worker);
    };

    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<MatchPair> pairs;
    pairs.reserve(n);
    for (std::size_t j = 1; j <= m; ++j) {
        if (p[j] == 0) continue;
        if (transposed) {
            pairs.push_back({p[j] - 1, j - 1});
        } else {
            pairs.push_back({j - 1, p[j] - 1});
        }
    }
    std::sort(pairs.begin(), pairs.end(), [](const MatchPair& x, const MatchPair& y) { return x.query < y.query; });
    return pairs;
}

double assignment_cost(const CostMatrix& cost, const std::vector<MatchPair>& pairs) {
    double total = 0.0;
    for (const MatchPair& m : pairs) total += cost(m.query, m.gt);
    return total;
}

MatchResult match_layer(const LayerOutput& pred, const GroundTruth& gt, const LossConfig& cfg) {
    MatchResult result;
    if (gt.empty()) return result;
    result.pairs = hungarian(match_cost(pred, gt, cfg));
    const std::vector<Box> boxes = boxes_from_tensor(pred.boxes);
    result.iou_targets.reserve(result.pairs.size());
    for (const MatchPair& m : result.pairs) result.iou_targets.push_back(iou(measurable(boxes[m.query]), gt.boxes[m.gt]));
    return result;
}

Tensor iou_loss_variant(const Tensor& residuals, IouLossKind kind, double huber_delta) {
    switch (kind) {
        case IouLossKind::l1: return mean(abs(residuals));
        case IouLossKind::huber: return mean(huber(residuals, huber_delta));
        case IouLossKind::l2: break;
    }
    return mean(square(residuals));
}

namespace {

struct LayerTerms {
    Tensor total;
    LayerLoss values;
};

LayerTerms layer_loss(const LayerOutput& out, const GroundTruth& gt, const MatchResult& match, const LossConfig& cfg) {
    const std::size_t n = out.class_logits.dim(0);
    const std::size_t no_object = out.class_logits.dim(1) - 1;

    // Class term: weighted cross-entropy over all queries.
    std::vector<std::size_t> rows(n), targets(n, no_object);
    std::iota(rows.begin(), rows.end(), 0);
    std::vector<double> weights(n, cfg.no_object_weight);
    for (const MatchPair& m : match.pairs) {
        targets[m.query] = gt.labels[m.gt];
        weights[m.query] = 1.0;
    }
    const double weight_total = std::accumulate(weights.begin(), weights.end(), 0.0);
    const Tensor logp = pick(log_softmax(out.class_logits), rows, targets);
    Tensor cls = Tensor::scalar(0.0);
    if (weight_total > 0.0) {
        for (double& w : weights) w /= -weight_total;
        cls = weighted_sum(logp, weights);
    }

    LayerTerms terms;
    Tensor total = scale(cls, cfg.weight_class);
    terms.values.cls = cls.item();

    if (!match.pairs.empty()) {
        std::vector<std::size_t> matched;
        std::vector<Box> matched_gt;
        std::vector<double> iou_targets;
        for (std::size_t i = 0; i < match.pairs.size(); ++i) {
            matched.push_back(match.pairs[i].query);
            matched_gt.push_back(gt.boxes[match.pairs[i].gt]);
        }
        const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, gt.size()));
        const Tensor pred_boxes = gather_rows(out.boxes, matched);
        const Tensor box_l1 = scale(sum(abs(sub(pred_boxes, boxes_to_tensor(matched_gt)))), norm);
        const Tensor box_giou = scale(sum(giou_loss_rows(pred_boxes, matched_gt)), norm);
        total = add(total, add(scale(box_l1, cfg.weight_l1), scale(box_giou, cfg.weight_giou)));
        terms.values.box_l1 = box_l1.item();
        terms.values.box_giou = box_giou.item();

        Tensor predicted_iou;
        std::vector<double> target_values;
        if (cfg.target_head == IouTargetHead::class_probability) {
            std::vector<std::size_t> labels;
            for (const MatchPair& m : match.pairs) labels.push_back(gt.labels[m.gt]);
            const Tensor probs = softmax(out.class_logits);
            predicted_iou = reshape(pick(probs, matched, labels), {matched.size(), 1});
            target_values = match.iou_targets;
        } else if (cfg.supervision == IouSupervision::all) {
            predicted_iou = sigmoid(out.iou_logits);
            const std::vector<Box> boxes = boxes_from_tensor(out.boxes);
            target_values.assign(n, 0.0);
            for (std::size_t q = 0; q < n; ++q) {
                for (const Box& g : gt.boxes) target_values[q] = std::max(target_values[q], iou(measurable(boxes[q]), g));
            }
            for (std::size_t i = 0; i < match.pairs.size(); ++i) target_values[match.pairs[i].query] = match.iou_targets[i];
        } else {
            predicted_iou = sigmoid(gather_rows(out.iou_logits, matched));
            target_values = match.iou_targets;
        }
        const Tensor target = Tensor::from({target_values.size(), 1}, target_values);
        const Tensor iou_term = iou_loss_variant(sub(predicted_iou, target), cfg.iou_loss, cfg.huber_delta);
        total = add(total, scale(iou_term, cfg.weight_iou_recal));
        terms.values.iou_recal = iou_term.item();
    }

    terms.values.total = cfg.weight_class * terms.values.cls + cfg.weight_l1 * terms.values.box_l1 +
                         cfg.weight_giou * terms.values.box_giou + cfg.weight_iou_recal * terms.values.iou_recal;
    terms.total = total;
    return terms;
}

}  // namespace

LossBreakdown detection_loss(const std::vector<LayerOutput>& outputs, const GroundTruth& gt, const LossConfig& cfg) {
    if (outputs.empty()) throw PreconditionError("detection_loss: no layer outputs");
    cfg.validate();
    gt.validate(outputs.front().class_logits.dim(1) - 1);
    LossBreakdown result;
    Tensor total;
    for (const LayerOutput& out : outputs) {
        MatchResult match = match_layer(out, gt, cfg);
        LayerTerms terms = layer_loss(out, gt, match, cfg);
        total = total.defined() ? add(total, terms.total) : terms.total;
        result.summed.total += terms.values.total;
        result.summed.cls += terms.values.cls;
        result.summed.box_l1 += terms.values.box_l1;
        result.summed.box_giou += terms.values.box_giou;
        result.summed.iou_recal += terms.values.iou_recal;
        result.per_layer.push_back(terms.values);
        result.matches.push_back(std::move(match));
    }
    result.total = total;
    return result;
}

}  // namespace cdetr
