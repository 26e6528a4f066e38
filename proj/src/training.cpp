#include "cascade_detr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cascade_detr/checkpoint.hpp"
#include "cascade_detr/optimizer.hpp"

namespace cdetr {

using ordered_json = nlohmann::ordered_json;

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::io, "write failed: " + path.string());
}

double percent(double fraction) { return 100.0 * fraction; }

void put_summary(ordered_json& j, const std::string& prefix, const CocoSummary& s) {
    j[prefix + "ap"] = percent(s.ap);
    j[prefix + "ap50"] = percent(s.ap50);
    j[prefix + "ap75"] = percent(s.ap75);
    j[prefix + "ar100"] = percent(s.ar100);
}

ModelConfig seeded_model(const TrainConfig& cfg) {
    ModelConfig m = cfg.model;
    m.seed = cfg.seed;
    return m;
}

}  // namespace

// ---- data ------------------------------------------------------------------

Dataset merge_datasets(const std::vector<Dataset>& parts, const std::string& id) {
    if (parts.empty()) throw PreconditionError("merge_datasets: nothing to merge");
    Dataset out;
    out.id = id;
    out.class_names = parts.front().class_names;
    out.category_ids = parts.front().category_ids;
    for (const Dataset& d : parts) {
        if (d.class_names != out.class_names) throw PreconditionError("merge_datasets: class lists differ for " + d.id);
        for (const DatasetImage& img : d.images) {
            DatasetImage copy = img;
            copy.id = d.id + "/" + img.id;
            out.images.push_back(std::move(copy));
        }
    }
    return out;
}

DataBundle load_data(const TrainConfig& cfg) {
    DataBundle bundle;
    if (cfg.data.source == "synthetic") {
        if (cfg.model.grid.height != cfg.model.grid.width)
            throw Error(ErrorCode::config, "synthetic scenes are square; grid_height must equal grid_width");
        const std::size_t size = cfg.model.image_height();
        bundle.train = merge_datasets(synthetic_benchmark(cfg.data.data_seed, cfg.data.train_per_style, size, "train"),
                                      "synth-train");
        bundle.held_out = synthetic_benchmark(cfg.data.data_seed, cfg.data.eval_per_style, size, "eval");
    } else {
        if (cfg.data.train_annotations.empty() || cfg.data.eval_annotations.empty())
            throw Error(ErrorCode::config, "coco source needs data.train_annotations and data.eval_annotations");
        bundle.train = load_coco(cfg.data.train_annotations, cfg.data.train_images);
        bundle.held_out.push_back(load_coco(cfg.data.eval_annotations, cfg.data.eval_images));
    }
    return bundle;
}

// ---- inference -------------------------------------------------------------

EvalRecord predict(const CascadeDetr& model, const Dataset& dataset, FusionMode fusion, std::size_t top_k) {
    NoGradGuard no_grad;
    EvalRecord record;
    record.reserve(dataset.images.size());
    for (const DatasetImage& img : dataset.images) {
        const ForwardResult res = model.forward(img.image);
        EvalImage e;
        e.dataset = dataset.id;
        e.image_id = img.id;
        e.width = img.image.width;
        e.height = img.image.height;
        e.detections = rank_detections(res.layers.back(), fusion, top_k);
        e.ground_truth = img.ground_truth;
        record.push_back(std::move(e));
    }
    return record;
}

EvalReport evaluate(const CascadeDetr& model, const std::vector<Dataset>& datasets, FusionMode fusion,
                    std::size_t top_k) {
    if (datasets.empty()) throw PreconditionError("evaluate: no datasets");
    EvalReport report;
    report.fusion = fusion;
    std::map<std::string, double> ap_by_dataset;
    EvalRecord pooled;
    for (const Dataset& d : datasets) {
        EvalRecord rec = predict(model, d, fusion, top_k);
        const CocoSummary s = coco_summary(rec);
        report.per_dataset.push_back({d.id, s});
        ap_by_dataset[d.id] = s.ap;
        pooled.insert(pooled.end(), std::make_move_iterator(rec.begin()), std::make_move_iterator(rec.end()));
    }
    report.uniap = uniap(ap_by_dataset);
    report.pooled = coco_summary(pooled);
    return report;
}

std::string report_json(const EvalReport& report, const std::map<std::string, std::string>& extra) {
    ordered_json j;
    for (const auto& [k, v] : extra) j[k] = v;
    j["fusion"] = to_string(report.fusion);
    for (const DatasetMetrics& m : report.per_dataset) put_summary(j, m.dataset + ".", m.summary);
    put_summary(j, "pooled.", report.pooled);
    j["uniap"] = percent(report.uniap);
    return j.dump(2) + "\n";
}

// ---- training --------------------------------------------------------------

std::int64_t log_timestamp() {
    if (const char* fixed = std::getenv("SOURCE_DATE_EPOCH"); fixed && *fixed) {
        try {
            return std::stoll(fixed);
        } catch (const std::exception&) {
            throw Error(ErrorCode::config, std::string("SOURCE_DATE_EPOCH is not an integer: ") + fixed);
        }
    }
    return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

RunPaths run_paths(const fs::path& dir) {
    return RunPaths{dir, dir / "model.ckpt", dir / "metrics.jsonl", dir / "report.json", dir / "config.ini"};
}

namespace {

struct StepStats {
    LayerLoss terms;
    std::size_t images = 0;
};

// Forward and backward over one batch; gradients accumulate scaled by 1/B.
StepStats accumulate_batch(const CascadeDetr& model, const Dataset& data, const std::vector<std::size_t>& batch,
                           const LossConfig& loss_cfg, std::size_t epoch, std::size_t step, const fs::path& snapshot_dir) {
    StepStats stats;
    const double weight = 1.0 / static_cast<double>(batch.size());
    for (std::size_t idx : batch) {
        const DatasetImage& img = data.images[idx];
        ForwardOptions opts;
        opts.ground_truth = &img.ground_truth;
        const ForwardResult res = model.forward(img.image, opts);
        // Non-finite predictions surface either as a matching failure or as
        // a non-finite loss; both abort the run the same way.
        LossBreakdown loss;
        std::string reason;
        try {
            loss = detection_loss(res.layers, img.ground_truth, loss_cfg);
            if (!std::isfinite(loss.summed.total)) reason = "loss became non-finite";
        } catch (const Error& e) {
            if (e.code() != ErrorCode::non_finite) throw;
            reason = std::string("non-finite predictions (") + e.what() + ")";
        }
        if (!reason.empty()) {
            if (!snapshot_dir.empty()) {
                save_checkpoint(model, snapshot_dir / "divergence.ckpt");
                auto term = [](double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json("non-finite"); };
                ordered_json diag;
                diag["reason"] = reason;
                diag["epoch"] = epoch + 1;
                diag["step"] = step;
                diag["image"] = img.id;
                diag["loss_class"] = term(loss.summed.cls);
                diag["loss_l1"] = term(loss.summed.box_l1);
                diag["loss_giou"] = term(loss.summed.box_giou);
                diag["loss_iou"] = term(loss.summed.iou_recal);
                write_text(snapshot_dir / "divergence.json", diag.dump(2) + "\n");
            }
            throw Error(ErrorCode::divergence, reason + " at epoch " + std::to_string(epoch + 1) + ", step " +
                                                   std::to_string(step) + " (image " + img.id + ")");
        }
        scale(loss.total, weight).backward();
        stats.terms.total += loss.summed.total;
        stats.terms.cls += loss.summed.cls;
        stats.terms.box_l1 += loss.summed.box_l1;
        stats.terms.box_giou += loss.summed.box_giou;
        stats.terms.iou_recal += loss.summed.iou_recal;
        ++stats.images;
    }
    return stats;
}

void check_compatible(const TrainConfig& cfg, const Dataset& data) {
    if (data.images.empty()) throw PreconditionError("training dataset " + data.id + " is empty");
    if (data.num_classes() != cfg.model.num_classes)
        throw Error(ErrorCode::config, "dataset " + data.id + " has " + std::to_string(data.num_classes()) +
                                           " classes but model.num_classes = " + std::to_string(cfg.model.num_classes));
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DataBundle& data, const fs::path& out_dir, const TrainOptions& options) {
    cfg.validate();
    check_compatible(cfg, data.train);
    const RunPaths paths = run_paths(out_dir);
    fs::create_directories(out_dir);
    write_config(cfg, paths.config);
    std::ofstream log(paths.log, std::ios::binary | std::ios::trunc);
    if (!log) throw Error(ErrorCode::io, "cannot write " + paths.log.string());

    CascadeDetr model(seeded_model(cfg));
    AdamW optim(model.parameters(), cfg.optim);
    std::mt19937_64 rng(cfg.seed ^ 0x5EEDC0DEULL);
    std::vector<std::size_t> order(data.train.images.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<double> epoch_losses;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        optim.set_lr_scale(epoch >= cfg.decay_epoch ? cfg.optim.lr_decay : 1.0);
        std::shuffle(order.begin(), order.end(), rng);
        StepStats totals;
        double norm_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
            const StepStats s = accumulate_batch(model, data.train, batch, cfg.loss, epoch, step, out_dir);
            const double norm = optim.step();
            ++step;
            ++batches;
            norm_sum += norm;
            totals.terms.total += s.terms.total;
            totals.terms.cls += s.terms.cls;
            totals.terms.box_l1 += s.terms.box_l1;
            totals.terms.box_giou += s.terms.box_giou;
            totals.terms.iou_recal += s.terms.iou_recal;
            totals.images += s.images;
            if (options.log_iterations) {
                ordered_json line;
                line["time"] = log_timestamp();
                line["seed"] = cfg.seed;
                line["epoch"] = epoch + 1;
                line["step"] = step;
                line["loss"] = s.terms.total / static_cast<double>(s.images);
                line["grad_norm"] = norm;
                log << line.dump() << '\n';
            }
        }
        const double n = static_cast<double>(totals.images);
        epoch_losses.push_back(totals.terms.total / n);

        ordered_json line;
        line["time"] = log_timestamp();
        line["seed"] = cfg.seed;
        line["epoch"] = epoch + 1;
        line["steps"] = step;
        line["lr"] = cfg.optim.lr * optim.lr_scale();
        line["lr_encoder"] = cfg.optim.lr_encoder * optim.lr_scale();
        line["loss"] = totals.terms.total / n;
        line["loss_class"] = totals.terms.cls / n;
        line["loss_l1"] = totals.terms.box_l1 / n;
        line["loss_giou"] = totals.terms.box_giou / n;
        line["loss_iou"] = totals.terms.iou_recal / n;
        line["grad_norm"] = norm_sum / static_cast<double>(batches);
        const bool last = epoch + 1 == cfg.epochs;
        if (!data.held_out.empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0))) {
            const EvalReport r = evaluate(model, data.held_out, cfg.fusion, cfg.top_k);
            put_summary(line, "", r.pooled);
            line["uniap"] = percent(r.uniap);
        }
        log << line.dump() << '\n';
        log.flush();
        if (options.progress) options.progress(line.dump());
    }

    std::map<std::string, std::string> meta{{"seed", std::to_string(cfg.seed)},
                                            {"epochs", std::to_string(cfg.epochs)},
                                            {"steps", std::to_string(step)},
                                            {"train_images", std::to_string(data.train.images.size())}};
    save_checkpoint(model, paths.checkpoint, meta);

    TrainResult result{paths, std::move(model), {}, std::move(epoch_losses)};
    if (!data.held_out.empty()) {
        result.final_report = evaluate(result.model, data.held_out, cfg.fusion, cfg.top_k);
        write_text(paths.report, report_json(result.final_report, {{"checkpoint", paths.checkpoint.filename().string()}}));
    }
    return result;
}

std::vector<double> fixed_batch_losses(const TrainConfig& cfg, const Dataset& data, std::size_t steps) {
    cfg.validate();
    check_compatible(cfg, data);
    CascadeDetr model(seeded_model(cfg));
    AdamW optim(model.parameters(), cfg.optim);
    std::vector<std::size_t> batch;
    for (std::size_t i = 0; i < std::min(cfg.batch_size, data.images.size()); ++i) batch.push_back(i);
    std::vector<double> losses;
    for (std::size_t s = 0; s < steps; ++s) {
        const StepStats stats = accumulate_batch(model, data, batch, cfg.loss, 0, s, {});
        losses.push_back(stats.terms.total / static_cast<double>(stats.images));
        optim.step();
    }
    return losses;
}

// ---- ablation --------------------------------------------------------------

std::string to_string(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::attention_mode: return "attention_mode";
        case AblationAxis::fusion: return "fusion";
        case AblationAxis::iou_loss_kind: return "iou_loss_kind";
        case AblationAxis::iou_supervision: return "iou_supervision";
    }
    return "?";
}

AblationAxis parse_ablation_axis(const std::string& text) {
    for (AblationAxis a : {AblationAxis::attention_mode, AblationAxis::fusion, AblationAxis::iou_loss_kind,
                           AblationAxis::iou_supervision}) {
        if (to_string(a) == text) return a;
    }
    throw Error(ErrorCode::config,
                "unknown ablation axis '" + text + "' (attention_mode, fusion, iou_loss_kind, iou_supervision)");
}

std::vector<std::string> ablation_variants(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::attention_mode: return {"global", "cascade"};
        case AblationAxis::fusion: return {"none", "single", "sum", "product"};
        case AblationAxis::iou_loss_kind: return {"l1", "l2", "huber"};
        case AblationAxis::iou_supervision: return {"positive_only", "all"};
    }
    return {};
}

namespace {

TrainConfig variant_config(const TrainConfig& base, AblationAxis axis, const std::string& variant) {
    TrainConfig cfg = base;
    switch (axis) {
        case AblationAxis::attention_mode: cfg.model.attention_mode = parse_attention_mode(variant); break;
        case AblationAxis::iou_loss_kind: cfg.loss.iou_loss = parse_iou_loss_kind(variant); break;
        case AblationAxis::iou_supervision: cfg.loss.supervision = parse_iou_supervision(variant); break;
        case AblationAxis::fusion:
            cfg.fusion = parse_fusion_mode(variant);
            if (cfg.fusion == FusionMode::single) cfg.loss.target_head = IouTargetHead::class_probability;
            break;
    }
    return cfg;
}

// Scoring-only variants reuse the model trained for `product`.
std::string training_key(AblationAxis axis, const std::string& variant) {
    if (axis == AblationAxis::fusion && variant != "single") return "shared";
    return variant;
}

}  // namespace

std::vector<AblationRow> ablate(const TrainConfig& base, AblationAxis axis, const std::vector<std::uint64_t>& seeds,
                                const fs::path& out_dir, const TrainOptions& options) {
    if (seeds.empty()) throw Error(ErrorCode::config, "ablate needs at least one seed");
    const DataBundle data = load_data(base);
    if (data.held_out.empty()) throw Error(ErrorCode::config, "ablate needs held-out data");
    const std::vector<std::string> variants = ablation_variants(axis);
    std::vector<AblationRow> per_seed;
    for (std::uint64_t seed : seeds) {
        std::map<std::string, std::unique_ptr<TrainResult>> trained;
        for (const std::string& v : variants) {
            TrainConfig cfg = variant_config(base, axis, v);
            cfg.seed = seed;
            const std::string key = training_key(axis, v);
            if (!trained.count(key)) {
                if (options.progress) options.progress("training " + to_string(axis) + "=" + key + " seed=" + std::to_string(seed));
                TrainConfig train_cfg = cfg;
                if (key == "shared") train_cfg.fusion = FusionMode::product;
                trained[key] = std::make_unique<TrainResult>(
                    train(train_cfg, data, out_dir / (key + "-seed" + std::to_string(seed)), options));
            }
            const EvalReport r = evaluate(trained[key]->model, data.held_out, cfg.fusion, cfg.top_k);
            per_seed.push_back({v, std::to_string(seed), r.pooled, r.uniap});
        }
    }
    std::vector<AblationRow> rows = per_seed;
    for (const std::string& v : variants) {
        AblationRow mean{v, "mean", {}, 0.0};
        double count = 0.0;
        for (const AblationRow& r : per_seed) {
            if (r.variant != v) continue;
            mean.summary.ap += r.summary.ap;
            mean.summary.ap50 += r.summary.ap50;
            mean.summary.ap75 += r.summary.ap75;
            mean.summary.ar100 += r.summary.ar100;
            mean.summary.classes = r.summary.classes;
            mean.uniap += r.uniap;
            count += 1.0;
        }
        mean.summary.ap /= count;
        mean.summary.ap50 /= count;
        mean.summary.ap75 /= count;
        mean.summary.ar100 /= count;
        mean.uniap /= count;
        rows.push_back(mean);
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, AblationAxis axis, const fs::path& path) {
    std::ostringstream out;
    out.precision(10);
    out << to_string(axis) << ",seed,ap,ap50,ap75,ar100,uniap\n";
    for (const AblationRow& r : rows) {
        out << r.variant << ',' << r.seed << ',' << percent(r.summary.ap) << ',' << percent(r.summary.ap50) << ','
            << percent(r.summary.ap75) << ',' << percent(r.summary.ar100) << ',' << percent(r.uniap) << '\n';
    }
    write_text(path, out.str());
}

// ---- sparsification --------------------------------------------------------

SparsifyResult sparsify(const CascadeDetr& model, const std::vector<Dataset>& datasets, FusionMode fusion,
                        std::size_t k_per_image) {
    if (k_per_image < 1) throw PreconditionError("sparsify: k must be >= 1");
    EvalRecord all;
    for (const Dataset& d : datasets) {
        EvalRecord rec = predict(model, d, fusion, k_per_image);
        all.insert(all.end(), std::make_move_iterator(rec.begin()), std::make_move_iterator(rec.end()));
    }
    SparsifyResult result;
    const std::vector<LabeledDetection> labeled = label_detections(all);
    result.detections = labeled.size();
    result.curves = sparsification(labeled);
    result.scoring_auc = curve_auc(result.curves.scoring);
    result.oracle_auc = curve_auc(result.curves.oracle);
    return result;
}

void write_sparsify_outputs(const SparsifyResult& result, const fs::path& out_dir, const std::string& prefix) {
    fs::create_directories(out_dir);
    write_curve_csv(result.curves.scoring, out_dir / (prefix + "scoring.csv"));
    write_curve_csv(result.curves.oracle, out_dir / (prefix + "oracle.csv"));
}

}  // namespace cdetr
