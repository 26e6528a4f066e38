#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cascade_detr/config.hpp"
#include "cascade_detr/data.hpp"
#include "cascade_detr/evaluation.hpp"
#include "cascade_detr/model.hpp"

namespace cdetr {

// Training data plus the held-out registry (one dataset per domain).
struct DataBundle {
    Dataset train;
    std::vector<Dataset> held_out;
};

// Synthetic: every style's train split merged, and each style's eval split
// kept separate. COCO: the two configured annotation files.
DataBundle load_data(const TrainConfig& cfg);

// Concatenates datasets with identical class lists; image ids are prefixed
// with "<dataset id>/".
Dataset merge_datasets(const std::vector<Dataset>& parts, const std::string& id);

// ---- inference and metrics -------------------------------------------------

EvalRecord predict(const CascadeDetr& model, const Dataset& dataset, FusionMode fusion, std::size_t top_k);

struct DatasetMetrics {
    std::string dataset;
    CocoSummary summary;  // fractions in [0, 1]
};

struct EvalReport {
    FusionMode fusion = FusionMode::product;
    std::vector<DatasetMetrics> per_dataset;
    double uniap = 0.0;   // fraction
    CocoSummary pooled;   // all held-out images in one record
};

EvalReport evaluate(const CascadeDetr& model, const std::vector<Dataset>& datasets, FusionMode fusion,
                    std::size_t top_k);

// Flat key-value JSON; AP-style values in percent.
std::string report_json(const EvalReport& report, const std::map<std::string, std::string>& extra = {});

// ---- training --------------------------------------------------------------

// Seconds since the epoch for log stamps; honors SOURCE_DATE_EPOCH so logs
// can be reproduced byte for byte.
std::int64_t log_timestamp();

struct RunPaths {
    std::filesystem::path dir;
    std::filesystem::path checkpoint;  // model.ckpt
    std::filesystem::path log;         // metrics.jsonl
    std::filesystem::path report;      // report.json
    std::filesystem::path config;      // config.ini
};
RunPaths run_paths(const std::filesystem::path& dir);

struct TrainOptions {
    bool log_iterations = false;  // one extra log line per optimizer step
    std::function<void(const std::string&)> progress;
};

struct TrainResult {
    RunPaths paths;
    CascadeDetr model;
    EvalReport final_report;
    std::vector<double> epoch_losses;
};

// Runs the full schedule and writes checkpoint, log, report and config into
// `out_dir`. The model is initialized from cfg.seed.
TrainResult train(const TrainConfig& cfg, const DataBundle& data, const std::filesystem::path& out_dir,
                  const TrainOptions& options = {});

// Loss on one fixed batch after each of `steps` optimizer steps on it.
std::vector<double> fixed_batch_losses(const TrainConfig& cfg, const Dataset& data, std::size_t steps);

// ---- ablation --------------------------------------------------------------

enum class AblationAxis { attention_mode, fusion, iou_loss_kind, iou_supervision };
std::string to_string(AblationAxis axis);
AblationAxis parse_ablation_axis(const std::string& text);
std::vector<std::string> ablation_variants(AblationAxis axis);

struct AblationRow {
    std::string variant;
    std::string seed;  // a seed value, or "mean"
    CocoSummary summary;
    double uniap = 0.0;
};

// Trains each variant for every seed. Variants that only change scoring share
// one trained model per seed. Rows: per-seed, then one mean row per variant.
std::vector<AblationRow> ablate(const TrainConfig& base, AblationAxis axis, const std::vector<std::uint64_t>& seeds,
                                const std::filesystem::path& out_dir, const TrainOptions& options = {});
void write_ablation_csv(const std::vector<AblationRow>& rows, AblationAxis axis, const std::filesystem::path& path);

// ---- sparsification --------------------------------------------------------

struct SparsifyResult {
    SparsificationCurves curves;
    double scoring_auc = 0.0;
    double oracle_auc = 0.0;
    std::size_t detections = 0;
};

// Top-k detections per image by score, labeled and ranked.
SparsifyResult sparsify(const CascadeDetr& model, const std::vector<Dataset>& datasets, FusionMode fusion,
                        std::size_t k_per_image);
void write_sparsify_outputs(const SparsifyResult& result, const std::filesystem::path& out_dir,
                            const std::string& prefix);

}  // namespace cdetr
