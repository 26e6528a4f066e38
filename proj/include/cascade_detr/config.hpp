#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cascade_detr/assignment.hpp"
#include "cascade_detr/model.hpp"
#include "cascade_detr/scoring.hpp"

namespace cdetr {

struct OptimizerConfig {
    double lr = 1e-4;          // transformer, heads, queries
    double lr_encoder = 1e-5;  // convolutional encoder stub
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.1;    // max global L2 norm; 0 disables
    double lr_decay = 0.1;     // factor applied at decay_epoch
};

struct DataConfig {
    std::string source = "synthetic";  // "synthetic" or "coco"
    std::uint64_t data_seed = 0;
    std::size_t train_per_style = 125;
    std::size_t eval_per_style = 25;
    // COCO sources (Netpbm images).
    std::string train_annotations;
    std::string train_images;
    std::string eval_annotations;
    std::string eval_images;
};

struct TrainConfig {
    ModelConfig model;
    LossConfig loss;
    OptimizerConfig optim;
    DataConfig data;
    std::size_t epochs = 60;
    std::size_t decay_epoch = 48;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
    FusionMode fusion = FusionMode::product;
    std::size_t eval_every = 1;   // epochs between held-out evaluations; 0 = final only
    std::size_t top_k = 100;      // detections kept per image for AP
    std::size_t sparsify_k = 50;  // detections kept per image for curves

    void validate() const;

    // Flat "section.key" -> value view; the canonical key order.
    std::vector<std::pair<std::string, std::string>> to_entries() const;
    // Applies entries on top of *this. Keys may be "section.key" or a bare
    // unique key name; unknown keys and bad values raise config errors.
    void apply(const std::map<std::string, std::string>& entries);
};

// Reads an INI-style file of "key = value" lines under [section] headers.
std::map<std::string, std::string> read_config_entries(const std::filesystem::path& path);
void write_config(const TrainConfig& cfg, const std::filesystem::path& path);

// Output root: $CASCADE_DETR_OUT if set, else "runs".
std::filesystem::path output_root();

}  // namespace cdetr
