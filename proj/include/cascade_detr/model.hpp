#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cascade_detr/geometry.hpp"
#include "cascade_detr/image.hpp"
#include "cascade_detr/tensor.hpp"

namespace cdetr {

struct GroundTruth;

enum class AttentionMode { global, cascade, gt_box_oracle };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);

struct ModelConfig {
    std::size_t num_queries = 30;
    std::size_t embed_dim = 64;
    std::size_t num_layers = 3;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 128;
    std::size_t num_classes = 3;
    GridShape grid{8, 8};
    AttentionMode attention_mode = AttentionMode::cascade;
    bool recalibration_enabled = true;
    std::uint64_t seed = 0;

    // The encoder stub halves resolution three times.
    static constexpr std::size_t encoder_stride = 8;
    static constexpr std::size_t encoder_kernel = 3;
    static constexpr std::size_t image_channels = 3;

    std::size_t image_height() const { return grid.height * encoder_stride; }
    std::size_t image_width() const { return grid.width * encoder_stride; }

    void validate() const;

    // Ordered key/value form used by checkpoints and config diffs.
    std::vector<std::pair<std::string, std::string>> fields() const;
    static ModelConfig from_fields(const std::map<std::string, std::string>& fields);
};

// Names of fields whose values differ between two configs.
std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b);

// Learnable query content plus the layer-0 anchor boxes.
struct QueryState {
    Tensor content;  // [N, D]
    Tensor anchors;  // [N, 4] normalized (cx, cy, w, h)
};

struct FeatureGrid {
    GridShape grid;
    Tensor features;    // [H*W, D], row-major over cells
    Tensor positional;  // [H*W, D], fixed 2D sine encoding
};

struct LayerOutput {
    Tensor boxes;         // [N, 4] normalized (cx, cy, w, h)
    Tensor class_logits;  // [N, C + 1]; last column is no-object
    Tensor iou_logits;    // [N, 1], pre-sigmoid
};

// Cross-attention weights of one decoder layer.
struct AttentionTrace {
    AttentionMask support;
    std::vector<std::vector<double>> head_weights;  // per head, [N * H*W]
};

struct ForwardOptions {
    bool trace_attention = false;
    // Replace every support set with the full grid.
    bool force_full_support = false;
    // Required in gt_box_oracle mode.
    const GroundTruth* ground_truth = nullptr;
};

struct ForwardResult {
    std::vector<LayerOutput> layers;
    std::vector<AttentionTrace> traces;
};

struct Parameter {
    std::string name;
    Tensor value;
    bool encoder = false;  // encoder stub vs transformer step-size group
};

// 2D sine features of normalized coordinates: for each input column and each
// of `frequencies` octaves spanning pi .. 8 pi, emits sin and cos.
// [n, k] -> [n, 2 * k * frequencies], differentiable.
Tensor sine_embedding(const Tensor& coords, std::size_t frequencies);

class CascadeDetr {
public:
    explicit CascadeDetr(ModelConfig config);

    const ModelConfig& config() const { return config_; }
    ModelConfig& mutable_config() { return config_; }

    FeatureGrid encode(const Image& image) const;
    QueryState initial_queries() const;

    // Support sets for one layer given the boxes that constrain it.
    AttentionMask support_for(const Tensor& prev_boxes, const ForwardOptions& options) const;

    // Attention-weighted sum of values over each query's support plus the
    // residual `queries` (no normalization).
    Tensor cross_attention(std::size_t layer, const Tensor& queries, const Tensor& query_pos, const FeatureGrid& grid,
                           const AttentionMask& support, AttentionTrace* trace = nullptr) const;

    // Self-attention, cross-attention over the support of `prev_boxes`, FFN,
    // then the shared prediction heads.
    std::pair<Tensor, LayerOutput> decoder_layer(std::size_t layer, const Tensor& queries, const FeatureGrid& grid,
                                                 const Tensor& prev_boxes, const ForwardOptions& options,
                                                 AttentionTrace* trace = nullptr) const;

    LayerOutput predict(const Tensor& queries) const;

    ForwardResult forward(const Image& image, const ForwardOptions& options = {}) const;

    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    const Tensor& parameter(const std::string& name) const;
    Tensor& parameter(const std::string& name);

private:
    Tensor& add_param(const std::string& name, Shape shape, bool encoder = false);
    const Tensor& p(const std::string& name) const { return parameter(name); }
    Tensor multi_head_self_attention(std::size_t layer, const Tensor& queries, const Tensor& query_pos) const;
    Tensor query_positional(const Tensor& boxes) const;

    ModelConfig config_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace cdetr
