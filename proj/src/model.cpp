#include "cascade_detr/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "cascade_detr/assignment.hpp"

namespace cdetr {

std::string to_string(AttentionMode mode) {
    switch (mode) {
        case AttentionMode::global: return "global";
        case AttentionMode::cascade: return "cascade";
        case AttentionMode::gt_box_oracle: return "gt_box_oracle";
    }
    return "cascade";
}

AttentionMode parse_attention_mode(const std::string& text) {
    if (text == "global") return AttentionMode::global;
    if (text == "cascade") return AttentionMode::cascade;
    if (text == "gt_box_oracle") return AttentionMode::gt_box_oracle;
    throw Error(ErrorCode::config, "unknown attention_mode '" + text + "' (global, cascade, gt_box_oracle)");
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::config, "model config: " + msg); };
    if (num_queries < 1) fail("num_queries must be >= 1");
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (num_heads < 1 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
    if (embed_dim % 4 != 0) fail("embed_dim must be divisible by 4 for the positional encoding");
    if (embed_dim < 8) fail("embed_dim must be >= 8");
    if (ffn_dim < 1) fail("ffn_dim must be >= 1");
    if (num_classes < 1) fail("num_classes must be >= 1");
    if (grid.height < 1 || grid.width < 1) fail("grid must be at least 1x1");
}

std::vector<std::pair<std::string, std::string>> ModelConfig::fields() const {
    return {
        {"num_queries", std::to_string(num_queries)},
        {"embed_dim", std::to_string(embed_dim)},
        {"num_layers", std::to_string(num_layers)},
        {"num_heads", std::to_string(num_heads)},
        {"ffn_dim", std::to_string(ffn_dim)},
        {"num_classes", std::to_string(num_classes)},
        {"grid_height", std::to_string(grid.height)},
        {"grid_width", std::to_string(grid.width)},
        {"attention_mode", to_string(attention_mode)},
        {"recalibration_enabled", recalibration_enabled ? "true" : "false"},
        {"seed", std::to_string(seed)},
    };
}

ModelConfig ModelConfig::from_fields(const std::map<std::string, std::string>& fields) {
    ModelConfig cfg;
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = fields.find(key);
        if (it == fields.end()) throw Error(ErrorCode::checkpoint, "model config field '" + key + "' missing");
        return it->second;
    };
    auto get_size = [&](const std::string& key) {
        try {
            return static_cast<std::size_t>(std::stoull(get(key)));
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::checkpoint, "model config field '" + key + "' is not an unsigned integer");
        }
    };
    cfg.num_queries = get_size("num_queries");
    cfg.embed_dim = get_size("embed_dim");
    cfg.num_layers = get_size("num_layers");
    cfg.num_heads = get_size("num_heads");
    cfg.ffn_dim = get_size("ffn_dim");
    cfg.num_classes = get_size("num_classes");
    cfg.grid = GridShape{get_size("grid_height"), get_size("grid_width")};
    cfg.attention_mode = parse_attention_mode(get("attention_mode"));
    cfg.recalibration_enabled = get("recalibration_enabled") == "true";
    cfg.seed = get_size("seed");
    cfg.validate();
    return cfg;
}

std::vector<std::string> config_differences(const ModelConfig& a, const ModelConfig& b) {
    std::vector<std::string> diffs;
    const auto fa = a.fields();
    const auto fb = b.fields();
    for (std::size_t i = 0; i < fa.size(); ++i) {
        if (fa[i].second != fb[i].second) diffs.push_back(fa[i].first + " (" + fa[i].second + " vs " + fb[i].second + ")");
    }
    return diffs;
}

// ---------------------------------------------------------------------------

Tensor sine_embedding(const Tensor& coords, std::size_t frequencies) {
    if (coords.rank() != 2) throw ShapeError("sine_embedding: expected [n, k], got " + shape_str(coords.shape()));
    if (frequencies < 1) throw PreconditionError("sine_embedding: need at least one frequency");
    const std::size_t n = coords.dim(0), k = coords.dim(1);
    const std::size_t width = 2 * k * frequencies;
    std::vector<double> omega(frequencies, std::numbers::pi);
    for (std::size_t f = 1; f < frequencies; ++f) {
        omega[f] = std::numbers::pi * std::pow(8.0, static_cast<double>(f) / static_cast<double>(frequencies - 1));
    }
    std::vector<double> out(n * width);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            const double v = coords.at(i, j);
            for (std::size_t f = 0; f < frequencies; ++f) {
                out[i * width + j * 2 * frequencies + 2 * f] = std::sin(omega[f] * v);
                out[i * width + j * 2 * frequencies + 2 * f + 1] = std::cos(omega[f] * v);
            }
        }
    }
    return Tensor::make_result(
        {n, width}, std::move(out), {coords},
        [coords, omega, n, k, frequencies, width](std::span<const double> g) {
            auto gc = coords.grad_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double v = coords.at(i, j);
                    double acc = 0.0;
                    for (std::size_t f = 0; f < frequencies; ++f) {
                        const std::size_t base = i * width + j * 2 * frequencies + 2 * f;
                        acc += g[base] * omega[f] * std::cos(omega[f] * v) - g[base + 1] * omega[f] * std::sin(omega[f] * v);
                    }
                    gc[i * k + j] += acc;
                }
            }
        },
        "sine_embedding");
}

namespace {

constexpr std::size_t kQueryPosFrequencies = 8;
constexpr std::size_t kEncoderWidth1 = 8;
constexpr std::size_t kEncoderWidth2 = 16;
constexpr std::size_t kEncoderKernel = ModelConfig::encoder_kernel;
constexpr double kMinSide = 1e-9;

std::string layer_prefix(std::size_t layer) { return "decoder." + std::to_string(layer) + "."; }

double inverse_sigmoid(double p) { return std::log(p / (1.0 - p)); }

}  // namespace

CascadeDetr::CascadeDetr(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t d = config_.embed_dim;
    const std::size_t n = config_.num_queries;

    add_param("encoder.conv1.weight", {kEncoderWidth1, ModelConfig::image_channels, kEncoderKernel, kEncoderKernel}, true);
    add_param("encoder.conv1.bias", {kEncoderWidth1}, true);
    add_param("encoder.conv2.weight", {kEncoderWidth2, kEncoderWidth1, kEncoderKernel, kEncoderKernel}, true);
    add_param("encoder.conv2.bias", {kEncoderWidth2}, true);
    add_param("encoder.conv3.weight", {d, kEncoderWidth2, kEncoderKernel, kEncoderKernel}, true);
    add_param("encoder.conv3.bias", {d}, true);

    add_param("query.content", {n, d});
    add_param("query.anchor_logits", {n, 4});
    add_param("query_pos.fc1.weight", {d, 4 * 2 * kQueryPosFrequencies});
    add_param("query_pos.fc1.bias", {d});
    add_param("query_pos.fc2.weight", {d, d});
    add_param("query_pos.fc2.bias", {d});

    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        const std::string pre = layer_prefix(l);
        for (const char* proj : {"q", "k", "v", "out"}) {
            add_param(pre + "self_attn." + proj + ".weight", {d, d});
            add_param(pre + "self_attn." + proj + ".bias", {d});
        }
        for (const char* proj : {"q", "k", "v"}) {
            add_param(pre + "cross_attn." + proj + ".weight", {d, d});
            add_param(pre + "cross_attn." + proj + ".bias", {d});
        }
        add_param(pre + "ffn.fc1.weight", {config_.ffn_dim, d});
        add_param(pre + "ffn.fc1.bias", {config_.ffn_dim});
        add_param(pre + "ffn.fc2.weight", {d, config_.ffn_dim});
        add_param(pre + "ffn.fc2.bias", {d});
        for (const char* norm : {"norm1", "norm2", "norm3"}) {
            add_param(pre + norm + ".gamma", {d});
            add_param(pre + norm + ".beta", {d});
        }
    }

    // Heads are shared by every decoder layer.
    add_param("head.box.fc1.weight", {d, d});
    add_param("head.box.fc1.bias", {d});
    add_param("head.box.fc2.weight", {4, d});
    add_param("head.box.fc2.bias", {4});
    add_param("head.class.weight", {config_.num_classes + 1, d});
    add_param("head.class.bias", {config_.num_classes + 1});
    add_param("head.iou.weight", {1, d});
    add_param("head.iou.bias", {1});

    std::mt19937_64 rng(config_.seed);
    for (Parameter& param : params_) {
        auto values = param.value.mutable_data();
        const Shape& s = param.value.shape();
        const std::string& name = param.name;
        auto ends_with = [&](const std::string& suffix) {
            return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
        };
        if (ends_with(".bias") || ends_with(".beta")) {
            std::fill(values.begin(), values.end(), 0.0);
        } else if (ends_with(".gamma")) {
            std::fill(values.begin(), values.end(), 1.0);
        } else if (name == "query.content") {
            std::normal_distribution<double> dist(0.0, 1.0);
            for (double& v : values) v = dist(rng);
        } else if (name == "query.anchor_logits") {
            std::uniform_real_distribution<double> center(0.1, 0.9);
            std::uniform_real_distribution<double> side(0.25, 0.5);
            for (std::size_t i = 0; i < n; ++i) {
                values[i * 4 + 0] = inverse_sigmoid(center(rng));
                values[i * 4 + 1] = inverse_sigmoid(center(rng));
                values[i * 4 + 2] = inverse_sigmoid(side(rng));
                values[i * 4 + 3] = inverse_sigmoid(side(rng));
            }
        } else if (s.size() == 4) {
            const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
            std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
            for (double& v : values) v = dist(rng);
        } else {
            const double limit = std::sqrt(6.0 / static_cast<double>(s[0] + s[1]));
            std::uniform_real_distribution<double> dist(-limit, limit);
            for (double& v : values) v = dist(rng);
        }
    }
}

Tensor& CascadeDetr::add_param(const std::string& name, Shape shape, bool encoder) {
    index_[name] = params_.size();
    params_.push_back(Parameter{name, Tensor::zeros(std::move(shape), true), encoder});
    return params_.back().value;
}

const Tensor& CascadeDetr::parameter(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw PreconditionError("unknown parameter '" + name + "'");
    return params_[it->second].value;
}

Tensor& CascadeDetr::parameter(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw PreconditionError("unknown parameter '" + name + "'");
    return params_[it->second].value;
}

FeatureGrid CascadeDetr::encode(const Image& image) const {
    const std::size_t h = config_.image_height(), w = config_.image_width();
    if (image.height != h || image.width != w || image.channels != ModelConfig::image_channels) {
        throw ShapeError("encode: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                         std::to_string(image.channels) + ", model expects " + std::to_string(h) + "x" +
                         std::to_string(w) + "x" + std::to_string(ModelConfig::image_channels));
    }
    std::vector<double> chw(image.pixels.size());
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < ModelConfig::image_channels; ++c) chw[(c * h + y) * w + x] = image.at(y, x, c);
    const Tensor input = Tensor::from({ModelConfig::image_channels, h, w}, std::move(chw));

    Tensor x = relu(conv2d(input, p("encoder.conv1.weight"), p("encoder.conv1.bias"), 2, kEncoderKernel / 2));
    x = relu(conv2d(x, p("encoder.conv2.weight"), p("encoder.conv2.bias"), 2, kEncoderKernel / 2));
    x = conv2d(x, p("encoder.conv3.weight"), p("encoder.conv3.bias"), 2, kEncoderKernel / 2);

    const GridShape grid = config_.grid;
    const std::size_t cells = grid.cells();
    const std::size_t d = config_.embed_dim;
    FeatureGrid out;
    out.grid = grid;
    out.features = transpose(reshape(x, {d, cells}));

    std::vector<double> centers(cells * 2);
    for (std::size_t r = 0; r < grid.height; ++r) {
        for (std::size_t c = 0; c < grid.width; ++c) {
            centers[(r * grid.width + c) * 2] = (static_cast<double>(c) + 0.5) / static_cast<double>(grid.width);
            centers[(r * grid.width + c) * 2 + 1] = (static_cast<double>(r) + 0.5) / static_cast<double>(grid.height);
        }
    }
    out.positional = sine_embedding(Tensor::from({cells, 2}, std::move(centers)), d / 4);
    return out;
}

QueryState CascadeDetr::initial_queries() const {
    return QueryState{p("query.content"), sigmoid(p("query.anchor_logits"))};
}

Tensor CascadeDetr::query_positional(const Tensor& boxes) const {
    Tensor e = sine_embedding(boxes, kQueryPosFrequencies);
    e = relu(linear(e, p("query_pos.fc1.weight"), p("query_pos.fc1.bias")));
    return linear(e, p("query_pos.fc2.weight"), p("query_pos.fc2.bias"));
}

AttentionMask CascadeDetr::support_for(const Tensor& prev_boxes, const ForwardOptions& options) const {
    const std::size_t n = prev_boxes.dim(0);
    const GridShape grid = config_.grid;
    if (options.force_full_support || config_.attention_mode == AttentionMode::global) {
        return AttentionMask::full(n, grid.cells());
    }
    std::vector<Box> boxes = boxes_from_tensor(prev_boxes);
    for (Box& b : boxes) {
        b.w = std::max(b.w, kMinSide);
        b.h = std::max(b.h, kMinSide);
    }
    if (config_.attention_mode == AttentionMode::gt_box_oracle) {
        if (options.ground_truth == nullptr) {
            throw PreconditionError("gt_box_oracle attention needs ground truth boxes in ForwardOptions");
        }
        const GroundTruth& gt = *options.ground_truth;
        if (!gt.empty()) {
            CostMatrix cost(n, gt.size());
            for (std::size_t q = 0; q < n; ++q) {
                for (std::size_t g = 0; g < gt.size(); ++g) {
                    const Box& a = boxes[q];
                    const Box& b = gt.boxes[g];
                    cost(q, g) = std::fabs(a.cx - b.cx) + std::fabs(a.cy - b.cy) + std::fabs(a.w - b.w) +
                                 std::fabs(a.h - b.h) + (1.0 - giou(a, b));
                }
            }
            for (const MatchPair& m : hungarian(cost)) boxes[m.query] = gt.boxes[m.gt];
        }
    }
    return support_mask(boxes, grid);
}

Tensor CascadeDetr::multi_head_self_attention(std::size_t layer, const Tensor& queries, const Tensor& query_pos) const {
    const std::string pre = layer_prefix(layer) + "self_attn.";
    const Tensor with_pos = add(queries, query_pos);
    const Tensor q = linear(with_pos, p(pre + "q.weight"), p(pre + "q.bias"));
    const Tensor k = linear(with_pos, p(pre + "k.weight"), p(pre + "k.bias"));
    const Tensor v = linear(queries, p(pre + "v.weight"), p(pre + "v.bias"));
    const std::size_t heads = config_.num_heads;
    const std::size_t dh = config_.embed_dim / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        outs.push_back(matmul(softmax(scale(matmul_nt(qh, kh), scale_factor)), vh));
    }
    const Tensor merged = heads == 1 ? outs.front() : concat_cols(outs);
    return linear(merged, p(pre + "out.weight"), p(pre + "out.bias"));
}

Tensor CascadeDetr::cross_attention(std::size_t layer, const Tensor& queries, const Tensor& query_pos,
                                    const FeatureGrid& grid, const AttentionMask& support,
                                    AttentionTrace* trace) const {
    const std::string pre = layer_prefix(layer) + "cross_attn.";
    const Tensor q = linear(add(queries, query_pos), p(pre + "q.weight"), p(pre + "q.bias"));
    const Tensor k = linear(add(grid.features, grid.positional), p(pre + "k.weight"), p(pre + "k.bias"));
    const Tensor v = linear(grid.features, p(pre + "v.weight"), p(pre + "v.bias"));
    const std::size_t heads = config_.num_heads;
    const std::size_t dh = config_.embed_dim / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    if (trace) {
        trace->support = support;
        trace->head_weights.clear();
    }
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor weights = masked_softmax(scale(matmul_nt(qh, kh), scale_factor), support);
        if (trace) trace->head_weights.emplace_back(weights.data().begin(), weights.data().end());
        outs.push_back(matmul(weights, vh));
    }
    const Tensor attended = heads == 1 ? outs.front() : concat_cols(outs);
    return add(attended, queries);
}

LayerOutput CascadeDetr::predict(const Tensor& queries) const {
    LayerOutput out;
    const Tensor hidden = relu(linear(queries, p("head.box.fc1.weight"), p("head.box.fc1.bias")));
    out.boxes = sigmoid(linear(hidden, p("head.box.fc2.weight"), p("head.box.fc2.bias")));
    out.class_logits = linear(queries, p("head.class.weight"), p("head.class.bias"));
    out.iou_logits = linear(queries, p("head.iou.weight"), p("head.iou.bias"));
    return out;
}

std::pair<Tensor, LayerOutput> CascadeDetr::decoder_layer(std::size_t layer, const Tensor& queries,
                                                          const FeatureGrid& grid, const Tensor& prev_boxes,
                                                          const ForwardOptions& options, AttentionTrace* trace) const {
    if (layer >= config_.num_layers) throw PreconditionError("decoder_layer: layer index out of range");
    const std::string pre = layer_prefix(layer);
    const Tensor pos = query_positional(prev_boxes);

    Tensor x = layer_norm(add(queries, multi_head_self_attention(layer, queries, pos)), p(pre + "norm1.gamma"),
                          p(pre + "norm1.beta"));
    const AttentionMask support = support_for(prev_boxes, options);
    x = layer_norm(cross_attention(layer, x, pos, grid, support, trace), p(pre + "norm2.gamma"), p(pre + "norm2.beta"));
    const Tensor ff = linear(relu(linear(x, p(pre + "ffn.fc1.weight"), p(pre + "ffn.fc1.bias"))),
                             p(pre + "ffn.fc2.weight"), p(pre + "ffn.fc2.bias"));
    x = layer_norm(add(x, ff), p(pre + "norm3.gamma"), p(pre + "norm3.beta"));
    return {x, predict(x)};
}

ForwardResult CascadeDetr::forward(const Image& image, const ForwardOptions& options) const {
    const FeatureGrid grid = encode(image);
    const QueryState queries = initial_queries();
    ForwardResult result;
    result.layers.reserve(config_.num_layers);
    if (options.trace_attention) result.traces.resize(config_.num_layers);

    Tensor content = queries.content;
    Tensor prev_boxes = queries.anchors;
    for (std::size_t l = 0; l < config_.num_layers; ++l) {
        AttentionTrace* trace = options.trace_attention ? &result.traces[l] : nullptr;
        auto [next, out] = decoder_layer(l, content, grid, prev_boxes, options, trace);
        content = next;
        // Only the rasterized support is discrete; the positional path stays differentiable.
        prev_boxes = out.boxes;
        result.layers.push_back(std::move(out));
    }
    return result;
}

}  // namespace cdetr
