#include "cascade_detr/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace cdetr {

namespace {

[[noreturn]] void config_fail(const std::string& msg) { throw Error(ErrorCode::config, msg); }

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
    std::istringstream in(text);
    T value{};
    in >> value;
    if (!in || !(in >> std::ws).eof()) config_fail("config key '" + key + "': cannot parse '" + text + "'");
    if constexpr (std::is_unsigned_v<T>) {
        if (text.find('-') != std::string::npos) config_fail("config key '" + key + "': must be non-negative");
    }
    return value;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
    if (text == "false" || text == "0" || text == "no" || text == "off") return false;
    config_fail("config key '" + key + "': expected a boolean, got '" + text + "'");
}

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

struct Binding {
    std::string key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

#define CDETR_SIZE(KEY, EXPR)                                                                         \
    Binding{KEY, [](const TrainConfig& c) { return std::to_string(c.EXPR); },                        \
            [](TrainConfig& c, const std::string& v) { c.EXPR = parse_number<std::size_t>(KEY, v); }}
#define CDETR_U64(KEY, EXPR)                                                                          \
    Binding{KEY, [](const TrainConfig& c) { return std::to_string(c.EXPR); },                        \
            [](TrainConfig& c, const std::string& v) { c.EXPR = parse_number<std::uint64_t>(KEY, v); }}
#define CDETR_REAL(KEY, EXPR)                                                                         \
    Binding{KEY, [](const TrainConfig& c) { return fmt(c.EXPR); },                                   \
            [](TrainConfig& c, const std::string& v) { c.EXPR = parse_number<double>(KEY, v); }}
#define CDETR_TEXT(KEY, EXPR)                                                                         \
    Binding{KEY, [](const TrainConfig& c) { return c.EXPR; }, [](TrainConfig& c, const std::string& v) { c.EXPR = v; }}

const std::vector<Binding>& bindings() {
    static const std::vector<Binding> table{
        CDETR_SIZE("model.num_queries", model.num_queries),
        CDETR_SIZE("model.embed_dim", model.embed_dim),
        CDETR_SIZE("model.num_layers", model.num_layers),
        CDETR_SIZE("model.num_heads", model.num_heads),
        CDETR_SIZE("model.ffn_dim", model.ffn_dim),
        CDETR_SIZE("model.num_classes", model.num_classes),
        CDETR_SIZE("model.grid_height", model.grid.height),
        CDETR_SIZE("model.grid_width", model.grid.width),
        Binding{"model.attention_mode", [](const TrainConfig& c) { return to_string(c.model.attention_mode); },
                [](TrainConfig& c, const std::string& v) { c.model.attention_mode = parse_attention_mode(v); }},
        Binding{"model.recalibration_enabled",
                [](const TrainConfig& c) { return std::string(c.model.recalibration_enabled ? "true" : "false"); },
                [](TrainConfig& c, const std::string& v) { c.model.recalibration_enabled = parse_bool("model.recalibration_enabled", v); }},
        CDETR_REAL("loss.weight_class", loss.weight_class),
        CDETR_REAL("loss.weight_l1", loss.weight_l1),
        CDETR_REAL("loss.weight_giou", loss.weight_giou),
        CDETR_REAL("loss.weight_iou_recal", loss.weight_iou_recal),
        CDETR_REAL("loss.no_object_weight", loss.no_object_weight),
        Binding{"loss.iou_loss", [](const TrainConfig& c) { return to_string(c.loss.iou_loss); },
                [](TrainConfig& c, const std::string& v) { c.loss.iou_loss = parse_iou_loss_kind(v); }},
        CDETR_REAL("loss.huber_delta", loss.huber_delta),
        Binding{"loss.iou_supervision", [](const TrainConfig& c) { return to_string(c.loss.supervision); },
                [](TrainConfig& c, const std::string& v) { c.loss.supervision = parse_iou_supervision(v); }},
        Binding{"loss.iou_target_head",
                [](const TrainConfig& c) {
                    return std::string(c.loss.target_head == IouTargetHead::iou_head ? "iou_head" : "class_probability");
                },
                [](TrainConfig& c, const std::string& v) {
                    if (v == "iou_head") c.loss.target_head = IouTargetHead::iou_head;
                    else if (v == "class_probability") c.loss.target_head = IouTargetHead::class_probability;
                    else config_fail("unknown iou_target_head '" + v + "' (iou_head, class_probability)");
                }},
        CDETR_REAL("optim.lr", optim.lr),
        CDETR_REAL("optim.lr_encoder", optim.lr_encoder),
        CDETR_REAL("optim.weight_decay", optim.weight_decay),
        CDETR_REAL("optim.beta1", optim.beta1),
        CDETR_REAL("optim.beta2", optim.beta2),
        CDETR_REAL("optim.eps", optim.eps),
        CDETR_REAL("optim.grad_clip", optim.grad_clip),
        CDETR_REAL("optim.lr_decay", optim.lr_decay),
        CDETR_SIZE("schedule.epochs", epochs),
        CDETR_SIZE("schedule.decay_epoch", decay_epoch),
        CDETR_SIZE("schedule.batch_size", batch_size),
        CDETR_U64("schedule.seed", seed),
        CDETR_SIZE("schedule.eval_every", eval_every),
        CDETR_TEXT("data.source", data.source),
        CDETR_U64("data.data_seed", data.data_seed),
        CDETR_SIZE("data.train_per_style", data.train_per_style),
        CDETR_SIZE("data.eval_per_style", data.eval_per_style),
        CDETR_TEXT("data.train_annotations", data.train_annotations),
        CDETR_TEXT("data.train_images", data.train_images),
        CDETR_TEXT("data.eval_annotations", data.eval_annotations),
        CDETR_TEXT("data.eval_images", data.eval_images),
        Binding{"eval.fusion", [](const TrainConfig& c) { return to_string(c.fusion); },
                [](TrainConfig& c, const std::string& v) { c.fusion = parse_fusion_mode(v); }},
        CDETR_SIZE("eval.top_k", top_k),
        CDETR_SIZE("eval.sparsify_k", sparsify_k),
    };
    return table;
}

#undef CDETR_SIZE
#undef CDETR_U64
#undef CDETR_REAL
#undef CDETR_TEXT

const Binding& resolve(const std::string& key) {
    const Binding* match = nullptr;
    for (const Binding& b : bindings()) {
        if (b.key == key) return b;
        const auto dot = b.key.find('.');
        if (b.key.substr(dot + 1) == key) {
            if (match) config_fail("config key '" + key + "' is ambiguous; use section.key");
            match = &b;
        }
    }
    if (!match) config_fail("unknown config key '" + key + "'");
    return *match;
}

}  // namespace

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    if (epochs < 1) config_fail("epochs must be >= 1");
    if (decay_epoch > epochs) config_fail("decay_epoch must not exceed epochs");
    if (batch_size < 1) config_fail("batch_size must be >= 1");
    if (!(optim.lr > 0.0) || !(optim.lr_encoder >= 0.0)) config_fail("learning rates must be positive");
    if (!(optim.weight_decay >= 0.0)) config_fail("weight_decay must be >= 0");
    if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) config_fail("betas must lie in [0, 1)");
    if (!(optim.grad_clip >= 0.0)) config_fail("grad_clip must be >= 0");
    if (data.source != "synthetic" && data.source != "coco") config_fail("data.source must be synthetic or coco");
    if (data.source == "synthetic" && model.num_classes != 3) config_fail("synthetic data has 3 classes; set model.num_classes = 3");
    if (top_k < 1 || sparsify_k < 1) config_fail("top_k and sparsify_k must be >= 1");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_entries() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const Binding& b : bindings()) out.emplace_back(b.key, b.get(*this));
    return out;
}

void TrainConfig::apply(const std::map<std::string, std::string>& entries) {
    for (const auto& [key, value] : entries) resolve(key).set(*this, value);
}

std::map<std::string, std::string> read_config_entries(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::io, "config file not found: " + path.string());
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw Error(ErrorCode::parse, "config " + path.string() + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    std::map<std::string, std::string> out;
    for (const auto& [section, node] : tree) {
        if (node.empty()) {
            out[section] = node.data();
            continue;
        }
        for (const auto& [key, leaf] : node) out[section + "." + key] = leaf.data();
    }
    return out;
}

void write_config(const TrainConfig& cfg, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    std::string section;
    for (const auto& [key, value] : cfg.to_entries()) {
        const auto dot = key.find('.');
        if (key.substr(0, dot) != section) {
            section = key.substr(0, dot);
            out << (out.tellp() > 0 ? "\n" : "") << '[' << section << "]\n";
        }
        out << key.substr(dot + 1) << " = " << value << '\n';
    }
}

std::filesystem::path output_root() {
    const char* env = std::getenv("CASCADE_DETR_OUT");
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

}  // namespace cdetr
