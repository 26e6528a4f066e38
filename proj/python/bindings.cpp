#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cascade_detr/checkpoint.hpp"
#include "cascade_detr/config.hpp"
#include "cascade_detr/data.hpp"
#include "cascade_detr/evaluation.hpp"
#include "cascade_detr/geometry.hpp"
#include "cascade_detr/scoring.hpp"
#include "cascade_detr/training.hpp"

namespace py = pybind11;
using namespace cdetr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Image image_from_numpy(const Array& a) {
    if (a.ndim() != 3) throw ShapeError("image must be an H x W x C array");
    Image img(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
              static_cast<std::size_t>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
    return img;
}

Array image_to_numpy(const Image& img) {
    Array out({img.height, img.width, img.channels});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
}

py::dict summary_dict(const CocoSummary& s) {
    py::dict d;
    d["ap"] = s.ap;
    d["ap50"] = s.ap50;
    d["ap75"] = s.ap75;
    d["ar100"] = s.ar100;
    return d;
}

py::dict report_dict(const EvalReport& r) {
    py::dict d;
    d["fusion"] = to_string(r.fusion);
    py::dict per;
    for (const DatasetMetrics& m : r.per_dataset) per[py::str(m.dataset)] = summary_dict(m.summary);
    d["per_dataset"] = per;
    d["pooled"] = summary_dict(r.pooled);
    d["uniap"] = r.uniap;
    return d;
}

TrainConfig config_from(const std::optional<std::filesystem::path>& path, const std::map<std::string, std::string>& overrides) {
    TrainConfig cfg;
    if (path) cfg.apply(read_config_entries(*path));
    cfg.apply(overrides);
    cfg.validate();
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_cascade_detr, m) {
    m.doc() = "Cascade-DETR core: geometry, matching, scoring, evaluation and the detector";

    static py::exception<Error> error(m, "CascadeDetrError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            PyErr_SetString(error.ptr(), (std::string(error_code_name(e.code())) + ": " + e.what()).c_str());
        }
    });

    py::class_<Box>(m, "Box")
        .def(py::init<double, double, double, double>(), py::arg("cx"), py::arg("cy"), py::arg("w"), py::arg("h"))
        .def_readwrite("cx", &Box::cx)
        .def_readwrite("cy", &Box::cy)
        .def_readwrite("w", &Box::w)
        .def_readwrite("h", &Box::h)
        .def(py::self == py::self)
        .def("__repr__", [](const Box& b) {
            return "Box(" + std::to_string(b.cx) + ", " + std::to_string(b.cy) + ", " + std::to_string(b.w) + ", " +
                   std::to_string(b.h) + ")";
        });

    m.def("iou", &iou, py::arg("a"), py::arg("b"));
    m.def("giou", &giou, py::arg("a"), py::arg("b"));
    m.def(
        "rasterize_box",
        [](const Box& b, std::size_t height, std::size_t width) {
            std::vector<std::pair<std::size_t, std::size_t>> out;
            for (const Cell& c : rasterize_box(b, GridShape{height, width})) out.emplace_back(c.row, c.col);
            return out;
        },
        py::arg("box"), py::arg("height"), py::arg("width"), "Grid cells (row, col) covered by a normalized box.");

    m.def(
        "hungarian",
        [](const Array& cost) {
            if (cost.ndim() != 2) throw ShapeError("cost must be a 2-D array");
            CostMatrix c(static_cast<std::size_t>(cost.shape(0)), static_cast<std::size_t>(cost.shape(1)));
            std::copy(cost.data(), cost.data() + cost.size(), c.values.begin());
            std::vector<std::pair<std::size_t, std::size_t>> out;
            for (const MatchPair& p : hungarian(c)) out.emplace_back(p.query, p.gt);
            return out;
        },
        py::arg("cost"), "Minimum-cost one-to-one matching as (row, col) pairs.");

    m.def(
        "recalibrate",
        [](double p, double iou_pred, const std::string& mode) { return recalibrate(p, iou_pred, parse_fusion_mode(mode)); },
        py::arg("p_obj"), py::arg("iou_pred"), py::arg("mode") = "product");

    m.def("uniap", &uniap, py::arg("per_dataset"));

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("num_queries", &ModelConfig::num_queries)
        .def_readwrite("embed_dim", &ModelConfig::embed_dim)
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("num_heads", &ModelConfig::num_heads)
        .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("seed", &ModelConfig::seed)
        .def_property(
            "grid", [](const ModelConfig& c) { return std::make_pair(c.grid.height, c.grid.width); },
            [](ModelConfig& c, std::pair<std::size_t, std::size_t> g) { c.grid = GridShape{g.first, g.second}; })
        .def_property(
            "attention_mode", [](const ModelConfig& c) { return to_string(c.attention_mode); },
            [](ModelConfig& c, const std::string& v) { c.attention_mode = parse_attention_mode(v); })
        .def_property_readonly("image_size", [](const ModelConfig& c) { return std::make_pair(c.image_height(), c.image_width()); })
        .def("fields", [](const ModelConfig& c) {
            py::dict d;
            for (const auto& [k, v] : c.fields()) d[py::str(k)] = v;
            return d;
        });

    py::class_<CascadeDetr>(m, "CascadeDetr")
        .def(py::init<ModelConfig>(), py::arg("config"))
        .def_property_readonly("config", &CascadeDetr::config)
        .def(
            "forward",
            [](const CascadeDetr& model, const Array& image, bool trace) {
                NoGradGuard no_grad;
                ForwardOptions opts;
                opts.trace_attention = trace;
                const ForwardResult res = model.forward(image_from_numpy(image), opts);
                py::list layers;
                for (const LayerOutput& l : res.layers) {
                    py::dict d;
                    d["boxes"] = to_numpy(l.boxes);
                    d["class_logits"] = to_numpy(l.class_logits);
                    d["iou_logits"] = to_numpy(l.iou_logits);
                    layers.append(d);
                }
                py::dict out;
                out["layers"] = layers;
                if (trace) {
                    py::list traces;
                    for (const AttentionTrace& t : res.traces) {
                        const std::size_t n = model.config().num_queries, cells = model.config().grid.cells();
                        Array w({t.head_weights.size(), n, cells});
                        double* dst = w.mutable_data();
                        for (const auto& head : t.head_weights) dst = std::copy(head.begin(), head.end(), dst);
                        traces.append(w);
                    }
                    out["attention"] = traces;
                }
                return out;
            },
            py::arg("image"), py::arg("trace_attention") = false,
            "Runs inference on an H x W x 3 array; returns per-layer outputs.")
        .def(
            "detect",
            [](const CascadeDetr& model, const Array& image, const std::string& fusion, std::size_t top_k) {
                NoGradGuard no_grad;
                const ForwardResult res = model.forward(image_from_numpy(image));
                py::list out;
                for (const ScoredDetection& d : rank_detections(res.layers.back(), parse_fusion_mode(fusion), top_k)) {
                    py::dict row;
                    row["box"] = d.box;
                    row["class_id"] = d.class_id;
                    row["score"] = d.score;
                    row["p_obj"] = d.p_obj;
                    row["iou_pred"] = d.iou_pred;
                    out.append(row);
                }
                return out;
            },
            py::arg("image"), py::arg("fusion") = "product", py::arg("top_k") = 0)
        .def("parameter_names", [](const CascadeDetr& model) {
            std::vector<std::string> names;
            for (const Parameter& p : model.parameters()) names.push_back(p.name);
            return names;
        })
        .def("save", [](const CascadeDetr& model, const std::filesystem::path& path) { save_checkpoint(model, path); },
             py::arg("path"));

    m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

    m.def(
        "generate_synthetic",
        [](std::uint64_t seed, std::size_t n, const std::string& style, std::size_t image_size) {
            SynthConfig cfg;
            cfg.seed = seed;
            cfg.style = parse_synth_style(style);
            cfg.image_size = image_size;
            const Dataset ds = generate_synthetic(cfg, n);
            py::list out;
            for (const DatasetImage& img : ds.images) {
                py::dict d;
                d["id"] = img.id;
                d["image"] = image_to_numpy(img.image);
                d["boxes"] = img.ground_truth.boxes;
                d["labels"] = img.ground_truth.labels;
                out.append(d);
            }
            return out;
        },
        py::arg("seed"), py::arg("n_images"), py::arg("style") = "plain", py::arg("image_size") = 64);

    m.def(
        "evaluate_checkpoint",
        [](const std::filesystem::path& checkpoint, std::optional<std::filesystem::path> config,
           std::map<std::string, std::string> overrides, std::optional<std::string> fusion) {
            const TrainConfig cfg = config_from(config, overrides);
            const CascadeDetr model = load_checkpoint(checkpoint);
            const FusionMode mode = fusion ? parse_fusion_mode(*fusion) : cfg.fusion;
            return report_dict(evaluate(model, load_data(cfg).held_out, mode, cfg.top_k));
        },
        py::arg("checkpoint"), py::arg("config") = py::none(), py::arg("overrides") = std::map<std::string, std::string>{},
        py::arg("fusion") = py::none(), "Per-dataset COCO metrics (fractions) and UniAP on the held-out split.");

    m.def(
        "train",
        [](const std::filesystem::path& out_dir, std::optional<std::filesystem::path> config,
           std::map<std::string, std::string> overrides) {
            const TrainConfig cfg = config_from(config, overrides);
            TrainResult r = [&] {
                py::gil_scoped_release release;
                return train(cfg, load_data(cfg), out_dir);
            }();
            py::dict d = report_dict(r.final_report);
            d["checkpoint"] = r.paths.checkpoint;
            d["log"] = r.paths.log;
            d["epoch_losses"] = r.epoch_losses;
            return d;
        },
        py::arg("out_dir"), py::arg("config") = py::none(), py::arg("overrides") = std::map<std::string, std::string>{},
        "Trains with the given config file and overrides; returns the final report.");
}
