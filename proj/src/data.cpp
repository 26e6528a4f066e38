#include "cascade_detr/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

namespace cdetr {

using json = nlohmann::json;

bool ObjectSpec::covers(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    switch (kind) {
        case ShapeKind::rect: return std::fabs(dx) <= rx && std::fabs(dy) <= ry;
        case ShapeKind::ellipse: return (dx / rx) * (dx / rx) + (dy / ry) * (dy / ry) <= 1.0;
        case ShapeKind::triangle: {
            // Apex at the top, base along the bottom edge.
            const double depth = py - (cy - ry);
            if (depth < 0.0 || depth > 2.0 * ry) return false;
            return std::fabs(dx) <= rx * depth / (2.0 * ry);
        }
    }
    return false;
}

void Dataset::validate() const {
    std::set<std::string> seen;
    for (const DatasetImage& img : images) {
        if (!seen.insert(img.id).second) throw PreconditionError("dataset " + id + ": duplicate image id '" + img.id + "'");
        img.ground_truth.validate(num_classes());
    }
}

// ---- synthetic scenes --------------------------------------------------------

std::string to_string(SynthStyle style) {
    switch (style) {
        case SynthStyle::textured: return "textured";
        case SynthStyle::inverted: return "inverted";
        case SynthStyle::cluttered: return "cluttered";
        case SynthStyle::plain: break;
    }
    return "plain";
}

SynthStyle parse_synth_style(const std::string& text) {
    for (SynthStyle s : all_synth_styles())
        if (to_string(s) == text) return s;
    throw Error(ErrorCode::config, "unknown synthetic style '" + text + "' (plain, textured, inverted, cluttered)");
}

const std::vector<SynthStyle>& all_synth_styles() {
    static const std::vector<SynthStyle> styles{SynthStyle::plain, SynthStyle::textured, SynthStyle::inverted,
                                                SynthStyle::cluttered};
    return styles;
}

const std::vector<std::string>& synth_class_names() {
    static const std::vector<std::string> names{"rect", "ellipse", "triangle"};
    return names;
}

void SynthConfig::validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::config, "synthetic config: " + m); };
    if (image_size < 8 || image_size % 8 != 0) fail("image_size must be a positive multiple of 8");
    if (min_objects > max_objects) fail("min_objects must not exceed max_objects");
    if (!(min_extent > 0.0 && min_extent <= max_extent && max_extent <= 1.0)) fail("need 0 < min_extent <= max_extent <= 1");
    if (min_extent * static_cast<double>(image_size) < 4.0) fail("min_extent too small for the image size");
    if (!(noise >= 0.0)) fail("noise must be >= 0");
}

std::vector<std::uint8_t> render_object_mask(const ObjectSpec& obj, std::size_t height, std::size_t width) {
    std::vector<std::uint8_t> mask(height * width, 0);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            mask[y * width + x] = obj.covers(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5) ? 1 : 0;
    return mask;
}

namespace {

Box tight_box(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
    std::size_t x0 = width, y0 = height, x1 = 0, y1 = 0;
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            if (mask[y * width + x]) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x + 1);
                y1 = std::max(y1, y + 1);
            }
    if (x0 >= x1 || y0 >= y1) throw PreconditionError("object mask is empty");
    const double w = static_cast<double>(width), h = static_cast<double>(height);
    return from_corners(Corners{static_cast<double>(x0) / w, static_cast<double>(y0) / h, static_cast<double>(x1) / w,
                                static_cast<double>(y1) / h});
}

void paint_background(Image& img, SynthStyle style, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool bright = style == SynthStyle::inverted;
    double base[3];
    const double level = bright ? 0.7 + 0.2 * u(rng) : 0.1 + 0.25 * u(rng);
    for (double& b : base) b = std::clamp(level + 0.08 * (u(rng) - 0.5), 0.0, 1.0);
    const double freq = 0.15 + 0.5 * u(rng);
    const double angle = std::numbers::pi * u(rng);
    const double phase = 2.0 * std::numbers::pi * u(rng);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            double t = 0.0;
            if (style == SynthStyle::textured) {
                const double s = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
                t = 0.12 * std::sin(freq * s + phase) + (((x / 4) + (y / 4)) % 2 == 0 ? 0.05 : -0.05);
            }
            for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = std::clamp(base[c] + t, 0.0, 1.0);
        }
    }
}

// Thin strokes and dots that are not members of any class.
void paint_clutter(Image& img, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int strokes = 6 + static_cast<int>(u(rng) * 7);
    const double s = static_cast<double>(img.width);
    for (int i = 0; i < strokes; ++i) {
        double color[3];
        for (double& c : color) c = 0.4 + 0.6 * u(rng);
        const double x0 = u(rng) * s, y0 = u(rng) * s;
        const double len = 4.0 + 8.0 * u(rng), ang = 2.0 * std::numbers::pi * u(rng);
        for (double t = 0.0; t <= len; t += 0.5) {
            const auto x = static_cast<long>(x0 + t * std::cos(ang)), y = static_cast<long>(y0 + t * std::sin(ang));
            if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) continue;
            for (std::size_t c = 0; c < 3; ++c) img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = color[c];
        }
    }
}

}  // namespace

Dataset generate_synthetic(const SynthConfig& cfg, std::size_t n_images) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Dataset ds;
    ds.id = "synth-" + to_string(cfg.style);
    ds.class_names = synth_class_names();
    ds.category_ids = {1, 2, 3};
    const std::size_t size = cfg.image_size;
    const double s = static_cast<double>(size);
    for (std::size_t i = 0; i < n_images; ++i) {
        DatasetImage item;
        item.id = std::to_string(i);
        item.image = Image(size, size, 3);
        paint_background(item.image, cfg.style, rng);
        if (cfg.style == SynthStyle::cluttered) paint_clutter(item.image, rng);

        const std::size_t count =
            cfg.min_objects + static_cast<std::size_t>(u(rng) * static_cast<double>(cfg.max_objects - cfg.min_objects + 1));
        const std::size_t target = std::min(count, cfg.max_objects);
        for (int attempt = 0; item.objects.size() < target && attempt < 50; ++attempt) {
            ObjectSpec obj;
            obj.kind = static_cast<ShapeKind>(std::min<std::size_t>(2, static_cast<std::size_t>(u(rng) * 3.0)));
            const double span = cfg.max_extent - cfg.min_extent;
            obj.rx = 0.5 * s * (cfg.min_extent + span * u(rng));
            obj.ry = 0.5 * s * (cfg.min_extent + span * u(rng));
            obj.cx = obj.rx + (s - 2.0 * obj.rx) * u(rng);
            obj.cy = obj.ry + (s - 2.0 * obj.ry) * u(rng);
            const bool dark = cfg.style == SynthStyle::inverted;
            for (double& c : obj.color) c = dark ? 0.3 * u(rng) : 0.45 + 0.55 * u(rng);
            obj.color[static_cast<std::size_t>(u(rng) * 3.0) % 3] = dark ? 0.0 : 1.0;

            const auto mask = render_object_mask(obj, size, size);
            const Box box = tight_box(mask, size, size);
            bool crowded = false;
            for (const Box& other : item.ground_truth.boxes) crowded = crowded || iou(box, other) > 0.4;
            if (crowded) continue;
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x)
                    if (mask[y * size + x])
                        for (std::size_t c = 0; c < 3; ++c) item.image.at(y, x, c) = obj.color[c];
            item.objects.push_back(obj);
            item.ground_truth.boxes.push_back(box);
            item.ground_truth.labels.push_back(static_cast<std::size_t>(obj.kind));
        }
        if (cfg.noise > 0.0) {
            std::normal_distribution<double> noise(0.0, cfg.noise);
            for (double& p : item.image.pixels) p = std::clamp(p + noise(rng), 0.0, 1.0);
        }
        ds.images.push_back(std::move(item));
    }
    return ds;
}

std::vector<Dataset> synthetic_benchmark(std::uint64_t seed, std::size_t images_per_style, std::size_t image_size,
                                         const std::string& split) {
    std::vector<Dataset> out;
    std::uint32_t split_salt = 2166136261u;  // FNV-1a, stable across platforms
    for (unsigned char ch : split) split_salt = (split_salt ^ ch) * 16777619u;
    for (std::size_t k = 0; k < all_synth_styles().size(); ++k) {
        SynthConfig cfg;
        cfg.style = all_synth_styles()[k];
        cfg.image_size = image_size;
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(k), split_salt};
        std::uint32_t words[2];
        seq.generate(words, words + 2);
        cfg.seed = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
        out.push_back(generate_synthetic(cfg, images_per_style));
    }
    return out;
}

namespace {

json synth_config_json(const SynthConfig& c) {
    return json{{"seed", c.seed},           {"image_size", c.image_size}, {"min_objects", c.min_objects},
                {"max_objects", c.max_objects}, {"min_extent", c.min_extent}, {"max_extent", c.max_extent},
                {"noise", c.noise},         {"style", to_string(c.style)}};
}

json parse_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return json::parse(buf.str());
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::parse, path.string() + ": malformed JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::io, "failed writing " + path.string());
}

template <typename T>
T field(const json& j, const char* key, const std::filesystem::path& path) {
    if (!j.contains(key)) throw Error(ErrorCode::parse, path.string() + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorCode::parse, path.string() + ": field '" + key + "' has the wrong type");
    }
}

std::string id_string(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    throw Error(ErrorCode::parse, "image id must be an integer or string");
}

json id_json(const std::string& id) {
    if (!id.empty() && id.size() < 18 && std::all_of(id.begin(), id.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        return json(std::stoll(id));
    }
    return json(id);
}

}  // namespace

void write_synth_manifest(const std::filesystem::path& path, const SynthConfig& cfg, std::size_t n_images,
                          const std::string& dataset_id) {
    const json j{{"format", "cascade-detr-synthetic"}, {"version", 1}, {"dataset_id", dataset_id},
                 {"n_images", n_images},               {"config", synth_config_json(cfg)}};
    write_text(path, j.dump(2) + "\n");
}

SynthManifest read_synth_manifest(const std::filesystem::path& path) {
    const json j = parse_json_file(path);
    if (field<std::string>(j, "format", path) != "cascade-detr-synthetic") {
        throw Error(ErrorCode::parse, path.string() + ": not a synthetic dataset manifest");
    }
    const json& c = j.at("config");
    SynthManifest m;
    m.dataset_id = field<std::string>(j, "dataset_id", path);
    m.n_images = field<std::size_t>(j, "n_images", path);
    m.config.seed = field<std::uint64_t>(c, "seed", path);
    m.config.image_size = field<std::size_t>(c, "image_size", path);
    m.config.min_objects = field<std::size_t>(c, "min_objects", path);
    m.config.max_objects = field<std::size_t>(c, "max_objects", path);
    m.config.min_extent = field<double>(c, "min_extent", path);
    m.config.max_extent = field<double>(c, "max_extent", path);
    m.config.noise = field<double>(c, "noise", path);
    m.config.style = parse_synth_style(field<std::string>(c, "style", path));
    m.config.validate();
    return m;
}

// ---- COCO interop ------------------------------------------------------------

Dataset load_coco(const std::filesystem::path& annotations, const std::filesystem::path& image_root,
                  const CocoLoadOptions& options, std::vector<std::string>* warnings) {
    const json j = parse_json_file(annotations);
    auto warn = [&](const std::string& msg) {
        if (options.strict) throw Error(ErrorCode::parse, annotations.string() + ": " + msg);
        if (warnings) warnings->push_back(msg);
    };
    for (const char* key : {"images", "annotations", "categories"}) {
        if (!j.contains(key) || !j.at(key).is_array()) {
            throw Error(ErrorCode::parse, annotations.string() + ": expected an array field '" + key + "'");
        }
    }

    Dataset ds;
    ds.id = annotations.stem().string();
    std::vector<std::pair<long, std::string>> cats;
    for (const json& c : j.at("categories")) {
        cats.emplace_back(field<long>(c, "id", annotations), c.value("name", std::string()));
    }
    std::sort(cats.begin(), cats.end());
    std::map<long, std::size_t> remap;
    for (const auto& [cid, name] : cats) {
        if (!remap.emplace(cid, ds.class_names.size()).second) {
            throw Error(ErrorCode::parse, annotations.string() + ": duplicate category id " + std::to_string(cid));
        }
        ds.category_ids.push_back(cid);
        ds.class_names.push_back(name.empty() ? std::to_string(cid) : name);
    }

    std::map<std::string, std::size_t> index;
    std::map<std::string, std::pair<double, double>> extent;
    for (const json& im : j.at("images")) {
        const std::string id = id_string(im.at("id"));
        const auto width = field<double>(im, "width", annotations);
        const auto height = field<double>(im, "height", annotations);
        if (!(width > 0 && height > 0)) throw Error(ErrorCode::parse, annotations.string() + ": image " + id + " has no extent");
        DatasetImage item;
        item.id = id;
        if (options.load_pixels) {
            const std::filesystem::path file = image_root / field<std::string>(im, "file_name", annotations);
            if (!std::filesystem::exists(file)) {
                warn("image " + id + " not found at " + file.string() + ", skipped");
                continue;
            }
            item.image = read_netpbm(file);
            if (static_cast<double>(item.image.width) != width || static_cast<double>(item.image.height) != height) {
                warn("image " + id + " is " + std::to_string(item.image.width) + "x" + std::to_string(item.image.height) +
                     " but annotated as " + std::to_string(static_cast<long>(width)) + "x" +
                     std::to_string(static_cast<long>(height)));
            }
        }
        if (index.count(id)) throw Error(ErrorCode::parse, annotations.string() + ": duplicate image id " + id);
        index[id] = ds.images.size();
        extent[id] = {width, height};
        ds.images.push_back(std::move(item));
    }

    std::size_t crowd = 0;
    for (const json& a : j.at("annotations")) {
        const std::string image_id = id_string(a.at("image_id"));
        auto it = index.find(image_id);
        if (it == index.end()) continue;
        if (a.value("iscrowd", 0) != 0) {
            ++crowd;
            continue;
        }
        const long cid = field<long>(a, "category_id", annotations);
        auto cat = remap.find(cid);
        if (cat == remap.end()) throw Error(ErrorCode::parse, annotations.string() + ": unknown category id " + std::to_string(cid));
        const auto bbox = field<std::vector<double>>(a, "bbox", annotations);
        if (bbox.size() != 4) throw Error(ErrorCode::parse, annotations.string() + ": bbox must have 4 numbers");
        const auto [w, h] = extent[image_id];
        const Box box{(bbox[0] + bbox[2] / 2.0) / w, (bbox[1] + bbox[3] / 2.0) / h, bbox[2] / w, bbox[3] / h};
        if (!is_valid_box(box)) {
            warn("annotation on image " + image_id + " has a degenerate bbox, skipped");
            continue;
        }
        ds.images[it->second].ground_truth.boxes.push_back(box);
        ds.images[it->second].ground_truth.labels.push_back(cat->second);
    }
    if (crowd > 0 && warnings) warnings->push_back(std::to_string(crowd) + " crowd annotations dropped");
    ds.validate();
    return ds;
}

void write_coco(const Dataset& dataset, const std::filesystem::path& annotations, const std::filesystem::path& image_dir) {
    std::filesystem::create_directories(image_dir);
    json images = json::array(), anns = json::array(), cats = json::array();
    for (std::size_t c = 0; c < dataset.class_names.size(); ++c) {
        const long cid = c < dataset.category_ids.size() ? dataset.category_ids[c] : static_cast<long>(c) + 1;
        cats.push_back({{"id", cid}, {"name", dataset.class_names[c]}});
    }
    long ann_id = 1;
    for (const DatasetImage& img : dataset.images) {
        const std::string file = img.id + ".ppm";
        write_ppm(img.image, image_dir / file);
        images.push_back({{"id", id_json(img.id)}, {"file_name", file}, {"width", img.image.width}, {"height", img.image.height}});
        const double w = static_cast<double>(img.image.width), h = static_cast<double>(img.image.height);
        for (std::size_t g = 0; g < img.ground_truth.size(); ++g) {
            const Box& b = img.ground_truth.boxes[g];
            const std::size_t label = img.ground_truth.labels[g];
            const long cid = label < dataset.category_ids.size() ? dataset.category_ids[label] : static_cast<long>(label) + 1;
            anns.push_back({{"id", ann_id++},
                            {"image_id", id_json(img.id)},
                            {"category_id", cid},
                            {"bbox", {(b.cx - b.w / 2) * w, (b.cy - b.h / 2) * h, b.w * w, b.h * h}},
                            {"area", b.w * w * b.h * h},
                            {"iscrowd", 0}});
        }
    }
    const json j{{"info", {{"description", dataset.id}}},
                 {"images", images},
                 {"annotations", anns},
                 {"categories", cats}};
    write_text(annotations, j.dump() + "\n");
}

void export_predictions(const EvalRecord& records, const std::filesystem::path& path, const std::vector<long>& category_ids) {
    json out = json::array();
    for (const EvalImage& img : records) {
        if (!img.detections.empty() && (img.width == 0 || img.height == 0)) {
            throw PreconditionError("export_predictions: image " + img.image_id + " has no pixel extent");
        }
        const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
        for (const ScoredDetection& d : img.detections) {
            const long cid = d.class_id < category_ids.size() ? category_ids[d.class_id] : static_cast<long>(d.class_id) + 1;
            out.push_back({{"image_id", id_json(img.image_id)},
                           {"category_id", cid},
                           {"bbox", {(d.box.cx - d.box.w / 2) * w, (d.box.cy - d.box.h / 2) * h, d.box.w * w, d.box.h * h}},
                           {"score", d.score}});
        }
    }
    write_text(path, out.dump() + "\n");
}

EvalRecord load_predictions(const std::filesystem::path& path, const EvalRecord& reference, const std::vector<long>& category_ids) {
    const json j = parse_json_file(path);
    if (!j.is_array()) throw Error(ErrorCode::parse, path.string() + ": expected a JSON array of detections");
    EvalRecord out = reference;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].detections.clear();
        index[out[i].image_id] = i;
    }
    std::map<long, std::size_t> remap;
    for (std::size_t c = 0; c < category_ids.size(); ++c) remap[category_ids[c]] = c;
    for (const json& d : j) {
        const std::string id = id_string(d.at("image_id"));
        auto it = index.find(id);
        if (it == index.end()) throw Error(ErrorCode::parse, path.string() + ": detection for unknown image " + id);
        EvalImage& img = out[it->second];
        const long cid = field<long>(d, "category_id", path);
        std::size_t cls = 0;
        if (category_ids.empty()) {
            if (cid < 1) throw Error(ErrorCode::parse, path.string() + ": category id must be >= 1");
            cls = static_cast<std::size_t>(cid - 1);
        } else {
            auto c = remap.find(cid);
            if (c == remap.end()) throw Error(ErrorCode::parse, path.string() + ": unknown category id " + std::to_string(cid));
            cls = c->second;
        }
        const auto bbox = field<std::vector<double>>(d, "bbox", path);
        if (bbox.size() != 4) throw Error(ErrorCode::parse, path.string() + ": bbox must have 4 numbers");
        const double w = static_cast<double>(img.width), h = static_cast<double>(img.height);
        ScoredDetection det;
        det.box = Box{(bbox[0] + bbox[2] / 2) / w, (bbox[1] + bbox[3] / 2) / h, bbox[2] / w, bbox[3] / h};
        det.class_id = cls;
        det.score = field<double>(d, "score", path);
        det.query = img.detections.size();
        img.detections.push_back(det);
    }
    return out;
}

}  // namespace cdetr
