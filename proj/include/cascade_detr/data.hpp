#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cascade_detr/assignment.hpp"
#include "cascade_detr/evaluation.hpp"
#include "cascade_detr/image.hpp"

namespace cdetr {

enum class ShapeKind { rect, ellipse, triangle };

// Pixel-space description of one rendered object. Coverage is tested at pixel
// centers (x + 0.5, y + 0.5).
struct ObjectSpec {
    ShapeKind kind = ShapeKind::rect;
    double cx = 0.0;
    double cy = 0.0;
    double rx = 1.0;  // half extents
    double ry = 1.0;
    double color[3] = {1.0, 1.0, 1.0};

    bool covers(double px, double py) const;
};

struct DatasetImage {
    std::string id;
    Image image;
    GroundTruth ground_truth;
    std::vector<ObjectSpec> objects;  // synthetic scenes only, parallel to ground_truth
};

struct Dataset {
    std::string id;
    std::vector<std::string> class_names;
    std::vector<long> category_ids;  // source category id of each contiguous class
    std::vector<DatasetImage> images;

    std::size_t num_classes() const { return class_names.size(); }
    // Unique image ids, label ranges, valid boxes.
    void validate() const;
};

// ---- synthetic scenes ------------------------------------------------------

enum class SynthStyle { plain, textured, inverted, cluttered };

std::string to_string(SynthStyle style);
SynthStyle parse_synth_style(const std::string& text);
const std::vector<SynthStyle>& all_synth_styles();
const std::vector<std::string>& synth_class_names();  // rect, ellipse, triangle

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t image_size = 64;
    std::size_t min_objects = 1;
    std::size_t max_objects = 4;
    double min_extent = 0.15;  // object side as a fraction of the image
    double max_extent = 0.45;
    double noise = 0.03;       // per-pixel Gaussian sigma
    SynthStyle style = SynthStyle::plain;

    void validate() const;
};

// Binary coverage mask of a single object, row-major height x width.
std::vector<std::uint8_t> render_object_mask(const ObjectSpec& obj, std::size_t height, std::size_t width);

// Deterministic in (cfg, n_images). Boxes are the tight pixel bounds of each
// object's own mask, so occluded objects keep their full extent.
Dataset generate_synthetic(const SynthConfig& cfg, std::size_t n_images);

// One dataset per style; each style derives its seed from `seed`.
std::vector<Dataset> synthetic_benchmark(std::uint64_t seed, std::size_t images_per_style, std::size_t image_size = 64,
                                         const std::string& split = "train");

void write_synth_manifest(const std::filesystem::path& path, const SynthConfig& cfg, std::size_t n_images,
                          const std::string& dataset_id);
struct SynthManifest {
    SynthConfig config;
    std::size_t n_images = 0;
    std::string dataset_id;
};
SynthManifest read_synth_manifest(const std::filesystem::path& path);

// ---- COCO interop ----------------------------------------------------------

struct CocoLoadOptions {
    bool strict = false;       // missing images and bad boxes become errors
    bool load_pixels = true;
};

// Netpbm image files only. Warnings are appended for skipped images, crowd
// annotations and unusable boxes.
Dataset load_coco(const std::filesystem::path& annotations, const std::filesystem::path& image_root,
                  const CocoLoadOptions& options = {}, std::vector<std::string>* warnings = nullptr);

// Writes the images as PPM files under image_dir and a COCO annotation file.
void write_coco(const Dataset& dataset, const std::filesystem::path& annotations, const std::filesystem::path& image_dir);

// COCO results: [{image_id, category_id, bbox [x, y, w, h] in pixels, score}].
void export_predictions(const EvalRecord& records, const std::filesystem::path& path,
                        const std::vector<long>& category_ids = {});

// Fills detections into copies of `reference` images matched by image_id.
EvalRecord load_predictions(const std::filesystem::path& path, const EvalRecord& reference,
                            const std::vector<long>& category_ids = {});

}  // namespace cdetr
