#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "cascade_detr/data.hpp"

using namespace cdetr;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cdetr_test_" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
}

}  // namespace

TEST_CASE("synthetic generation is deterministic") {
    SynthConfig cfg;
    cfg.style = SynthStyle::textured;
    const Dataset a = generate_synthetic(cfg, 6);
    const Dataset b = generate_synthetic(cfg, 6);
    for (std::size_t i = 0; i < 6; ++i) {
        CHECK(a.images[i].image == b.images[i].image);
        CHECK(a.images[i].ground_truth.boxes == b.images[i].ground_truth.boxes);
    }
    // Prefix-stable: image 0 does not depend on how many follow it.
    CHECK(generate_synthetic(cfg, 1).images[0].image == a.images[0].image);
    cfg.seed = 1;
    CHECK_FALSE(generate_synthetic(cfg, 1).images[0].image == a.images[0].image);
}

TEST_CASE("object count honors the configured range") {
    SynthConfig cfg;
    cfg.min_objects = cfg.max_objects = 1;
    for (const Dataset& d : {generate_synthetic(cfg, 30)})
        for (const auto& img : d.images) CHECK(img.ground_truth.size() == 1);
    cfg.min_objects = 2;
    cfg.max_objects = 4;
    for (const auto& img : generate_synthetic(cfg, 40).images) {
        CHECK(img.ground_truth.size() >= 2);
        CHECK(img.ground_truth.size() <= 4);
    }
}

TEST_CASE("ground truth boxes are the tight bounds of each rendered mask") {
    for (SynthStyle style : all_synth_styles()) {
        SynthConfig cfg;
        cfg.style = style;
        cfg.seed = 7;
        const Dataset ds = generate_synthetic(cfg, 25);
        ds.validate();
        for (const auto& img : ds.images) {
            REQUIRE(img.objects.size() == img.ground_truth.size());
            for (std::size_t k = 0; k < img.objects.size(); ++k) {
                const auto mask = render_object_mask(img.objects[k], 64, 64);
                // Independent scan: first and last occupied row and column.
                long top = -1, bottom = -1, left = 64, right = -1;
                for (long y = 0; y < 64; ++y) {
                    bool row = false;
                    for (long x = 0; x < 64; ++x) {
                        if (!mask[static_cast<std::size_t>(y * 64 + x)]) continue;
                        row = true;
                        left = std::min(left, x);
                        right = std::max(right, x);
                    }
                    if (row && top < 0) top = y;
                    if (row) bottom = y;
                }
                const Corners c = to_corners(img.ground_truth.boxes[k]);
                CHECK(c.x1 * 64 == doctest::Approx(left).epsilon(1e-12));
                CHECK(c.x2 * 64 == doctest::Approx(right + 1).epsilon(1e-12));
                CHECK(c.y1 * 64 == doctest::Approx(top).epsilon(1e-12));
                CHECK(c.y2 * 64 == doctest::Approx(bottom + 1).epsilon(1e-12));
                CHECK(img.ground_truth.labels[k] == static_cast<std::size_t>(img.objects[k].kind));
            }
        }
    }
}

TEST_CASE("benchmark has one dataset per style with distinct seeds per split") {
    const auto train = synthetic_benchmark(3, 4, 64, "train");
    const auto eval = synthetic_benchmark(3, 4, 64, "eval");
    REQUIRE(train.size() == 4);
    CHECK(train[2].id == "synth-inverted");
    CHECK_FALSE(train[0].images[0].image == eval[0].images[0].image);
    CHECK_THROWS_AS(parse_synth_style("noir"), Error);
    SynthConfig bad;
    bad.image_size = 60;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("manifest round-trips the generator config") {
    TempDir tmp("manifest");
    SynthConfig cfg;
    cfg.seed = 99;
    cfg.style = SynthStyle::cluttered;
    cfg.noise = 0.01;
    write_synth_manifest(tmp.path / "m.json", cfg, 12, "demo");
    const SynthManifest m = read_synth_manifest(tmp.path / "m.json");
    CHECK(m.n_images == 12);
    CHECK(m.dataset_id == "demo");
    CHECK(generate_synthetic(m.config, 2).images[1].image == generate_synthetic(cfg, 2).images[1].image);
}

TEST_CASE("COCO loading converts, remaps and warns") {
    TempDir tmp("coco");
    Image img(200, 100, 3, 0.5);
    write_ppm(img, tmp.path / "a.ppm");
    write_file(tmp.path / "ann.json", R"({
      "images": [{"id": 1, "file_name": "a.ppm", "width": 100, "height": 200},
                 {"id": 2, "file_name": "missing.ppm", "width": 100, "height": 200}],
      "annotations": [{"id": 1, "image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40]},
                      {"id": 2, "image_id": 1, "category_id": 3, "bbox": [0, 0, 50, 50], "iscrowd": 1},
                      {"id": 3, "image_id": 1, "category_id": 3, "bbox": [5, 5, 0, 10]}],
      "categories": [{"id": 7, "name": "b"}, {"id": 3, "name": "a"}]
    })");
    std::vector<std::string> warnings;
    const Dataset ds = load_coco(tmp.path / "ann.json", tmp.path, {}, &warnings);
    REQUIRE(ds.images.size() == 1);
    CHECK(ds.category_ids == std::vector<long>{3, 7});
    CHECK(ds.class_names == std::vector<std::string>{"a", "b"});
    const GroundTruth& gt = ds.images[0].ground_truth;
    REQUIRE(gt.size() == 1);
    CHECK(gt.labels[0] == 1);
    CHECK(gt.boxes[0].cx == doctest::Approx(0.25));
    CHECK(gt.boxes[0].cy == doctest::Approx(0.20));
    CHECK(gt.boxes[0].w == doctest::Approx(0.30));
    CHECK(gt.boxes[0].h == doctest::Approx(0.20));
    CHECK(warnings.size() == 3);  // missing image, degenerate box, crowd

    CocoLoadOptions strict;
    strict.strict = true;
    CHECK_THROWS_AS(load_coco(tmp.path / "ann.json", tmp.path, strict), Error);

    write_file(tmp.path / "empty.json", R"({"images": [{"id": "x", "file_name": "a.ppm", "width": 100, "height": 200}],
                                          "annotations": [], "categories": []})");
    const Dataset empty = load_coco(tmp.path / "empty.json", tmp.path);
    CHECK(empty.images.size() == 1);
    CHECK(empty.images[0].ground_truth.empty());
}

TEST_CASE("malformed JSON reports the byte offset") {
    TempDir tmp("bad");
    write_file(tmp.path / "bad.json", R"({"images": [1, 2,, 3]})");
    try {
        load_coco(tmp.path / "bad.json", tmp.path);
        FAIL("expected a parse error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::parse);
        CHECK(std::string(e.what()).find("byte 18") != std::string::npos);
    }
    CHECK_THROWS_AS(load_coco(tmp.path / "none.json", tmp.path), Error);
}

TEST_CASE("synthetic datasets survive a COCO write and reload") {
    TempDir tmp("roundtrip");
    SynthConfig cfg;
    cfg.noise = 0.0;
    const Dataset ds = generate_synthetic(cfg, 3);
    write_coco(ds, tmp.path / "ann.json", tmp.path / "images");
    const Dataset back = load_coco(tmp.path / "ann.json", tmp.path / "images");
    REQUIRE(back.images.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(back.images[i].ground_truth.size() == ds.images[i].ground_truth.size());
        for (std::size_t g = 0; g < ds.images[i].ground_truth.size(); ++g) {
            CHECK(std::fabs(back.images[i].ground_truth.boxes[g].cx - ds.images[i].ground_truth.boxes[g].cx) < 1e-12);
            CHECK(back.images[i].ground_truth.labels[g] == ds.images[i].ground_truth.labels[g]);
        }
        for (std::size_t p = 0; p < ds.images[i].image.pixels.size(); ++p) {
            CHECK(std::fabs(back.images[i].image.pixels[p] - ds.images[i].image.pixels[p]) <= 0.5 / 255 + 1e-12);
        }
    }
}

TEST_CASE("prediction export round-trips") {
    TempDir tmp("preds");
    EvalRecord empty;
    export_predictions(empty, tmp.path / "empty.json");
    std::ifstream in(tmp.path / "empty.json");
    std::string text;
    std::getline(in, text);
    CHECK(text == "[]");

    EvalImage img;
    img.image_id = "42";
    img.width = 64;
    img.height = 48;
    ScoredDetection a;
    a.box = Box{0.3123456789, 0.4, 0.2, 0.1};
    a.class_id = 2;
    a.score = 0.123456789012;
    ScoredDetection b = a;
    b.score = 0.123456789013;
    b.class_id = 0;
    img.detections = {a, b};
    export_predictions({img}, tmp.path / "p.json", {5, 6, 9});
    EvalImage bare = img;
    bare.detections.clear();
    const EvalRecord back = load_predictions(tmp.path / "p.json", {bare}, {5, 6, 9});
    REQUIRE(back[0].detections.size() == 2);
    CHECK(std::fabs(back[0].detections[0].box.cx - a.box.cx) < 1e-6);
    CHECK(std::fabs(back[0].detections[0].box.h - a.box.h) < 1e-6);
    CHECK(back[0].detections[0].class_id == 2);
    CHECK(back[0].detections[1].score > back[0].detections[0].score);
    CHECK_THROWS_AS(load_predictions(tmp.path / "p.json", {}, {5, 6, 9}), Error);
}
