#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "doctest.h"

#include <json.hpp>

#include "cascade_detr/checkpoint.hpp"
#include "cascade_detr/optimizer.hpp"
#include "cascade_detr/training.hpp"
#include "support/temp_dir.hpp"

using namespace cdetr;
using cdetr::testing::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small enough for a few seconds of training.
TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.model.num_queries = 6;
    cfg.model.embed_dim = 16;
    cfg.model.num_layers = 2;
    cfg.model.num_heads = 2;
    cfg.model.ffn_dim = 16;
    cfg.model.grid = GridShape{4, 4};
    cfg.epochs = 2;
    cfg.decay_epoch = 1;
    cfg.batch_size = 4;
    cfg.data.train_per_style = 3;
    cfg.data.eval_per_style = 2;
    cfg.optim.lr = 1e-3;
    return cfg;
}

std::vector<Parameter> single_param(std::vector<double> values) {
    std::vector<Parameter> ps;
    const std::size_t n = values.size();
    ps.push_back({"w", Tensor::from({n}, std::move(values), true), false});
    return ps;
}

void set_gradient(Parameter& p, const std::vector<double>& g) { weighted_sum(p.value, g).backward(); }

}  // namespace

TEST_SUITE("config") {
    TEST_CASE("defaults follow the desk-scale schedule") {
        const TrainConfig cfg;
        CHECK(cfg.optim.lr == 1e-4);
        CHECK(cfg.optim.lr_encoder == 1e-5);
        CHECK(cfg.optim.weight_decay == 1e-4);
        CHECK(cfg.epochs == 60);
        CHECK(cfg.decay_epoch == 48);
        CHECK(cfg.batch_size == 8);
        CHECK_NOTHROW(cfg.validate());
    }

    TEST_CASE("ini file round trip and overrides") {
        TempDir tmp("cfg");
        TrainConfig cfg = tiny_train_config();
        cfg.fusion = FusionMode::sum;
        cfg.loss.supervision = IouSupervision::all;
        cfg.model.attention_mode = AttentionMode::global;
        write_config(cfg, tmp / "c.ini");
        TrainConfig back;
        back.apply(read_config_entries(tmp / "c.ini"));
        CHECK(back.to_entries() == cfg.to_entries());

        back.apply({{"epochs", "5"}, {"optim.lr", "0.002"}, {"attention_mode", "cascade"}});
        CHECK(back.epochs == 5);
        CHECK(back.optim.lr == 0.002);
        CHECK(back.model.attention_mode == AttentionMode::cascade);
    }

    TEST_CASE("invalid settings are rejected with config errors") {
        TrainConfig cfg;
        auto code = [&](const std::map<std::string, std::string>& entries) {
            try {
                TrainConfig c = cfg;
                c.apply(entries);
                c.validate();
            } catch (const Error& e) {
                return e.code();
            }
            return ErrorCode::io;
        };
        CHECK(code({{"epochs", "0"}}) == ErrorCode::config);
        CHECK(code({{"decay_epoch", "61"}}) == ErrorCode::config);
        CHECK(code({{"no_such_key", "1"}}) == ErrorCode::config);
        CHECK(code({{"epochs", "ten"}}) == ErrorCode::config);
        CHECK(code({{"epochs", "-3"}}) == ErrorCode::config);
        CHECK(code({{"fusion", "max"}}) == ErrorCode::config);
        CHECK(code({{"embed_dim", "30"}}) == ErrorCode::config);
    }

    TEST_CASE("malformed ini reports the line") {
        TempDir tmp("cfg");
        std::ofstream(tmp / "bad.ini") << "[model]\nembed_dim = 8\nthis line is broken\n";
        try {
            read_config_entries(tmp / "bad.ini");
            FAIL("parsed a malformed file");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::parse);
            CHECK(std::string(e.what()).find(":3") != std::string::npos);
        }
    }
}

TEST_SUITE("optimizer") {
    TEST_CASE("first AdamW step is a signed step plus decoupled decay") {
        auto ps = single_param({2.0, -1.0});
        OptimizerConfig cfg;
        cfg.lr = 0.1;
        cfg.weight_decay = 0.01;
        cfg.grad_clip = 0.0;
        AdamW opt(ps, cfg);
        set_gradient(ps[0], {0.5, -0.25});
        opt.step();
        const double eps = cfg.eps;
        CHECK(ps[0].value.at(0) == doctest::Approx(2.0 * 0.999 - 0.1 * 0.5 / (0.5 + eps)).epsilon(1e-14));
        CHECK(ps[0].value.at(1) == doctest::Approx(-1.0 * 0.999 + 0.1 * 0.25 / (0.25 + eps)).epsilon(1e-14));
        CHECK_FALSE((ps[0].value.has_grad() && ps[0].value.grad()[0] != 0.0));
    }

    TEST_CASE("two steps with clipping match a scalar reference") {
        auto ps = single_param({0.3, 0.7});
        OptimizerConfig cfg;
        cfg.lr = 0.05;
        cfg.weight_decay = 0.1;
        cfg.grad_clip = 1.0;
        AdamW opt(ps, cfg);
        const std::vector<std::vector<double>> grads{{3.0, 4.0}, {0.3, -0.4}};
        // Reference: norm 5 clips to 1, norm 0.5 passes through.
        const std::vector<double> clip{0.2, 1.0};
        double w[2] = {0.3, 0.7}, m[2] = {0, 0}, v[2] = {0, 0};
        for (int t = 0; t < 2; ++t) {
            set_gradient(ps[0], grads[t]);
            const double norm = opt.step();
            CHECK(norm == doctest::Approx(t == 0 ? 5.0 : 0.5));
            for (int i = 0; i < 2; ++i) {
                const double g = grads[t][i] * clip[t];
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                const double mh = m[i] / (1 - std::pow(0.9, t + 1)), vh = v[i] / (1 - std::pow(0.999, t + 1));
                w[i] = w[i] * (1 - 0.05 * 0.1) - 0.05 * mh / (std::sqrt(vh) + cfg.eps);
            }
        }
        CHECK(ps[0].value.at(0) == doctest::Approx(w[0]).epsilon(1e-12));
        CHECK(ps[0].value.at(1) == doctest::Approx(w[1]).epsilon(1e-12));
    }

    TEST_CASE("encoder group uses its own step size and the decay scale") {
        std::vector<Parameter> ps;
        ps.push_back({"enc", Tensor::from({1}, {0.0}, true), true});
        ps.push_back({"dec", Tensor::from({1}, {0.0}, true), false});
        OptimizerConfig cfg;
        cfg.lr = 1e-2;
        cfg.lr_encoder = 1e-3;
        cfg.weight_decay = 0.0;
        AdamW opt(ps, cfg);
        opt.set_lr_scale(0.1);
        add(ps[0].value, ps[1].value).backward();
        opt.step();
        CHECK(ps[0].value.at(0) == doctest::Approx(-1e-4).epsilon(1e-6));
        CHECK(ps[1].value.at(0) == doctest::Approx(-1e-3).epsilon(1e-6));
    }

    TEST_CASE("non-finite gradients abort the step") {
        auto ps = single_param({1.0});
        AdamW opt(ps, OptimizerConfig{});
        set_gradient(ps[0], {std::numeric_limits<double>::quiet_NaN()});
        try {
            opt.step();
            FAIL("step accepted NaN");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::divergence);
        }
        CHECK(ps[0].value.at(0) == 1.0);
    }
}

TEST_SUITE("training") {
    TEST_CASE("one epoch on ten images writes a loadable checkpoint and a stamped log") {
        TempDir tmp("train");
        TrainConfig cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.decay_epoch = 1;
        cfg.seed = 4;
        DataBundle data = load_data(cfg);
        data.train.images.resize(10);
        const TrainResult r = train(cfg, data, tmp.path());
        const CascadeDetr loaded = load_checkpoint(r.paths.checkpoint);
        CHECK(config_differences(loaded.config(), r.model.config()).empty());
        CHECK(read_checkpoint_info(r.paths.checkpoint).meta.at("seed") == "4");

        std::ifstream log(r.paths.log);
        std::string line;
        std::size_t lines = 0;
        while (std::getline(log, line)) {
            const auto j = nlohmann::json::parse(line);
            CHECK(j.contains("time"));
            CHECK(j.at("seed") == 4);
            CHECK(j.contains("ap"));
            ++lines;
        }
        CHECK(lines == 1);
        CHECK(std::filesystem::exists(r.paths.report));
        CHECK(std::filesystem::exists(r.paths.config));
    }

    TEST_CASE("identical config and seed give identical bytes") {
        TempDir tmp("train");
        ::setenv("SOURCE_DATE_EPOCH", "1700000000", 1);
        const TrainConfig cfg = tiny_train_config();
        const DataBundle data = load_data(cfg);
        train(cfg, data, tmp / "a");
        train(cfg, data, tmp / "b");
        ::unsetenv("SOURCE_DATE_EPOCH");
        for (const char* f : {"model.ckpt", "metrics.jsonl", "report.json"}) {
            CHECK_MESSAGE(slurp(tmp / "a" / f) == slurp(tmp / "b" / f), f);
        }
        TrainConfig other = cfg;
        other.seed = 1;
        train(other, data, tmp / "c");
        CHECK(slurp(tmp / "a" / "model.ckpt") != slurp(tmp / "c" / "model.ckpt"));
    }

    TEST_CASE("loss on a fixed batch decreases over 50 steps for the default config") {
        for (std::uint64_t seed : {0, 1, 2}) {
            TrainConfig cfg;
            cfg.seed = seed;
            const DataBundle data = [&] {
                TrainConfig small = cfg;
                small.data.train_per_style = 2;
                small.data.eval_per_style = 1;
                return load_data(small);
            }();
            const std::vector<double> losses = fixed_batch_losses(cfg, data.train, 50);
            CHECK_MESSAGE(losses.back() < 0.8 * losses.front(), "seed " << seed << ": " << losses.front() << " -> " << losses.back());
        }
    }

    TEST_CASE("a non-finite loss aborts with a diagnostic snapshot") {
        TempDir tmp("train");
        TrainConfig cfg = tiny_train_config();
        DataBundle data = load_data(cfg);
        // Overflowing pixels drive the activations to inf - inf.
        for (auto& img : data.train.images) std::fill(img.image.pixels.begin(), img.image.pixels.end(), 1e308);
        try {
            train(cfg, data, tmp.path());
            FAIL("training continued past NaN");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::divergence);
        }
        CHECK(std::filesystem::exists(tmp / "divergence.ckpt"));
        const auto diag = nlohmann::json::parse(slurp(tmp / "divergence.json"));
        CHECK(diag.at("epoch") == 1);
    }

    TEST_CASE("an empty or mismatched dataset is rejected") {
        TempDir tmp("train");
        TrainConfig cfg = tiny_train_config();
        DataBundle data = load_data(cfg);
        DataBundle empty = data;
        empty.train.images.clear();
        CHECK_THROWS_AS(train(cfg, empty, tmp.path()), PreconditionError);
        cfg.data.source = "coco";
        cfg.model.num_classes = 2;
        CHECK_THROWS_AS(train(cfg, data, tmp.path()), Error);
    }
}

TEST_SUITE("workflows") {
    TEST_CASE("eval reports are repeatable and UniAP is the mean of dataset APs") {
        const TrainConfig cfg = tiny_train_config();
        const DataBundle data = load_data(cfg);
        const CascadeDetr model(cfg.model);
        const EvalReport a = evaluate(model, data.held_out, FusionMode::product, 100);
        const EvalReport b = evaluate(model, data.held_out, FusionMode::product, 100);
        CHECK(report_json(a) == report_json(b));
        REQUIRE(a.per_dataset.size() == 4);
        double mean = 0.0;
        for (const auto& d : a.per_dataset) mean += d.summary.ap / 4.0;
        CHECK(a.uniap == doctest::Approx(mean).epsilon(1e-12));
        const auto j = nlohmann::json::parse(report_json(a));
        CHECK(j.at("uniap").get<double>() == doctest::Approx(100.0 * mean));
    }

    TEST_CASE("fusion changes scores but not boxes") {
        const TrainConfig cfg = tiny_train_config();
        const DataBundle data = load_data(cfg);
        const CascadeDetr model(cfg.model);
        const EvalRecord none = predict(model, data.held_out[0], FusionMode::none, 0);
        const EvalRecord prod = predict(model, data.held_out[0], FusionMode::product, 0);
        bool any_score_differs = false;
        for (std::size_t i = 0; i < none.size(); ++i) {
            auto by_query = [](std::vector<ScoredDetection> d) {
                std::sort(d.begin(), d.end(), [](const auto& x, const auto& y) { return x.query < y.query; });
                return d;
            };
            const auto a = by_query(none[i].detections), b = by_query(prod[i].detections);
            REQUIRE(a.size() == b.size());
            for (std::size_t k = 0; k < a.size(); ++k) {
                CHECK(a[k].box == b[k].box);
                any_score_differs = any_score_differs || a[k].score != b[k].score;
            }
        }
        CHECK(any_score_differs);
    }

    TEST_CASE("ablation rows cover every variant with APs in range") {
        TempDir tmp("ablate");
        TrainConfig cfg = tiny_train_config();
        cfg.epochs = 1;
        cfg.decay_epoch = 1;
        const auto rows = ablate(cfg, AblationAxis::fusion, {0, 1}, tmp.path());
        CHECK(rows.size() == 4 * 3);
        write_ablation_csv(rows, AblationAxis::fusion, tmp / "t.csv");
        std::ifstream in(tmp / "t.csv");
        std::string line;
        std::getline(in, line);
        CHECK(line == "fusion,seed,ap,ap50,ap75,ar100,uniap");
        std::vector<std::string> variants;
        while (std::getline(in, line)) {
            std::stringstream ss(line);
            std::string cell;
            std::vector<std::string> cells;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            REQUIRE(cells.size() == 7);
            if (cells[1] == "mean") variants.push_back(cells[0]);
            for (std::size_t c = 2; c < 7; ++c) {
                const double v = std::stod(cells[c]);
                CHECK((v >= 0.0 && v <= 100.0));
            }
        }
        CHECK(variants == std::vector<std::string>{"none", "single", "sum", "product"});
        CHECK(ablation_variants(AblationAxis::attention_mode) == std::vector<std::string>{"global", "cascade"});
        // Scoring-only variants share a model; single trains its own.
        CHECK(std::filesystem::exists(tmp / "shared-seed0" / "model.ckpt"));
        CHECK(std::filesystem::exists(tmp / "single-seed1" / "model.ckpt"));
    }

    TEST_CASE("sparsify with k = 1 on one image gives one-point curves") {
        TempDir tmp("sparsify");
        const TrainConfig cfg = tiny_train_config();
        DataBundle data = load_data(cfg);
        data.held_out.resize(1);
        data.held_out[0].images.resize(1);
        const CascadeDetr model(cfg.model);
        const SparsifyResult r = sparsify(model, data.held_out, FusionMode::product, 1);
        CHECK(r.curves.scoring.size() == 1);
        CHECK(r.curves.oracle.size() == 1);
        write_sparsify_outputs(r, tmp.path(), "");
        CHECK(slurp(tmp / "scoring.csv").rfind("rank,mean_iou\n", 0) == 0);
    }

    TEST_CASE("sparsify oracle curve dominates the scoring curve") {
        const TrainConfig cfg = tiny_train_config();
        const DataBundle data = load_data(cfg);
        const CascadeDetr model(cfg.model);
        for (FusionMode f : {FusionMode::none, FusionMode::product}) {
            const SparsifyResult r = sparsify(model, data.held_out, f, 5);
            REQUIRE(r.curves.scoring.size() == r.curves.oracle.size());
            for (std::size_t i = 0; i < r.curves.oracle.size(); ++i)
                CHECK(r.curves.oracle[i].mean_iou >= r.curves.scoring[i].mean_iou - 1e-12);
            CHECK(r.oracle_auc >= r.scoring_auc);
        }
    }
}
