// cascade-detr command-line entry point.

#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cascade_detr/checkpoint.hpp"
#include "cascade_detr/config.hpp"
#include "cascade_detr/data.hpp"
#include "cascade_detr/training.hpp"

namespace fs = std::filesystem;
using namespace cdetr;

namespace {

// Leftover "--key value" / "--key=value" arguments become config overrides.
std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& extra) {
    std::map<std::string, std::string> out;
    for (std::size_t i = 0; i < extra.size(); ++i) {
        const std::string& arg = extra[i];
        if (arg.rfind("--", 0) != 0) throw Error(ErrorCode::config, "unexpected argument '" + arg + "'");
        const std::string body = arg.substr(2);
        if (const auto eq = body.find('='); eq != std::string::npos) {
            out[body.substr(0, eq)] = body.substr(eq + 1);
        } else {
            if (i + 1 >= extra.size()) throw Error(ErrorCode::config, "override '" + arg + "' has no value");
            out[body] = extra[++i];
        }
    }
    return out;
}

TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& extra) {
    TrainConfig cfg;
    if (!path.empty()) cfg.apply(read_config_entries(path));
    cfg.apply(parse_overrides(extra));
    cfg.validate();
    return cfg;
}

void progress(const std::string& line) { std::cerr << line << '\n'; }

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
}

// Rejects a checkpoint whose architecture differs from the config's.
void check_against_config(const ModelConfig& stored, const TrainConfig& cfg) {
    ModelConfig expected = cfg.model;
    expected.seed = stored.seed;  // the init seed does not affect a loaded model
    const std::vector<std::string> diffs = config_differences(expected, stored);
    if (diffs.empty()) return;
    std::string msg = "checkpoint does not match config:";
    for (const std::string& d : diffs) msg += " " + d + ";";
    msg.pop_back();
    throw Error(ErrorCode::checkpoint, msg);
}

std::vector<Dataset> eval_datasets(const TrainConfig& cfg, const std::string& annotations, const std::string& images,
                                   bool strict) {
    if (!annotations.empty()) {
        std::vector<std::string> warnings;
        CocoLoadOptions opts;
        opts.strict = strict;
        std::vector<Dataset> out{load_coco(annotations, images, opts, &warnings)};
        for (const std::string& w : warnings) std::cerr << "warning: " << w << '\n';
        return out;
    }
    return load_data(cfg).held_out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cascade-DETR: cascade attention and IoU-recalibrated scoring for set-prediction detection"};
    app.require_subcommand(1);

    // synth-gen
    auto* gen = app.add_subcommand("synth-gen", "Render the synthetic multi-style benchmark as COCO files");
    std::uint64_t gen_seed = 0;
    std::size_t gen_count = 25, gen_size = 64;
    std::string gen_split = "eval", gen_out;
    std::vector<std::string> gen_styles;
    gen->add_option("--seed", gen_seed, "Data seed");
    gen->add_option("--per-style", gen_count, "Images per style");
    gen->add_option("--image-size", gen_size, "Square image side in pixels");
    gen->add_option("--split", gen_split, "Split name (seeds differ per split)");
    gen->add_option("--style", gen_styles, "Styles to render (default: all)");
    gen->add_option("--out", gen_out, "Output directory (default: $CASCADE_DETR_OUT/synth)");

    // train
    auto* tr = app.add_subcommand("train", "Train a model; extra --key value pairs override the config");
    std::string tr_config, tr_out;
    bool tr_iter = false;
    tr->add_option("--config", tr_config, "INI config file")->check(CLI::ExistingFile);
    tr->add_option("--out", tr_out, "Run directory (default: $CASCADE_DETR_OUT/train-seed<seed>)");
    tr->add_flag("--log-iterations", tr_iter, "Also log every optimizer step");
    tr->allow_extras();

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint per dataset and report UniAP");
    std::string ev_ckpt, ev_config, ev_out, ev_ann, ev_images, ev_fusion, ev_preds;
    bool ev_strict = false;
    ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
    ev->add_option("--config", ev_config, "INI config file")->check(CLI::ExistingFile);
    ev->add_option("--fusion", ev_fusion, "Scoring: product, sum, single, none (default: config)");
    ev->add_option("--annotations", ev_ann, "COCO annotation file instead of the synthetic held-out split");
    ev->add_option("--images", ev_images, "Image root for --annotations");
    ev->add_flag("--strict", ev_strict, "Missing images and bad boxes are errors");
    ev->add_option("--predictions", ev_preds, "Also write COCO results JSON here");
    ev->add_option("--out", ev_out, "Report path (default: stdout)");
    ev->allow_extras();

    // ablate
    auto* ab = app.add_subcommand("ablate", "Train and evaluate every variant along one axis");
    std::string ab_config, ab_axis, ab_out;
    std::vector<std::uint64_t> ab_seeds{0, 1, 2};
    ab->add_option("--config", ab_config, "INI config file")->check(CLI::ExistingFile);
    ab->add_option("--axis", ab_axis, "attention_mode, fusion, iou_loss_kind or iou_supervision")->required();
    ab->add_option("--seeds", ab_seeds, "Seeds shared by all variants")->delimiter(',');
    ab->add_option("--out", ab_out, "Output directory (default: $CASCADE_DETR_OUT/ablate-<axis>)");
    ab->allow_extras();

    // sparsify
    auto* sp = app.add_subcommand("sparsify", "Emit scoring and oracle sparsification curves");
    std::string sp_ckpt, sp_config, sp_out, sp_fusion;
    std::size_t sp_k = 0;
    sp->add_option("--checkpoint", sp_ckpt, "Checkpoint file")->required();
    sp->add_option("--config", sp_config, "INI config file")->check(CLI::ExistingFile);
    sp->add_option("--k", sp_k, "Detections kept per image (default: config eval.sparsify_k)");
    sp->add_option("--fusion", sp_fusion, "Scoring used for the ranking curve (default: config)");
    sp->add_option("--out", sp_out, "Output directory (default: $CASCADE_DETR_OUT/sparsify)");
    sp->allow_extras();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error[E_USAGE]: " << e.what() << '\n';
        return 2;
    }

    try {
        if (gen->parsed()) {
            const fs::path out = gen_out.empty() ? output_root() / "synth" : fs::path(gen_out);
            std::vector<SynthStyle> styles;
            for (const std::string& s : gen_styles) styles.push_back(parse_synth_style(s));
            if (styles.empty()) styles = all_synth_styles();
            const std::vector<Dataset> all = synthetic_benchmark(gen_seed, gen_count, gen_size, gen_split);
            for (std::size_t i = 0; i < all_synth_styles().size(); ++i) {
                const SynthStyle style = all_synth_styles()[i];
                if (std::find(styles.begin(), styles.end(), style) == styles.end()) continue;
                const fs::path dir = out / to_string(style);
                write_coco(all[i], dir / "annotations.json", dir / "images");
                std::cout << all[i].id << ": " << all[i].images.size() << " images -> " << dir.string() << '\n';
            }
            nlohmann::ordered_json manifest;
            manifest["format"] = "cascade-detr-benchmark";
            manifest["seed"] = gen_seed;
            manifest["per_style"] = gen_count;
            manifest["image_size"] = gen_size;
            manifest["split"] = gen_split;
            write_file(out / "manifest.json", manifest.dump(2) + "\n");
        } else if (tr->parsed()) {
            const TrainConfig cfg = resolve_config(tr_config, tr->remaining());
            const fs::path out = tr_out.empty() ? output_root() / ("train-seed" + std::to_string(cfg.seed)) : fs::path(tr_out);
            TrainOptions opts;
            opts.log_iterations = tr_iter;
            opts.progress = progress;
            const TrainResult r = train(cfg, load_data(cfg), out, opts);
            std::cout << "checkpoint: " << r.paths.checkpoint.string() << '\n'
                      << "log: " << r.paths.log.string() << '\n'
                      << "report: " << r.paths.report.string() << '\n';
        } else if (ev->parsed()) {
            const TrainConfig cfg = resolve_config(ev_config, ev->remaining());
            const CascadeDetr model = load_checkpoint(ev_ckpt);
            if (!ev_config.empty() || !ev->remaining().empty()) check_against_config(model.config(), cfg);
            const FusionMode fusion = ev_fusion.empty() ? cfg.fusion : parse_fusion_mode(ev_fusion);
            const std::vector<Dataset> data = eval_datasets(cfg, ev_ann, ev_images, ev_strict);
            const EvalReport report = evaluate(model, data, fusion, cfg.top_k);
            const std::string json = report_json(report, {{"checkpoint", fs::path(ev_ckpt).filename().string()}});
            if (ev_out.empty()) std::cout << json;
            else write_file(ev_out, json);
            if (!ev_preds.empty()) {
                EvalRecord all;
                for (const Dataset& d : data) {
                    EvalRecord rec = predict(model, d, fusion, cfg.top_k);
                    all.insert(all.end(), rec.begin(), rec.end());
                }
                export_predictions(all, ev_preds, data.size() == 1 ? data.front().category_ids : std::vector<long>{});
            }
        } else if (ab->parsed()) {
            const TrainConfig cfg = resolve_config(ab_config, ab->remaining());
            const AblationAxis axis = parse_ablation_axis(ab_axis);
            const fs::path out = ab_out.empty() ? output_root() / ("ablate-" + ab_axis) : fs::path(ab_out);
            TrainOptions opts;
            opts.progress = progress;
            const std::vector<AblationRow> rows = ablate(cfg, axis, ab_seeds, out, opts);
            write_ablation_csv(rows, axis, out / "ablation.csv");
            std::cout << "table: " << (out / "ablation.csv").string() << '\n';
        } else if (sp->parsed()) {
            const TrainConfig cfg = resolve_config(sp_config, sp->remaining());
            const CascadeDetr model = load_checkpoint(sp_ckpt);
            if (!sp_config.empty() || !sp->remaining().empty()) check_against_config(model.config(), cfg);
            const FusionMode fusion = sp_fusion.empty() ? cfg.fusion : parse_fusion_mode(sp_fusion);
            const std::size_t k = sp_k ? sp_k : cfg.sparsify_k;
            const fs::path out = sp_out.empty() ? output_root() / "sparsify" : fs::path(sp_out);
            const SparsifyResult r = sparsify(model, load_data(cfg).held_out, fusion, k);
            write_sparsify_outputs(r, out, "");
            nlohmann::ordered_json summary;
            summary["fusion"] = to_string(fusion);
            summary["k"] = k;
            summary["detections"] = r.detections;
            summary["scoring_auc"] = r.scoring_auc;
            summary["oracle_auc"] = r.oracle_auc;
            write_file(out / "summary.json", summary.dump(2) + "\n");
            std::cout << summary.dump() << '\n';
        }
    } catch (const Error& e) {
        std::cerr << "error[" << error_code_name(e.code()) << "]: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[E_INTERNAL]: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
