// pavecrack: dataset building, training, evaluation, reporting and inference.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "pavecrack/augmentation.hpp"
#include "pavecrack/dataset.hpp"
#include "pavecrack/errors.hpp"
#include "pavecrack/evaluation.hpp"
#include "pavecrack/inference.hpp"
#include "pavecrack/model_zoo.hpp"
#include "pavecrack/reporting.hpp"
#include "pavecrack/trainer.hpp"

namespace fs = std::filesystem;
using namespace pavecrack;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

bool is_image(const fs::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff";
}

std::vector<fs::path> list_images(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: '" + dir.string() + "'");
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_image(e.path())) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::string relative_to(const fs::path& file, const fs::path& base) {
    const fs::path abs_file = fs::absolute(file).lexically_normal();
    const fs::path abs_base = fs::absolute(base.empty() ? fs::path(".") : base).lexically_normal();
    const fs::path rel = abs_file.lexically_relative(abs_base);
    return rel.empty() ? abs_file.generic_string() : rel.generic_string();
}

std::string tile_name(const std::string& frame_id, int row, int col) {
    return frame_id + "_r" + std::to_string(row) + "_c" + std::to_string(col) + ".png";
}

/// `{frame}_r{R}_c{C}` stems carry their origin; any other stem is its own frame.
PatchRef ref_for_file(const fs::path& file, Label label, const fs::path& manifest_dir) {
    static const std::regex pattern(R"((.+)_r(\d+)_c(\d+))");
    PatchRef ref;
    ref.path = relative_to(file, manifest_dir);
    ref.label = label;
    const std::string stem = file.stem().string();
    std::smatch m;
    if (std::regex_match(stem, m, pattern)) {
        ref.source_frame_id = m[1];
        ref.grid_row = std::stoi(m[2]);
        ref.grid_col = std::stoi(m[3]);
    } else {
        ref.source_frame_id = stem;
    }
    return ref;
}

GridSpec grid_for(const std::string& shape, int patch_size, int width, int height) {
    const auto [rows, cols] = parse_grid_shape(shape);
    return centered_grid(rows, cols, patch_size, width, height);
}

/// Labels file: `frame_id row col label` per line (tabs, commas or spaces), '#' comments.
std::map<std::tuple<std::string, int, int>, Label> read_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read labels '" + path.string() + "'");
    std::map<std::tuple<std::string, int, int>, Label> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::replace(line.begin(), line.end(), ',', ' ');
        std::replace(line.begin(), line.end(), '\t', ' ');
        std::istringstream ss(line);
        std::string frame, label;
        int row = 0, col = 0;
        if (!(ss >> frame)) continue;
        if (!(ss >> row >> col >> label)) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 'frame_id row col label'");
        }
        const Label l = parse_label(label);
        if (l == Label::Unlabeled) continue;
        out[{frame, row, col}] = l;
    }
    return out;
}

std::vector<Split> parse_splits(const std::string& list) {
    std::vector<Split> out;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(parse_split(item));
    }
    return out;
}

SplitFractions parse_fractions(const std::string& text) {
    std::vector<double> v;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
    if (v.size() != 3) throw DomainError("--fractions expects three comma-separated values");
    return {v[0], v[1], v[2]};
}

bool has_transform_tags(const DatasetManifest& m, Split split) {
    return std::any_of(m.entries.begin(), m.entries.end(),
                       [&](const ManifestEntry& e) { return e.split == split && e.ref.transform_tag != "id"; });
}

// ---------------------------------------------------------------------------

struct BuildArgs {
    std::string frames, labels, pos, neg, grid = "2x6", out, fractions = "0.8,0.1,0.1";
    int patch_size = kDefaultPatchSize;
    std::uint64_t seed = 0;
    std::size_t total = 0;
    bool no_frame_split = false;
};

int run_build(const BuildArgs& a) {
    const fs::path out(a.out);
    const fs::path manifest_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
    std::vector<PatchRef> positives, negatives;

    if (!a.frames.empty()) {
        const auto labels = read_labels(a.labels);
        std::size_t written = 0, skipped = 0;
        for (const auto& file : list_images(a.frames)) {
            const cv::Mat frame = read_rgb(file);
            const std::string id = file.stem().string();
            const GridSpec grid = grid_for(a.grid, a.patch_size, frame.cols, frame.rows);
            for (const auto& patch : extract_patches(frame, grid, id)) {
                const auto it = labels.find({id, patch.grid_row, patch.grid_col});
                if (it == labels.end()) {
                    ++skipped;
                    continue;
                }
                const fs::path dst = manifest_dir / "patches" / std::string(label_token(it->second)) /
                                     tile_name(id, patch.grid_row, patch.grid_col);
                fs::create_directories(dst.parent_path());
                write_rgb(dst, patch.pixels);
                (it->second == Label::Positive ? positives : negatives)
                    .push_back(ref_for_file(dst, it->second, manifest_dir));
                ++written;
            }
        }
        spdlog::info("tiled frames: {} labeled patches written, {} unlabeled tiles skipped", written, skipped);
    }
    if (!a.pos.empty()) {
        for (const auto& f : list_images(a.pos)) positives.push_back(ref_for_file(f, Label::Positive, manifest_dir));
    }
    if (!a.neg.empty()) {
        for (const auto& f : list_images(a.neg)) negatives.push_back(ref_for_file(f, Label::Negative, manifest_dir));
    }
    spdlog::info("{} positive and {} negative patches", positives.size(), negatives.size());

    ManifestOptions opts;
    opts.fractions = parse_fractions(a.fractions);
    opts.seed = a.seed;
    opts.frame_level_split = !a.no_frame_split;
    opts.total = a.total;
    const DatasetManifest manifest = build_manifest(std::move(positives), std::move(negatives), opts);
    write_manifest(manifest, out);
    spdlog::info("manifest '{}': train {} / val {} / test {}", out.string(), manifest.split_count(Split::Train),
                 manifest.split_count(Split::Val), manifest.split_count(Split::Test));
    return kExitOk;
}

int run_augment(const std::string& in, const std::string& out, const std::string& transforms,
                const std::string& splits) {
    const DatasetManifest src = read_manifest(in);
    const TransformSet set = transforms.empty() ? TransformSet::dihedral_default() : TransformSet::parse(transforms);
    DatasetManifest expanded = expand_dataset(src, set, parse_splits(splits));
    const fs::path out_path(out);
    const fs::path out_dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
    for (auto& e : expanded.entries) e.ref.path = relative_to(src.resolve(e.ref), out_dir);
    expanded.base_dir = out_dir;
    write_manifest(expanded, out_path);
    spdlog::info("expanded by {} transforms: train {} / val {} / test {}", set.size(),
                 expanded.split_count(Split::Train), expanded.split_count(Split::Val),
                 expanded.split_count(Split::Test));
    return kExitOk;
}

struct TrainArgs {
    std::string backbone, manifest, config, out_dir;
    bool augmented = false;
    std::vector<std::string> overrides;
    int epochs = -1, finetune_start = -1, batch_size = -1, replicates = -1;
    double lr1 = -1, lr2 = -1, unfreeze = -1;
    std::string seeds;
};

TrainConfig resolve_config(const TrainArgs& a) {
    TrainConfig c = a.config.empty() ? TrainConfig{} : TrainConfig::from_file(a.config);
    if (a.replicates > 0) c.set("replicates", std::to_string(a.replicates));
    if (a.epochs >= 0) c.total_epochs = a.epochs;
    if (a.finetune_start >= 0) c.finetune_start_epoch = a.finetune_start;
    if (a.batch_size > 0) c.batch_size = a.batch_size;
    if (a.lr1 > 0) c.phase1_learning_rate = a.lr1;
    if (a.lr2 > 0) c.phase2_learning_rate = a.lr2;
    if (a.unfreeze >= 0) c.unfreeze_fraction = a.unfreeze;
    if (!a.seeds.empty()) c.set("seeds", a.seeds);
    if (a.augmented) c.augmented = true;
    for (const auto& kv : a.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw FormatError("--set expects key=value, got '" + kv + "'");
        c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    c.validate();
    return c;
}

int run_train(const TrainArgs& a) {
    const TrainConfig config = resolve_config(a);
    const BackboneSpec spec = find_backbone(a.backbone);
    DatasetManifest manifest = read_manifest(a.manifest);
    if (config.augmented && !has_transform_tags(manifest, Split::Train)) {
        spdlog::info("train split has no augmented entries; expanding with the default transform set");
        manifest = expand_dataset(manifest, TransformSet::dihedral_default(), {Split::Train});
    }
    const fs::path out(a.out_dir);
    fs::create_directories(out);
    {
        std::ofstream cfg(out / "config.txt");
        cfg << config.to_text();
    }
    spdlog::info("training {} ({}) for {} epochs, fine-tune from {}, {} replicate(s)", spec.name,
                 variant_tag(config.augmented), config.total_epochs, config.finetune_start_epoch, config.replicates);
    ExperimentRecord record = run_replicates(spec, manifest, config, out);
    write_experiment_summary(record, config, out);
    if (!record.complete()) {
        spdlog::error("{} of {} replicates failed", record.failures.size(), config.replicates);
        return kExitFailure;
    }
    return kExitOk;
}

std::vector<fs::path> final_checkpoints(const fs::path& experiment_dir) {
    const ExperimentDir dir = load_experiment_dir(experiment_dir);
    std::vector<fs::path> out;
    for (const auto& h : dir.histories) {
        if (!h.final_checkpoint.empty()) out.push_back(h.final_checkpoint);
    }
    return out;
}

int run_evaluate(std::vector<std::string> checkpoints, const std::string& experiment, const std::string& manifest_path,
                 const std::string& split, double threshold, const std::string& out_dir) {
    std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
    if (!experiment.empty()) {
        const auto found = final_checkpoints(experiment);
        paths.insert(paths.end(), found.begin(), found.end());
    }
    if (paths.empty()) throw DataError("no checkpoints to evaluate");

    const DatasetManifest manifest = read_manifest(manifest_path);
    const SplitSource samples(manifest, parse_split(split));
    EvaluationFile evaluation;
    evaluation.threshold = threshold;
    std::vector<MetricSet> metrics;
    std::vector<ConfusionMatrix> matrices;
    for (const auto& path : paths) {
        const auto attributes = read_archive(path).attributes;
        const ClassifierModel model = ClassifierModel::load_checkpoint(path);
        const std::uint64_t seed = attributes.contains("seed") ? std::stoull(attributes.at("seed")) : 0;
        const bool augmented = attributes.contains("augmented") && attributes.at("augmented") == "true";
        if (evaluation.runs.empty()) {
            evaluation.backbone = model.spec().name;
            evaluation.augmented = augmented;
        } else if (evaluation.backbone != model.spec().name || evaluation.augmented != augmented) {
            throw DataError("checkpoints belong to different experiments");
        }
        const EvaluationResult r = evaluate(model, samples, threshold);
        spdlog::info("{}: tp {} fp {} tn {} fn {} accuracy {:.4f} f1 {:.4f}", path.filename().string(), r.confusion.tp,
                     r.confusion.fp, r.confusion.tn, r.confusion.fn, r.metrics.accuracy, r.metrics.f1);
        evaluation.runs.push_back({seed, r.confusion});
    }

    const fs::path out(out_dir);
    write_evaluation_json(evaluation, out / "evaluation.json");
    ExperimentDir dir;
    dir.backbone = evaluation.backbone;
    dir.augmented = evaluation.augmented;
    dir.evaluation = evaluation;
    if (!experiment.empty()) dir.histories = load_experiment_dir(experiment).histories;
    emit_tables({summarize(dir)}, out);
    return kExitOk;
}

std::vector<fs::path> experiment_dirs(const fs::path& root) {
    std::vector<fs::path> out;
    if (fs::exists(root / "experiment.json")) out.push_back(root);
    if (fs::is_directory(root)) {
        for (const auto& e : fs::directory_iterator(root)) {
            if (e.is_directory() && fs::exists(e.path() / "experiment.json")) out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

int run_report(const std::string& experiments, const std::string& out_dir, bool plots) {
    const auto dirs = experiment_dirs(experiments);
    if (dirs.empty()) throw DataError("no experiment directories under '" + experiments + "'");
    const fs::path out(out_dir);
    std::vector<ExperimentSummary> summaries;
    for (const auto& d : dirs) {
        const ExperimentDir e = load_experiment_dir(d);
        const std::string stem = e.backbone + "_" + std::string(variant_tag(e.augmented));
        if (!e.histories.empty()) {
            const CurveBand band = build_curves(e.histories);
            write_curves_csv(band, out / (stem + "_curves.csv"));
            if (plots) render_plots(band, out, stem);
        }
        if (e.evaluation) summaries.push_back(summarize(e));
        else spdlog::warn("{} has no evaluation.json; left out of the tables", d.string());
    }
    if (!summaries.empty()) {
        const auto files = emit_tables(summaries, out);
        spdlog::info("tables written to {} and {}", files.table1.string(), files.table2.string());
    }
    return kExitOk;
}

int run_infer(const std::string& checkpoint, const std::string& frames, const std::string& grid_shape, int patch_size,
              double threshold, const std::string& out_dir) {
    const ClassifierModel model = ClassifierModel::load_checkpoint(checkpoint);
    const fs::path out(out_dir);
    fs::create_directories(out);
    std::ofstream ndjson(out / "detections.ndjson", std::ios::trunc);
    if (!ndjson) throw IoError("cannot write '" + (out / "detections.ndjson").string() + "'");
    std::size_t positives = 0, tiles = 0;
    for (const auto& file : list_images(frames)) {
        const cv::Mat frame = read_rgb(file);
        const std::string id = file.stem().string();
        const GridSpec grid = grid_for(grid_shape, patch_size, frame.cols, frame.rows);
        const TileGrid result = classify_frame(frame, model, grid, threshold, id, fs::path(checkpoint).filename().string());
        write_ndjson(detection_records(result), ndjson);
        const Overlay overlay = render_overlay(frame, result);
        write_rgb(out / (id + "_overlay.png"), overlay.image);
        positives += result.positive_count();
        tiles += result.cells.size();
    }
    spdlog::info("{} of {} tiles flagged as cracked", positives, tiles);
    return kExitOk;
}

int run_validate(const std::string& manifest_path, bool check_files) {
    const DatasetManifest manifest = read_manifest(manifest_path);
    const ValidationReport report = validate_manifest(manifest, check_files);
    std::cout << report.to_text();
    return report.passed() ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_logger_mt("pavecrack"));
    spdlog::set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");

    CLI::App app{"Pavement crack detection: datasets, training, evaluation, reporting and inference"};
    app.require_subcommand(1);
    bool verbose = false, quiet = false;
    app.add_flag("-v,--verbose", verbose, "Debug logging");
    app.add_flag("-q,--quiet", quiet, "Warnings and errors only");

    BuildArgs build;
    auto* b = app.add_subcommand("build-dataset", "Build a balanced train/val/test manifest from labeled patches");
    auto* frames_opt = b->add_option("--frames", build.frames, "Directory of survey frames to tile");
    b->add_option("--labels", build.labels, "Tile labels for --frames: frame_id row col pos|neg")
        ->check(CLI::ExistingFile);
    frames_opt->needs(b->get_option("--labels"));
    b->add_option("--pos", build.pos, "Directory of positive patches")->check(CLI::ExistingDirectory);
    b->add_option("--neg", build.neg, "Directory of negative patches")->check(CLI::ExistingDirectory);
    b->add_option("--grid", build.grid, "Tiling grid ROWSxCOLS")->capture_default_str();
    b->add_option("--patch-size", build.patch_size, "Patch side in pixels")->capture_default_str();
    b->add_option("--seed", build.seed, "Split seed")->capture_default_str();
    b->add_option("--fractions", build.fractions, "train,val,test fractions")->capture_default_str();
    b->add_option("--total", build.total, "Samples to place (0: twice the smaller class)");
    b->add_flag("--no-frame-split", build.no_frame_split, "Allow patches of one frame in several splits");
    b->add_option("--out", build.out, "Output manifest")->required();

    std::string aug_in, aug_out, aug_transforms, aug_splits = "train";
    auto* au = app.add_subcommand("augment", "Expand manifest splits with flips and rotations");
    au->add_option("--manifest", aug_in, "Input manifest")->required()->check(CLI::ExistingFile);
    au->add_option("--out", aug_out, "Output manifest")->required();
    au->add_option("--transforms", aug_transforms, "Comma-separated transforms (default hflip,vflip,rot90,rot180,rot270)");
    au->add_option("--splits", aug_splits, "Splits to expand")->capture_default_str();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Two-phase training of one backbone over all replicate seeds");
    t->add_option("--backbone", train.backbone, "Backbone name")->required();
    t->add_option("--manifest", train.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    t->add_option("--config", train.config, "Config file (key = value)")->check(CLI::ExistingFile);
    t->add_option("--out-dir", train.out_dir, "Experiment directory")->required();
    t->add_flag("--augmented", train.augmented, "Train on the augmented training split");
    t->add_option("--epochs", train.epochs, "Total epochs");
    t->add_option("--finetune-start", train.finetune_start, "First fine-tuning epoch");
    t->add_option("--batch-size", train.batch_size, "Batch size");
    t->add_option("--replicates", train.replicates, "Replicate count (seeds 1..N)");
    t->add_option("--seeds", train.seeds, "Comma-separated replicate seeds");
    t->add_option("--lr1", train.lr1, "Head-only learning rate");
    t->add_option("--lr2", train.lr2, "Fine-tuning learning rate");
    t->add_option("--unfreeze-fraction", train.unfreeze, "Top fraction of backbone units to fine-tune");
    t->add_option("--set", train.overrides, "Config override key=value (repeatable)");

    std::vector<std::string> eval_checkpoints;
    std::string eval_experiment, eval_manifest, eval_split = "test", eval_out;
    double eval_threshold = 0.5;
    auto* ev = app.add_subcommand("evaluate", "Confusion counts and metrics of trained checkpoints");
    ev->add_option("--checkpoint", eval_checkpoints, "Checkpoint file (repeatable)")->check(CLI::ExistingFile);
    ev->add_option("--experiment", eval_experiment, "Evaluate every final checkpoint of an experiment directory")
        ->check(CLI::ExistingDirectory);
    ev->add_option("--manifest", eval_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    ev->add_option("--split", eval_split, "Split to evaluate")->capture_default_str();
    ev->add_option("--threshold", eval_threshold, "Decision threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    ev->add_option("--out", eval_out, "Output directory")->required();

    std::string rep_experiments, rep_out;
    bool rep_plots = false;
    auto* rp = app.add_subcommand("report", "Result tables and training curves");
    rp->add_option("--experiments", rep_experiments, "Experiment directory or a directory of them")
        ->required()
        ->check(CLI::ExistingDirectory);
    rp->add_option("--out", rep_out, "Output directory")->required();
    rp->add_flag("--plots", rep_plots, "Render accuracy and loss figures");

    std::string inf_checkpoint, inf_frames, inf_grid = "2x6", inf_out;
    int inf_patch = kDefaultPatchSize;
    double inf_threshold = 0.5;
    auto* in = app.add_subcommand("infer", "Tile survey frames and flag cracked tiles");
    in->add_option("--checkpoint", inf_checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
    in->add_option("--frames", inf_frames, "Directory of frames")->required()->check(CLI::ExistingDirectory);
    in->add_option("--grid", inf_grid, "Tiling grid ROWSxCOLS")->capture_default_str();
    in->add_option("--patch-size", inf_patch, "Patch side in pixels")->capture_default_str();
    in->add_option("--threshold", inf_threshold, "Decision threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    in->add_option("--out", inf_out, "Output directory")->required();

    std::string val_manifest;
    bool val_files = false;
    auto* va = app.add_subcommand("validate", "Check a manifest and print its split report");
    va->add_option("--manifest", val_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    va->add_flag("--check-files", val_files, "Also check that every patch file exists");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    if (quiet) spdlog::set_level(spdlog::level::warn);
    else if (verbose) spdlog::set_level(spdlog::level::debug);

    try {
        if (*b) {
            if (build.frames.empty() && build.pos.empty() && build.neg.empty()) {
                std::cerr << "build-dataset: give --frames/--labels or --pos/--neg\n";
                return kExitUsage;
            }
            return run_build(build);
        }
        if (*au) return run_augment(aug_in, aug_out, aug_transforms, aug_splits);
        if (*t) return run_train(train);
        if (*ev) {
            if (eval_checkpoints.empty() && eval_experiment.empty()) {
                std::cerr << "evaluate: give --checkpoint or --experiment\n";
                return kExitUsage;
            }
            return run_evaluate(eval_checkpoints, eval_experiment, eval_manifest, eval_split, eval_threshold, eval_out);
        }
        if (*rp) return run_report(rep_experiments, rep_out, rep_plots);
        if (*in) return run_infer(inf_checkpoint, inf_frames, inf_grid, inf_patch, inf_threshold, inf_out);
        if (*va) return run_validate(val_manifest, val_files);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return kExitFailure;
    }
    return kExitUsage;
}
