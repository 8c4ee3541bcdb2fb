#pragma once

// Two-phase transfer learning: head-only training, then fine-tuning of the top backbone
// units at a lower learning rate.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pavecrack/dataset.hpp"
#include "pavecrack/model_zoo.hpp"

namespace pavecrack {

struct TrainConfig {
    int total_epochs = 80;
    int finetune_start_epoch = 60;
    int batch_size = 32;
    double phase1_learning_rate = 1e-3;
    double phase2_learning_rate = 1e-5;
    int replicates = 5;
    bool augmented = false;
    double unfreeze_fraction = 0.25;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string loss = "binary_crossentropy";
    std::string optimizer = "adam";
    /// Keep an extra checkpoint of the best validation-accuracy epoch (the final model is
    /// still the one evaluated).
    bool save_best = false;

    /// Throws DomainError naming the first violated invariant.
    void validate() const;

    /// Applies one `key = value` setting. Throws FormatError for unknown keys or bad values.
    void set(const std::string& key, const std::string& value);
    /// Flat key/value text: `key = value` per line, '#' comments.
    static TrainConfig from_file(const std::filesystem::path& path);
    static TrainConfig from_text(const std::string& text);
    std::string to_text() const;
};

enum class Phase { HeadOnly, FineTune };
std::string_view phase_name(Phase phase);  // "head-only" / "fine-tune"
Phase parse_phase(std::string_view name);

struct EpochRecord {
    int epoch = 0;
    Phase phase = Phase::HeadOnly;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    std::size_t trainable_parameter_count = 0;
    double learning_rate = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

struct RunHistory {
    std::vector<EpochRecord> records;
    TrainConfig config;
    std::uint64_t seed = 0;
    std::string backbone;
    std::filesystem::path final_checkpoint;
};

/// CSV with columns epoch,phase,train_loss,train_acc,val_loss,val_acc,trainable_params.
void write_history_csv(const RunHistory& history, const std::filesystem::path& path);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path& path);

struct PhaseOptions {
    int epochs = 0;
    double learning_rate = 1e-3;
    int start_epoch = 0;
    Phase phase = Phase::HeadOnly;
    int batch_size = 32;
    /// Seeds the per-epoch shuffle of the training stream.
    std::uint64_t seed = 0;
    /// Called after each epoch's validation pass.
    std::function<void(const EpochRecord&, const ClassifierModel&)> on_epoch_end;
};

/// Loss and accuracy of the model in evaluation mode over a whole stream.
struct StreamScore {
    double loss = 0.0;
    double accuracy = 0.0;
};
StreamScore score_stream(const ClassifierModel& model, const SampleSource& samples, int batch_size = 32);

/// Trains the model with its current trainability for `epochs` epochs.
/// Throws DataError for an empty stream and DivergenceError on a non-finite loss.
std::vector<EpochRecord> train_phase(ClassifierModel& model, const SampleSource& train, const SampleSource& val,
                                     const PhaseOptions& options);

std::string_view variant_tag(bool augmented);  // "aug" / "noaug"

/// `{backbone}_{aug|noaug}_seed{S}_epoch{E}.pcw`
std::string checkpoint_name(const std::string& backbone, bool augmented, std::uint64_t seed, int epoch);

/// Builds a fresh model for a given replicate seed.
using ModelFactory = std::function<ClassifierModel(std::uint64_t seed)>;

/// Phase 1 for finetune_start_epoch epochs with a frozen backbone, then unfreeze_top and
/// phase 2 for the rest. Checkpoints at the phase boundary and at completion.
RunHistory run_experiment(const ModelFactory& factory, const SampleSource& train, const SampleSource& val,
                          const TrainConfig& config, std::uint64_t seed,
                          const std::filesystem::path& checkpoint_dir = {});

/// Manifest-backed variant: trains on the train split and validates on the val split.
RunHistory run_experiment(const BackboneSpec& backbone, const DatasetManifest& manifest, const TrainConfig& config,
                          std::uint64_t seed, const std::filesystem::path& checkpoint_dir = {});

struct ReplicateFailure {
    std::uint64_t seed = 0;
    std::string error;
};

struct ExperimentRecord {
    std::string backbone;
    bool augmented = false;
    std::vector<RunHistory> runs;
    std::vector<ReplicateFailure> failures;
    bool complete() const { return failures.empty(); }
};

/// One run per configured seed. A failing replicate is recorded and the rest still run.
/// Histories are written to `out_dir/history_seed{S}.csv` when out_dir is set.
ExperimentRecord run_replicates(const ModelFactory& factory, const SampleSource& train, const SampleSource& val,
                                const TrainConfig& config, const std::filesystem::path& out_dir = {});
ExperimentRecord run_replicates(const BackboneSpec& backbone, const DatasetManifest& manifest,
                                const TrainConfig& config, const std::filesystem::path& out_dir = {});

/// `experiment.json` in out_dir: backbone, variant, config, per-seed status.
void write_experiment_summary(const ExperimentRecord& record, const TrainConfig& config,
                              const std::filesystem::path& out_dir);

}  // namespace pavecrack
