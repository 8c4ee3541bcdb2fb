#pragma once

// Result tables, training-curve bands and their figures.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pavecrack/evaluation.hpp"
#include "pavecrack/trainer.hpp"

namespace pavecrack {

struct SeriesBand {
    std::vector<double> mean;
    std::vector<double> min;
    std::vector<double> max;
};

/// Per-epoch mean and min/max range across replicates.
struct CurveBand {
    std::vector<int> epochs;
    SeriesBand train_loss;
    SeriesBand val_loss;
    SeriesBand train_accuracy;
    SeriesBand val_accuracy;
    int finetune_start_epoch = 0;
    std::size_t replicates = 0;

    std::size_t length() const { return epochs.size(); }
    int total_epochs() const { return static_cast<int>(epochs.size()); }
};

/// Throws DataError for an empty list and ShapeError when histories differ in length or schedule.
CurveBand build_curves(const std::vector<RunHistory>& histories);

/// Long format: epoch,metric,mean,min,max.
void write_curves_csv(const CurveBand& band, const std::filesystem::path& path);
CurveBand read_curves_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Tables

struct ExperimentSummary {
    std::string backbone;
    bool augmented = false;
    AggregateStats stats;
    MeanConfusion confusion;
};

/// "VGG16 Non-Aug" / "VGG16 Aug".
std::string experiment_label(const std::string& backbone, bool augmented);

inline const std::vector<std::string>& table1_rows() {
    static const std::vector<std::string> rows{
        "Precision",       "Recall (Mean)",   "Accuracy (Mean)",         "Accuracy (SD)",
        "F1-Score (Mean)", "F1-Score (SD)",   "Finetune Accuracy Boost", "Finetune Loss Reduction"};
    return rows;
}
inline const std::vector<std::string>& table2_rows() {
    static const std::vector<std::string> rows{"TP", "FP", "TN", "FN"};
    return rows;
}

struct Table {
    std::vector<std::string> columns;
    std::vector<std::string> rows;
    /// cells[row][column]; empty when the value is undefined.
    std::vector<std::vector<std::optional<double>>> cells;

    std::optional<double> at(const std::string& row, const std::string& column) const;
};

/// Metrics table and confusion-count table with experiments as columns, ordered by
/// backbone name then Non-Aug before Aug.
Table make_table1(const std::vector<ExperimentSummary>& experiments);
Table make_table2(const std::vector<ExperimentSummary>& experiments);

/// Full precision when decimals < 0, otherwise fixed-point display rounding.
void write_table_csv(const Table& table, const std::filesystem::path& path, int decimals = -1);
Table read_table_csv(const std::filesystem::path& path);

struct TableFiles {
    std::filesystem::path table1;
    std::filesystem::path table1_pretty;
    std::filesystem::path table2;
    std::filesystem::path table2_pretty;
};

/// Writes table1.csv, table1_pretty.csv, table2.csv and table2_pretty.csv.
/// Throws DataError for no experiments and UniquenessError for a repeated (backbone, variant).
TableFiles emit_tables(const std::vector<ExperimentSummary>& experiments, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Figures

struct FigureInfo {
    std::filesystem::path image;
    std::filesystem::path metadata;  // JSON sidecar
    double x_min = 0, x_max = 0;
    double y_min = 0, y_max = 0;
    int marker_epoch = 0;
    int width = 0, height = 0;
};

struct PlotFiles {
    FigureInfo accuracy;
    FigureInfo loss;
};

/// `<stem>_accuracy.png` and `<stem>_loss.png` with JSON sidecars. Throws IoError when
/// the files cannot be written.
PlotFiles render_plots(const CurveBand& band, const std::filesystem::path& out_dir, const std::string& stem = "curves");

// ---------------------------------------------------------------------------
// Evaluation records on disk

struct RunEvaluation {
    std::uint64_t seed = 0;
    ConfusionMatrix confusion;
};

struct EvaluationFile {
    std::string backbone;
    bool augmented = false;
    double threshold = 0.5;
    std::vector<RunEvaluation> runs;
};

void write_evaluation_json(const EvaluationFile& evaluation, const std::filesystem::path& path);
EvaluationFile read_evaluation_json(const std::filesystem::path& path);

/// One experiment directory as written by run_replicates + evaluation: experiment.json,
/// history_seed*.csv and evaluation.json.
struct ExperimentDir {
    std::string backbone;
    bool augmented = false;
    std::vector<RunHistory> histories;
    std::optional<EvaluationFile> evaluation;
};

ExperimentDir load_experiment_dir(const std::filesystem::path& dir);

/// Aggregates the evaluation runs, with fine-tune boosts from the histories when both
/// phases are present. Throws DataError when the directory has no evaluation.
ExperimentSummary summarize(const ExperimentDir& experiment);

}  // namespace pavecrack
