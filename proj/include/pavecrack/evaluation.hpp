#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pavecrack/dataset.hpp"
#include "pavecrack/model_zoo.hpp"

namespace pavecrack {

struct RunHistory;

struct ConfusionMatrix {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    bool operator==(const ConfusionMatrix&) const = default;
};

/// Precision and recall are empty when their denominator is zero ("undefined").
struct MetricSet {
    std::optional<double> precision;
    std::optional<double> recall;
    double accuracy = 0.0;
    double f1 = 0.0;
};

/// Label::Positive iff probability >= threshold.
std::vector<Label> predict_batch(const PatchClassifier& model, const SampleSource& samples, double threshold = 0.5);
std::vector<Label> threshold_probabilities(const std::vector<float>& probabilities, double threshold = 0.5);

/// Throws ShapeError on a length mismatch and DataError for unlabeled truth.
ConfusionMatrix confusion_counts(const std::vector<Label>& predicted, const std::vector<Label>& truth);

/// Throws DataError when the matrix is empty or when both precision and recall are undefined.
MetricSet metrics_from_confusion(const ConfusionMatrix& cm);

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;  // sample (n - 1) standard deviation
    std::size_t n = 0;
    bool defined() const { return n > 0; }
};

struct FinetuneBoost {
    double accuracy_boost = 0.0;
    double loss_reduction = 0.0;
};

struct AggregateStats {
    MeanSd precision;  // over runs where precision was defined
    MeanSd recall;
    MeanSd accuracy;
    MeanSd f1;
    std::optional<MeanSd> accuracy_boost;
    std::optional<MeanSd> loss_reduction;
    std::size_t runs = 0;
    /// Set when only one run was aggregated; every SD is then reported as 0.
    bool single_run = false;
};

/// Per-run metrics first, then mean and sample SD of each metric across runs.
/// Throws DataError for an empty list.
AggregateStats aggregate_runs(const std::vector<MetricSet>& per_run_metrics,
                              const std::vector<FinetuneBoost>& per_run_boosts = {});

/// Element-wise mean of confusion matrices (fractional counts allowed).
struct MeanConfusion {
    double tp = 0, fp = 0, tn = 0, fn = 0;
};
MeanConfusion mean_confusion(const std::vector<ConfusionMatrix>& matrices);

/// Metrics computed from run-averaged counts. This is the pooled route; the reported tables use
/// aggregate_runs instead, and the two generally differ.
MetricSet metrics_from_mean_confusion(const MeanConfusion& cm);

/// Accuracy gain and validation-loss drop from the last head-only epoch to the final epoch.
/// Throws UndefinedBoostError for a single-phase history.
FinetuneBoost finetune_boost(const RunHistory& history);

struct EvaluationResult {
    ConfusionMatrix confusion;
    MetricSet metrics;
    std::vector<float> probabilities;
};

EvaluationResult evaluate(const PatchClassifier& model, const SampleSource& samples, double threshold = 0.5);

}  // namespace pavecrack
