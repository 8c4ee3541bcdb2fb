#include "pavecrack/evaluation.hpp"

#include <cmath>
#include <numeric>

#include "pavecrack/errors.hpp"
#include "pavecrack/trainer.hpp"

namespace pavecrack {

std::vector<Label> threshold_probabilities(const std::vector<float>& probabilities, double threshold) {
    std::vector<Label> out;
    out.reserve(probabilities.size());
    for (const float p : probabilities) out.push_back(p >= threshold ? Label::Positive : Label::Negative);
    return out;
}

namespace {
std::vector<float> probabilities_of(const PatchClassifier& model, const SampleSource& samples) {
    constexpr std::size_t kChunk = 32;
    std::vector<float> out;
    out.reserve(samples.size());
    std::vector<PatchSample> chunk;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        chunk.push_back(samples.load(i));
        if (chunk.size() == kChunk || i + 1 == samples.size()) {
            const auto p = model.predict_probabilities(chunk);
            out.insert(out.end(), p.begin(), p.end());
            chunk.clear();
        }
    }
    return out;
}
}  // namespace

std::vector<Label> predict_batch(const PatchClassifier& model, const SampleSource& samples, double threshold) {
    return threshold_probabilities(probabilities_of(model, samples), threshold);
}

ConfusionMatrix confusion_counts(const std::vector<Label>& predicted, const std::vector<Label>& truth) {
    if (predicted.size() != truth.size()) {
        throw ShapeError("prediction/truth length mismatch: " + std::to_string(predicted.size()) + " vs " +
                         std::to_string(truth.size()));
    }
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == Label::Unlabeled || predicted[i] == Label::Unlabeled) {
            throw DataError("unlabeled sample at index " + std::to_string(i));
        }
        const bool p = predicted[i] == Label::Positive;
        const bool t = truth[i] == Label::Positive;
        if (p && t) ++cm.tp;
        else if (p) ++cm.fp;
        else if (t) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

namespace {
MetricSet metrics_from_counts(double tp, double fp, double tn, double fn) {
    const double total = tp + fp + tn + fn;
    if (total <= 0) throw DataError("confusion matrix is empty");
    if (tp + fp <= 0 && tp + fn <= 0) {
        throw DataError("no predicted and no actual positives: precision and recall both undefined");
    }
    MetricSet m;
    if (tp + fp > 0) m.precision = tp / (tp + fp);
    if (tp + fn > 0) m.recall = tp / (tp + fn);
    m.accuracy = (tp + tn) / total;
    // Harmonic mean of precision and recall, 0 when tp = 0.
    m.f1 = tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    return m;
}

MeanSd mean_sd(const std::vector<double>& values) {
    MeanSd out;
    out.n = values.size();
    if (values.empty()) return out;
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (const double v : values) ss += (v - out.mean) * (v - out.mean);
        out.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    }
    return out;
}
}  // namespace

MetricSet metrics_from_confusion(const ConfusionMatrix& cm) {
    return metrics_from_counts(static_cast<double>(cm.tp), static_cast<double>(cm.fp), static_cast<double>(cm.tn),
                               static_cast<double>(cm.fn));
}

AggregateStats aggregate_runs(const std::vector<MetricSet>& per_run, const std::vector<FinetuneBoost>& boosts) {
    if (per_run.empty()) throw DataError("cannot aggregate zero runs");
    std::vector<double> precision, recall, accuracy, f1;
    for (const auto& m : per_run) {
        if (m.precision) precision.push_back(*m.precision);
        if (m.recall) recall.push_back(*m.recall);
        accuracy.push_back(m.accuracy);
        f1.push_back(m.f1);
    }
    AggregateStats s;
    s.runs = per_run.size();
    s.single_run = per_run.size() == 1;
    s.precision = mean_sd(precision);
    s.recall = mean_sd(recall);
    s.accuracy = mean_sd(accuracy);
    s.f1 = mean_sd(f1);
    if (!boosts.empty()) {
        std::vector<double> acc, loss;
        for (const auto& b : boosts) {
            acc.push_back(b.accuracy_boost);
            loss.push_back(b.loss_reduction);
        }
        s.accuracy_boost = mean_sd(acc);
        s.loss_reduction = mean_sd(loss);
    }
    return s;
}

MeanConfusion mean_confusion(const std::vector<ConfusionMatrix>& matrices) {
    if (matrices.empty()) throw DataError("cannot average zero confusion matrices");
    MeanConfusion m;
    for (const auto& c : matrices) {
        m.tp += static_cast<double>(c.tp);
        m.fp += static_cast<double>(c.fp);
        m.tn += static_cast<double>(c.tn);
        m.fn += static_cast<double>(c.fn);
    }
    const double n = static_cast<double>(matrices.size());
    m.tp /= n;
    m.fp /= n;
    m.tn /= n;
    m.fn /= n;
    return m;
}

MetricSet metrics_from_mean_confusion(const MeanConfusion& cm) {
    return metrics_from_counts(cm.tp, cm.fp, cm.tn, cm.fn);
}

FinetuneBoost finetune_boost(const RunHistory& history) {
    const int start = history.config.finetune_start_epoch;
    const int total = static_cast<int>(history.records.size());
    if (start <= 0 || start >= total) {
        throw UndefinedBoostError("history has a single phase (fine-tune start " + std::to_string(start) + ", " +
                                  std::to_string(total) + " epochs); boost is undefined");
    }
    const auto& before = history.records[static_cast<std::size_t>(start - 1)];
    const auto& after = history.records.back();
    return {after.val_accuracy - before.val_accuracy, before.val_loss - after.val_loss};
}

EvaluationResult evaluate(const PatchClassifier& model, const SampleSource& samples, double threshold) {
    EvaluationResult r;
    r.probabilities = probabilities_of(model, samples);
    std::vector<Label> truth;
    truth.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) truth.push_back(samples.label(i));
    r.confusion = confusion_counts(threshold_probabilities(r.probabilities, threshold), truth);
    r.metrics = metrics_from_confusion(r.confusion);
    return r;
}

}  // namespace pavecrack
