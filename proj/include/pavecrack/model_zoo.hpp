#pragma once

// Backbone registry, pretrained-archive providers and the binary classifier model.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pavecrack/dataset.hpp"
#include "pavecrack/nn.hpp"

namespace pavecrack {

/// Per-channel normalization applied after resizing: (value - mean) / std on the 0..255 scale.
struct Preprocessing {
    bool bgr = false;  // channel order fed to the network
    std::array<float, 3> mean{0, 0, 0};
    std::array<float, 3> std{1, 1, 1};

    float normalize(int channel, float value) const { return (value - mean[channel]) / std[channel]; }
    bool operator==(const Preprocessing&) const = default;
};

struct BackboneSpec {
    std::string name;
    int native_input_side = 224;
    /// Freezable weight-bearing units as registered by the provider, head excluded.
    int layer_count = 0;
    double unfreeze_fraction = 0.25;
    std::string pretrained_source;
    Preprocessing preprocessing;

    bool operator==(const BackboneSpec&) const = default;
};

/// The six ImageNet backbones, in a stable order.
std::vector<BackboneSpec> list_backbones();

/// Small sequential backbone used as a desk-scale stand-in; not part of list_backbones().
BackboneSpec tiny_backbone_spec();
std::vector<nn::ConvUnitConfig> tiny_backbone_layout();
std::vector<nn::ConvUnitConfig> vgg16_layout();

/// Looks up a registered backbone (the six plus stand-ins). Throws DomainError.
BackboneSpec find_backbone(const std::string& name);

// ---------------------------------------------------------------------------
// Archives

/// Provider-native parameter archive: JSON header describing the unit layout followed
/// by raw little-endian float32 tensors.
struct WeightsArchive {
    std::string backbone;
    int input_side = 0;
    Preprocessing preprocessing;
    std::vector<nn::ConvUnitConfig> units;
    /// Tensors in header order, keyed by parameter name.
    std::vector<std::pair<std::string, std::vector<float>>> tensors;
    /// Free-form header fields (checkpoints store head state, trainability, epoch).
    std::map<std::string, std::string> attributes;

    const std::vector<float>* find(const std::string& name) const;
};

void write_archive(const WeightsArchive& archive, const std::filesystem::path& path);
/// Throws ProvenanceError if the file is missing or malformed.
WeightsArchive read_archive(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of a file.
std::string sha256_file(const std::filesystem::path& path);

struct LockEntry {
    std::string name;
    std::string source_uri;
    std::string digest;
};

/// `weights.lock`: one "name source_uri sha256" record per line, '#' comments.
std::vector<LockEntry> read_lockfile(const std::filesystem::path& path);
void write_lockfile(const std::vector<LockEntry>& entries, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Providers

struct Backbone {
    std::vector<nn::ConvUnit> units;
    int input_side = 0;
};

class BackboneProvider {
public:
    virtual ~BackboneProvider() = default;
    virtual Backbone load(const BackboneSpec& spec) const = 0;
};

/// Resolves `<cache>/<pretrained_source>` and checks its digest against `<cache>/weights.lock`.
class ArchiveProvider : public BackboneProvider {
public:
    explicit ArchiveProvider(std::filesystem::path cache_dir);
    Backbone load(const BackboneSpec& spec) const override;

    /// PAVECRACK_CACHE, else ~/.cache/pavecrack.
    static std::filesystem::path default_cache_dir();

private:
    std::filesystem::path cache_dir_;
};

/// Seeded He-normal initialization of a fixed layout; stands in for pretrained weights.
class SyntheticProvider : public BackboneProvider {
public:
    SyntheticProvider(std::vector<nn::ConvUnitConfig> layout, std::uint64_t seed);
    Backbone load(const BackboneSpec& spec) const override;

private:
    std::vector<nn::ConvUnitConfig> layout_;
    std::uint64_t seed_;
};

/// Synthetic provider for stand-ins, archive provider for everything else.
std::unique_ptr<BackboneProvider> default_provider(const BackboneSpec& spec,
                                                   const std::filesystem::path& cache_dir);

// ---------------------------------------------------------------------------
// Model

/// Anything that maps a patch to a crack probability in [0, 1].
class PatchClassifier {
public:
    virtual ~PatchClassifier() = default;
    virtual float predict_probability(const PatchSample& patch) const = 0;
    virtual std::vector<float> predict_probabilities(std::span<const PatchSample> patches) const;
};

/// Resized to the native side with bilinear interpolation, then normalized. Shape 1x3xSxS.
nn::Tensor preprocess(const PatchSample& patch, const BackboneSpec& spec);
/// Stacks several preprocessed patches into one batch.
nn::Tensor preprocess_batch(std::span<const PatchSample> patches, const BackboneSpec& spec);

struct StepResult {
    double loss = 0.0;
    std::size_t correct = 0;
};

class ClassifierModel : public PatchClassifier {
public:
    ClassifierModel(BackboneSpec spec, Backbone backbone, std::uint64_t head_seed);

    const BackboneSpec& spec() const { return spec_; }
    int layer_count() const { return static_cast<int>(units_.size()); }
    const std::vector<nn::ConvUnit>& units() const { return units_; }
    const nn::DenseHead& head() const { return head_; }

    /// Only the head stays trainable.
    void freeze_backbone() { trainable_units_ = 0; }
    /// Exactly the topmost ceil(fraction * layer_count) units plus the head become trainable.
    /// Throws DomainError outside [0, 1].
    void unfreeze_top(double fraction);
    int trainable_unit_count() const { return trainable_units_; }
    bool unit_trainable(int index) const { return index >= layer_count() - trainable_units_; }

    std::size_t trainable_parameter_count() const;
    std::size_t total_parameter_count() const;

    using ParameterVisitor = std::function<void(const std::string& owner, const nn::Parameter&, bool trainable)>;
    void visit_parameters(const ParameterVisitor& visit) const;

    /// Evaluation-mode logits and probabilities.
    std::vector<float> logits(const nn::Tensor& batch) const;
    std::vector<float> infer(const nn::Tensor& batch) const;
    float predict_probability(const PatchSample& patch) const override;
    std::vector<float> predict_probabilities(std::span<const PatchSample> patches) const override;

    /// One optimization step on a batch (targets in {0,1}). Batch norm of trainable units uses
    /// batch statistics; frozen units run in inference mode.
    StepResult train_step(const nn::Tensor& batch, const std::vector<float>& targets,
                          const nn::AdamOptions& optimizer);

    void save_checkpoint(const std::filesystem::path& path,
                         const std::map<std::string, std::string>& attributes = {}) const;
    static ClassifierModel load_checkpoint(const std::filesystem::path& path);

private:
    std::vector<nn::Parameter*> trainable_parameters();

    BackboneSpec spec_;
    std::vector<nn::ConvUnit> units_;
    nn::DenseHead head_;
    int trainable_units_ = 0;
};

/// Loads the backbone through `provider` and attaches a freshly seeded head. The model starts
/// with the backbone frozen. Throws IntegrityError if the provider's unit count disagrees
/// with spec.layer_count.
ClassifierModel instantiate(const BackboneSpec& spec, const BackboneProvider& provider, std::uint64_t head_seed);

/// Uses default_provider(spec, ArchiveProvider::default_cache_dir()).
ClassifierModel instantiate(const BackboneSpec& spec, std::uint64_t head_seed = 0);

/// Copy with trainability set by unfreeze_top.
ClassifierModel unfreeze_top(ClassifierModel model, double fraction);

}  // namespace pavecrack
