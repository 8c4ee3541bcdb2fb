#pragma once

// Minimal CPU network engine for sequential convolutional backbones with a
// global-average-pool + dense logistic head. Float32, NCHW, single-threaded and
// deterministic.

#include <cstdint>
#include <string>
#include <vector>

namespace pavecrack::nn {

struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t size() const { return data.size(); }
    std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }
    float* sample(int i) { return data.data() + sample_size() * static_cast<std::size_t>(i); }
    const float* sample(int i) const { return data.data() + sample_size() * static_cast<std::size_t>(i); }
    float& at(int in, int ic, int ih, int iw) {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
    }
    float at(int in, int ic, int ih, int iw) const {
        return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
    }
};

/// Learnable tensor with its gradient and adaptive-moment state. The step counter is
/// per tensor so that tensors unfrozen late start with unbiased moment estimates.
struct Parameter {
    std::string name;
    std::vector<float> value;
    std::vector<float> grad;
    std::vector<float> m;
    std::vector<float> v;
    std::int64_t step = 0;

    Parameter() = default;
    Parameter(std::string name_, std::size_t count)
        : name(std::move(name_)), value(count, 0.0f), grad(count, 0.0f) {}
    std::size_t size() const { return value.size(); }
    void zero_grad();
};

struct AdamOptions {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-7;
};

/// Applies one adaptive-moment update using the gradient accumulated in `p`.
void adam_step(Parameter& p, const AdamOptions& options);

struct ConvUnitConfig {
    std::string name;
    int in_channels = 3;
    int out_channels = 8;
    int kernel = 3;  // odd; "same" zero padding, stride 1
    bool batch_norm = false;
    bool pool = false;  // 2x2 max pool, stride 2, after the activation

    bool operator==(const ConvUnitConfig&) const = default;
};

/// conv -> [batch norm] -> ReLU -> [max pool]. The freezable unit of a backbone.
class ConvUnit {
public:
    explicit ConvUnit(ConvUnitConfig config);

    const ConvUnitConfig& config() const { return config_; }
    int output_side(int input_side) const { return config_.pool ? input_side / 2 : input_side; }

    /// Inference path: batch norm uses running statistics, nothing is cached.
    Tensor infer(const Tensor& x) const;
    /// Training path. With `batch_stats` the batch norm normalizes with batch moments and
    /// updates its running statistics. Caches what backward() needs.
    Tensor forward(const Tensor& x, bool batch_stats);
    /// Accumulates parameter gradients. Returns the input gradient only if requested.
    Tensor backward(const Tensor& grad_out, bool need_input_grad);

    std::vector<Parameter*> parameters();
    std::vector<const Parameter*> parameters() const;
    std::vector<Parameter*> buffers();  // running statistics (never trained)
    std::vector<const Parameter*> buffers() const;
    std::size_t parameter_count() const;

    /// He-normal weights, zero bias, unit BN scale.
    void initialize(std::uint64_t seed);

    static constexpr float kBatchNormEpsilon = 1e-5f;
    static constexpr float kBatchNormMomentum = 0.1f;

private:
    Tensor convolve(const Tensor& x, std::vector<float>* columns) const;

    ConvUnitConfig config_;
    Parameter weight_;  // [out, in * k * k]
    Parameter bias_;    // [out]
    Parameter gamma_;   // [out] (batch norm only)
    Parameter beta_;
    Parameter running_mean_;
    Parameter running_var_;

    struct Cache {
        int in_h = 0, in_w = 0, batch = 0;
        std::vector<float> columns;  // per sample im2col, concatenated
        Tensor normalized;           // batch-norm xhat (or pre-activation without BN)
        std::vector<float> inv_std;
        bool batch_stats = false;
        Tensor activated;            // post ReLU, before pooling
        std::vector<std::int32_t> pool_index;
    } cache_;
};

/// Global average pooling followed by a single logistic unit.
class DenseHead {
public:
    explicit DenseHead(int in_features = 0);

    int in_features() const { return in_features_; }
    /// Glorot-uniform weights, zero bias.
    void initialize(std::uint64_t seed);

    /// Returns one logit per sample.
    std::vector<float> infer(const Tensor& features) const;
    std::vector<float> forward(const Tensor& features);
    /// `grad_logits` is dLoss/dlogit per sample. Returns dLoss/dfeatures.
    Tensor backward(const std::vector<float>& grad_logits, bool need_input_grad);

    std::vector<Parameter*> parameters() { return {&weight_, &bias_}; }
    std::vector<const Parameter*> parameters() const { return {&weight_, &bias_}; }
    std::size_t parameter_count() const { return weight_.size() + bias_.size(); }

private:
    int in_features_ = 0;
    Parameter weight_;
    Parameter bias_;
    Tensor cached_pooled_;
    int cached_h_ = 0, cached_w_ = 0;
};

/// Numerically stable logistic function.
float sigmoid(float logit);

/// Mean binary cross-entropy over logits. Writes dLoss/dlogit into `grad` when non-null.
double binary_cross_entropy(const std::vector<float>& logits, const std::vector<float>& targets,
                            std::vector<float>* grad);

}  // namespace pavecrack::nn
