#include "pavecrack/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include <Eigen/Core>

#include "pavecrack/errors.hpp"

namespace pavecrack::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

void im2col(const float* x, int channels, int h, int w, int k, float* col) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < channels; ++c) {
        const float* plane = x + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                float* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    float* dst = row + static_cast<std::size_t>(y) * w;
                    if (sy < 0 || sy >= h) {
                        std::fill(dst, dst + w, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(sy) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - pad;
                        dst[xx] = (sx < 0 || sx >= w) ? 0.0f : src[sx];
                    }
                }
            }
        }
    }
}

void col2im(const float* col, int channels, int h, int w, int k, float* x) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < channels; ++c) {
        float* plane = x + static_cast<std::size_t>(c) * hw;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const float* row = col + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    const float* src = row + static_cast<std::size_t>(y) * w;
                    float* dst = plane + static_cast<std::size_t>(sy) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int sx = xx + kx - pad;
                        if (sx >= 0 && sx < w) dst[sx] += src[xx];
                    }
                }
            }
        }
    }
}

Tensor max_pool(const Tensor& x, std::vector<std::int32_t>* index) {
    Tensor out(x.n, x.c, x.h / 2, x.w / 2);
    if (index) index->assign(out.size(), 0);
    std::size_t o = 0;
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * x.c + c) * x.h * x.w;
            for (int y = 0; y < out.h; ++y) {
                for (int xx = 0; xx < out.w; ++xx, ++o) {
                    std::size_t best = base + static_cast<std::size_t>(2 * y) * x.w + 2 * xx;
                    for (int dy = 0; dy < 2; ++dy) {
                        for (int dx = 0; dx < 2; ++dx) {
                            const std::size_t i = base + static_cast<std::size_t>(2 * y + dy) * x.w + 2 * xx + dx;
                            if (x.data[i] > x.data[best]) best = i;
                        }
                    }
                    out.data[o] = x.data[best];
                    if (index) (*index)[o] = static_cast<std::int32_t>(best);
                }
            }
        }
    }
    return out;
}

}  // namespace

void Parameter::zero_grad() {
    grad.assign(value.size(), 0.0f);
}

void adam_step(Parameter& p, const AdamOptions& o) {
    if (p.m.size() != p.value.size()) {
        p.m.assign(p.value.size(), 0.0f);
        p.v.assign(p.value.size(), 0.0f);
        p.step = 0;
    }
    p.step += 1;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(p.step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(p.step));
    const float b1 = static_cast<float>(o.beta1);
    const float b2 = static_cast<float>(o.beta2);
    const float step_size = static_cast<float>(o.learning_rate * std::sqrt(bc2) / bc1);
    const float eps = static_cast<float>(o.epsilon * std::sqrt(bc2));
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const float g = p.grad[i];
        p.m[i] = b1 * p.m[i] + (1.0f - b1) * g;
        p.v[i] = b2 * p.v[i] + (1.0f - b2) * g * g;
        p.value[i] -= step_size * p.m[i] / (std::sqrt(p.v[i]) + eps);
    }
}

// ---------------------------------------------------------------------------
// ConvUnit

ConvUnit::ConvUnit(ConvUnitConfig config) : config_(std::move(config)) {
    if (config_.kernel <= 0 || config_.kernel % 2 == 0) {
        throw DomainError("conv kernel must be odd and positive");
    }
    const auto ckk = static_cast<std::size_t>(config_.in_channels) * config_.kernel * config_.kernel;
    const auto out = static_cast<std::size_t>(config_.out_channels);
    weight_ = Parameter(config_.name + ".weight", out * ckk);
    bias_ = Parameter(config_.name + ".bias", out);
    if (config_.batch_norm) {
        gamma_ = Parameter(config_.name + ".bn_gamma", out);
        beta_ = Parameter(config_.name + ".bn_beta", out);
        running_mean_ = Parameter(config_.name + ".bn_running_mean", out);
        running_var_ = Parameter(config_.name + ".bn_running_var", out);
        std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
        std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0f);
    }
}

void ConvUnit::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const double fan_in = static_cast<double>(config_.in_channels) * config_.kernel * config_.kernel;
    std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
    for (auto& w : weight_.value) w = dist(rng);
    std::fill(bias_.value.begin(), bias_.value.end(), 0.0f);
    if (config_.batch_norm) {
        std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
        std::fill(beta_.value.begin(), beta_.value.end(), 0.0f);
        std::fill(running_mean_.value.begin(), running_mean_.value.end(), 0.0f);
        std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0f);
    }
}

std::vector<Parameter*> ConvUnit::parameters() {
    if (config_.batch_norm) return {&weight_, &bias_, &gamma_, &beta_};
    return {&weight_, &bias_};
}

std::vector<const Parameter*> ConvUnit::parameters() const {
    if (config_.batch_norm) return {&weight_, &bias_, &gamma_, &beta_};
    return {&weight_, &bias_};
}

std::vector<Parameter*> ConvUnit::buffers() {
    if (config_.batch_norm) return {&running_mean_, &running_var_};
    return {};
}

std::vector<const Parameter*> ConvUnit::buffers() const {
    if (config_.batch_norm) return {&running_mean_, &running_var_};
    return {};
}

std::size_t ConvUnit::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
}

Tensor ConvUnit::convolve(const Tensor& x, std::vector<float>* columns) const {
    if (x.c != config_.in_channels) {
        throw ShapeError(config_.name + ": expected " + std::to_string(config_.in_channels) +
                         " input channels, got " + std::to_string(x.c));
    }
    const int k = config_.kernel;
    const int out_c = config_.out_channels;
    const int ckk = x.c * k * k;
    const int hw = x.h * x.w;
    Tensor out(x.n, out_c, x.h, x.w);
    std::vector<float> scratch;
    if (columns) {
        columns->assign(static_cast<std::size_t>(x.n) * ckk * hw, 0.0f);
    } else {
        scratch.assign(static_cast<std::size_t>(ckk) * hw, 0.0f);
    }
    ConstRowMap weights(weight_.value.data(), out_c, ckk);
    for (int n = 0; n < x.n; ++n) {
        float* col = columns ? columns->data() + static_cast<std::size_t>(n) * ckk * hw : scratch.data();
        im2col(x.sample(n), x.c, x.h, x.w, k, col);
        RowMap result(out.sample(n), out_c, hw);
        result.noalias() = weights * ConstRowMap(col, ckk, hw);
        for (int o = 0; o < out_c; ++o) result.row(o).array() += bias_.value[o];
    }
    return out;
}

Tensor ConvUnit::infer(const Tensor& x) const {
    Tensor z = convolve(x, nullptr);
    const std::size_t hw = static_cast<std::size_t>(z.h) * z.w;
    for (int n = 0; n < z.n; ++n) {
        for (int c = 0; c < z.c; ++c) {
            float* p = z.data.data() + (static_cast<std::size_t>(n) * z.c + c) * hw;
            float scale = 1.0f, shift = 0.0f;
            if (config_.batch_norm) {
                scale = gamma_.value[c] / std::sqrt(running_var_.value[c] + kBatchNormEpsilon);
                shift = beta_.value[c] - running_mean_.value[c] * scale;
            }
            for (std::size_t i = 0; i < hw; ++i) p[i] = std::max(0.0f, p[i] * scale + shift);
        }
    }
    return config_.pool ? max_pool(z, nullptr) : z;
}

Tensor ConvUnit::forward(const Tensor& x, bool batch_stats) {
    cache_ = Cache{};
    cache_.in_h = x.h;
    cache_.in_w = x.w;
    cache_.batch = x.n;
    cache_.batch_stats = batch_stats && config_.batch_norm;
    Tensor z = convolve(x, &cache_.columns);
    const std::size_t hw = static_cast<std::size_t>(z.h) * z.w;
    const double count = static_cast<double>(z.n) * static_cast<double>(hw);

    if (config_.batch_norm) {
        cache_.inv_std.assign(static_cast<std::size_t>(z.c), 0.0f);
        for (int c = 0; c < z.c; ++c) {
            float mean = running_mean_.value[c];
            float var = running_var_.value[c];
            if (cache_.batch_stats) {
                double s = 0.0, ss = 0.0;
                for (int n = 0; n < z.n; ++n) {
                    const float* p = z.data.data() + (static_cast<std::size_t>(n) * z.c + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) s += p[i];
                }
                const double m = s / count;
                for (int n = 0; n < z.n; ++n) {
                    const float* p = z.data.data() + (static_cast<std::size_t>(n) * z.c + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - m) * (p[i] - m);
                }
                mean = static_cast<float>(m);
                var = static_cast<float>(ss / count);
                const float unbiased = count > 1 ? static_cast<float>(ss / (count - 1)) : var;
                running_mean_.value[c] = (1 - kBatchNormMomentum) * running_mean_.value[c] + kBatchNormMomentum * mean;
                running_var_.value[c] = (1 - kBatchNormMomentum) * running_var_.value[c] + kBatchNormMomentum * unbiased;
            }
            const float inv = 1.0f / std::sqrt(var + kBatchNormEpsilon);
            cache_.inv_std[c] = inv;
            for (int n = 0; n < z.n; ++n) {
                float* p = z.data.data() + (static_cast<std::size_t>(n) * z.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] = (p[i] - mean) * inv;
            }
        }
        cache_.normalized = z;
        for (int n = 0; n < z.n; ++n) {
            for (int c = 0; c < z.c; ++c) {
                float* p = z.data.data() + (static_cast<std::size_t>(n) * z.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) p[i] = p[i] * gamma_.value[c] + beta_.value[c];
            }
        }
    }
    for (auto& v : z.data) v = std::max(0.0f, v);
    cache_.activated = z;
    if (!config_.pool) return z;
    return max_pool(z, &cache_.pool_index);
}

Tensor ConvUnit::backward(const Tensor& grad_out, bool need_input_grad) {
    if (cache_.batch == 0) throw std::logic_error(config_.name + ": backward without forward");
    const Tensor& act = cache_.activated;
    Tensor g(act.n, act.c, act.h, act.w);
    if (config_.pool) {
        for (std::size_t o = 0; o < grad_out.size(); ++o) g.data[cache_.pool_index[o]] += grad_out.data[o];
    } else {
        g.data = grad_out.data;
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (act.data[i] <= 0.0f) g.data[i] = 0.0f;
    }

    const std::size_t hw = static_cast<std::size_t>(g.h) * g.w;
    if (config_.batch_norm) {
        const Tensor& xhat = cache_.normalized;
        const double count = static_cast<double>(g.n) * static_cast<double>(hw);
        for (int c = 0; c < g.c; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < g.n; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    sum_dy += g.data[off + i];
                    sum_dy_xhat += static_cast<double>(g.data[off + i]) * xhat.data[off + i];
                }
            }
            gamma_.grad[c] += static_cast<float>(sum_dy_xhat);
            beta_.grad[c] += static_cast<float>(sum_dy);
            const float scale = gamma_.value[c] * cache_.inv_std[c];
            const float mean_dy = static_cast<float>(sum_dy / count);
            const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / count);
            for (int n = 0; n < g.n; ++n) {
                const std::size_t off = (static_cast<std::size_t>(n) * g.c + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    if (cache_.batch_stats) {
                        g.data[off + i] = scale * (g.data[off + i] - mean_dy - xhat.data[off + i] * mean_dy_xhat);
                    } else {
                        g.data[off + i] *= scale;
                    }
                }
            }
        }
    }

    const int k = config_.kernel;
    const int in_c = config_.in_channels;
    const int out_c = config_.out_channels;
    const int ckk = in_c * k * k;
    Tensor dx;
    if (need_input_grad) dx = Tensor(g.n, in_c, cache_.in_h, cache_.in_w);
    RowMap dw(weight_.grad.data(), out_c, ckk);
    ConstRowMap weights(weight_.value.data(), out_c, ckk);
    RowMat dcol;
    for (int n = 0; n < g.n; ++n) {
        ConstRowMap dz(g.sample(n), out_c, static_cast<Eigen::Index>(hw));
        ConstRowMap col(cache_.columns.data() + static_cast<std::size_t>(n) * ckk * hw, ckk,
                        static_cast<Eigen::Index>(hw));
        dw.noalias() += dz * col.transpose();
        for (int o = 0; o < out_c; ++o) bias_.grad[o] += dz.row(o).sum();
        if (need_input_grad) {
            dcol.noalias() = weights.transpose() * dz;
            col2im(dcol.data(), in_c, cache_.in_h, cache_.in_w, k, dx.sample(n));
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// DenseHead

DenseHead::DenseHead(int in_features)
    : in_features_(in_features),
      weight_("head.weight", static_cast<std::size_t>(in_features)),
      bias_("head.bias", 1) {}

void DenseHead::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const float limit = std::sqrt(6.0f / static_cast<float>(in_features_ + 1));
    std::uniform_real_distribution<float> dist(-limit, limit);
    for (auto& w : weight_.value) w = dist(rng);
    bias_.value[0] = 0.0f;
}

namespace {
Tensor global_average(const Tensor& x) {
    Tensor pooled(x.n, x.c, 1, 1);
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    for (int n = 0; n < x.n; ++n) {
        for (int c = 0; c < x.c; ++c) {
            const float* p = x.data.data() + (static_cast<std::size_t>(n) * x.c + c) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += p[i];
            pooled.at(n, c, 0, 0) = static_cast<float>(s / static_cast<double>(hw));
        }
    }
    return pooled;
}
}  // namespace

std::vector<float> DenseHead::infer(const Tensor& features) const {
    if (features.c != in_features_) {
        throw ShapeError("head expects " + std::to_string(in_features_) + " features, got " +
                         std::to_string(features.c));
    }
    const Tensor pooled = global_average(features);
    std::vector<float> logits(static_cast<std::size_t>(features.n));
    for (int n = 0; n < features.n; ++n) {
        double z = bias_.value[0];
        for (int c = 0; c < in_features_; ++c) z += static_cast<double>(weight_.value[c]) * pooled.at(n, c, 0, 0);
        logits[n] = static_cast<float>(z);
    }
    return logits;
}

std::vector<float> DenseHead::forward(const Tensor& features) {
    auto logits = infer(features);
    cached_pooled_ = global_average(features);
    cached_h_ = features.h;
    cached_w_ = features.w;
    return logits;
}

Tensor DenseHead::backward(const std::vector<float>& grad_logits, bool need_input_grad) {
    const int batch = cached_pooled_.n;
    for (int n = 0; n < batch; ++n) {
        bias_.grad[0] += grad_logits[n];
        for (int c = 0; c < in_features_; ++c) weight_.grad[c] += grad_logits[n] * cached_pooled_.at(n, c, 0, 0);
    }
    if (!need_input_grad) return {};
    Tensor dx(batch, in_features_, cached_h_, cached_w_);
    const std::size_t hw = static_cast<std::size_t>(cached_h_) * cached_w_;
    const float inv = 1.0f / static_cast<float>(hw);
    for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < in_features_; ++c) {
            const float v = grad_logits[n] * weight_.value[c] * inv;
            float* p = dx.data.data() + (static_cast<std::size_t>(n) * in_features_ + c) * hw;
            std::fill(p, p + hw, v);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------

float sigmoid(float logit) {
    if (logit >= 0) {
        const float e = std::exp(-logit);
        return 1.0f / (1.0f + e);
    }
    const float e = std::exp(logit);
    return e / (1.0f + e);
}

double binary_cross_entropy(const std::vector<float>& logits, const std::vector<float>& targets,
                            std::vector<float>* grad) {
    if (logits.size() != targets.size() || logits.empty()) {
        throw ShapeError("binary cross-entropy needs equal, nonempty logit and target lists");
    }
    const double n = static_cast<double>(logits.size());
    double loss = 0.0;
    if (grad) grad->assign(logits.size(), 0.0f);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits[i];
        const double y = targets[i];
        loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        if (grad) (*grad)[i] = static_cast<float>((sigmoid(logits[i]) - y) / n);
    }
    return loss / n;
}

}  // namespace pavecrack::nn
