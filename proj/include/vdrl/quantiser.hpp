#pragma once

#include <cmath>
#include <stdexcept>

#include "codec.hpp"
#include "tensor.hpp"

namespace vdrl {

/// Scalar quantiser over 2k+1 levels on [-1, 1], with a hysteresis margin for
/// the Schmitt-trigger variant. The margin is expressed in unscaled units;
/// values at most 1/(2k) make the trigger memoryless.
struct QuantiserConfig {
    int k = 7;
    double margin = -1.0;  // < 0 means the default of 1/k
    double boundary = 1.0;

    double hysteresis() const { return margin < 0 ? 1.0 / k : margin; }

    void validate() const {
        if (k < 1) throw std::invalid_argument("QuantiserConfig: k must be >= 1");
        if (margin == 0 || margin < -1.0)
            throw std::invalid_argument("QuantiserConfig: margin must be positive");
        if (boundary != 1.0)
            throw std::invalid_argument("QuantiserConfig: only the unit boundary is supported");
    }
};

/// Nearest level for a single value: round half away from zero, then clip.
inline int quantise_level(double z, int k) {
    double r = std::round(z * k);
    if (r > k) r = k;
    if (r < -k) r = -k;
    return static_cast<int>(r);
}

namespace detail {

inline void check_code_input(const Tensor& z, const char* where) {
    if (z.rank() != 2)
        throw std::invalid_argument(std::string(where) + ": expected a [steps, channels] tensor");
    if (z.dim(0) == 0 || z.dim(1) == 0)
        throw std::invalid_argument(std::string(where) + ": empty input");
}

}  // namespace detail

/// Memoryless quantisation of a [steps, channels] tensor.
inline DenseCodes scalar_quantise(const Tensor& z, const QuantiserConfig& cfg,
                                  double base_rate_hz) {
    cfg.validate();
    detail::check_code_input(z, "scalar_quantise");
    DenseCodes codes(z.dim(0), z.dim(1), cfg.k, base_rate_hz);
    for (std::size_t i = 0; i < z.size(); ++i) codes.levels[i] = quantise_level(z.data[i], cfg.k);
    return codes;
}

/// Schmitt-trigger quantisation: each channel holds its previous level while
/// the raw input stays within `hysteresis` of that level's value, and
/// requantises (memorylessly) once it leaves. The first step is memoryless.
inline DenseCodes stq(const Tensor& z, const QuantiserConfig& cfg, double base_rate_hz) {
    cfg.validate();
    detail::check_code_input(z, "stq");
    const std::size_t T = z.dim(0);
    const std::size_t C = z.dim(1);
    const double m = cfg.hysteresis();
    DenseCodes codes(T, C, cfg.k, base_rate_hz);
    for (std::size_t c = 0; c < C; ++c) {
        int level = quantise_level(z.at(0, c), cfg.k);
        codes.at(0, c) = level;
        for (std::size_t t = 1; t < T; ++t) {
            double x = z.at(t, c);
            double held = static_cast<double>(level) / cfg.k;
            if (x < held - m || x > held + m) level = quantise_level(x, cfg.k);
            codes.at(t, c) = level;
        }
    }
    return codes;
}

/// Quantised levels as real values in [-1, 1] (level / k).
inline Tensor levels_to_real(const DenseCodes& codes) {
    Tensor out({codes.num_steps, codes.num_channels});
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = static_cast<double>(codes.levels[i]) / codes.k;
    return out;
}

/// Sum of squared excursions beyond the unit range: sum(max(|z| - 1, 0)^2).
inline double margin_penalty(const Tensor& z) {
    double total = 0.0;
    for (double v : z.data) {
        double excess = std::abs(v) - 1.0;
        if (excess > 0) total += excess * excess;
    }
    return total;
}

/// Analytic gradient of margin_penalty: 2 * sign(z) * max(|z| - 1, 0).
inline Tensor margin_penalty_grad(const Tensor& z) {
    Tensor g(z.shape);
    for (std::size_t i = 0; i < z.size(); ++i) {
        double v = z.data[i];
        double excess = std::abs(v) - 1.0;
        g.data[i] = excess > 0 ? 2.0 * excess * (v > 0 ? 1.0 : -1.0) : 0.0;
    }
    return g;
}

/// Continuous mu-law compression curve, [-1, 1] -> [-1, 1]. The discrete
/// encoder below is this curve followed by uniform binning.
inline double mu_law_compress(double x, int num_classes = 256) {
    if (num_classes < 2) throw std::invalid_argument("mu_law_compress: need at least 2 classes");
    if (std::abs(x) > 1.0 + 1e-12)
        throw std::invalid_argument("mu_law_compress: input outside [-1, 1]");
    if (x > 1.0) x = 1.0;
    if (x < -1.0) x = -1.0;
    const double mu = num_classes - 1;
    return std::copysign(std::log1p(mu * std::abs(x)) / std::log1p(mu), x);
}

/// Mu-law compand a sample in [-1, 1] to one of `num_classes` codes.
inline int mu_law_encode(double x, int num_classes = 256) {
    if (num_classes < 2) throw std::invalid_argument("mu_law_encode: need at least 2 classes");
    if (std::abs(x) > 1.0 + 1e-12)
        throw std::invalid_argument("mu_law_encode: input outside [-1, 1]");
    if (x > 1.0) x = 1.0;
    if (x < -1.0) x = -1.0;
    const double mu = num_classes - 1;
    double y = std::copysign(std::log1p(mu * std::abs(x)) / std::log1p(mu), x);
    int code = static_cast<int>(std::floor((y + 1.0) * 0.5 * mu + 0.5));
    if (code < 0) code = 0;
    if (code > num_classes - 1) code = num_classes - 1;
    return code;
}

/// Inverse companding: class code back to a sample in [-1, 1].
inline double mu_law_decode(int code, int num_classes = 256) {
    if (num_classes < 2) throw std::invalid_argument("mu_law_decode: need at least 2 classes");
    if (code < 0 || code >= num_classes)
        throw std::invalid_argument("mu_law_decode: code out of range");
    const double mu = num_classes - 1;
    double y = 2.0 * code / mu - 1.0;
    return std::copysign((std::pow(1.0 + mu, std::abs(y)) - 1.0) / mu, y);
}

}  // namespace vdrl
