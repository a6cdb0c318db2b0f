#pragma once

#include <cmath>
#include <stdexcept>

#include "tensor.hpp"

namespace vdrl {

enum class SlownessKind {
    kL2,          // mean squared step difference
    kL1,          // mean absolute step difference
    kGroupSparse  // squared sum of per-step channel-group norms
};

struct SlownessOptions {
    /// Group-sparse penalty squares the summed group norms by default; the
    /// plain (unsquared) sum is available as a variant.
    bool squared_group_sum = true;
    /// Group norms below this are treated as zero when forming gradients.
    double group_norm_floor = 1e-12;
};

namespace detail {

inline void check_slowness_input(const Tensor& z) {
    if (z.rank() != 2)
        throw std::invalid_argument("slowness: expected a [steps, channels] tensor");
    if (z.dim(0) < 2)
        throw std::invalid_argument("slowness: need at least two time steps");
    if (z.dim(1) == 0) throw std::invalid_argument("slowness: no channels");
}

}  // namespace detail

/// Slowness penalty over a [steps, channels] trajectory. All three variants
/// are normalised by (steps - 1) * channels.
inline double slowness_penalty(const Tensor& z, SlownessKind kind,
                               const SlownessOptions& opts = {}) {
    detail::check_slowness_input(z);
    const std::size_t T = z.dim(0);
    const std::size_t C = z.dim(1);
    const double norm = 1.0 / (static_cast<double>(T - 1) * static_cast<double>(C));

    switch (kind) {
        case SlownessKind::kL2: {
            double acc = 0.0;
            for (std::size_t t = 0; t + 1 < T; ++t)
                for (std::size_t c = 0; c < C; ++c) {
                    double d = z.at(t + 1, c) - z.at(t, c);
                    acc += d * d;
                }
            return acc * norm;
        }
        case SlownessKind::kL1: {
            double acc = 0.0;
            for (std::size_t t = 0; t + 1 < T; ++t)
                for (std::size_t c = 0; c < C; ++c) acc += std::abs(z.at(t + 1, c) - z.at(t, c));
            return acc * norm;
        }
        case SlownessKind::kGroupSparse: {
            double sum_norms = 0.0;
            for (std::size_t t = 0; t + 1 < T; ++t) {
                double sq = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    double d = z.at(t + 1, c) - z.at(t, c);
                    sq += d * d;
                }
                sum_norms += std::sqrt(sq);
            }
            return (opts.squared_group_sum ? sum_norms * sum_norms : sum_norms) * norm;
        }
    }
    throw std::logic_error("slowness_penalty: unknown kind");
}

/// Analytic gradient of slowness_penalty with respect to z.
inline Tensor slowness_gradient(const Tensor& z, SlownessKind kind,
                                const SlownessOptions& opts = {}) {
    detail::check_slowness_input(z);
    const std::size_t T = z.dim(0);
    const std::size_t C = z.dim(1);
    const double norm = 1.0 / (static_cast<double>(T - 1) * static_cast<double>(C));

    // d(penalty)/d(delta_{t,c}) for each of the T-1 difference rows, then a
    // scatter: dz_t += g_{t-1} - g_t.
    Tensor dG({T - 1, C});
    switch (kind) {
        case SlownessKind::kL2: {
            for (std::size_t t = 0; t + 1 < T; ++t)
                for (std::size_t c = 0; c < C; ++c)
                    dG.at(t, c) = 2.0 * (z.at(t + 1, c) - z.at(t, c)) * norm;
            break;
        }
        case SlownessKind::kL1: {
            for (std::size_t t = 0; t + 1 < T; ++t)
                for (std::size_t c = 0; c < C; ++c) {
                    double d = z.at(t + 1, c) - z.at(t, c);
                    dG.at(t, c) = (d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) * norm;
                }
            break;
        }
        case SlownessKind::kGroupSparse: {
            double sum_norms = 0.0;
            std::vector<double> norms(T - 1, 0.0);
            for (std::size_t t = 0; t + 1 < T; ++t) {
                double sq = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                    double d = z.at(t + 1, c) - z.at(t, c);
                    sq += d * d;
                }
                norms[t] = std::sqrt(sq);
                sum_norms += norms[t];
            }
            double outer = opts.squared_group_sum ? 2.0 * sum_norms : 1.0;
            for (std::size_t t = 0; t + 1 < T; ++t) {
                if (norms[t] <= opts.group_norm_floor) continue;  // subgradient 0 at the kink
                double scale = outer * norm / norms[t];
                for (std::size_t c = 0; c < C; ++c)
                    dG.at(t, c) = scale * (z.at(t + 1, c) - z.at(t, c));
            }
            break;
        }
    }

    Tensor dz({T, C});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) {
            double g = 0.0;
            if (t > 0) g += dG.at(t - 1, c);
            if (t + 1 < T) g -= dG.at(t, c);
            dz.at(t, c) = g;
        }
    return dz;
}

}  // namespace vdrl
