#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rng.hpp"

namespace vdrl {

/// Per-class regime statistics for the synthetic corpus. Classes differ in
/// how often the signal changes, how much of it is silence, and which
/// frequency band the active segments occupy — so classes with denser
/// structure genuinely carry more events to encode.
struct RegimeClassParams {
    double mean_regime_s = 0.15;  // regime lengths ~ Uniform[0.5, 1.5] * mean
    double silence_prob = 0.2;
    double freq_lo_hz = 100.0;
    double freq_hi_hz = 250.0;
};

struct SyntheticConfig {
    double sample_rate_hz = 2000.0;
    std::vector<RegimeClassParams> classes = default_classes();
    double active_noise_sigma = 0.02;
    int max_components = 3;

    static std::vector<RegimeClassParams> default_classes() {
        return {
            {0.35, 0.40, 70.0, 150.0},
            {0.18, 0.25, 100.0, 250.0},
            {0.09, 0.12, 150.0, 350.0},
            {0.05, 0.05, 220.0, 480.0},
        };
    }

    void validate() const {
        if (sample_rate_hz <= 0)
            throw std::invalid_argument("SyntheticConfig: sample rate must be positive");
        if (classes.empty()) throw std::invalid_argument("SyntheticConfig: no classes");
        if (max_components < 1)
            throw std::invalid_argument("SyntheticConfig: need at least one component");
        for (const RegimeClassParams& c : classes) {
            if (c.mean_regime_s <= 0)
                throw std::invalid_argument("SyntheticConfig: mean regime must be positive");
            if (c.silence_prob < 0 || c.silence_prob > 1)
                throw std::invalid_argument("SyntheticConfig: silence prob outside [0, 1]");
            if (c.freq_lo_hz <= 0 || c.freq_hi_hz < c.freq_lo_hz)
                throw std::invalid_argument("SyntheticConfig: bad frequency band");
            if (c.freq_hi_hz >= sample_rate_hz / 2)
                throw std::invalid_argument("SyntheticConfig: band exceeds Nyquist");
        }
    }
};

/// One generated clip: samples in [-1, 1], the sample indices where a new
/// regime starts (always including 0; consecutive silences merge), and the
/// class label.
struct SyntheticSignal {
    std::vector<double> samples;
    std::vector<std::int64_t> change_points;
    int class_id = 0;
    double sample_rate_hz = 0.0;
};

/// Piecewise-stationary signal: alternating regimes of silence or a small
/// sinusoid mixture, fully determined by (seed, duration, class).
inline SyntheticSignal generate_synthetic(std::uint64_t seed, double duration_s, int class_id,
                                          const SyntheticConfig& cfg = {}) {
    cfg.validate();
    if (duration_s <= 0) throw std::invalid_argument("generate_synthetic: bad duration");
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= cfg.classes.size())
        throw std::invalid_argument("generate_synthetic: class id out of range");
    const RegimeClassParams& cls = cfg.classes[static_cast<std::size_t>(class_id)];

    const std::size_t N = static_cast<std::size_t>(std::llround(duration_s * cfg.sample_rate_hz));
    if (N == 0) throw std::invalid_argument("generate_synthetic: duration too short");

    SyntheticSignal out;
    out.samples.assign(N, 0.0);
    out.class_id = class_id;
    out.sample_rate_hz = cfg.sample_rate_hz;

    Rng base(seed);
    Rng rng = base.fork(static_cast<std::uint64_t>(class_id));

    std::size_t t = 0;
    bool prev_silent = false;
    bool first = true;
    while (t < N) {
        double len_s = cls.mean_regime_s * rng.uniform(0.5, 1.5);
        std::size_t len = static_cast<std::size_t>(
            std::max<long long>(1, std::llround(len_s * cfg.sample_rate_hz)));
        len = std::min(len, N - t);

        bool silent = rng.uniform() < cls.silence_prob;
        if (first || !(silent && prev_silent))
            out.change_points.push_back(static_cast<std::int64_t>(t));
        first = false;

        if (!silent) {
            int m = 1 + static_cast<int>(rng.uniform_int(cfg.max_components));
            std::vector<double> freq(m), amp(m), phase(m);
            double raw_total = 0;
            for (int i = 0; i < m; ++i) {
                freq[i] = rng.uniform(cls.freq_lo_hz, cls.freq_hi_hz);
                amp[i] = rng.uniform(0.3, 1.0);
                raw_total += amp[i];
                phase[i] = rng.uniform(0.0, 6.283185307179586);
            }
            double target_amp = rng.uniform(0.5, 0.85);
            for (int i = 0; i < m; ++i) amp[i] *= target_amp / raw_total;
            const double two_pi = 6.283185307179586;
            for (std::size_t s = 0; s < len; ++s) {
                double time = static_cast<double>(t + s) / cfg.sample_rate_hz;
                double v = 0;
                for (int i = 0; i < m; ++i) v += amp[i] * std::sin(two_pi * freq[i] * time + phase[i]);
                v += rng.normal(0.0, cfg.active_noise_sigma);
                if (v > 1.0) v = 1.0;
                if (v < -1.0) v = -1.0;
                out.samples[t + s] = v;
            }
        }
        // Silent regimes stay exactly zero.
        prev_silent = silent;
        t += len;
    }
    return out;
}

/// Ground-truth structural density: regime changes per second.
inline double change_point_density(const SyntheticSignal& sig) {
    double seconds = static_cast<double>(sig.samples.size()) / sig.sample_rate_hz;
    return static_cast<double>(sig.change_points.size()) / seconds;
}

}  // namespace vdrl
