#pragma once

#include <stdexcept>
#include <vector>

#include "codec.hpp"

namespace vdrl {

/// Multiplicative controller that steers the slowness penalty weight so the
/// measured average event rate (AER) tracks a target. The weight moves by a
/// factor (1 + delta) whenever the measurement leaves the tolerance band
/// [target / (1 + epsilon), target * (1 + epsilon)] and holds inside it.
struct ControllerState {
    double lambda = 1e-6;
    double target_rate_hz = 0.0;
    double epsilon = 1e-2;
    double delta = 1e-3;
    double lambda_min = 1e-8;
    double lambda_max = 1e8;

    void validate() const {
        if (target_rate_hz <= 0)
            throw std::invalid_argument("ControllerState: target rate must be positive");
        if (epsilon <= 0 || delta <= 0)
            throw std::invalid_argument("ControllerState: epsilon and delta must be positive");
        if (lambda_min <= 0 || lambda_max < lambda_min)
            throw std::invalid_argument("ControllerState: bad lambda caps");
        if (lambda <= 0) throw std::invalid_argument("ControllerState: lambda must be positive");
    }

    double band_low() const { return target_rate_hz / (1.0 + epsilon); }
    double band_high() const { return target_rate_hz * (1.0 + epsilon); }
};

/// Direction of the last controller update; useful for logging.
enum class ControllerAction { kHold, kRaise, kLower };

/// One controller step: compare the measured rate against the tolerance band
/// and nudge lambda multiplicatively, clamping to the configured caps.
inline ControllerAction update_lambda(ControllerState& state, double measured_rate_hz) {
    state.validate();
    if (measured_rate_hz < 0)
        throw std::invalid_argument("update_lambda: measured rate must be non-negative");

    ControllerAction action = ControllerAction::kHold;
    if (measured_rate_hz > state.band_high()) {
        state.lambda *= (1.0 + state.delta);
        action = ControllerAction::kRaise;
    } else if (measured_rate_hz < state.band_low()) {
        state.lambda /= (1.0 + state.delta);
        action = ControllerAction::kLower;
    }
    if (state.lambda < state.lambda_min) state.lambda = state.lambda_min;
    if (state.lambda > state.lambda_max) state.lambda = state.lambda_max;
    return action;
}

/// Average event rate of one dense code grid, in events per second.
inline double estimate_aer(const DenseCodes& codes, int max_run_length = 256) {
    if (codes.num_steps == 0) throw std::invalid_argument("estimate_aer: empty grid");
    if (codes.base_rate_hz <= 0)
        throw std::invalid_argument("estimate_aer: base rate must be positive");
    double seconds = static_cast<double>(codes.num_steps) / codes.base_rate_hz;
    return static_cast<double>(count_events(codes, max_run_length)) / seconds;
}

/// Batch AER: mean of the per-sequence rates.
inline double estimate_aer(const std::vector<DenseCodes>& batch, int max_run_length = 256) {
    if (batch.empty()) throw std::invalid_argument("estimate_aer: empty batch");
    double acc = 0.0;
    for (const DenseCodes& codes : batch) acc += estimate_aer(codes, max_run_length);
    return acc / static_cast<double>(batch.size());
}

}  // namespace vdrl
