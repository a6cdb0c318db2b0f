#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "codec.hpp"

namespace vdrl {

inline double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("correlation: size mismatch");
    if (x.size() < 2) throw std::invalid_argument("correlation: need at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0 || syy == 0)
        throw std::invalid_argument("correlation: constant input has no correlation");
    return sxy / std::sqrt(sxx * syy);
}

/// Ranks starting at 1; tied values share the average of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double shared = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = shared;
        i = j + 1;
    }
    return ranks;
}

inline double spearman_correlation(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("correlation: size mismatch");
    return pearson_correlation(average_ranks(x), average_ranks(y));
}

/// Histogram of per-channel level-change magnitudes. Zero jumps are
/// non-events and excluded, so bins cover 1..2k and the total equals the
/// (uncapped) event count minus one initial event per channel.
inline std::map<int, std::size_t> jump_histogram(const DenseCodes& codes) {
    std::map<int, std::size_t> bins;
    for (std::size_t c = 0; c < codes.num_channels; ++c) {
        for (std::size_t t = 1; t < codes.num_steps; ++t) {
            const int jump = std::abs(codes.at(t, c) - codes.at(t - 1, c));
            if (jump != 0) ++bins[jump];
        }
    }
    return bins;
}

/// Same histogram computed from an event stream (splits forced by the run
/// length cap appear as zero jumps and are likewise excluded).
inline std::map<int, std::size_t> jump_histogram(const EventSequence& seq) {
    std::vector<ChannelRuns> per_channel = deinterleave(seq);
    std::map<int, std::size_t> bins;
    for (const ChannelRuns& runs : per_channel) {
        for (std::size_t i = 1; i < runs.values.size(); ++i) {
            const int jump = std::abs(runs.values[i] - runs.values[i - 1]);
            if (jump == 0) continue;
            if (jump > 2 * seq.k) throw std::invalid_argument("jump_histogram: jump exceeds 2k");
            ++bins[jump];
        }
    }
    return bins;
}

inline std::size_t histogram_total(const std::map<int, std::size_t>& bins) {
    std::size_t total = 0;
    for (const auto& [jump, count] : bins) total += count;
    return total;
}

/// Event counts per fixed-width time bin (a "barcode" view of event density).
/// Events land in the bin containing their start time; the bins always sum
/// to the event count.
inline std::vector<std::size_t> barcode(const EventSequence& seq, double bin_seconds) {
    if (bin_seconds <= 0) throw std::invalid_argument("barcode: bin width must be positive");
    if (seq.base_rate_hz <= 0) throw std::invalid_argument("barcode: missing base rate");
    std::vector<int> lengths;
    lengths.reserve(seq.events.size());
    for (const Run& r : seq.events) lengths.push_back(r.length);
    ChannelsOffsets co = infer_channels_offsets(lengths, seq.num_channels);
    std::vector<std::size_t> bins;
    for (std::size_t i = 0; i < seq.events.size(); ++i) {
        const double t = static_cast<double>(co.offsets[i]) / seq.base_rate_hz;
        const std::size_t bin = static_cast<std::size_t>(t / bin_seconds);
        if (bin >= bins.size()) bins.resize(bin + 1, 0);
        ++bins[bin];
    }
    return bins;
}

inline double pcm_bits_per_second(double sample_rate_hz, int bits_per_sample) {
    if (sample_rate_hz <= 0 || bits_per_sample < 1)
        throw std::invalid_argument("pcm_bits_per_second: bad arguments");
    return sample_rate_hz * bits_per_sample;
}

/// Fixed-width cost of the event stream: each event spends log2(2k+1) bits
/// on its value and log2(max_run_length) bits on its length.
inline double raw_bits_per_second(double events_per_second, int k, int max_run_length) {
    if (events_per_second < 0 || k < 1 || max_run_length < 1)
        throw std::invalid_argument("raw_bits_per_second: bad arguments");
    return events_per_second *
           (std::log2(2.0 * k + 1.0) + std::log2(static_cast<double>(max_run_length)));
}

inline double nll_bits_per_second(double nats_per_event, double events_per_second) {
    if (events_per_second < 0) throw std::invalid_argument("nll_bits_per_second: bad rate");
    return events_per_second * nats_per_event / std::log(2.0);
}

/// Direction-agreement summary for a control-variable trace: of all pairs of
/// consecutive non-hold moves, how many kept the same sign. A well-settled
/// controller pushes this toward 1; oscillation around the target pushes it
/// toward 0.
struct SignAgreement {
    std::size_t moves = 0;
    std::size_t pairs = 0;
    std::size_t agreements = 0;

    double fraction() const {
        return pairs == 0 ? 1.0 : static_cast<double>(agreements) / static_cast<double>(pairs);
    }
};

inline SignAgreement sign_agreement(const std::vector<double>& trace) {
    SignAgreement out;
    int prev = 0;
    for (std::size_t i = 1; i < trace.size(); ++i) {
        const double d = trace[i] - trace[i - 1];
        if (d == 0) continue;
        const int s = d > 0 ? 1 : -1;
        ++out.moves;
        if (prev != 0) {
            ++out.pairs;
            if (s == prev) ++out.agreements;
        }
        prev = s;
    }
    return out;
}

}  // namespace vdrl
