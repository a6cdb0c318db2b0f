#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace vdrl {

/// Dense grid of integer code levels, one row per time step.
/// Levels live in [-k, k]; `base_rate_hz` is the grid rate (steps per second).
struct DenseCodes {
    std::size_t num_steps = 0;
    std::size_t num_channels = 0;
    int k = 0;
    double base_rate_hz = 0.0;
    std::vector<int> levels;  // row-major [num_steps][num_channels]

    DenseCodes() = default;
    DenseCodes(std::size_t steps, std::size_t channels, int k_in, double rate_hz)
        : num_steps(steps),
          num_channels(channels),
          k(k_in),
          base_rate_hz(rate_hz),
          levels(steps * channels, 0) {}

    int& at(std::size_t t, std::size_t c) { return levels[t * num_channels + c]; }
    int at(std::size_t t, std::size_t c) const { return levels[t * num_channels + c]; }

    void validate() const {
        if (num_channels == 0) throw std::invalid_argument("DenseCodes: no channels");
        if (k < 1) throw std::invalid_argument("DenseCodes: k must be >= 1");
        if (base_rate_hz <= 0) throw std::invalid_argument("DenseCodes: base rate must be positive");
        if (levels.size() != num_steps * num_channels)
            throw std::invalid_argument("DenseCodes: level buffer size mismatch");
        for (int v : levels) {
            if (v < -k || v > k)
                throw std::invalid_argument("DenseCodes: level " + std::to_string(v) +
                                            " outside [-k, k]");
        }
    }
};

/// One run: `length` repetitions of `value`. Padding runs are (0, 0).
struct Run {
    int value = 0;
    int length = 0;
};

inline bool operator==(const Run& a, const Run& b) {
    return a.value == b.value && a.length == b.length;
}

/// Run list for a single channel (parallel value/length arrays).
struct ChannelRuns {
    std::vector<int> values;
    std::vector<int> lengths;
};

/// Interleaved multi-channel event stream plus the metadata needed to decode it.
struct EventSequence {
    std::vector<Run> events;
    std::size_t num_channels = 0;
    int max_run_length = 256;
    int k = 0;
    double base_rate_hz = 0.0;
    /// Set when an encode had to crop events to fit a caller-imposed budget.
    bool truncated = false;
};

namespace detail {

inline void check_positive_length(std::size_t output_length, const char* where) {
    if (output_length == 0)
        throw std::invalid_argument(std::string(where) + ": output_length must be positive");
}

}  // namespace detail

/// Run-length encode one channel. Runs are maximal, then greedily split into
/// chunks of at most `max_run_length`. The result arrays are padded with
/// (0, 0) entries to exactly `output_length` runs, or cropped if the signal
/// produces more runs than fit.
inline ChannelRuns rle_encode(const std::vector<int>& x, std::size_t output_length,
                              int max_run_length) {
    if (x.empty()) throw std::invalid_argument("rle_encode: empty input");
    detail::check_positive_length(output_length, "rle_encode");
    if (max_run_length < 1) throw std::invalid_argument("rle_encode: max_run_length must be >= 1");

    ChannelRuns out;
    std::size_t i = 0;
    while (i < x.size()) {
        std::size_t j = i + 1;
        while (j < x.size() && x[j] == x[i]) ++j;
        std::size_t run = j - i;
        while (run > 0) {
            int chunk = static_cast<int>(std::min<std::size_t>(run, max_run_length));
            out.values.push_back(x[i]);
            out.lengths.push_back(chunk);
            run -= chunk;
        }
        i = j;
    }
    if (out.values.size() > output_length) {
        out.values.resize(output_length);
        out.lengths.resize(output_length);
    } else {
        out.values.resize(output_length, 0);
        out.lengths.resize(output_length, 0);
    }
    return out;
}

/// Expand runs back to a dense channel of `output_length` samples.
/// Zero-length (padding) runs must form a suffix. If the runs cover fewer
/// than `output_length` samples the last value is repeated; excess is cropped.
inline std::vector<int> rle_decode(const std::vector<int>& values,
                                   const std::vector<int>& lengths,
                                   std::size_t output_length) {
    if (values.size() != lengths.size())
        throw std::invalid_argument("rle_decode: values/lengths size mismatch");
    detail::check_positive_length(output_length, "rle_decode");

    bool in_padding = false;
    std::size_t real_runs = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 0) throw std::invalid_argument("rle_decode: negative run length");
        if (lengths[i] == 0) {
            in_padding = true;
        } else {
            if (in_padding)
                throw std::invalid_argument("rle_decode: zero-length run before a real run");
            ++real_runs;
        }
    }
    if (real_runs == 0) throw std::invalid_argument("rle_decode: no runs to decode");

    std::vector<int> out;
    out.reserve(output_length);
    for (std::size_t i = 0; i < real_runs && out.size() < output_length; ++i) {
        std::size_t n = std::min<std::size_t>(lengths[i], output_length - out.size());
        out.insert(out.end(), n, values[i]);
    }
    // Underflow: repeat the final value out to the requested length.
    if (out.size() < output_length) out.insert(out.end(), output_length - out.size(), out.back());
    return out;
}

/// Exclusive prefix sum: offsets[i] = sum of lengths[0..i).
inline std::vector<std::int64_t> lengths_to_offsets(const std::vector<int>& lengths) {
    std::vector<std::int64_t> offsets(lengths.size(), 0);
    std::int64_t acc = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        offsets[i] = acc;
        acc += lengths[i];
    }
    return offsets;
}

struct ChannelsOffsets {
    std::vector<int> channels;
    std::vector<std::int64_t> offsets;
};

/// Recover each event's channel and start position from interleaved run
/// lengths alone. Works because the interleaved order sorts events by
/// (start position, channel): the next event always belongs to the channel
/// whose cursor is furthest behind, lowest channel index breaking ties.
inline ChannelsOffsets infer_channels_offsets(const std::vector<int>& lengths,
                                              std::size_t num_channels) {
    if (num_channels == 0)
        throw std::invalid_argument("infer_channels_offsets: need at least one channel");
    ChannelsOffsets out;
    out.channels.reserve(lengths.size());
    out.offsets.reserve(lengths.size());
    std::vector<std::int64_t> cursor(num_channels, 0);
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] <= 0)
            throw std::invalid_argument("infer_channels_offsets: run lengths must be positive");
        std::size_t c = 0;
        for (std::size_t j = 1; j < num_channels; ++j) {
            if (cursor[j] < cursor[c]) c = j;
        }
        out.channels.push_back(static_cast<int>(c));
        out.offsets.push_back(cursor[c]);
        cursor[c] += lengths[i];
    }
    return out;
}

/// Positions each channel's events occupy in the interleaved stream.
inline std::vector<std::vector<std::size_t>> channel_event_indices(
    const std::vector<int>& channels, std::size_t num_channels) {
    std::vector<std::vector<std::size_t>> idx(num_channels);
    for (std::size_t i = 0; i < channels.size(); ++i) {
        if (channels[i] < 0 || static_cast<std::size_t>(channels[i]) >= num_channels)
            throw std::invalid_argument("channel_event_indices: channel id out of range");
        idx[static_cast<std::size_t>(channels[i])].push_back(i);
    }
    return idx;
}

namespace detail {

inline std::int64_t runs_duration(const ChannelRuns& runs, const char* where) {
    std::int64_t total = 0;
    bool in_padding = false;
    if (runs.values.size() != runs.lengths.size())
        throw std::invalid_argument(std::string(where) + ": values/lengths size mismatch");
    for (std::size_t i = 0; i < runs.lengths.size(); ++i) {
        int len = runs.lengths[i];
        if (len < 0) throw std::invalid_argument(std::string(where) + ": negative run length");
        if (len == 0) {
            in_padding = true;
            continue;
        }
        if (in_padding)
            throw std::invalid_argument(std::string(where) + ": zero-length run before a real run");
        total += len;
    }
    return total;
}

}  // namespace detail

/// Merge per-channel run lists into one stream ordered by
/// (start position, channel). Trailing (0, 0) padding in the inputs is
/// dropped. All channels must span the same duration. If `max_events` is
/// given and the merged stream is longer, it is cropped and the result is
/// flagged `truncated`.
inline EventSequence interleave(const std::vector<ChannelRuns>& per_channel, int k,
                                int max_run_length, double base_rate_hz,
                                std::optional<std::size_t> max_events = std::nullopt) {
    if (per_channel.empty()) throw std::invalid_argument("interleave: no channels");
    const std::size_t num_channels = per_channel.size();

    std::int64_t duration = detail::runs_duration(per_channel[0], "interleave");
    for (std::size_t c = 1; c < num_channels; ++c) {
        if (detail::runs_duration(per_channel[c], "interleave") != duration)
            throw std::invalid_argument("interleave: channels span different durations");
    }

    struct Keyed {
        std::int64_t key;
        Run run;
    };
    std::vector<Keyed> keyed;
    for (std::size_t c = 0; c < num_channels; ++c) {
        const auto& runs = per_channel[c];
        std::int64_t start = 0;
        for (std::size_t i = 0; i < runs.lengths.size(); ++i) {
            if (runs.lengths[i] == 0) break;  // padding suffix
            if (runs.lengths[i] > max_run_length)
                throw std::invalid_argument("interleave: run length exceeds max_run_length");
            keyed.push_back({start * static_cast<std::int64_t>(num_channels) +
                                 static_cast<std::int64_t>(c),
                             Run{runs.values[i], runs.lengths[i]}});
            start += runs.lengths[i];
        }
    }
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const Keyed& a, const Keyed& b) { return a.key < b.key; });

    EventSequence seq;
    seq.num_channels = num_channels;
    seq.k = k;
    seq.max_run_length = max_run_length;
    seq.base_rate_hz = base_rate_hz;
    if (max_events.has_value() && keyed.size() > *max_events) {
        if (*max_events < num_channels)
            throw std::invalid_argument("interleave: max_events must cover one run per channel");
        seq.truncated = true;
        keyed.resize(*max_events);
    }
    seq.events.reserve(keyed.size());
    for (const auto& kr : keyed) seq.events.push_back(kr.run);
    return seq;
}

/// Split an interleaved stream back into per-channel run lists (unpadded).
inline std::vector<ChannelRuns> deinterleave(const EventSequence& seq) {
    std::vector<int> lengths;
    lengths.reserve(seq.events.size());
    for (const Run& r : seq.events) lengths.push_back(r.length);
    ChannelsOffsets co = infer_channels_offsets(lengths, seq.num_channels);
    std::vector<ChannelRuns> out(seq.num_channels);
    for (std::size_t i = 0; i < seq.events.size(); ++i) {
        auto& runs = out[static_cast<std::size_t>(co.channels[i])];
        runs.values.push_back(seq.events[i].value);
        runs.lengths.push_back(seq.events[i].length);
    }
    return out;
}

/// Dense grid -> interleaved events.
inline EventSequence interleaved_encode(const DenseCodes& codes, int max_run_length = 256,
                                        std::optional<std::size_t> max_events = std::nullopt) {
    codes.validate();
    if (codes.num_steps == 0) throw std::invalid_argument("interleaved_encode: empty grid");
    std::vector<ChannelRuns> per_channel(codes.num_channels);
    std::vector<int> column(codes.num_steps);
    for (std::size_t c = 0; c < codes.num_channels; ++c) {
        for (std::size_t t = 0; t < codes.num_steps; ++t) column[t] = codes.at(t, c);
        // Ask for a width that can never crop: one run per sample.
        per_channel[c] = rle_encode(column, codes.num_steps, max_run_length);
    }
    return interleave(per_channel, codes.k, max_run_length, codes.base_rate_hz, max_events);
}

/// Total duration covered by each channel of an event stream.
inline std::vector<std::int64_t> channel_durations(const EventSequence& seq) {
    std::vector<int> lengths;
    lengths.reserve(seq.events.size());
    for (const Run& r : seq.events) lengths.push_back(r.length);
    ChannelsOffsets co = infer_channels_offsets(lengths, seq.num_channels);
    std::vector<std::int64_t> totals(seq.num_channels, 0);
    for (std::size_t i = 0; i < seq.events.size(); ++i)
        totals[static_cast<std::size_t>(co.channels[i])] += seq.events[i].length;
    return totals;
}

/// Interleaved events -> dense grid of `output_length` steps. Channels whose
/// runs cover fewer steps (possible after truncation) repeat their last value.
inline DenseCodes interleaved_decode(const EventSequence& seq, std::size_t output_length) {
    detail::check_positive_length(output_length, "interleaved_decode");
    if (seq.num_channels == 0) throw std::invalid_argument("interleaved_decode: no channels");
    std::vector<ChannelRuns> per_channel = deinterleave(seq);
    DenseCodes codes(output_length, seq.num_channels, seq.k, seq.base_rate_hz);
    for (std::size_t c = 0; c < seq.num_channels; ++c) {
        if (per_channel[c].values.empty())
            throw std::invalid_argument("interleaved_decode: channel has no events");
        std::vector<int> column =
            rle_decode(per_channel[c].values, per_channel[c].lengths, output_length);
        for (std::size_t t = 0; t < output_length; ++t) codes.at(t, c) = column[t];
    }
    codes.validate();
    return codes;
}

/// Number of events a dense grid encodes to (runs after max_run_length splits).
inline std::size_t count_events(const DenseCodes& codes, int max_run_length = 256) {
    if (codes.num_steps == 0 || codes.num_channels == 0) return 0;
    std::size_t events = 0;
    for (std::size_t c = 0; c < codes.num_channels; ++c) {
        std::size_t run = 0;
        int prev = 0;
        for (std::size_t t = 0; t < codes.num_steps; ++t) {
            int v = codes.at(t, c);
            if (t == 0 || v != prev) {
                if (run > 0)
                    events += (run + static_cast<std::size_t>(max_run_length) - 1) /
                              static_cast<std::size_t>(max_run_length);
                run = 0;
            }
            prev = v;
            ++run;
        }
        events += (run + static_cast<std::size_t>(max_run_length) - 1) /
                  static_cast<std::size_t>(max_run_length);
    }
    return events;
}

}  // namespace vdrl
