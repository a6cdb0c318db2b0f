#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "codec.hpp"
#include "config.hpp"
#include "nn.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace vdrl {

/// Which additive terms feed each input row, and the offset bucket budget.
/// The reference setup uses exactly the four channel/offset terms and
/// neither absolute-position variant.
struct EmbeddingConfig {
    bool channel_in = true;
    bool offset_in = true;
    bool channel_out = true;
    bool offset_out = true;
    bool absolute_position = false;
    bool per_channel_position = false;
    int offset_buckets = 512;

    bool is_reference() const {
        return channel_in && offset_in && channel_out && offset_out && !absolute_position &&
               !per_channel_position;
    }

    void validate() const {
        if (offset_buckets < 1) throw std::invalid_argument("EmbeddingConfig: bad bucket budget");
    }
};

struct RunLengthTransformerConfig {
    int k = 7;
    int max_run_length = 256;
    int channels = 4;
    int num_classes = 4;  // a catch-all row is appended after these
    EmbeddingConfig embeddings;

    int width = 128;
    int layers = 4;
    int heads = 4;
    int ffn = 256;
    int window = 512;    // max events per training window
    int rel_clip = 64;   // relative-bias distance clip
    int max_positions = 512;

    int steps = 1000;
    int batch = 4;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double catch_all_prob = 0.1;
    int log_every = 10;

    int value_vocab() const { return 2 * k + 1; }
    int condition_vocab() const { return num_classes + 1; }
    int catch_all_id() const { return num_classes; }

    void validate() const {
        if (k < 1 || k > 63) throw std::invalid_argument("rlt: bad k");
        if (max_run_length < 1 || max_run_length > 65535)
            throw std::invalid_argument("rlt: bad max run length");
        if (channels < 1 || channels > 255) throw std::invalid_argument("rlt: bad channel count");
        if (num_classes < 1) throw std::invalid_argument("rlt: bad class count");
        if (width < 1 || layers < 1 || heads < 1 || ffn < 1)
            throw std::invalid_argument("rlt: bad transformer shape");
        if (width % heads != 0) throw std::invalid_argument("rlt: width must divide by heads");
        if (window < 1 || window > 512) throw std::invalid_argument("rlt: window must be 1..512");
        if (rel_clip < 1 || max_positions < window)
            throw std::invalid_argument("rlt: bad position budgets");
        if (steps < 0 || batch < 1) throw std::invalid_argument("rlt: bad batch/steps");
        if (lr <= 0) throw std::invalid_argument("rlt: bad learning rate");
        if (catch_all_prob < 0 || catch_all_prob > 1)
            throw std::invalid_argument("rlt: bad catch-all probability");
        if (log_every < 1) throw std::invalid_argument("rlt: bad log interval");
        embeddings.validate();
    }

    void to_config(KeyValueConfig& kv) const {
        auto put_int = [&](const std::string& key, long long v) { kv.set(key, std::to_string(v)); };
        auto put_real = [&](const std::string& key, double v) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            kv.set(key, buf);
        };
        auto put_bool = [&](const std::string& key, bool v) { kv.set(key, v ? "true" : "false"); };
        put_int("rlt.k", k);
        put_int("rlt.max_run_length", max_run_length);
        put_int("rlt.channels", channels);
        put_int("rlt.num_classes", num_classes);
        put_bool("rlt.embed.channel_in", embeddings.channel_in);
        put_bool("rlt.embed.offset_in", embeddings.offset_in);
        put_bool("rlt.embed.channel_out", embeddings.channel_out);
        put_bool("rlt.embed.offset_out", embeddings.offset_out);
        put_bool("rlt.embed.absolute_position", embeddings.absolute_position);
        put_bool("rlt.embed.per_channel_position", embeddings.per_channel_position);
        put_int("rlt.embed.offset_buckets", embeddings.offset_buckets);
        put_int("rlt.width", width);
        put_int("rlt.layers", layers);
        put_int("rlt.heads", heads);
        put_int("rlt.ffn", ffn);
        put_int("rlt.window", window);
        put_int("rlt.rel_clip", rel_clip);
        put_int("rlt.max_positions", max_positions);
        put_int("rlt.steps", steps);
        put_int("rlt.batch", batch);
        put_real("rlt.lr", lr);
        put_real("rlt.beta1", beta1);
        put_real("rlt.beta2", beta2);
        put_real("rlt.catch_all_prob", catch_all_prob);
        put_int("rlt.log_every", log_every);
    }

    static RunLengthTransformerConfig from_config(const KeyValueConfig& kv) {
        RunLengthTransformerConfig c;
        c.k = kv.get_int("rlt.k", c.k);
        c.max_run_length = kv.get_int("rlt.max_run_length", c.max_run_length);
        c.channels = kv.get_int("rlt.channels", c.channels);
        c.num_classes = kv.get_int("rlt.num_classes", c.num_classes);
        c.embeddings.channel_in = kv.get_bool("rlt.embed.channel_in", c.embeddings.channel_in);
        c.embeddings.offset_in = kv.get_bool("rlt.embed.offset_in", c.embeddings.offset_in);
        c.embeddings.channel_out = kv.get_bool("rlt.embed.channel_out", c.embeddings.channel_out);
        c.embeddings.offset_out = kv.get_bool("rlt.embed.offset_out", c.embeddings.offset_out);
        c.embeddings.absolute_position =
            kv.get_bool("rlt.embed.absolute_position", c.embeddings.absolute_position);
        c.embeddings.per_channel_position =
            kv.get_bool("rlt.embed.per_channel_position", c.embeddings.per_channel_position);
        c.embeddings.offset_buckets =
            kv.get_int("rlt.embed.offset_buckets", c.embeddings.offset_buckets);
        c.width = kv.get_int("rlt.width", c.width);
        c.layers = kv.get_int("rlt.layers", c.layers);
        c.heads = kv.get_int("rlt.heads", c.heads);
        c.ffn = kv.get_int("rlt.ffn", c.ffn);
        c.window = kv.get_int("rlt.window", c.window);
        c.rel_clip = kv.get_int("rlt.rel_clip", c.rel_clip);
        c.max_positions = kv.get_int("rlt.max_positions", c.max_positions);
        c.steps = kv.get_int("rlt.steps", c.steps);
        c.batch = kv.get_int("rlt.batch", c.batch);
        c.lr = kv.get_double("rlt.lr", c.lr);
        c.beta1 = kv.get_double("rlt.beta1", c.beta1);
        c.beta2 = kv.get_double("rlt.beta2", c.beta2);
        c.catch_all_prob = kv.get_double("rlt.catch_all_prob", c.catch_all_prob);
        c.log_every = kv.get_int("rlt.log_every", c.log_every);
        c.validate();
        return c;
    }
};

/// Incremental Algorithm-1 state: per-channel write cursors. The next event
/// always belongs to the channel whose cursor is lowest (ties to the lowest
/// channel index), and starts at that cursor.
struct ChannelCursor {
    std::vector<std::int64_t> position;

    explicit ChannelCursor(int channels) : position(static_cast<std::size_t>(channels), 0) {
        if (channels < 1) throw std::invalid_argument("ChannelCursor: bad channel count");
    }

    int next_channel() const {
        return static_cast<int>(std::min_element(position.begin(), position.end()) -
                                position.begin());
    }

    std::int64_t next_offset() const { return position[static_cast<std::size_t>(next_channel())]; }

    void consume(int length) {
        if (length < 1) throw std::invalid_argument("ChannelCursor: lengths must be positive");
        position[static_cast<std::size_t>(next_channel())] += length;
    }
};

/// A training window: parallel per-event arrays plus the conditioning id.
/// Offsets are window-relative. Shorter windows are padded and masked.
struct EventWindow {
    std::vector<int> values;    // in [-k, k]
    std::vector<int> lengths;   // in [1, max_run_length]
    std::vector<int> channels;  // Algorithm-1 channel per event
    std::vector<std::int64_t> offsets;
    std::vector<double> mask;  // 1 = real event, 0 = padding
    int condition = 0;

    std::size_t size() const { return values.size(); }
};

inline EventWindow window_from_events(const EventSequence& seq, int condition,
                                      std::size_t begin = 0,
                                      std::size_t count = static_cast<std::size_t>(-1)) {
    const std::size_t total = seq.events.size();
    if (begin > total) throw std::invalid_argument("window_from_events: begin out of range");
    std::vector<int> lengths(total);
    for (std::size_t i = 0; i < total; ++i) lengths[i] = seq.events[i].length;
    ChannelsOffsets layout = infer_channels_offsets(lengths, seq.num_channels);
    const std::size_t end = count == static_cast<std::size_t>(-1)
                                ? total
                                : std::min(total, begin + count);
    EventWindow w;
    w.condition = condition;
    const std::int64_t base = begin < end ? layout.offsets[begin] : 0;
    for (std::size_t i = begin; i < end; ++i) {
        w.values.push_back(seq.events[i].value);
        w.lengths.push_back(seq.events[i].length);
        w.channels.push_back(layout.channels[i]);
        w.offsets.push_back(layout.offsets[i] - base);
        w.mask.push_back(1.0);
    }
    return w;
}

inline void pad_window(EventWindow& w, std::size_t size) {
    while (w.size() < size) {
        w.values.push_back(0);
        w.lengths.push_back(1);
        w.channels.push_back(0);
        w.offsets.push_back(0);
        w.mask.push_back(0.0);
    }
}

struct RunLengthTransformer {
    RunLengthTransformerConfig cfg;

    Tensor value_embed, length_embed;
    Tensor channel_in_embed, offset_in_embed, channel_out_embed, offset_out_embed;
    Tensor cond_embed;
    Tensor start;  // [1, width]
    Tensor abs_pos_embed, chan_pos_embed;  // only allocated when enabled

    struct Layer {
        Tensor ln1_gain, ln1_bias;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor rel_bias;  // [heads, rel_clip]
        Tensor ln2_gain, ln2_bias;
        Tensor w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
    Tensor final_gain, final_bias;
    Tensor value_head_w, value_head_b;
    Tensor length_mlp_w1, length_mlp_b1, length_mlp_w2, length_mlp_b2;

    RunLengthTransformer(const RunLengthTransformerConfig& config, Rng& rng) : cfg(config) {
        cfg.validate();
        const std::size_t W = static_cast<std::size_t>(cfg.width);
        auto table = [&](std::size_t rows) {
            Tensor t({rows, W});
            fill_normal(t, rng, 0.02);
            return t;
        };
        value_embed = table(static_cast<std::size_t>(cfg.value_vocab()));
        length_embed = table(static_cast<std::size_t>(cfg.max_run_length));
        channel_in_embed = table(static_cast<std::size_t>(cfg.channels));
        offset_in_embed = table(static_cast<std::size_t>(cfg.embeddings.offset_buckets));
        channel_out_embed = table(static_cast<std::size_t>(cfg.channels));
        offset_out_embed = table(static_cast<std::size_t>(cfg.embeddings.offset_buckets));
        cond_embed = table(static_cast<std::size_t>(cfg.condition_vocab()));
        start = table(1);
        if (cfg.embeddings.absolute_position)
            abs_pos_embed = table(static_cast<std::size_t>(cfg.max_positions));
        if (cfg.embeddings.per_channel_position)
            chan_pos_embed = table(static_cast<std::size_t>(cfg.max_positions));

        auto matrix = [&](std::size_t in, std::size_t out, double sd) {
            Tensor t({in, out});
            fill_normal(t, rng, sd);
            return t;
        };
        auto ones = [&](std::size_t n) {
            Tensor t({n});
            t.fill(1.0);
            return t;
        };
        const double attn_sd = 1.0 / std::sqrt(static_cast<double>(W));
        layers.resize(static_cast<std::size_t>(cfg.layers));
        for (Layer& l : layers) {
            l.ln1_gain = ones(W);
            l.ln1_bias = Tensor({W});
            l.wq = matrix(W, W, attn_sd);
            l.bq = Tensor({W});
            l.wk = matrix(W, W, attn_sd);
            l.bk = Tensor({W});
            l.wv = matrix(W, W, attn_sd);
            l.bv = Tensor({W});
            l.wo = matrix(W, W, attn_sd / std::sqrt(2.0 * cfg.layers));
            l.bo = Tensor({W});
            l.rel_bias = Tensor({static_cast<std::size_t>(cfg.heads),
                                 static_cast<std::size_t>(cfg.rel_clip)});
            l.ln2_gain = ones(W);
            l.ln2_bias = Tensor({W});
            l.w1 = matrix(W, static_cast<std::size_t>(cfg.ffn), he_stddev(W));
            l.b1 = Tensor({static_cast<std::size_t>(cfg.ffn)});
            l.w2 = matrix(static_cast<std::size_t>(cfg.ffn), W,
                          he_stddev(static_cast<std::size_t>(cfg.ffn)) / std::sqrt(2.0 * cfg.layers));
            l.b2 = Tensor({W});
        }
        final_gain = ones(W);
        final_bias = Tensor({W});
        // Near-zero heads: untrained logits sit near uniform.
        value_head_w = matrix(W, static_cast<std::size_t>(cfg.value_vocab()), 0.01);
        value_head_b = Tensor({static_cast<std::size_t>(cfg.value_vocab())});
        length_mlp_w1 = matrix(2 * W, W, he_stddev(2 * W));
        length_mlp_b1 = Tensor({W});
        length_mlp_w2 = matrix(W, static_cast<std::size_t>(cfg.max_run_length), 0.01);
        length_mlp_b2 = Tensor({static_cast<std::size_t>(cfg.max_run_length)});
    }

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        out.push_back({"embed.value", &value_embed});
        out.push_back({"embed.length", &length_embed});
        out.push_back({"embed.channel_in", &channel_in_embed});
        out.push_back({"embed.offset_in", &offset_in_embed});
        out.push_back({"embed.channel_out", &channel_out_embed});
        out.push_back({"embed.offset_out", &offset_out_embed});
        out.push_back({"embed.condition", &cond_embed});
        out.push_back({"embed.start", &start});
        if (cfg.embeddings.absolute_position) out.push_back({"embed.abs_pos", &abs_pos_embed});
        if (cfg.embeddings.per_channel_position)
            out.push_back({"embed.chan_pos", &chan_pos_embed});
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string p = "layer" + std::to_string(i) + ".";
            Layer& l = layers[i];
            out.push_back({p + "ln1.gain", &l.ln1_gain});
            out.push_back({p + "ln1.bias", &l.ln1_bias});
            out.push_back({p + "wq", &l.wq});
            out.push_back({p + "bq", &l.bq});
            out.push_back({p + "wk", &l.wk});
            out.push_back({p + "bk", &l.bk});
            out.push_back({p + "wv", &l.wv});
            out.push_back({p + "bv", &l.bv});
            out.push_back({p + "wo", &l.wo});
            out.push_back({p + "bo", &l.bo});
            out.push_back({p + "rel_bias", &l.rel_bias});
            out.push_back({p + "ln2.gain", &l.ln2_gain});
            out.push_back({p + "ln2.bias", &l.ln2_bias});
            out.push_back({p + "ffn.w1", &l.w1});
            out.push_back({p + "ffn.b1", &l.b1});
            out.push_back({p + "ffn.w2", &l.w2});
            out.push_back({p + "ffn.b2", &l.b2});
        }
        out.push_back({"final_ln.gain", &final_gain});
        out.push_back({"final_ln.bias", &final_bias});
        out.push_back({"head.value.w", &value_head_w});
        out.push_back({"head.value.b", &value_head_b});
        out.push_back({"head.length.w1", &length_mlp_w1});
        out.push_back({"head.length.b1", &length_mlp_b1});
        out.push_back({"head.length.w2", &length_mlp_w2});
        out.push_back({"head.length.b2", &length_mlp_b2});
        return out;
    }
};

/// Bound RLT parameters on a tape (same pattern as the autoencoder).
struct RltBound {
    std::vector<Var> vars;
    std::unordered_map<const Tensor*, Var> by_tensor;

    Var of(const Tensor& t) const {
        auto it = by_tensor.find(&t);
        if (it == by_tensor.end())
            throw std::logic_error("RltBound: tensor is not a bound parameter");
        return it->second;
    }
};

inline RltBound bind_model(Tape& tape, RunLengthTransformer& model, bool requires_grad) {
    RltBound bound;
    std::vector<ParamRef> refs = model.params();
    bound.vars.reserve(refs.size());
    for (const ParamRef& p : refs) {
        Var v = tape.input(*p.tensor, requires_grad);
        bound.vars.push_back(v);
        bound.by_tensor.emplace(p.tensor, v);
    }
    return bound;
}

namespace rlt {

inline int offset_bucket(std::int64_t offset, int buckets) {
    if (offset < 0) throw std::invalid_argument("rlt: negative offset");
    return static_cast<int>(std::min<std::int64_t>(offset, buckets - 1));
}

inline int value_id(int value, int k) {
    if (value < -k || value > k) throw std::invalid_argument("rlt: value out of vocabulary");
    return value + k;
}

inline int length_id(int length, int max_run) {
    if (length < 1 || length > max_run)
        throw std::invalid_argument("rlt: length out of vocabulary");
    return length - 1;
}

/// Additively combined input rows. Row 0 is the learned start vector; each
/// row also carries the *predicted* event's channel/offset terms, which
/// Algorithm 1 pins down before the event itself is known.
inline Var assemble_inputs(Tape& t, const RunLengthTransformer& m, const RltBound& bm,
                           const EventWindow& w) {
    const RunLengthTransformerConfig& cfg = m.cfg;
    const std::size_t N = w.size();
    if (N == 0) throw std::invalid_argument("rlt: empty window");
    if (N > static_cast<std::size_t>(cfg.window))
        throw std::invalid_argument("rlt: window too long");
    if (w.condition < 0 || w.condition >= cfg.condition_vocab())
        throw std::invalid_argument("rlt: condition out of range");

    std::vector<int> value_ids(N), length_ids(N), cin_ids(N), oin_ids(N), cout_ids(N), oout_ids(N);
    for (std::size_t i = 0; i < N; ++i) {
        value_ids[i] = value_id(w.values[i], cfg.k);
        length_ids[i] = length_id(w.lengths[i], cfg.max_run_length);
        if (w.channels[i] < 0 || w.channels[i] >= cfg.channels)
            throw std::invalid_argument("rlt: channel out of range");
        cout_ids[i] = w.channels[i];
        oout_ids[i] = offset_bucket(w.offsets[i], cfg.embeddings.offset_buckets);
    }
    // shifted-by-one input-side ids; row 0 replaces them with `start`
    for (std::size_t i = 1; i < N; ++i) {
        cin_ids[i] = cout_ids[i - 1];
        oin_ids[i] = oout_ids[i - 1];
    }

    Var rows;
    if (N == 1) {
        rows = bm.of(m.start);
    } else {
        std::vector<int> v_prev(value_ids.begin(), value_ids.end() - 1);
        std::vector<int> l_prev(length_ids.begin(), length_ids.end() - 1);
        Var shifted = t.add(t.embedding(v_prev, bm.of(m.value_embed)),
                            t.embedding(l_prev, bm.of(m.length_embed)));
        if (cfg.embeddings.channel_in) {
            std::vector<int> ids(cin_ids.begin() + 1, cin_ids.end());
            shifted = t.add(shifted, t.embedding(ids, bm.of(m.channel_in_embed)));
        }
        if (cfg.embeddings.offset_in) {
            std::vector<int> ids(oin_ids.begin() + 1, oin_ids.end());
            shifted = t.add(shifted, t.embedding(ids, bm.of(m.offset_in_embed)));
        }
        rows = t.concat_rows(bm.of(m.start), shifted);
    }
    if (cfg.embeddings.channel_out)
        rows = t.add(rows, t.embedding(cout_ids, bm.of(m.channel_out_embed)));
    if (cfg.embeddings.offset_out)
        rows = t.add(rows, t.embedding(oout_ids, bm.of(m.offset_out_embed)));
    std::vector<int> cond_ids(N, w.condition);
    rows = t.add(rows, t.embedding(cond_ids, bm.of(m.cond_embed)));
    if (cfg.embeddings.absolute_position) {
        std::vector<int> pos(N);
        std::iota(pos.begin(), pos.end(), 0);
        rows = t.add(rows, t.embedding(pos, bm.of(m.abs_pos_embed)));
    }
    if (cfg.embeddings.per_channel_position) {
        std::vector<int> counts(static_cast<std::size_t>(cfg.channels), 0);
        std::vector<int> pos(N);
        for (std::size_t i = 0; i < N; ++i)
            pos[i] = counts[static_cast<std::size_t>(cout_ids[i])]++;
        rows = t.add(rows, t.embedding(pos, bm.of(m.chan_pos_embed)));
    }
    return rows;
}

/// Pre-norm causal transformer trunk with per-head relative biases.
inline Var trunk(Tape& t, const RunLengthTransformer& m, const RltBound& bm, Var rows) {
    for (const auto& l : m.layers) {
        Var n1 = t.layer_norm(rows, bm.of(l.ln1_gain), bm.of(l.ln1_bias));
        Var q = t.linear(n1, bm.of(l.wq), bm.of(l.bq));
        Var k = t.linear(n1, bm.of(l.wk), bm.of(l.bk));
        Var v = t.linear(n1, bm.of(l.wv), bm.of(l.bv));
        Var att = t.causal_attention(q, k, v, bm.of(l.rel_bias), m.cfg.heads);
        rows = t.add(rows, t.linear(att, bm.of(l.wo), bm.of(l.bo)));
        Var n2 = t.layer_norm(rows, bm.of(l.ln2_gain), bm.of(l.ln2_bias));
        Var f = t.relu(t.linear(n2, bm.of(l.w1), bm.of(l.b1)));
        rows = t.add(rows, t.linear(f, bm.of(l.w2), bm.of(l.b2)));
    }
    return t.layer_norm(rows, bm.of(m.final_gain), bm.of(m.final_bias));
}

struct HeadOutputs {
    Var value_logits;   // [N, 2k+1]
    Var length_logits;  // [N, max_run_length]
};

/// Value head on the trunk output; length head on [h ; E_v[value]] where the
/// value embedding is the ground truth during training and the freshly
/// sampled value during generation.
inline HeadOutputs heads(Tape& t, const RunLengthTransformer& m, const RltBound& bm, Var h,
                         const std::vector<int>& value_ids_for_length) {
    HeadOutputs out;
    out.value_logits = t.linear(h, bm.of(m.value_head_w), bm.of(m.value_head_b));
    Var ve = t.embedding(value_ids_for_length, bm.of(m.value_embed));
    Var cat = t.concat_cols(h, ve);
    Var hidden = t.relu(t.linear(cat, bm.of(m.length_mlp_w1), bm.of(m.length_mlp_b1)));
    out.length_logits = t.linear(hidden, bm.of(m.length_mlp_w2), bm.of(m.length_mlp_b2));
    return out;
}

}  // namespace rlt

struct RltForward {
    Var value_nll, length_nll, total;
    std::vector<Var> value_logits, length_logits;  // per window
};

/// Teacher-forced objective over a batch of windows: masked mean value CE
/// plus masked mean length CE, equally weighted, averaged over the batch.
inline RltForward build_rlt_forward(Tape& t, RunLengthTransformer& m, const RltBound& bm,
                                    const std::vector<EventWindow>& batch) {
    if (batch.empty()) throw std::invalid_argument("rlt: empty batch");
    RltForward out;
    std::vector<Var> value_terms, length_terms;
    for (const EventWindow& w : batch) {
        Var rows = rlt::assemble_inputs(t, m, bm, w);
        Var h = rlt::trunk(t, m, bm, rows);
        std::vector<int> vids(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) vids[i] = rlt::value_id(w.values[i], m.cfg.k);
        rlt::HeadOutputs ho = rlt::heads(t, m, bm, h, vids);
        std::vector<int> lids(w.size());
        for (std::size_t i = 0; i < w.size(); ++i)
            lids[i] = rlt::length_id(w.lengths[i], m.cfg.max_run_length);
        value_terms.push_back(t.softmax_ce_mean(ho.value_logits, vids, w.mask));
        length_terms.push_back(t.softmax_ce_mean(ho.length_logits, lids, w.mask));
        out.value_logits.push_back(ho.value_logits);
        out.length_logits.push_back(ho.length_logits);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.value_nll = t.scale(t.add_many(value_terms), inv);
    out.length_nll = t.scale(t.add_many(length_terms), inv);
    out.total = t.add(out.value_nll, out.length_nll);
    return out;
}

/// Masked mean NLLs without gradients (holdout evaluation).
inline std::pair<double, double> rlt_holdout_nll(RunLengthTransformer& m,
                                                 const std::vector<EventWindow>& windows) {
    Tape tape;
    RltBound bm = bind_model(tape, m, false);
    RltForward fw = build_rlt_forward(tape, m, bm, windows);
    return {tape.scalar(fw.value_nll), tape.scalar(fw.length_nll)};
}

/// Remove the least likely values accounting for at most 1-p of the mass:
/// keep the smallest probability-sorted prefix whose cumulative mass reaches
/// p (ties by index), renormalised.
inline std::vector<double> nucleus_truncate(const std::vector<double>& probs, double p) {
    if (probs.empty()) throw std::invalid_argument("nucleus_truncate: empty distribution");
    if (!(p > 0.0) || p > 1.0) throw std::invalid_argument("nucleus_truncate: p must be in (0, 1]");
    double total = 0;
    for (double q : probs) {
        if (q < 0 || !std::isfinite(q))
            throw std::invalid_argument("nucleus_truncate: probabilities must be nonnegative");
        total += q;
    }
    if (total <= 0) throw std::invalid_argument("nucleus_truncate: all-zero distribution");

    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    std::vector<double> kept(probs.size(), 0.0);
    double cum = 0, kept_total = 0;
    for (std::size_t idx : order) {
        kept[idx] = probs[idx];
        cum += probs[idx] / total;
        kept_total += probs[idx];
        if (cum >= p - 1e-12) break;
    }
    for (double& q : kept) q /= kept_total;
    return kept;
}

struct RltTrainLogRow {
    std::uint64_t step = 0;
    double value_nll = 0, length_nll = 0;
};

inline void write_rlt_log_header(std::ostream& os) { os << "step,value_nll,length_nll\n"; }

inline void write_rlt_log_row(std::ostream& os, const RltTrainLogRow& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.step), r.value_nll, r.length_nll);
    os << buf;
}

/// Pool of fixed-size training windows.
class EventWindowDataset {
public:
    explicit EventWindowDataset(std::vector<EventWindow> windows)
        : windows_(std::move(windows)) {
        if (windows_.empty()) throw std::invalid_argument("EventWindowDataset: empty");
    }

    /// Slice every sequence into at most `per_sequence` windows of up to
    /// `window` events (start offsets drawn deterministically from the seed).
    static EventWindowDataset slice(const std::vector<EventSequence>& sequences,
                                    const std::vector<int>& conditions, int window,
                                    int per_sequence, std::uint64_t seed) {
        if (sequences.size() != conditions.size())
            throw std::invalid_argument("EventWindowDataset: conditions size mismatch");
        if (window < 1 || per_sequence < 1)
            throw std::invalid_argument("EventWindowDataset: bad window/per_sequence");
        Rng rng(seed);
        std::vector<EventWindow> out;
        for (std::size_t s = 0; s < sequences.size(); ++s) {
            const std::size_t total = sequences[s].events.size();
            if (total == 0) continue;
            for (int i = 0; i < per_sequence; ++i) {
                std::size_t begin = 0;
                if (total > static_cast<std::size_t>(window))
                    begin = rng.uniform_int(total - window + 1);
                EventWindow w = window_from_events(sequences[s], conditions[s], begin,
                                                   static_cast<std::size_t>(window));
                pad_window(w, static_cast<std::size_t>(window));
                out.push_back(std::move(w));
            }
        }
        return EventWindowDataset(std::move(out));
    }

    const EventWindow& sample(Rng& rng) const { return windows_[rng.uniform_int(windows_.size())]; }
    const std::vector<EventWindow>& windows() const { return windows_; }

private:
    std::vector<EventWindow> windows_;
};

/// Training driver mirroring the autoencoder trainer: deterministic per-step
/// randomness, CSV logging, checkpoint save/restore.
class RunLengthTransformerTrainer {
public:
    RunLengthTransformerTrainer(const RunLengthTransformerConfig& cfg, std::uint64_t seed)
        : seed_(seed),
          init_rng_(Rng(seed).fork(0)),
          model_(cfg, init_rng_),
          opt_(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}) {}

    RunLengthTransformer& model() { return model_; }
    std::uint64_t step() const { return step_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<RltTrainLogRow>& log() const { return log_; }

    RltTrainLogRow train_step(const EventWindowDataset& data) {
        const RunLengthTransformerConfig& cfg = model_.cfg;
        Rng rng = step_rng(step_);
        std::vector<EventWindow> batch;
        batch.reserve(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) {
            EventWindow w = data.sample(rng);
            if (rng.uniform() < cfg.catch_all_prob) w.condition = cfg.catch_all_id();
            batch.push_back(std::move(w));
        }

        Tape tape;
        RltBound bm = bind_model(tape, model_, true);
        RltForward fw = build_rlt_forward(tape, model_, bm, batch);

        RltTrainLogRow row;
        row.step = step_ + 1;
        row.value_nll = tape.scalar(fw.value_nll);
        row.length_nll = tape.scalar(fw.length_nll);
        if (!std::isfinite(row.value_nll) || !std::isfinite(row.length_nll)) {
            char msg[192];
            std::snprintf(msg, sizeof msg,
                          "rlt: non-finite loss at step %llu (value=%g length=%g); aborting",
                          static_cast<unsigned long long>(row.step), row.value_nll,
                          row.length_nll);
            throw std::runtime_error(msg);
        }

        tape.backward(fw.total);
        GradientAccumulator acc;
        std::vector<ParamRef> refs = model_.params();
        acc.reset(refs);
        acc.add(tape, bm.vars);
        opt_.step(refs, acc.grads());

        ++step_;
        log_.push_back(row);
        return row;
    }

    void run(const EventWindowDataset& data, int steps_to_run, std::ostream* csv = nullptr) {
        if (csv && step_ == 0) write_rlt_log_header(*csv);
        for (int i = 0; i < steps_to_run; ++i) {
            RltTrainLogRow row = train_step(data);
            const bool last = i + 1 == steps_to_run;
            if (csv && (row.step % static_cast<std::uint64_t>(model_.cfg.log_every) == 0 || last)) {
                write_rlt_log_row(*csv, row);
                csv->flush();
            }
        }
    }

    void save(const std::filesystem::path& path) {
        Checkpoint ck;
        ck.kind = kCheckpointKindRlt;
        ck.step = step_;
        ck.seed = seed_;
        ck.controller.target_rate_hz = 1.0;  // unused for this kind
        KeyValueConfig kv;
        model_.cfg.to_config(kv);
        ck.config_text = kv.serialize();
        std::vector<ParamRef> refs = model_.params();
        for (const ParamRef& p : refs) ck.params.emplace_back(p.name, *p.tensor);
        if (opt_.step_count() > 0) {
            for (std::size_t i = 0; i < refs.size(); ++i) {
                ck.adam_m.emplace_back(refs[i].name, opt_.first_moments()[i]);
                ck.adam_v.emplace_back(refs[i].name, opt_.second_moments()[i]);
            }
        }
        save_checkpoint(path, ck);
    }

    static RunLengthTransformerTrainer restore(const std::filesystem::path& path) {
        Checkpoint ck = load_checkpoint(path);
        if (ck.kind != kCheckpointKindRlt)
            throw FormatError("checkpoint: not a run-length transformer checkpoint");
        KeyValueConfig kv = KeyValueConfig::parse(ck.config_text);
        RunLengthTransformerConfig cfg = RunLengthTransformerConfig::from_config(kv);
        RunLengthTransformerTrainer trainer(cfg, ck.seed);
        trainer.step_ = ck.step;
        std::vector<ParamRef> refs = trainer.model_.params();
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < refs.size(); ++i) index[refs[i].name] = i;
        auto fill = [&](const std::vector<std::pair<std::string, Tensor>>& section,
                        auto assign) {
            if (section.size() != refs.size())
                throw FormatError("checkpoint: parameter count mismatch");
            for (const auto& [name, tensor] : section) {
                auto it = index.find(name);
                if (it == index.end())
                    throw FormatError("checkpoint: unknown parameter " + name);
                assign(it->second, tensor);
            }
        };
        fill(ck.params, [&](std::size_t i, const Tensor& t) {
            check_same_shape(*refs[i].tensor, t, "checkpoint param");
            *refs[i].tensor = t;
        });
        if (!ck.adam_m.empty()) {
            std::vector<Tensor> m(refs.size()), v(refs.size());
            fill(ck.adam_m, [&](std::size_t i, const Tensor& t) { m[i] = t; });
            fill(ck.adam_v, [&](std::size_t i, const Tensor& t) { v[i] = t; });
            trainer.opt_.restore(std::move(m), std::move(v), ck.step);
        }
        return trainer;
    }

private:
    Rng step_rng(std::uint64_t step) const {
        return Rng(seed_ ^ (0xd1b54a32d192ed03ULL * (step + 1)));
    }

    std::uint64_t seed_;
    Rng init_rng_;
    RunLengthTransformer model_;
    AdamOptimizer opt_;
    std::uint64_t step_ = 0;
    std::vector<RltTrainLogRow> log_;
};

/// Per-event distributions the sampler actually used, before truncation.
/// Teacher-forced logits on the finished sequence must reproduce these
/// exactly (causal attention makes each prefix row independent of later
/// rows), which the tests lean on.
struct SampleTrace {
    std::vector<std::vector<double>> value_probs;
    std::vector<std::vector<double>> length_probs;
    std::vector<std::size_t> rows;
};

/// Autoregressive generation: alternately sample value then length, nucleus
/// truncation on both heads, with Algorithm-1 bookkeeping maintained
/// incrementally. Each step recomputes the full forward pass.
inline EventSequence sample(RunLengthTransformer& m, const EventWindow& prompt, int condition,
                            int num_events, double base_rate_hz, double p = 0.8,
                            std::uint64_t seed = 0, SampleTrace* trace = nullptr) {
    const RunLengthTransformerConfig& cfg = m.cfg;
    if (num_events < 0) throw std::invalid_argument("sample: bad event count");
    if (condition < 0 || condition >= cfg.condition_vocab())
        throw std::invalid_argument("sample: condition out of range");
    EventWindow w = prompt;
    w.condition = condition;
    ChannelCursor cursor(cfg.channels);
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w.channels[i] != cursor.next_channel() || w.offsets[i] != cursor.next_offset())
            throw std::invalid_argument("sample: prompt is not a valid event prefix");
        cursor.consume(w.lengths[i]);
    }
    if (w.size() + static_cast<std::size_t>(num_events) > static_cast<std::size_t>(cfg.window))
        throw std::invalid_argument("sample: prompt plus requested events exceeds the window");

    Rng rng(seed ^ 0xa0761d6478bd642fULL);
    auto categorical = [&](const std::vector<double>& probs) {
        double u = rng.uniform();
        double acc = 0;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            acc += probs[i];
            if (u < acc) return static_cast<int>(i);
        }
        for (std::size_t i = probs.size(); i-- > 0;)
            if (probs[i] > 0) return static_cast<int>(i);
        return 0;
    };
    auto probs_from_row = [&](const Tensor& logits, std::size_t row) {
        const std::size_t V = logits.dim(1);
        double mx = -1e300;
        for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, logits.at(row, j));
        std::vector<double> probs(V);
        double total = 0;
        for (std::size_t j = 0; j < V; ++j) {
            probs[j] = std::exp(logits.at(row, j) - mx);
            total += probs[j];
        }
        for (double& q : probs) q /= total;
        return probs;
    };

    for (int n = 0; n < num_events; ++n) {
        // extend with a placeholder row for the event being generated: its
        // channel/offset are known from the cursor before value/length are
        w.values.push_back(0);
        w.lengths.push_back(1);
        w.channels.push_back(cursor.next_channel());
        w.offsets.push_back(cursor.next_offset());
        w.mask.push_back(1.0);
        const std::size_t row = w.size() - 1;

        Tape tape;
        RltBound bm = bind_model(tape, m, false);
        Var rows = rlt::assemble_inputs(tape, m, bm, w);
        Var h = rlt::trunk(tape, m, bm, rows);
        std::vector<int> vids(w.size(), 0);
        rlt::HeadOutputs first = rlt::heads(tape, m, bm, h, vids);
        std::vector<double> value_probs = probs_from_row(tape.value(first.value_logits), row);
        int v_id = categorical(nucleus_truncate(value_probs, p));
        vids[row] = v_id;
        rlt::HeadOutputs second = rlt::heads(tape, m, bm, h, vids);
        std::vector<double> length_probs = probs_from_row(tape.value(second.length_logits), row);
        int l_id = categorical(nucleus_truncate(length_probs, p));
        if (trace) {
            trace->value_probs.push_back(std::move(value_probs));
            trace->length_probs.push_back(std::move(length_probs));
            trace->rows.push_back(row);
        }

        w.values[row] = v_id - cfg.k;
        w.lengths[row] = l_id + 1;
        cursor.consume(w.lengths[row]);
    }

    EventSequence out;
    out.num_channels = static_cast<std::size_t>(cfg.channels);
    out.k = cfg.k;
    out.max_run_length = cfg.max_run_length;
    out.base_rate_hz = base_rate_hz;
    out.truncated = false;
    for (std::size_t i = 0; i < w.size(); ++i)
        out.events.push_back({w.values[i], w.lengths[i]});
    return out;
}

struct BitRateBound {
    double model_bps = 0;  // NLL-based entropy upper bound
    double raw_bps = 0;    // events/s * (log2 value vocab + log2 length vocab)
};

/// Entropy upper bound from holdout NLL, against the raw code rate.
inline BitRateBound entropy_bound(RunLengthTransformer& m, const std::vector<EventWindow>& holdout,
                                  double total_seconds) {
    if (holdout.empty()) throw std::invalid_argument("entropy_bound: empty holdout");
    if (total_seconds <= 0) throw std::invalid_argument("entropy_bound: bad duration");
    auto [value_nll, length_nll] = rlt_holdout_nll(m, holdout);
    double events = 0;
    for (const EventWindow& w : holdout)
        for (double q : w.mask) events += q;
    const double nats_per_event = value_nll + length_nll;
    BitRateBound out;
    out.model_bps = events * (nats_per_event / std::log(2.0)) / total_seconds;
    out.raw_bps = events / total_seconds *
                  (std::log2(static_cast<double>(m.cfg.value_vocab())) +
                   std::log2(static_cast<double>(m.cfg.max_run_length)));
    return out;
}

/// Deterministic diagnostic language: one channel cycling through fixed
/// (value, length) pairs. A trained model should memorise it to near-zero
/// NLL, which pins down the loss plumbing end to end.
inline EventSequence cycle_language(const std::vector<Run>& pairs, int repeats, int k,
                                    int max_run_length, double base_rate_hz) {
    if (pairs.empty() || repeats < 1) throw std::invalid_argument("cycle_language: empty spec");
    EventSequence seq;
    seq.num_channels = 1;
    seq.k = k;
    seq.max_run_length = max_run_length;
    seq.base_rate_hz = base_rate_hz;
    for (int r = 0; r < repeats; ++r) {
        for (const Run& p : pairs) {
            if (p.value < -k || p.value > k || p.length < 1 || p.length > max_run_length)
                throw std::invalid_argument("cycle_language: pair outside vocabulary");
            seq.events.push_back(p);
        }
    }
    return seq;
}

struct AblationCurve {
    std::string name;
    std::vector<std::uint64_t> steps;
    std::vector<double> value_nll, length_nll;  // holdout NLLs

    double final_total() const {
        return value_nll.empty() ? 0.0 : value_nll.back() + length_nll.back();
    }
};

/// Train each configuration variant with identical seed/data/budget and
/// record holdout NLL curves for comparison.
inline std::vector<AblationCurve> ablation_run(
    const std::vector<std::pair<std::string, RunLengthTransformerConfig>>& variants,
    const EventWindowDataset& train_data, const std::vector<EventWindow>& holdout, int steps,
    int eval_every, std::uint64_t seed) {
    if (eval_every < 1) throw std::invalid_argument("ablation_run: bad eval interval");
    std::vector<AblationCurve> curves;
    for (const auto& [name, cfg] : variants) {
        RunLengthTransformerTrainer trainer(cfg, seed);
        AblationCurve curve;
        curve.name = name;
        for (int s = 0; s < steps; ++s) {
            trainer.train_step(train_data);
            if ((s + 1) % eval_every == 0 || s + 1 == steps) {
                auto [v, l] = rlt_holdout_nll(trainer.model(), holdout);
                curve.steps.push_back(trainer.step());
                curve.value_nll.push_back(v);
                curve.length_nll.push_back(l);
            }
        }
        curves.push_back(std::move(curve));
    }
    return curves;
}

}  // namespace vdrl
