#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
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
#include "quantiser.hpp"
#include "rate_controller.hpp"
#include "rng.hpp"
#include "slowness.hpp"
#include "synthetic.hpp"
#include "tensor.hpp"

namespace vdrl {

/// Hyperparameters for the slow autoencoder: an anti-causal convolutional
/// encoder into a hysteresis-quantised multi-channel bottleneck, and a gated
/// causal-dilated decoder over mu-law classes conditioned on the codes.
struct SlowAutoencoderConfig {
    int sample_rate_hz = 2000;
    int window = 1024;    // training window, samples
    int downsample = 8;   // audio steps per code step (power of two)
    int channels = 4;
    int k = 7;
    double hysteresis = -1.0;  // quantiser margin; < 0 means 1/k
    double margin_weight = 100.0;
    double noise_sigma = 0.01;
    SlownessKind slowness = SlownessKind::kGroupSparse;
    int num_classes = 4;
    int num_levels = 256;  // mu-law classes

    int enc_width = 24;
    int enc_blocks = 2;
    int cond_width = 16;
    int cond_blocks = 2;
    int dec_width = 20;
    int dec_blocks = 5;
    int skip_width = 24;
    int head_width = 48;
    int max_run_length = 256;

    int steps = 2000;
    int batch = 4;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double polyak_decay = 0.9999;
    int log_every = 10;
    // Batches this small give a noisy per-step rate estimate; the controller
    // acts on a trailing mean over this many batches (1 = raw batch rate).
    int aer_window = 1;

    double target_rate_hz = 75.0;
    double lambda_init = 1e-6;
    double epsilon = 1e-2;
    double delta = 1e-3;
    double lambda_min = 1e-8;
    double lambda_max = 1e8;

    int stages() const {
        int n = 0;
        for (int d = downsample; d > 1; d /= 2) ++n;
        return n;
    }

    double code_rate_hz() const {
        return static_cast<double>(sample_rate_hz) / downsample;
    }

    QuantiserConfig quantiser() const { return QuantiserConfig{k, hysteresis, 1.0}; }

    void validate() const {
        if (sample_rate_hz <= 0) throw std::invalid_argument("slowae: bad sample rate");
        if (downsample < 1 || (downsample & (downsample - 1)) != 0)
            throw std::invalid_argument("slowae: downsample must be a power of two");
        if (sample_rate_hz % downsample != 0)
            throw std::invalid_argument("slowae: sample rate must divide by downsample");
        if (window <= 0 || window % downsample != 0)
            throw std::invalid_argument("slowae: window must be a positive multiple of downsample");
        if (channels < 1 || channels > 64) throw std::invalid_argument("slowae: bad channel count");
        if (k < 1 || k > 63) throw std::invalid_argument("slowae: bad k");
        if (num_levels < 2) throw std::invalid_argument("slowae: bad level count");
        if (enc_width < 1 || cond_width < 1 || dec_width < 1 || skip_width < 1 || head_width < 1)
            throw std::invalid_argument("slowae: widths must be positive");
        if (enc_blocks < 0 || cond_blocks < 0 || dec_blocks < 1)
            throw std::invalid_argument("slowae: bad block counts");
        if (max_run_length < 1 || max_run_length > 65535)
            throw std::invalid_argument("slowae: bad max run length");
        if (num_classes < 1) throw std::invalid_argument("slowae: bad class count");
        if (batch < 1 || steps < 0) throw std::invalid_argument("slowae: bad batch/steps");
        if (lr <= 0) throw std::invalid_argument("slowae: bad learning rate");
        if (polyak_decay < 0 || polyak_decay >= 1)
            throw std::invalid_argument("slowae: polyak decay must be in [0, 1)");
        if (noise_sigma < 0 || margin_weight < 0)
            throw std::invalid_argument("slowae: negative noise/margin weight");
        if (aer_window < 1) throw std::invalid_argument("slowae: bad rate window");
        if (log_every < 1) throw std::invalid_argument("slowae: bad log interval");
        quantiser().validate();
        ControllerState st;
        st.lambda = lambda_init;
        st.target_rate_hz = target_rate_hz;
        st.epsilon = epsilon;
        st.delta = delta;
        st.lambda_min = lambda_min;
        st.lambda_max = lambda_max;
        st.validate();
    }

    void to_config(KeyValueConfig& kv) const {
        auto put_int = [&](const std::string& key, long long v) { kv.set(key, std::to_string(v)); };
        auto put_real = [&](const std::string& key, double v) {
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", v);
            kv.set(key, buf);
        };
        put_int("slowae.sample_rate_hz", sample_rate_hz);
        put_int("slowae.window", window);
        put_int("slowae.downsample", downsample);
        put_int("slowae.channels", channels);
        put_int("slowae.k", k);
        put_real("slowae.hysteresis", hysteresis);
        put_real("slowae.margin_weight", margin_weight);
        put_real("slowae.noise_sigma", noise_sigma);
        kv.set("slowae.slowness", slowness == SlownessKind::kL2       ? "l2"
                                  : slowness == SlownessKind::kL1     ? "l1"
                                                                      : "group_sparse");
        put_int("slowae.num_classes", num_classes);
        put_int("slowae.num_levels", num_levels);
        put_int("slowae.enc_width", enc_width);
        put_int("slowae.enc_blocks", enc_blocks);
        put_int("slowae.cond_width", cond_width);
        put_int("slowae.cond_blocks", cond_blocks);
        put_int("slowae.dec_width", dec_width);
        put_int("slowae.dec_blocks", dec_blocks);
        put_int("slowae.skip_width", skip_width);
        put_int("slowae.head_width", head_width);
        put_int("slowae.max_run_length", max_run_length);
        put_int("slowae.steps", steps);
        put_int("slowae.batch", batch);
        put_real("slowae.lr", lr);
        put_real("slowae.beta1", beta1);
        put_real("slowae.beta2", beta2);
        put_real("slowae.polyak_decay", polyak_decay);
        put_int("slowae.log_every", log_every);
        put_int("slowae.aer_window", aer_window);
        put_real("controller.target_rate_hz", target_rate_hz);
        put_real("controller.lambda_init", lambda_init);
        put_real("controller.epsilon", epsilon);
        put_real("controller.delta", delta);
        put_real("controller.lambda_min", lambda_min);
        put_real("controller.lambda_max", lambda_max);
    }

    static SlowAutoencoderConfig from_config(const KeyValueConfig& kv) {
        SlowAutoencoderConfig c;
        c.sample_rate_hz = kv.get_int("slowae.sample_rate_hz", c.sample_rate_hz);
        c.window = kv.get_int("slowae.window", c.window);
        c.downsample = kv.get_int("slowae.downsample", c.downsample);
        c.channels = kv.get_int("slowae.channels", c.channels);
        c.k = kv.get_int("slowae.k", c.k);
        c.hysteresis = kv.get_double("slowae.hysteresis", c.hysteresis);
        c.margin_weight = kv.get_double("slowae.margin_weight", c.margin_weight);
        c.noise_sigma = kv.get_double("slowae.noise_sigma", c.noise_sigma);
        std::string kind = kv.get_string("slowae.slowness", "group_sparse");
        if (kind == "l2")
            c.slowness = SlownessKind::kL2;
        else if (kind == "l1")
            c.slowness = SlownessKind::kL1;
        else if (kind == "group_sparse")
            c.slowness = SlownessKind::kGroupSparse;
        else
            throw ConfigError("slowae.slowness: unknown kind '" + kind + "'");
        c.num_classes = kv.get_int("slowae.num_classes", c.num_classes);
        c.num_levels = kv.get_int("slowae.num_levels", c.num_levels);
        c.enc_width = kv.get_int("slowae.enc_width", c.enc_width);
        c.enc_blocks = kv.get_int("slowae.enc_blocks", c.enc_blocks);
        c.cond_width = kv.get_int("slowae.cond_width", c.cond_width);
        c.cond_blocks = kv.get_int("slowae.cond_blocks", c.cond_blocks);
        c.dec_width = kv.get_int("slowae.dec_width", c.dec_width);
        c.dec_blocks = kv.get_int("slowae.dec_blocks", c.dec_blocks);
        c.skip_width = kv.get_int("slowae.skip_width", c.skip_width);
        c.head_width = kv.get_int("slowae.head_width", c.head_width);
        c.max_run_length = kv.get_int("slowae.max_run_length", c.max_run_length);
        c.steps = kv.get_int("slowae.steps", c.steps);
        c.batch = kv.get_int("slowae.batch", c.batch);
        c.lr = kv.get_double("slowae.lr", c.lr);
        c.beta1 = kv.get_double("slowae.beta1", c.beta1);
        c.beta2 = kv.get_double("slowae.beta2", c.beta2);
        c.polyak_decay = kv.get_double("slowae.polyak_decay", c.polyak_decay);
        c.log_every = kv.get_int("slowae.log_every", c.log_every);
        c.aer_window = kv.get_int("slowae.aer_window", c.aer_window);
        c.target_rate_hz = kv.get_double("controller.target_rate_hz", c.target_rate_hz);
        c.lambda_init = kv.get_double("controller.lambda_init", c.lambda_init);
        c.epsilon = kv.get_double("controller.epsilon", c.epsilon);
        c.delta = kv.get_double("controller.delta", c.delta);
        c.lambda_min = kv.get_double("controller.lambda_min", c.lambda_min);
        c.lambda_max = kv.get_double("controller.lambda_max", c.lambda_max);
        c.validate();
        return c;
    }
};

struct ConvParams {
    Tensor w;  // [filter, in, out]
    Tensor b;  // [out]
};

struct SlowAutoencoder {
    SlowAutoencoderConfig cfg;

    struct ResBlock {
        ConvParams dil;  // filter 2, dilated
        ConvParams mix;  // 1x1
    };
    struct DecoderBlock {
        ConvParams gate;       // filter 2 dilated, width -> 2*width
        ConvParams cond_proj;  // 1x1 cond_width -> 2*width
        ConvParams res;        // 1x1 width -> width
        ConvParams skip;       // 1x1 width -> skip_width
    };

    std::vector<ConvParams> enc_down;  // strided stages
    std::vector<ResBlock> enc_res;
    ConvParams enc_out;  // 1x1 -> channels

    ConvParams cond_in;  // 1x1 channels -> cond_width
    std::vector<ResBlock> cond_res;
    Tensor class_embed;  // [num_classes, cond_width]

    Tensor level_embed;  // [num_levels, dec_width]
    std::vector<DecoderBlock> dec;
    ConvParams head_mix;  // 1x1 skip_width -> head_width
    ConvParams head_out;  // 1x1 head_width -> num_levels

    SlowAutoencoder(const SlowAutoencoderConfig& config, Rng& rng) : cfg(config) {
        cfg.validate();
        auto conv = [&](int filter, int in, int out, double sd) {
            ConvParams p{Tensor({static_cast<std::size_t>(filter), static_cast<std::size_t>(in),
                                 static_cast<std::size_t>(out)}),
                         Tensor({static_cast<std::size_t>(out)})};
            fill_normal(p.w, rng, sd);
            return p;
        };
        int in = 1;
        for (int s = 0; s < cfg.stages(); ++s) {
            enc_down.push_back(conv(4, in, cfg.enc_width, he_stddev(4 * in)));
            in = cfg.enc_width;
        }
        if (cfg.stages() == 0) enc_down.push_back(conv(4, 1, cfg.enc_width, he_stddev(4)));
        for (int b = 0; b < cfg.enc_blocks; ++b)
            enc_res.push_back({conv(2, cfg.enc_width, cfg.enc_width, he_stddev(2 * cfg.enc_width)),
                               conv(1, cfg.enc_width, cfg.enc_width, he_stddev(cfg.enc_width))});
        enc_out = conv(1, cfg.enc_width, cfg.channels, 0.5 * he_stddev(cfg.enc_width));

        cond_in = conv(1, cfg.channels, cfg.cond_width, he_stddev(cfg.channels));
        for (int b = 0; b < cfg.cond_blocks; ++b)
            cond_res.push_back({conv(2, cfg.cond_width, cfg.cond_width, he_stddev(2 * cfg.cond_width)),
                                conv(1, cfg.cond_width, cfg.cond_width, he_stddev(cfg.cond_width))});
        class_embed = Tensor({static_cast<std::size_t>(cfg.num_classes),
                              static_cast<std::size_t>(cfg.cond_width)});
        fill_normal(class_embed, rng, 0.1);

        level_embed = Tensor({static_cast<std::size_t>(cfg.num_levels),
                              static_cast<std::size_t>(cfg.dec_width)});
        fill_normal(level_embed, rng, 0.1);
        for (int b = 0; b < cfg.dec_blocks; ++b)
            dec.push_back({conv(2, cfg.dec_width, 2 * cfg.dec_width, he_stddev(2 * cfg.dec_width)),
                           conv(1, cfg.cond_width, 2 * cfg.dec_width, he_stddev(cfg.cond_width)),
                           conv(1, cfg.dec_width, cfg.dec_width, he_stddev(cfg.dec_width)),
                           conv(1, cfg.dec_width, cfg.skip_width, he_stddev(cfg.dec_width))});
        head_mix = conv(1, cfg.skip_width, cfg.head_width, he_stddev(cfg.skip_width));
        // Near-zero logits at init: the untrained decoder is near-uniform
        // over levels, so the initial NLL sits at log(num_levels).
        head_out = conv(1, cfg.head_width, cfg.num_levels, 0.01);
    }

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        auto add = [&](const std::string& name, ConvParams& p) {
            out.push_back({name + ".w", &p.w});
            out.push_back({name + ".b", &p.b});
        };
        for (std::size_t i = 0; i < enc_down.size(); ++i)
            add("enc.down" + std::to_string(i), enc_down[i]);
        for (std::size_t i = 0; i < enc_res.size(); ++i) {
            add("enc.res" + std::to_string(i) + ".dil", enc_res[i].dil);
            add("enc.res" + std::to_string(i) + ".mix", enc_res[i].mix);
        }
        add("enc.out", enc_out);
        add("cond.in", cond_in);
        for (std::size_t i = 0; i < cond_res.size(); ++i) {
            add("cond.res" + std::to_string(i) + ".dil", cond_res[i].dil);
            add("cond.res" + std::to_string(i) + ".mix", cond_res[i].mix);
        }
        out.push_back({"cond.class_embed", &class_embed});
        out.push_back({"dec.level_embed", &level_embed});
        for (std::size_t i = 0; i < dec.size(); ++i) {
            add("dec.block" + std::to_string(i) + ".gate", dec[i].gate);
            add("dec.block" + std::to_string(i) + ".cond", dec[i].cond_proj);
            add("dec.block" + std::to_string(i) + ".res", dec[i].res);
            add("dec.block" + std::to_string(i) + ".skip", dec[i].skip);
        }
        add("head.mix", head_mix);
        add("head.out", head_out);
        return out;
    }
};

/// Model parameters bound onto a tape as leaves, looked up by tensor address.
struct BoundModel {
    std::vector<Var> vars;  // aligned with model.params()
    std::unordered_map<const Tensor*, Var> by_tensor;

    Var of(const Tensor& t) const {
        auto it = by_tensor.find(&t);
        if (it == by_tensor.end())
            throw std::logic_error("BoundModel: tensor is not a bound parameter");
        return it->second;
    }
};

inline BoundModel bind_model(Tape& tape, SlowAutoencoder& model, bool requires_grad) {
    BoundModel bound;
    std::vector<ParamRef> refs = model.params();
    bound.vars.reserve(refs.size());
    for (const ParamRef& p : refs) {
        Var v = tape.input(*p.tensor, requires_grad);
        bound.vars.push_back(v);
        bound.by_tensor.emplace(p.tensor, v);
    }
    return bound;
}

namespace sae {

inline Var residual_stack(Tape& t, const BoundModel& bm,
                          const std::vector<SlowAutoencoder::ResBlock>& blocks, Var h) {
    int dilation = 1;
    for (const auto& blk : blocks) {
        Var a = t.relu(h);
        a = t.conv1d(a, bm.of(blk.dil.w), bm.of(blk.dil.b), 1, dilation);
        a = t.relu(a);
        a = t.conv1d(a, bm.of(blk.mix.w), bm.of(blk.mix.b));
        h = t.add(h, a);
        dilation *= 2;
    }
    return h;
}

/// Encoder: anti-causal by construction — the input is reversed, passed
/// through causal strided/dilated convolutions, and reversed back, so each
/// code step can only see the present and future of the signal.
inline Var encode(Tape& t, const SlowAutoencoder& m, const BoundModel& bm, Var companded) {
    Var h = t.flip_time(companded);
    for (const ConvParams& stage : m.enc_down)
        h = t.relu(t.conv1d(h, bm.of(stage.w), bm.of(stage.b),
                            m.cfg.stages() == 0 ? 1 : 2, 1));
    h = residual_stack(t, bm, m.enc_res, h);
    h = t.conv1d(h, bm.of(m.enc_out.w), bm.of(m.enc_out.b));
    return t.flip_time(h);
}

/// Conditioning stack: codes -> features, upsampled to audio rate, plus an
/// additive class embedding.
inline Var condition(Tape& t, const SlowAutoencoder& m, const BoundModel& bm, Var codes,
                     int class_id, int out_len) {
    if (class_id < 0 || class_id >= m.cfg.num_classes)
        throw std::invalid_argument("slowae: class id out of range");
    Var c = t.conv1d(codes, bm.of(m.cond_in.w), bm.of(m.cond_in.b));
    c = t.relu(c);
    c = residual_stack(t, bm, m.cond_res, c);
    c = t.upsample_nearest(c, m.cfg.downsample);
    std::vector<int> ids(static_cast<std::size_t>(out_len), class_id);
    Var cls = t.embedding(ids, bm.of(m.class_embed));
    return t.add(c, cls);
}

/// Decoder: embeds the (shifted) level ids, runs gated dilated blocks with
/// the conditioning injected pre-gate, and maps summed skips to level logits.
inline Var decode(Tape& t, const SlowAutoencoder& m, const BoundModel& bm,
                  const std::vector<int>& input_ids, Var cond) {
    Var h = t.embedding(input_ids, bm.of(m.level_embed));
    std::vector<Var> skips;
    int dilation = 1;
    for (const auto& blk : m.dec) {
        Var u = t.conv1d(h, bm.of(blk.gate.w), bm.of(blk.gate.b), 1, dilation);
        Var cp = t.conv1d(cond, bm.of(blk.cond_proj.w), bm.of(blk.cond_proj.b));
        Var g = t.gated_unit(t.add(u, cp));
        h = t.add(h, t.conv1d(g, bm.of(blk.res.w), bm.of(blk.res.b)));
        skips.push_back(t.conv1d(g, bm.of(blk.skip.w), bm.of(blk.skip.b)));
        dilation *= 2;
    }
    Var s = t.relu(t.add_many(skips));
    s = t.relu(t.conv1d(s, bm.of(m.head_mix.w), bm.of(m.head_mix.b)));
    return t.conv1d(s, bm.of(m.head_out.w), bm.of(m.head_out.b));
}

}  // namespace sae

struct WindowExample {
    Tensor samples;  // rank-1 [window], values in [-1, 1]
    int class_id = 0;
};

enum class BottleneckMode {
    kStraightThrough,  // quantise, straight-through gradient (training)
    kBypass,           // conditioning sees the continuous codes
    kFrozenOffset,     // z + fixed offset: the estimator's smooth surrogate
};

struct ForwardOptions {
    double noise_sigma = 0.0;
    double lambda = 0.0;
    double margin_weight = -1.0;  // < 0: take the model's configured weight
    BottleneckMode mode = BottleneckMode::kStraightThrough;
    const std::vector<Tensor>* frozen_offsets = nullptr;  // per element, [Tc, C]
    Rng* rng = nullptr;  // required when noise_sigma > 0
};

struct ElementForward {
    Var z, bottleneck, cond, logits;
    Var nll, margin, slow;
    DenseCodes codes;
    std::vector<int> input_ids, target_ids;
};

struct BatchForward {
    std::vector<ElementForward> elements;
    Var nll, margin, slow, total;
    double aer = 0.0;
    std::vector<DenseCodes> codes;
};

inline std::vector<int> mu_law_targets(const Tensor& samples, double noise_sigma, Rng* rng,
                                       int num_levels) {
    if (noise_sigma > 0 && rng == nullptr)
        throw std::invalid_argument("slowae: noise requested without an RNG");
    std::vector<int> ids(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        double x = samples.data[i];
        if (noise_sigma > 0) x += rng->normal(0.0, noise_sigma);
        x = std::clamp(x, -1.0, 1.0);
        ids[i] = mu_law_encode(x, num_levels);
    }
    return ids;
}

inline Tensor companded_input(const Tensor& samples, int num_levels) {
    Tensor out({samples.size(), 1});
    for (std::size_t i = 0; i < samples.size(); ++i)
        out.data[i] = mu_law_compress(std::clamp(samples.data[i], -1.0, 1.0), num_levels);
    return out;
}

inline ElementForward build_element_forward(Tape& t, SlowAutoencoder& m, const BoundModel& bm,
                                            const WindowExample& ex, const ForwardOptions& opts,
                                            std::size_t element_index) {
    const SlowAutoencoderConfig& cfg = m.cfg;
    if (ex.samples.rank() != 1)
        throw std::invalid_argument("slowae: window must be rank-1");
    if (ex.samples.size() != static_cast<std::size_t>(cfg.window))
        throw std::invalid_argument("slowae: window length mismatch");

    ElementForward fw;
    Var companded = t.input(companded_input(ex.samples, cfg.num_levels), false);
    fw.z = sae::encode(t, m, bm, companded);

    switch (opts.mode) {
        case BottleneckMode::kStraightThrough:
            fw.bottleneck =
                t.straight_through_stq(fw.z, cfg.quantiser(), cfg.code_rate_hz(), &fw.codes);
            break;
        case BottleneckMode::kBypass:
            fw.bottleneck = fw.z;
            fw.codes = stq(t.value(fw.z), cfg.quantiser(), cfg.code_rate_hz());
            break;
        case BottleneckMode::kFrozenOffset: {
            if (!opts.frozen_offsets || element_index >= opts.frozen_offsets->size())
                throw std::invalid_argument("slowae: missing frozen offsets");
            Var off = t.input((*opts.frozen_offsets)[element_index], false);
            fw.bottleneck = t.add(fw.z, off);
            fw.codes = stq(t.value(fw.z), cfg.quantiser(), cfg.code_rate_hz());
            break;
        }
    }

    fw.target_ids = mu_law_targets(ex.samples, opts.noise_sigma, opts.rng, cfg.num_levels);
    fw.input_ids.resize(fw.target_ids.size());
    fw.input_ids[0] = mu_law_encode(0.0, cfg.num_levels);
    std::copy(fw.target_ids.begin(), fw.target_ids.end() - 1, fw.input_ids.begin() + 1);

    fw.cond = sae::condition(t, m, bm, fw.bottleneck, ex.class_id, cfg.window);
    fw.logits = sae::decode(t, m, bm, fw.input_ids, fw.cond);
    fw.nll = t.softmax_ce_mean(fw.logits, fw.target_ids);
    fw.margin = t.margin_op(fw.z);
    fw.slow = t.slowness_op(fw.z, cfg.slowness);
    return fw;
}

/// One optimisation objective over a batch of windows: mean reconstruction
/// NLL plus weighted margin and slowness penalties on the continuous codes.
inline BatchForward build_batch_forward(Tape& t, SlowAutoencoder& m, const BoundModel& bm,
                                        const std::vector<WindowExample>& batch,
                                        const ForwardOptions& opts) {
    if (batch.empty()) throw std::invalid_argument("slowae: empty batch");
    BatchForward out;
    std::vector<Var> nlls, margins, slows;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out.elements.push_back(build_element_forward(t, m, bm, batch[i], opts, i));
        nlls.push_back(out.elements.back().nll);
        margins.push_back(out.elements.back().margin);
        slows.push_back(out.elements.back().slow);
        out.codes.push_back(out.elements.back().codes);
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    out.nll = t.scale(t.add_many(nlls), inv);
    out.margin = t.scale(t.add_many(margins), inv);
    out.slow = t.scale(t.add_many(slows), inv);
    const double mu = opts.margin_weight >= 0 ? opts.margin_weight : m.cfg.margin_weight;
    out.total = t.add_scaled(t.add_scaled(out.nll, out.margin, mu), out.slow, opts.lambda);
    out.aer = estimate_aer(out.codes, m.cfg.max_run_length);
    return out;
}

struct EvalForward {
    double nll = 0, margin = 0, slow = 0, total = 0, aer = 0;
    std::vector<DenseCodes> codes;
};

/// Forward pass without gradients; used by tests and evaluation tooling.
inline EvalForward forward(SlowAutoencoder& m, const std::vector<WindowExample>& batch,
                           double noise_sigma = 0.0, double lambda = 0.0, Rng* rng = nullptr) {
    Tape tape;
    BoundModel bm = bind_model(tape, m, false);
    ForwardOptions opts;
    opts.noise_sigma = noise_sigma;
    opts.lambda = lambda;
    opts.rng = rng;
    BatchForward fw = build_batch_forward(tape, m, bm, batch, opts);
    EvalForward out;
    out.nll = tape.scalar(fw.nll);
    out.margin = tape.scalar(fw.margin);
    out.slow = tape.scalar(fw.slow);
    out.total = tape.scalar(fw.total);
    out.aer = fw.aer;
    out.codes = std::move(fw.codes);
    return out;
}

/// Pool of synthetic signals with random window sampling for training.
class SignalDataset {
public:
    explicit SignalDataset(std::vector<SyntheticSignal> pool) : pool_(std::move(pool)) {
        if (pool_.empty()) throw std::invalid_argument("SignalDataset: empty pool");
    }

    static SignalDataset synthesize(const SyntheticConfig& cfg, int per_class, double duration_s,
                                    std::uint64_t seed) {
        if (per_class < 1) throw std::invalid_argument("SignalDataset: per_class must be >= 1");
        std::vector<SyntheticSignal> pool;
        const int classes = static_cast<int>(cfg.classes.size());
        for (int c = 0; c < classes; ++c)
            for (int i = 0; i < per_class; ++i)
                pool.push_back(generate_synthetic(seed + static_cast<std::uint64_t>(c) * 100003 +
                                                      static_cast<std::uint64_t>(i),
                                                  duration_s, c, cfg));
        return SignalDataset(std::move(pool));
    }

    WindowExample sample_window(int window, Rng& rng) const {
        const SyntheticSignal& sig = pool_[rng.uniform_int(pool_.size())];
        if (sig.samples.size() < static_cast<std::size_t>(window))
            throw std::invalid_argument("SignalDataset: signal shorter than window");
        std::size_t start = rng.uniform_int(sig.samples.size() - window + 1);
        WindowExample ex;
        ex.samples = Tensor({static_cast<std::size_t>(window)});
        std::copy(sig.samples.begin() + static_cast<std::ptrdiff_t>(start),
                  sig.samples.begin() + static_cast<std::ptrdiff_t>(start + window),
                  ex.samples.data.begin());
        ex.class_id = sig.class_id;
        return ex;
    }

    const std::vector<SyntheticSignal>& signals() const { return pool_; }

private:
    std::vector<SyntheticSignal> pool_;
};

struct TrainLogRow {
    std::uint64_t step = 0;  // 1-based, the step that was just completed
    double total = 0, nll = 0, margin = 0, slow = 0, lambda = 0, aer = 0;
};

inline void write_log_header(std::ostream& os) { os << "step,total,nll,margin,slow,lambda,aer\n"; }

inline void write_log_row(std::ostream& os, const TrainLogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.step), r.total, r.nll, r.margin, r.slow,
                  r.lambda, r.aer);
    os << buf;
}

/// Training driver owning the model, optimizer state, Polyak shadows and the
/// rate controller. Step randomness is derived from (seed, step), so a
/// restored run continues exactly where it left off.
class SlowAutoencoderTrainer {
public:
    SlowAutoencoderTrainer(const SlowAutoencoderConfig& cfg, std::uint64_t seed)
        : seed_(seed),
          init_rng_(Rng(seed).fork(0)),
          model_(cfg, init_rng_),
          opt_(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8}),
          polyak_(cfg.polyak_decay) {
        controller_.lambda = cfg.lambda_init;
        controller_.target_rate_hz = cfg.target_rate_hz;
        controller_.epsilon = cfg.epsilon;
        controller_.delta = cfg.delta;
        controller_.lambda_min = cfg.lambda_min;
        controller_.lambda_max = cfg.lambda_max;
        controller_.validate();
    }

    SlowAutoencoder& model() { return model_; }
    const ControllerState& controller() const { return controller_; }
    std::uint64_t step() const { return step_; }
    std::uint64_t seed() const { return seed_; }
    const std::vector<TrainLogRow>& log() const { return log_; }

    /// Model with Polyak-averaged weights for evaluation; falls back to the
    /// live weights when no shadow exists yet.
    SlowAutoencoder averaged_model() {
        SlowAutoencoder copy = model_;
        if (polyak_.initialised()) {
            std::vector<ParamRef> refs = copy.params();
            polyak_.apply_to(refs);
        }
        return copy;
    }

    TrainLogRow train_step(const SignalDataset& data) {
        const SlowAutoencoderConfig& cfg = model_.cfg;
        Rng rng = step_rng(step_);
        std::vector<WindowExample> batch;
        batch.reserve(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i) batch.push_back(data.sample_window(cfg.window, rng));

        Tape tape;
        BoundModel bm = bind_model(tape, model_, true);
        ForwardOptions opts;
        opts.noise_sigma = cfg.noise_sigma;
        opts.lambda = controller_.lambda;
        opts.rng = &rng;
        BatchForward fw = build_batch_forward(tape, model_, bm, batch, opts);

        TrainLogRow row;
        row.step = step_ + 1;
        row.total = tape.scalar(fw.total);
        row.nll = tape.scalar(fw.nll);
        row.margin = tape.scalar(fw.margin);
        row.slow = tape.scalar(fw.slow);
        row.lambda = controller_.lambda;
        row.aer = fw.aer;
        if (!std::isfinite(row.total) || !std::isfinite(row.nll)) {
            char msg[256];
            std::snprintf(msg, sizeof msg,
                          "slowae: non-finite loss at step %llu (nll=%g margin=%g slow=%g "
                          "lambda=%g); aborting",
                          static_cast<unsigned long long>(row.step), row.nll, row.margin, row.slow,
                          row.lambda);
            throw std::runtime_error(msg);
        }

        tape.backward(fw.total);
        GradientAccumulator acc;
        std::vector<ParamRef> refs = model_.params();
        acc.reset(refs);
        acc.add(tape, bm.vars);
        opt_.step(refs, acc.grads(), current_lr());
        polyak_.update(refs);

        recent_aer_.push_back(fw.aer);
        while (recent_aer_.size() > static_cast<std::size_t>(cfg.aer_window))
            recent_aer_.pop_front();
        double mean_aer = 0;
        for (double a : recent_aer_) mean_aer += a;
        mean_aer /= static_cast<double>(recent_aer_.size());
        update_lambda(controller_, mean_aer);

        ++step_;
        log_.push_back(row);
        return row;
    }

    /// Run `steps_to_run` steps, appending CSV rows every cfg.log_every steps
    /// (plus the final step) when a stream is provided.
    void run(const SignalDataset& data, int steps_to_run, std::ostream* csv = nullptr) {
        if (csv && step_ == 0) write_log_header(*csv);
        for (int i = 0; i < steps_to_run; ++i) {
            TrainLogRow row = train_step(data);
            const bool last = i + 1 == steps_to_run;
            if (csv && (row.step % static_cast<std::uint64_t>(model_.cfg.log_every) == 0 || last)) {
                write_log_row(*csv, row);
                csv->flush();
            }
        }
    }

    void save(const std::filesystem::path& path) {
        Checkpoint ck;
        ck.kind = kCheckpointKindSlowAe;
        ck.step = step_;
        ck.seed = seed_;
        ck.controller = controller_;
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
        if (polyak_.initialised())
            for (std::size_t i = 0; i < refs.size(); ++i)
                ck.polyak.emplace_back(refs[i].name, polyak_.shadows()[i]);
        save_checkpoint(path, ck);
    }

    static SlowAutoencoderTrainer restore(const std::filesystem::path& path) {
        Checkpoint ck = load_checkpoint(path);
        if (ck.kind != kCheckpointKindSlowAe)
            throw FormatError("checkpoint: not a slow-autoencoder checkpoint");
        KeyValueConfig kv = KeyValueConfig::parse(ck.config_text);
        SlowAutoencoderConfig cfg = SlowAutoencoderConfig::from_config(kv);
        SlowAutoencoderTrainer trainer(cfg, ck.seed);
        trainer.step_ = ck.step;
        trainer.controller_ = ck.controller;
        trainer.load_section(ck.params, [&](std::size_t i, Tensor t) {
            std::vector<ParamRef> refs = trainer.model_.params();
            check_same_shape(*refs[i].tensor, t, "checkpoint param");
            *refs[i].tensor = std::move(t);
        });
        if (!ck.adam_m.empty()) {
            std::vector<Tensor> m(trainer.model_.params().size()), v(m.size());
            trainer.load_section(ck.adam_m, [&](std::size_t i, Tensor t) { m[i] = std::move(t); });
            trainer.load_section(ck.adam_v, [&](std::size_t i, Tensor t) { v[i] = std::move(t); });
            trainer.opt_.restore(std::move(m), std::move(v), ck.step);
        }
        if (!ck.polyak.empty()) {
            std::vector<Tensor> sh(trainer.model_.params().size());
            trainer.load_section(ck.polyak, [&](std::size_t i, Tensor t) { sh[i] = std::move(t); });
            trainer.polyak_.shadows() = std::move(sh);
        }
        return trainer;
    }

private:
    Rng step_rng(std::uint64_t step) const {
        return Rng(seed_ ^ (0x9e3779b97f4a7c15ULL * (step + 1)));
    }

    double current_lr() const {
        const SlowAutoencoderConfig& cfg = model_.cfg;
        const std::uint64_t drop_at =
            static_cast<std::uint64_t>(0.9 * static_cast<double>(cfg.steps));
        return step_ >= drop_at && cfg.steps > 0 ? cfg.lr / 3.0 : cfg.lr;
    }

    template <typename Assign>
    void load_section(const std::vector<std::pair<std::string, Tensor>>& section, Assign assign) {
        std::vector<ParamRef> refs = model_.params();
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < refs.size(); ++i) index[refs[i].name] = i;
        if (section.size() != refs.size())
            throw FormatError("checkpoint: parameter count mismatch");
        for (const auto& [name, tensor] : section) {
            auto it = index.find(name);
            if (it == index.end()) throw FormatError("checkpoint: unknown parameter " + name);
            assign(it->second, tensor);
        }
    }

    std::uint64_t seed_;
    Rng init_rng_;
    SlowAutoencoder model_;
    AdamOptimizer opt_;
    PolyakAverager polyak_;
    ControllerState controller_;
    std::uint64_t step_ = 0;
    std::deque<double> recent_aer_;
    std::vector<TrainLogRow> log_;
};

struct EncodeResult {
    Tensor z;  // [Tc, C] continuous
    DenseCodes codes;
    EventSequence events;
};

/// Deterministic inference path: signal -> continuous codes -> hysteresis
/// quantisation -> interleaved event stream.
inline EncodeResult encode_to_events(SlowAutoencoder& m, const Tensor& samples) {
    if (samples.rank() != 1) throw std::invalid_argument("encode_to_events: rank-1 input expected");
    if (samples.size() == 0 || samples.size() % static_cast<std::size_t>(m.cfg.downsample) != 0)
        throw std::invalid_argument(
            "encode_to_events: input length must be a positive multiple of the downsample factor");
    Tape tape;
    BoundModel bm = bind_model(tape, m, false);
    Var companded = tape.input(companded_input(samples, m.cfg.num_levels), false);
    Var z = sae::encode(tape, m, bm, companded);
    EncodeResult out;
    out.z = tape.value(z);
    out.codes = stq(out.z, m.cfg.quantiser(), m.cfg.code_rate_hz());
    out.events = interleaved_encode(out.codes, m.cfg.max_run_length);
    return out;
}

/// Autoregressive reconstruction from an event stream: decode the dense code
/// grid, then sample (or argmax) the decoder one step at a time.
inline Tensor reconstruct(SlowAutoencoder& m, const EventSequence& events, int class_id,
                          std::uint64_t seed = 0, bool greedy = true) {
    if (events.k != m.cfg.k)
        throw std::invalid_argument("reconstruct: event stream has mismatched k");
    if (events.num_channels != static_cast<std::size_t>(m.cfg.channels))
        throw std::invalid_argument("reconstruct: event stream has mismatched channel count");
    if (events.base_rate_hz != m.cfg.code_rate_hz())
        throw std::invalid_argument("reconstruct: event stream has mismatched code rate");
    std::vector<std::int64_t> durations = channel_durations(events);
    for (std::int64_t d : durations)
        if (d != durations[0])
            throw std::invalid_argument("reconstruct: ragged channel durations");
    const std::size_t code_len = static_cast<std::size_t>(durations[0]);
    DenseCodes codes = interleaved_decode(events, code_len);
    const int out_len = static_cast<int>(code_len) * m.cfg.downsample;

    Tape tape;
    BoundModel bm = bind_model(tape, m, false);
    Var grid = tape.input(levels_to_real(codes), false);
    Var cond = sae::condition(tape, m, bm, grid, class_id, out_len);
    const Tensor cond_value = tape.value(cond);

    Rng rng(seed);
    const int bos = mu_law_encode(0.0, m.cfg.num_levels);
    std::vector<int> ids(static_cast<std::size_t>(out_len), bos);
    Tensor out({static_cast<std::size_t>(out_len)});
    for (int t = 0; t < out_len; ++t) {
        Tape step_tape;
        BoundModel step_bm = bind_model(step_tape, m, false);
        Var c = step_tape.input(cond_value, false);
        Var logits = sae::decode(step_tape, m, step_bm, ids, c);
        const Tensor& lv = step_tape.value(logits);
        const std::size_t levels = lv.dim(1);
        int pick = 0;
        if (greedy) {
            double best = -1e300;
            for (std::size_t j = 0; j < levels; ++j)
                if (lv.at(t, j) > best) {
                    best = lv.at(t, j);
                    pick = static_cast<int>(j);
                }
        } else {
            double mx = -1e300;
            for (std::size_t j = 0; j < levels; ++j) mx = std::max(mx, lv.at(t, j));
            double total = 0;
            std::vector<double> probs(levels);
            for (std::size_t j = 0; j < levels; ++j) {
                probs[j] = std::exp(lv.at(t, j) - mx);
                total += probs[j];
            }
            double u = rng.uniform() * total, acc = 0;
            pick = static_cast<int>(levels) - 1;
            for (std::size_t j = 0; j < levels; ++j) {
                acc += probs[j];
                if (u < acc) {
                    pick = static_cast<int>(j);
                    break;
                }
            }
        }
        out.data[static_cast<std::size_t>(t)] = mu_law_decode(pick, m.cfg.num_levels);
        if (t + 1 < out_len) ids[static_cast<std::size_t>(t + 1)] = pick;
    }
    return out;
}

struct GradientCheckOptions {
    double fd_step = 1e-4;
    double tol_decoder = 1e-6;   // smooth reconstruction path, no quantiser
    double tol_penalty = 1e-5;   // margin + slowness on the continuous codes
    double tol_full = 1e-4;      // full objective via the smooth surrogate
    double penalty_lambda = 0.37;
};

struct GradientCheckReport {
    std::size_t param_count = 0;
    double max_rel_decoder = 0;
    double max_rel_penalty = 0;
    double max_rel_full = 0;
    // Coordinates whose +/-h perturbation moves the quantised grid; on them
    // the real objective is locally non-smooth, so they are tallied rather
    // than compared.
    std::size_t boundary_coords = 0;
    std::size_t smooth_coords = 0;

    bool pass(const GradientCheckOptions& opts = {}) const {
        return max_rel_decoder < opts.tol_decoder && max_rel_penalty < opts.tol_penalty &&
               max_rel_full < opts.tol_full;
    }
};

namespace sae {

inline double relative_error(double analytic, double fd) {
    return std::abs(analytic - fd) / std::max({1.0, std::abs(analytic), std::abs(fd)});
}

template <typename LossFn>
double fd_vs_analytic(SlowAutoencoder& m, LossFn&& loss, const std::vector<Tensor>& analytic,
                      double h) {
    std::vector<ParamRef> refs = m.params();
    double worst = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        Tensor& t = *refs[i].tensor;
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double saved = t.data[j];
            t.data[j] = saved + h;
            const double fp = loss();
            t.data[j] = saved - h;
            const double fm = loss();
            t.data[j] = saved;
            const double fd = (fp - fm) / (2 * h);
            const double a = analytic[i].data.empty() ? 0.0 : analytic[i].data[j];
            double err = relative_error(a, fd);
            if (err >= 1e-7) {
                // Retry with a smaller step before believing a large error:
                // central differences carry an O(h^2) truncation term.
                const double h2 = h / 8;
                t.data[j] = saved + h2;
                const double fp2 = loss();
                t.data[j] = saved - h2;
                const double fm2 = loss();
                t.data[j] = saved;
                err = std::min(err, relative_error(a, (fp2 - fm2) / (2 * h2)));
            }
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace sae

/// Finite-difference validation of the whole training objective on a single
/// window, in three parts: the smooth reconstruction path (quantiser
/// bypassed), the penalties on the continuous codes, and the full objective
/// with the quantiser replaced by its straight-through surrogate (identity
/// slope through the quantised value). Boundary-crossing coordinates of the
/// real quantised forward are counted separately.
inline GradientCheckReport gradient_check(SlowAutoencoder& m, const WindowExample& example,
                                          const GradientCheckOptions& opts = {}) {
    GradientCheckReport report;
    std::vector<ParamRef> refs = m.params();
    for (const ParamRef& p : refs) report.param_count += p.tensor->size();

    const std::vector<WindowExample> batch{example};
    const double mu = m.cfg.margin_weight;
    const double lam = opts.penalty_lambda;

    auto grads_of = [&](const ForwardOptions& fopts, auto pick) {
        Tape tape;
        BoundModel bm = bind_model(tape, m, true);
        BatchForward fw = build_batch_forward(tape, m, bm, batch, fopts);
        tape.backward(pick(fw));
        std::vector<Tensor> out;
        out.reserve(bm.vars.size());
        for (Var v : bm.vars) out.push_back(tape.grad(v));
        return out;
    };
    auto value_of = [&](const ForwardOptions& fopts, auto pick) {
        Tape tape;
        BoundModel bm = bind_model(tape, m, false);
        BatchForward fw = build_batch_forward(tape, m, bm, batch, fopts);
        return tape.scalar(pick(fw));
    };

    // Route 1: reconstruction NLL with the bottleneck bypassed.
    ForwardOptions bypass;
    bypass.mode = BottleneckMode::kBypass;
    auto nll_of = [](const BatchForward& fw) { return fw.nll; };
    report.max_rel_decoder =
        sae::fd_vs_analytic(m, [&] { return value_of(bypass, nll_of); }, grads_of(bypass, nll_of),
                            opts.fd_step);

    // Route 2: penalties only, still no quantiser.
    ForwardOptions pen = bypass;
    pen.lambda = lam;
    pen.margin_weight = mu;
    {
        auto margin_only = [&](const BatchForward& fw) { return fw.margin; };
        std::vector<Tensor> analytic_margin = grads_of(pen, margin_only);
        auto slow_only = [&](const BatchForward& fw) { return fw.slow; };
        std::vector<Tensor> analytic_slow = grads_of(pen, slow_only);
        std::vector<Tensor> combined;
        combined.reserve(analytic_margin.size());
        for (std::size_t i = 0; i < analytic_margin.size(); ++i) {
            Tensor t(refs[i].tensor->shape);
            const Tensor& gm = analytic_margin[i];
            const Tensor& gs = analytic_slow[i];
            for (std::size_t j = 0; j < t.size(); ++j) {
                double v = 0;
                if (!gm.data.empty()) v += mu * gm.data[j];
                if (!gs.data.empty()) v += lam * gs.data[j];
                t.data[j] = v;
            }
            combined.push_back(std::move(t));
        }
        auto loss = [&] {
            Tape tape;
            BoundModel bm = bind_model(tape, m, false);
            BatchForward fw = build_batch_forward(tape, m, bm, batch, pen);
            return mu * tape.scalar(fw.margin) + lam * tape.scalar(fw.slow);
        };
        report.max_rel_penalty = sae::fd_vs_analytic(m, loss, combined, opts.fd_step);
    }

    // Route 3: full objective through the straight-through surrogate. The
    // surrogate pins the quantisation offset observed at the unperturbed
    // point, which is exactly the function whose gradient the estimator
    // computes; the real quantised forward is scanned for boundary crossings.
    {
        std::vector<Tensor> offsets;
        DenseCodes centre_codes;
        {
            Tape tape;
            BoundModel bm = bind_model(tape, m, false);
            ForwardOptions st;
            st.lambda = lam;
            BatchForward fw = build_batch_forward(tape, m, bm, batch, st);
            centre_codes = fw.codes[0];
            Tensor z = tape.value(fw.elements[0].z);
            Tensor grid = levels_to_real(centre_codes);
            Tensor off(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) off.data[i] = grid.data[i] - z.data[i];
            offsets.push_back(std::move(off));
        }
        ForwardOptions frozen;
        frozen.mode = BottleneckMode::kFrozenOffset;
        frozen.frozen_offsets = &offsets;
        frozen.lambda = lam;
        auto total_of = [](const BatchForward& fw) { return fw.total; };
        std::vector<Tensor> analytic = grads_of(frozen, total_of);
        auto loss = [&] { return value_of(frozen, total_of); };
        report.max_rel_full = sae::fd_vs_analytic(m, loss, analytic, opts.fd_step);

        // Boundary census on the real quantised forward (encoder-only pass:
        // the grid depends on nothing downstream of the quantiser).
        auto codes_at = [&] {
            Tape tape;
            BoundModel bm = bind_model(tape, m, false);
            Var companded = tape.input(companded_input(example.samples, m.cfg.num_levels), false);
            Var z = sae::encode(tape, m, bm, companded);
            return stq(tape.value(z), m.cfg.quantiser(), m.cfg.code_rate_hz()).levels;
        };
        const double h = opts.fd_step;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            Tensor& t = *refs[i].tensor;
            for (std::size_t j = 0; j < t.size(); ++j) {
                const double saved = t.data[j];
                t.data[j] = saved + h;
                const bool up_same = codes_at() == centre_codes.levels;
                t.data[j] = saved - h;
                const bool down_same = codes_at() == centre_codes.levels;
                t.data[j] = saved;
                if (up_same && down_same)
                    ++report.smooth_coords;
                else
                    ++report.boundary_coords;
            }
        }
    }
    return report;
}

}  // namespace vdrl
