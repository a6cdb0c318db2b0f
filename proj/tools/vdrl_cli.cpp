// Command-line surface for the whole pipeline: corpus generation, training,
// event extraction, sampling, codec file transforms, and metric reports.
//
// Artifact conventions: JSON for reports, CSV for time series, VDRL binary
// for events, flat binary for checkpoints. Every command is deterministic
// under --seed (no timestamps in outputs).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "vdrl/metrics.hpp"
#include "vdrl/run_length_transformer.hpp"
#include "vdrl/slow_autoencoder.hpp"
#include "vdrl/synthetic.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace vdrl;

namespace {

struct Common {
    std::uint64_t seed = 0;
    std::string config;
    std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--seed", c.seed, "seed for all randomness in this command");
    cmd->add_option("--config", c.config, "key = value config file");
    cmd->add_option("--out", c.out, "output directory");
}

KeyValueConfig load_config(const Common& c) {
    if (c.config.empty()) return {};
    return KeyValueConfig::load(c.config);
}

fs::path out_dir(const Common& c) {
    fs::path dir(c.out);
    fs::create_directories(dir);
    return dir;
}

struct DataParams {
    SyntheticConfig synth;
    int classes = 4;
    int per_class = 8;
    double duration_s = 1.0;
};

DataParams data_from_config(const KeyValueConfig& kv) {
    DataParams d;
    d.synth.sample_rate_hz = kv.get_double("data.sample_rate_hz", d.synth.sample_rate_hz);
    d.classes = kv.get_int("data.classes", d.classes);
    d.per_class = kv.get_int("data.per_class", d.per_class);
    d.duration_s = kv.get_double("data.duration_s", d.duration_s);
    if (d.classes < 1 || d.classes > static_cast<int>(d.synth.classes.size()))
        throw ConfigError("data.classes must be 1.." + std::to_string(d.synth.classes.size()));
    if (d.per_class < 1) throw ConfigError("data.per_class must be positive");
    if (d.duration_s <= 0) throw ConfigError("data.duration_s must be positive");
    d.synth.classes.resize(static_cast<std::size_t>(d.classes));
    d.synth.validate();
    return d;
}

// clip seeds match SignalDataset::synthesize so corpora line up across commands
std::uint64_t clip_seed(std::uint64_t seed, int class_id, int index) {
    return seed + static_cast<std::uint64_t>(class_id) * 100003ull +
           static_cast<std::uint64_t>(index);
}

std::string clip_name(std::size_t index, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip_%04zu.%s", index, ext);
    return buf;
}

void write_json(const fs::path& path, const ordered_json& j) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << j.dump(2) << '\n';
}

ordered_json read_json(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path.string());
    ordered_json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return j;
}

void write_samples_csv(const fs::path& path, const std::vector<double>& x) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os << "x\n";
    char buf[40];
    for (double v : x) {
        std::snprintf(buf, sizeof buf, "%.17g\n", v);
        os << buf;
    }
}

std::vector<double> read_samples_csv(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "x")
        throw FormatError(path.string() + ": expected header 'x'");
    std::vector<double> out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        try {
            std::size_t used = 0;
            out.push_back(std::stod(line, &used));
            if (used != line.size()) throw std::invalid_argument("trailing junk");
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": bad sample at line " + std::to_string(lineno));
        }
    }
    if (out.empty()) throw FormatError(path.string() + ": no samples");
    return out;
}

void write_grid_csv(const fs::path& path, const DenseCodes& codes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    for (std::size_t c = 0; c < codes.num_channels; ++c) os << (c ? "," : "") << 'c' << c;
    os << '\n';
    for (std::size_t t = 0; t < codes.num_steps; ++t) {
        for (std::size_t c = 0; c < codes.num_channels; ++c)
            os << (c ? "," : "") << codes.at(t, c);
        os << '\n';
    }
}

std::vector<std::vector<int>> read_grid_csv(const fs::path& path, std::size_t& channels) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open: " + path.string());
    std::string line;
    if (!std::getline(is, line) || line.empty() || line[0] != 'c')
        throw FormatError(path.string() + ": expected channel header");
    channels = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    std::vector<std::vector<int>> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        std::vector<int> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            try {
                std::size_t used = 0;
                row.push_back(std::stoi(cell, &used));
                if (used != cell.size()) throw std::invalid_argument("trailing junk");
            } catch (const std::exception&) {
                throw FormatError(path.string() + ": bad level at line " + std::to_string(lineno));
            }
        }
        if (row.size() != channels)
            throw FormatError(path.string() + ": ragged row at line " + std::to_string(lineno));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError(path.string() + ": no rows");
    return rows;
}

Tensor to_tensor(const std::vector<double>& x) {
    Tensor t({x.size()});
    t.data = x;
    return t;
}

// --- commands -------------------------------------------------------------

void run_gen_data(const Common& c) {
    KeyValueConfig kv = load_config(c);
    DataParams d = data_from_config(kv);
    fs::path dir = out_dir(c);
    ordered_json manifest;
    manifest["sample_rate_hz"] = d.synth.sample_rate_hz;
    manifest["clips"] = ordered_json::array();
    std::size_t index = 0;
    for (int cls = 0; cls < d.classes; ++cls) {
        for (int i = 0; i < d.per_class; ++i, ++index) {
            SyntheticSignal sig =
                generate_synthetic(clip_seed(c.seed, cls, i), d.duration_s, cls, d.synth);
            std::string name = clip_name(index, "csv");
            write_samples_csv(dir / name, sig.samples);
            ordered_json row;
            row["file"] = name;
            row["class_id"] = cls;
            row["samples"] = sig.samples.size();
            row["change_points"] = sig.change_points.size();
            manifest["clips"].push_back(std::move(row));
        }
    }
    write_json(dir / "manifest.json", manifest);
}

// Load a gen-data corpus back from disk.
SignalDataset load_corpus(const fs::path& dir, int num_classes) {
    ordered_json manifest = read_json(dir / "manifest.json");
    const double rate = manifest["sample_rate_hz"].get<double>();
    std::vector<SyntheticSignal> pool;
    for (const auto& row : manifest["clips"]) {
        SyntheticSignal sig;
        sig.samples = read_samples_csv(dir / row["file"].get<std::string>());
        sig.class_id = row["class_id"].get<int>();
        sig.sample_rate_hz = rate;
        if (sig.class_id < 0 || sig.class_id >= num_classes)
            throw ConfigError("corpus class_id outside the model's class count");
        pool.push_back(std::move(sig));
    }
    return SignalDataset(std::move(pool));
}

void run_train_slowae(const Common& c, const std::string& data_dir, int steps_override) {
    KeyValueConfig kv = load_config(c);
    SlowAutoencoderConfig cfg = SlowAutoencoderConfig::from_config(kv);
    SignalDataset dataset = [&] {
        if (!data_dir.empty()) return load_corpus(data_dir, cfg.num_classes);
        DataParams d = data_from_config(kv);
        if (static_cast<int>(d.synth.sample_rate_hz) != cfg.sample_rate_hz)
            throw ConfigError("data.sample_rate_hz must match slowae.sample_rate_hz");
        if (d.classes > cfg.num_classes)
            throw ConfigError("data.classes exceeds slowae.num_classes");
        return SignalDataset::synthesize(d.synth, d.per_class, d.duration_s, c.seed);
    }();

    fs::path dir = out_dir(c);
    std::ofstream csv(dir / "train_log.csv", std::ios::binary);
    SlowAutoencoderTrainer trainer(cfg, c.seed);
    const int steps = steps_override > 0 ? steps_override : cfg.steps;
    TrainLogRow last;
    write_log_header(csv);
    for (int i = 0; i < steps; ++i) {
        last = trainer.train_step(dataset);
        if (last.step % static_cast<std::uint64_t>(cfg.log_every) == 0 || i + 1 == steps) {
            write_log_row(csv, last);
            csv.flush();
        }
    }
    trainer.save(dir / "slowae.ckpt");

    ordered_json report;
    report["kind"] = "slowae";
    report["steps"] = trainer.step();
    report["final_total"] = last.total;
    report["final_nll"] = last.nll;
    report["final_margin"] = last.margin;
    report["final_slow"] = last.slow;
    report["final_lambda"] = last.lambda;
    report["final_aer"] = last.aer;
    report["target_rate_hz"] = cfg.target_rate_hz;
    write_json(dir / "report.json", report);
}

void run_extract_events(const Common& c, const std::string& ckpt) {
    KeyValueConfig kv = load_config(c);
    SlowAutoencoderTrainer trainer = SlowAutoencoderTrainer::restore(ckpt);
    SlowAutoencoder model = trainer.averaged_model();
    const SlowAutoencoderConfig& cfg = model.cfg;
    DataParams d = data_from_config(kv);
    if (static_cast<int>(d.synth.sample_rate_hz) != cfg.sample_rate_hz)
        throw ConfigError("data.sample_rate_hz must match the checkpoint's sample rate");
    if (d.classes > cfg.num_classes)
        throw ConfigError("data.classes exceeds the checkpoint's class count");

    fs::path dir = out_dir(c);
    ordered_json manifest;
    manifest["k"] = cfg.k;
    manifest["channels"] = cfg.channels;
    manifest["base_rate_hz"] = cfg.code_rate_hz();
    manifest["max_run_length"] = cfg.max_run_length;
    manifest["sample_rate_hz"] = cfg.sample_rate_hz;
    manifest["clips"] = ordered_json::array();
    std::size_t index = 0;
    for (int cls = 0; cls < d.classes; ++cls) {
        for (int i = 0; i < d.per_class; ++i, ++index) {
            SyntheticSignal sig =
                generate_synthetic(clip_seed(c.seed, cls, i), d.duration_s, cls, d.synth);
            const std::size_t usable =
                sig.samples.size() -
                sig.samples.size() % static_cast<std::size_t>(cfg.downsample);
            if (usable == 0) throw ConfigError("data.duration_s too short for the model");
            sig.samples.resize(usable);
            EncodeResult enc = encode_to_events(model, to_tensor(sig.samples));
            std::string name = clip_name(index, "vdrl");
            save_events(dir / name, enc.events);
            const double seconds = static_cast<double>(usable) / cfg.sample_rate_hz;
            ordered_json row;
            row["file"] = name;
            row["class_id"] = cls;
            row["events"] = enc.events.events.size();
            row["change_points"] = sig.change_points.size();
            row["duration_s"] = seconds;
            row["aer"] = static_cast<double>(enc.events.events.size()) / seconds;
            manifest["clips"].push_back(std::move(row));
        }
    }
    write_json(dir / "manifest.json", manifest);
}

void run_train_rlt(const Common& c, const std::string& events_dir, int windows_per_clip,
                   int steps_override) {
    KeyValueConfig kv = load_config(c);
    RunLengthTransformerConfig cfg = RunLengthTransformerConfig::from_config(kv);
    ordered_json manifest = read_json(fs::path(events_dir) / "manifest.json");
    if (manifest["k"].get<int>() != cfg.k ||
        manifest["channels"].get<int>() != cfg.channels ||
        manifest["max_run_length"].get<int>() != cfg.max_run_length)
        throw ConfigError("rlt.* does not match the event corpus (k/channels/max_run_length)");

    std::vector<EventSequence> sequences;
    std::vector<int> conditions;
    for (const auto& row : manifest["clips"]) {
        sequences.push_back(load_events(fs::path(events_dir) / row["file"].get<std::string>()));
        const int cls = row["class_id"].get<int>();
        if (cls < 0 || cls >= cfg.num_classes)
            throw ConfigError("event corpus class_id outside rlt.num_classes");
        conditions.push_back(cls);
    }
    EventWindowDataset data = EventWindowDataset::slice(sequences, conditions, cfg.window,
                                                        windows_per_clip, c.seed ^ 0x5bf03635ull);

    fs::path dir = out_dir(c);
    std::ofstream csv(dir / "train_log.csv", std::ios::binary);
    RunLengthTransformerTrainer trainer(cfg, c.seed);
    const int steps = steps_override > 0 ? steps_override : cfg.steps;
    RltTrainLogRow last;
    write_rlt_log_header(csv);
    for (int i = 0; i < steps; ++i) {
        last = trainer.train_step(data);
        if (last.step % static_cast<std::uint64_t>(cfg.log_every) == 0 || i + 1 == steps) {
            write_rlt_log_row(csv, last);
            csv.flush();
        }
    }
    trainer.save(dir / "rlt.ckpt");
    auto [hv, hl] = rlt_holdout_nll(trainer.model(), data.windows());

    ordered_json report;
    report["kind"] = "rlt";
    report["steps"] = trainer.step();
    report["final_value_nll"] = last.value_nll;
    report["final_length_nll"] = last.length_nll;
    report["dataset_value_nll"] = hv;
    report["dataset_length_nll"] = hl;
    report["windows"] = data.windows().size();
    write_json(dir / "report.json", report);
}

void run_sample(const Common& c, const std::string& ckpt, int condition, int num_events,
                double p, double rate_hz) {
    RunLengthTransformerTrainer trainer = RunLengthTransformerTrainer::restore(ckpt);
    EventWindow empty;
    EventSequence seq = sample(trainer.model(), empty, condition, num_events, rate_hz, p, c.seed);
    save_events(out_dir(c) / "sample.vdrl", seq);
}

void run_encode(const Common& c, const std::string& input, int k, double rate_hz, int max_run) {
    std::size_t channels = 0;
    std::vector<std::vector<int>> rows = read_grid_csv(input, channels);
    DenseCodes codes(rows.size(), channels, k, rate_hz);
    for (std::size_t t = 0; t < rows.size(); ++t)
        for (std::size_t ch = 0; ch < channels; ++ch) codes.at(t, ch) = rows[t][ch];
    codes.validate();
    EventSequence seq = interleaved_encode(codes, max_run);
    save_events(out_dir(c) / fs::path(input).stem().concat(".vdrl"), seq);
}

void run_decode(const Common& c, const std::string& input) {
    EventSequence seq = load_events(input);
    std::vector<std::int64_t> durations = channel_durations(seq);
    std::int64_t steps = *std::max_element(durations.begin(), durations.end());
    DenseCodes codes = interleaved_decode(seq, static_cast<std::size_t>(steps));
    write_grid_csv(out_dir(c) / fs::path(input).stem().concat(".csv"), codes);
}

void run_eval(const Common& c, const std::string& events_dir, double bin_seconds) {
    ordered_json manifest = read_json(fs::path(events_dir) / "manifest.json");
    const int k = manifest["k"].get<int>();
    const int max_run = manifest["max_run_length"].get<int>();

    std::vector<double> event_counts, change_counts;
    std::map<int, std::size_t> jumps;
    std::vector<std::size_t> density;
    double total_events = 0, total_seconds = 0;
    fs::path dir = out_dir(c);
    std::ofstream clips_csv(dir / "clips.csv", std::ios::binary);
    clips_csv << "clip,class_id,events,change_points,aer\n";
    for (const auto& row : manifest["clips"]) {
        EventSequence seq = load_events(fs::path(events_dir) / row["file"].get<std::string>());
        for (const auto& [jump, count] : jump_histogram(seq)) jumps[jump] += count;
        std::vector<std::size_t> bins = barcode(seq, bin_seconds);
        if (bins.size() > density.size()) density.resize(bins.size(), 0);
        for (std::size_t i = 0; i < bins.size(); ++i) density[i] += bins[i];
        event_counts.push_back(static_cast<double>(seq.events.size()));
        change_counts.push_back(row["change_points"].get<double>());
        total_events += static_cast<double>(seq.events.size());
        total_seconds += row["duration_s"].get<double>();
        clips_csv << row["file"].get<std::string>() << ',' << row["class_id"].get<int>() << ','
                  << seq.events.size() << ',' << row["change_points"].get<std::size_t>() << ','
                  << row["aer"].get<double>() << '\n';
    }
    if (event_counts.size() < 2) throw ConfigError("eval needs at least two clips");

    const double events_per_second = total_events / total_seconds;
    ordered_json report;
    report["clips"] = event_counts.size();
    report["pearson"] = pearson_correlation(change_counts, event_counts);
    report["spearman"] = spearman_correlation(change_counts, event_counts);
    ordered_json hist;
    for (const auto& [jump, count] : jumps) hist[std::to_string(jump)] = count;
    report["jump_histogram"] = std::move(hist);
    report["event_density_bin_s"] = bin_seconds;
    report["event_density"] = density;
    report["events_per_second"] = events_per_second;
    ordered_json rates;
    rates["pcm_16bit_24khz"] = pcm_bits_per_second(24000, 16);
    rates["pcm_8bit_24khz"] = pcm_bits_per_second(24000, 8);
    rates["raw_bps"] = raw_bits_per_second(events_per_second, k, max_run);
    report["bit_rates"] = std::move(rates);
    write_json(dir / "report.json", report);
}

int run_grad_check(const Common& c) {
    KeyValueConfig kv = load_config(c);
    SlowAutoencoderConfig cfg;
    if (!c.config.empty()) {
        cfg = SlowAutoencoderConfig::from_config(kv);
    } else {
        // small enough for finite differences over every parameter
        cfg.window = 32;
        cfg.channels = 3;
        cfg.enc_width = 6;
        cfg.enc_blocks = 1;
        cfg.cond_width = 4;
        cfg.cond_blocks = 1;
        cfg.dec_width = 6;
        cfg.dec_blocks = 2;
        cfg.skip_width = 6;
        cfg.head_width = 7;
        cfg.validate();
    }
    Rng init = Rng(c.seed).fork(0);
    SlowAutoencoder model(cfg, init);
    // Finite differences need a smooth probe point. Fresh models sit on relu
    // kinks: zero biases mean any conv whose receptive field was fully
    // clipped lands exactly on the hinge, where central differences average
    // the two one-sided slopes. Jitter every parameter to a generic point.
    Rng jitter = Rng(c.seed).fork(1);
    for (const ParamRef& p : model.params())
        for (double& v : p.tensor->data) v += jitter.normal(0.0, 0.01);
    // Silent stretches are exact zeros with the same degeneracy on the input
    // side; probe a fully active window (no zero samples) instead. The
    // densest class makes one easy to find.
    SyntheticConfig synth;
    synth.sample_rate_hz = cfg.sample_rate_hz;
    const int probe_class = static_cast<int>(synth.classes.size()) - 1;
    const std::size_t W = static_cast<std::size_t>(cfg.window);
    WindowExample example;
    example.class_id = 0;
    bool found = false;
    for (std::uint64_t attempt = 1; attempt <= 16 && !found; ++attempt) {
        SyntheticSignal sig = generate_synthetic(c.seed + attempt, 1.0, probe_class, synth);
        for (std::size_t at = 0; at + W <= sig.samples.size() && !found; at += W) {
            if (std::find(sig.samples.begin() + at, sig.samples.begin() + at + W, 0.0) !=
                sig.samples.begin() + at + W)
                continue;
            Tensor window({W});
            for (std::size_t i = 0; i < W; ++i) window.data[i] = sig.samples[at + i];
            example.samples = std::move(window);
            found = true;
        }
    }
    if (!found) throw std::runtime_error("grad-check: no fully active window found");

    GradientCheckOptions opts;
    GradientCheckReport report = gradient_check(model, example, opts);
    ordered_json j;
    j["param_count"] = report.param_count;
    j["max_rel_decoder"] = report.max_rel_decoder;
    j["max_rel_penalty"] = report.max_rel_penalty;
    j["max_rel_full"] = report.max_rel_full;
    j["boundary_coords"] = report.boundary_coords;
    j["smooth_coords"] = report.smooth_coords;
    j["pass"] = report.pass(opts);
    write_json(out_dir(c) / "report.json", j);
    return report.pass(opts) ? 0 : 1;
}

std::string one_line(std::string s) {
    for (char& ch : s)
        if (ch == '\n') ch = ' ';
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"variable-rate discrete representation toolkit"};
    app.require_subcommand(1);

    int exit_code = 0;

    Common gen_c;
    CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic corpus as CSV clips");
    add_common(gen, gen_c);
    gen->callback([&] { run_gen_data(gen_c); });

    Common tsa_c;
    std::string tsa_data;
    int tsa_steps = 0;
    CLI::App* tsa = app.add_subcommand("train-slowae", "train the slow autoencoder");
    add_common(tsa, tsa_c);
    tsa->add_option("--data", tsa_data, "gen-data corpus directory (default: data.* config)");
    tsa->add_option("--steps", tsa_steps, "override slowae.steps");
    tsa->callback([&] { run_train_slowae(tsa_c, tsa_data, tsa_steps); });

    Common ext_c;
    std::string ext_ckpt;
    CLI::App* ext = app.add_subcommand("extract-events", "encode a corpus to VDRL event files");
    add_common(ext, ext_c);
    ext->add_option("--ckpt", ext_ckpt, "slow autoencoder checkpoint")->required();
    ext->callback([&] { run_extract_events(ext_c, ext_ckpt); });

    Common trl_c;
    std::string trl_events;
    int trl_windows = 4, trl_steps = 0;
    CLI::App* trl = app.add_subcommand("train-rlt", "train the event-sequence model");
    add_common(trl, trl_c);
    trl->add_option("--events", trl_events, "directory from extract-events")->required();
    trl->add_option("--windows-per-clip", trl_windows, "training windows sliced per clip");
    trl->add_option("--steps", trl_steps, "override rlt.steps");
    trl->callback([&] { run_train_rlt(trl_c, trl_events, trl_windows, trl_steps); });

    Common smp_c;
    std::string smp_ckpt;
    int smp_condition = 0, smp_events = 64;
    double smp_p = 0.8, smp_rate = 250.0;
    CLI::App* smp = app.add_subcommand("sample", "generate events from a trained model");
    add_common(smp, smp_c);
    smp->add_option("--ckpt", smp_ckpt, "event-sequence model checkpoint")->required();
    smp->add_option("--condition", smp_condition, "conditioning class id");
    smp->add_option("--num-events", smp_events, "events to generate");
    smp->add_option("--p", smp_p, "nucleus mass");
    smp->add_option("--rate", smp_rate, "base grid rate for the output metadata");
    smp->callback([&] { run_sample(smp_c, smp_ckpt, smp_condition, smp_events, smp_p, smp_rate); });

    Common enc_c;
    std::string enc_input;
    int enc_k = 7, enc_max_run = 256;
    double enc_rate = 250.0;
    CLI::App* enc = app.add_subcommand("encode", "dense grid CSV -> VDRL events");
    add_common(enc, enc_c);
    enc->add_option("--input", enc_input, "dense grid CSV")->required();
    enc->add_option("--k", enc_k, "quantiser index bound");
    enc->add_option("--rate", enc_rate, "grid rate in Hz");
    enc->add_option("--max-run", enc_max_run, "run length cap");
    enc->callback([&] { run_encode(enc_c, enc_input, enc_k, enc_rate, enc_max_run); });

    Common dec_c;
    std::string dec_input;
    CLI::App* dec = app.add_subcommand("decode", "VDRL events -> dense grid CSV");
    add_common(dec, dec_c);
    dec->add_option("--input", dec_input, "VDRL event file")->required();
    dec->callback([&] { run_decode(dec_c, dec_input); });

    Common evl_c;
    std::string evl_events;
    double evl_bin = 0.05;
    CLI::App* evl = app.add_subcommand("eval", "metric report over an event corpus");
    add_common(evl, evl_c);
    evl->add_option("--events", evl_events, "directory from extract-events")->required();
    evl->add_option("--bin-s", evl_bin, "barcode bin width in seconds");
    evl->callback([&] { run_eval(evl_c, evl_events, evl_bin); });

    Common grd_c;
    CLI::App* grd = app.add_subcommand("grad-check", "finite-difference gradient audit");
    add_common(grd, grd_c);
    grd->callback([&] { exit_code = run_grad_check(grd_c); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << one_line(e.what()) << '\n';
        return 2;
    } catch (const VersionError& e) {
        std::cerr << "error: version: " << one_line(e.what()) << '\n';
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << one_line(e.what()) << '\n';
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: format: " << one_line(e.what()) << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << one_line(e.what()) << '\n';
        return 1;
    }
    return exit_code;
}
