#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "vdrl/slow_autoencoder.hpp"

using namespace vdrl;

namespace {

SlowAutoencoderConfig tiny_config() {
    SlowAutoencoderConfig cfg;
    cfg.window = 64;
    cfg.downsample = 8;
    cfg.channels = 3;
    cfg.k = 7;
    cfg.enc_width = 8;
    cfg.enc_blocks = 1;
    cfg.cond_width = 6;
    cfg.cond_blocks = 1;
    cfg.dec_width = 8;
    cfg.dec_blocks = 3;
    cfg.skip_width = 8;
    cfg.head_width = 12;
    cfg.batch = 2;
    cfg.steps = 40;
    cfg.log_every = 5;
    cfg.target_rate_hz = 120.0;
    return cfg;
}

WindowExample random_window(int length, Rng& rng, int class_id = 0) {
    WindowExample ex;
    ex.samples = Tensor({static_cast<std::size_t>(length)});
    for (double& v : ex.samples.data) v = rng.uniform(-0.9, 0.9);
    ex.class_id = class_id;
    return ex;
}

SignalDataset tiny_dataset(std::uint64_t seed) {
    SyntheticConfig sc;
    return SignalDataset::synthesize(sc, 2, 0.5, seed);
}

}  // namespace

TEST_CASE("untrained reconstruction NLL sits near the uniform rate") {
    Rng rng(11);
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoder model(cfg, rng);
    std::vector<WindowExample> batch{random_window(cfg.window, rng, 0),
                                     random_window(cfg.window, rng, 1)};
    EvalForward fw = forward(model, batch);
    CHECK(std::abs(fw.nll - std::log(256.0)) < 0.5);
}

TEST_CASE("objective equals the NLL term when both penalty weights vanish") {
    Rng rng(12);
    SlowAutoencoderConfig cfg = tiny_config();
    cfg.margin_weight = 0.0;
    SlowAutoencoder model(cfg, rng);
    std::vector<WindowExample> batch{random_window(cfg.window, rng)};
    EvalForward fw = forward(model, batch, 0.0, 0.0);
    CHECK(fw.total == fw.nll);
    CHECK(fw.margin >= 0.0);
    CHECK(fw.slow >= 0.0);
}

TEST_CASE("loss decomposition is exact at every logged step") {
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoderTrainer trainer(cfg, 77);
    SignalDataset data = tiny_dataset(5);
    for (int i = 0; i < 12; ++i) trainer.train_step(data);
    REQUIRE(trainer.log().size() == 12);
    for (const TrainLogRow& r : trainer.log()) {
        double expected = (r.nll + cfg.margin_weight * r.margin) + r.lambda * r.slow;
        CHECK(r.total == expected);
        CHECK(std::isfinite(r.aer));
        CHECK(r.aer > 0);
    }
}

TEST_CASE("training gradients stay finite over random batches") {
    Rng rng(21);
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoder model(cfg, rng);
    SignalDataset data = tiny_dataset(6);
    Rng sampler(3);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<WindowExample> batch{data.sample_window(cfg.window, sampler),
                                         data.sample_window(cfg.window, sampler)};
        Tape tape;
        BoundModel bm = bind_model(tape, model, true);
        ForwardOptions opts;
        opts.lambda = 0.5;
        opts.noise_sigma = 0.01;
        opts.rng = &sampler;
        BatchForward fw = build_batch_forward(tape, model, bm, batch, opts);
        tape.backward(fw.total);
        for (Var v : bm.vars) {
            const Tensor& g = tape.grad(v);
            for (double x : g.data) REQUIRE(std::isfinite(x));
        }
    }
}

TEST_CASE("decoder predictions never look at the present or future input") {
    Rng rng(31);
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoder model(cfg, rng);

    std::vector<int> ids(cfg.window);
    for (int& id : ids) id = static_cast<int>(rng.uniform_int(256));
    Tensor cond_value({static_cast<std::size_t>(cfg.window),
                       static_cast<std::size_t>(cfg.cond_width)});
    for (double& v : cond_value.data) v = rng.uniform(-1.0, 1.0);

    auto logits_for = [&](const std::vector<int>& in) {
        Tape tape;
        BoundModel bm = bind_model(tape, model, false);
        Var cond = tape.input(cond_value, false);
        Var logits = sae::decode(tape, model, bm, in, cond);
        return tape.value(logits);
    };

    Tensor base = logits_for(ids);
    for (int t : {5, 23, 48, cfg.window - 1}) {
        std::vector<int> perturbed = ids;
        perturbed[static_cast<std::size_t>(t)] = (ids[static_cast<std::size_t>(t)] + 97) % 256;
        Tensor moved = logits_for(perturbed);
        for (int row = 0; row < t; ++row)
            for (std::size_t col = 0; col < base.dim(1); ++col)
                REQUIRE(moved.at(row, col) == base.at(row, col));
        // the change must actually reach later rows
        bool differs = false;
        for (int row = t; row < cfg.window && !differs; ++row)
            for (std::size_t col = 0; col < base.dim(1); ++col)
                if (moved.at(row, col) != base.at(row, col)) {
                    differs = true;
                    break;
                }
        CHECK(differs);
    }
}

TEST_CASE("encoder is anti-causal: the past cannot reach later code rows") {
    Rng rng(41);
    SlowAutoencoderConfig cfg = tiny_config();
    cfg.window = 128;
    SlowAutoencoder model(cfg, rng);
    WindowExample ex = random_window(cfg.window, rng);

    Tensor z_base = encode_to_events(model, ex.samples).z;
    for (int t : {3, 7, 40, 77, 126}) {
        WindowExample moved = ex;
        double& s = moved.samples.data[static_cast<std::size_t>(t)];
        s = s > 0 ? s - 0.5 : s + 0.5;
        Tensor z_moved = encode_to_events(model, moved.samples).z;
        const int code_index = t / cfg.downsample;
        for (std::size_t p = static_cast<std::size_t>(code_index) + 1; p < z_base.dim(0); ++p)
            for (std::size_t c = 0; c < z_base.dim(1); ++c)
                REQUIRE(z_moved.at(p, c) == z_base.at(p, c));
        // Codes are anchored at the end of their frame, so samples in the
        // stride remainder of frame zero reach no code row at all; from
        // t = downsample - 1 onwards the perturbation must land somewhere.
        if (t < cfg.downsample - 1) continue;
        bool differs = false;
        for (std::size_t p = 0; p <= static_cast<std::size_t>(code_index) && !differs; ++p)
            for (std::size_t c = 0; c < z_base.dim(1); ++c)
                if (z_moved.at(p, c) != z_base.at(p, c)) {
                    differs = true;
                    break;
                }
        CHECK(differs);
    }
}

TEST_CASE("zero Polyak decay keeps the shadow equal to the live weights") {
    SlowAutoencoderConfig cfg = tiny_config();
    cfg.polyak_decay = 0.0;
    SlowAutoencoderTrainer trainer(cfg, 9);
    SignalDataset data = tiny_dataset(7);
    for (int i = 0; i < 3; ++i) trainer.train_step(data);
    SlowAutoencoder averaged = trainer.averaged_model();
    std::vector<ParamRef> live = trainer.model().params();
    std::vector<ParamRef> shadow = averaged.params();
    REQUIRE(live.size() == shadow.size());
    for (std::size_t i = 0; i < live.size(); ++i)
        CHECK(live[i].tensor->data == shadow[i].tensor->data);
}

TEST_CASE("silence produces exactly one initial event per channel") {
    Rng rng(51);
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoder model(cfg, rng);
    Tensor silence({128});
    EncodeResult r = encode_to_events(model, silence);
    CHECK(r.events.events.size() == static_cast<std::size_t>(cfg.channels));
    double seconds = 128.0 / cfg.sample_rate_hz;
    CHECK(estimate_aer(r.codes, cfg.max_run_length) ==
          Catch::Approx(cfg.channels / seconds));
}

TEST_CASE("event stream decodes back to the quantised grid bit-exactly") {
    Rng rng(61);
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoder model(cfg, rng);
    WindowExample ex = random_window(cfg.window, rng);
    EncodeResult r = encode_to_events(model, ex.samples);
    DenseCodes decoded = interleaved_decode(r.events, r.codes.num_steps);
    CHECK(decoded.levels == r.codes.levels);
    CHECK(decoded.k == r.codes.k);
    CHECK(decoded.num_channels == r.codes.num_channels);
}

TEST_CASE("encode rejects lengths that do not fill whole code steps") {
    Rng rng(62);
    SlowAutoencoder model(tiny_config(), rng);
    Tensor bad({13});
    CHECK_THROWS_AS(encode_to_events(model, bad), std::invalid_argument);
}

TEST_CASE("reconstruction validates the event stream against the model") {
    Rng rng(71);
    SlowAutoencoderConfig cfg = tiny_config();
    cfg.window = 32;
    SlowAutoencoder model(cfg, rng);
    WindowExample ex = random_window(cfg.window, rng);
    EncodeResult r = encode_to_events(model, ex.samples);

    EventSequence wrong_k = r.events;
    wrong_k.k = cfg.k - 1;
    CHECK_THROWS_AS(reconstruct(model, wrong_k, 0), std::invalid_argument);

    EventSequence wrong_rate = r.events;
    wrong_rate.base_rate_hz = r.events.base_rate_hz * 2;
    CHECK_THROWS_AS(reconstruct(model, wrong_rate, 0), std::invalid_argument);

    Tensor a = reconstruct(model, r.events, 1);
    Tensor b = reconstruct(model, r.events, 1);
    REQUIRE(a.size() == static_cast<std::size_t>(cfg.window));
    CHECK(a.data == b.data);
    for (double v : a.data) CHECK(std::abs(v) <= 1.0);

    Tensor sampled = reconstruct(model, r.events, 1, 123, false);
    REQUIRE(sampled.size() == a.size());
}

TEST_CASE("training logs CSV rows and resumes bit-exactly from a checkpoint") {
    namespace fs = std::filesystem;
    SlowAutoencoderConfig cfg = tiny_config();
    cfg.steps = 10;
    SignalDataset data = tiny_dataset(9);
    fs::path path = fs::temp_directory_path() / "vdrl_test_slowae_resume.ckpt";

    std::ostringstream csv;
    SlowAutoencoderTrainer a(cfg, 1234);
    a.run(data, 6, &csv);
    a.save(path);
    a.run(data, 4, &csv);

    std::string text = csv.str();
    CHECK(text.rfind("step,total,nll,margin,slow,lambda,aer\n", 0) == 0);
    CHECK(text.find("\n5,") != std::string::npos);
    CHECK(text.find("\n10,") != std::string::npos);

    SlowAutoencoderTrainer b = SlowAutoencoderTrainer::restore(path);
    REQUIRE(b.step() == 6);
    b.run(data, 4);

    std::vector<ParamRef> pa = a.model().params();
    std::vector<ParamRef> pb = b.model().params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].tensor->data == pb[i].tensor->data);
    CHECK(a.controller().lambda == b.controller().lambda);
    CHECK(a.step() == b.step());

    SlowAutoencoder avg_a = a.averaged_model();
    SlowAutoencoder avg_b = b.averaged_model();
    std::vector<ParamRef> sa = avg_a.params();
    std::vector<ParamRef> sb = avg_b.params();
    for (std::size_t i = 0; i < sa.size(); ++i) CHECK(sa[i].tensor->data == sb[i].tensor->data);
    fs::remove(path);
}

TEST_CASE("restore rejects checkpoints of a different kind") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "vdrl_test_slowae_kind.ckpt";
    Checkpoint ck;
    ck.kind = kCheckpointKindRlt;
    save_checkpoint(path, ck);
    CHECK_THROWS_AS(SlowAutoencoderTrainer::restore(path), FormatError);
    fs::remove(path);
}

TEST_CASE("a non-finite loss aborts training with a diagnostic") {
    SlowAutoencoderConfig cfg = tiny_config();
    SlowAutoencoderTrainer trainer(cfg, 3);
    SignalDataset data = tiny_dataset(11);
    trainer.model().params()[0].tensor->data[0] = std::nan("");
    CHECK_THROWS_WITH(trainer.train_step(data), Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("finite differences confirm the gradients of the full objective") {
    Rng rng(91);
    SlowAutoencoderConfig cfg = tiny_config();
    cfg.window = 32;
    cfg.enc_width = 6;
    cfg.enc_blocks = 1;
    cfg.cond_width = 4;
    cfg.cond_blocks = 1;
    cfg.dec_width = 6;
    cfg.dec_blocks = 2;
    cfg.skip_width = 6;
    cfg.head_width = 7;
    SlowAutoencoder model(cfg, rng);
    WindowExample ex = random_window(cfg.window, rng, 1);

    GradientCheckReport report = gradient_check(model, ex);
    INFO("decoder " << report.max_rel_decoder << " penalty " << report.max_rel_penalty << " full "
                    << report.max_rel_full << " boundary " << report.boundary_coords);
    CHECK(report.param_count <= 5000);
    CHECK(report.smooth_coords + report.boundary_coords == report.param_count);
    CHECK(report.max_rel_decoder < 1e-6);
    CHECK(report.max_rel_penalty < 1e-5);
    CHECK(report.max_rel_full < 1e-4);
    CHECK(report.pass());
}
