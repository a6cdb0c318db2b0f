#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include <vdrl/synthetic.hpp>

using namespace vdrl;

TEST_CASE("generation is deterministic in the seed", "[synthetic]") {
    SyntheticSignal a = generate_synthetic(42, 1.0, 1);
    SyntheticSignal b = generate_synthetic(42, 1.0, 1);
    REQUIRE(a.samples == b.samples);
    REQUIRE(a.change_points == b.change_points);

    SyntheticSignal c = generate_synthetic(43, 1.0, 1);
    REQUIRE(a.samples != c.samples);
}

TEST_CASE("clip length and amplitude bounds", "[synthetic]") {
    SyntheticSignal sig = generate_synthetic(7, 1.5, 2);
    REQUIRE(sig.samples.size() == 3000);
    REQUIRE(sig.sample_rate_hz == 2000.0);
    for (double v : sig.samples) {
        REQUIRE(v <= 1.0);
        REQUIRE(v >= -1.0);
    }
}

TEST_CASE("change points start at zero and strictly increase", "[synthetic]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (int cls = 0; cls < 4; ++cls) {
            SyntheticSignal sig = generate_synthetic(seed, 1.0, cls);
            REQUIRE_FALSE(sig.change_points.empty());
            REQUIRE(sig.change_points.front() == 0);
            for (std::size_t i = 1; i < sig.change_points.size(); ++i)
                REQUIRE(sig.change_points[i] > sig.change_points[i - 1]);
            REQUIRE(sig.change_points.back() <
                    static_cast<std::int64_t>(sig.samples.size()));
        }
    }
}

TEST_CASE("all-silence class yields exact zeros and one change point", "[synthetic]") {
    SyntheticConfig cfg;
    cfg.classes = {{0.1, 1.0, 100.0, 200.0}};
    SyntheticSignal sig = generate_synthetic(5, 1.0, 0, cfg);
    REQUIRE(sig.change_points == std::vector<std::int64_t>{0});
    for (double v : sig.samples) REQUIRE(v == 0.0);
}

TEST_CASE("never-silent class has no zero runs and dense change points", "[synthetic]") {
    SyntheticConfig cfg;
    cfg.classes = {{0.1, 0.0, 100.0, 200.0}};
    SyntheticSignal sig = generate_synthetic(11, 2.0, 0, cfg);
    // Every regime boundary is a change point; mean regime 0.1 s over 2 s.
    REQUIRE(sig.change_points.size() >= 12);
    double energy = 0;
    for (double v : sig.samples) energy += v * v;
    REQUIRE(energy / static_cast<double>(sig.samples.size()) > 0.01);
}

TEST_CASE("monte carlo regime count matches the configured mean within 5 percent",
          "[synthetic]") {
    SyntheticConfig cfg;
    cfg.classes = {{0.1, 0.0, 100.0, 200.0}};
    const double duration = 2.0;  // 20 mean regime lengths
    const int clips = 600;
    double total = 0;
    for (int i = 0; i < clips; ++i)
        total += static_cast<double>(
            generate_synthetic(1000 + static_cast<std::uint64_t>(i), duration, 0, cfg)
                .change_points.size());
    double mean_count = total / clips;
    double configured = duration / cfg.classes[0].mean_regime_s;
    REQUIRE(std::abs(mean_count / configured - 1.0) < 0.05);
}

TEST_CASE("classes are ordered by structural density", "[synthetic]") {
    // Defaults: class 3 changes much faster than class 0. Average densities
    // over several clips to keep the comparison stable.
    auto mean_density = [](int cls) {
        double acc = 0;
        for (std::uint64_t seed = 0; seed < 40; ++seed)
            acc += change_point_density(generate_synthetic(seed, 2.0, cls));
        return acc / 40.0;
    };
    double d0 = mean_density(0);
    double d1 = mean_density(1);
    double d2 = mean_density(2);
    double d3 = mean_density(3);
    REQUIRE(d0 < d1);
    REQUIRE(d1 < d2);
    REQUIRE(d2 < d3);
}

TEST_CASE("silent regimes are exactly zero between change points", "[synthetic]") {
    SyntheticConfig cfg;
    cfg.classes = {{0.08, 0.5, 100.0, 300.0}};
    SyntheticSignal sig = generate_synthetic(3, 2.0, 0, cfg);
    // Identify samples that are exactly zero; they should appear in long runs
    // (silences), not as isolated points of active regimes.
    std::size_t zeros = 0;
    for (double v : sig.samples)
        if (v == 0.0) ++zeros;
    REQUIRE(zeros > 100);  // with silence_prob 0.5 a fair share is silent
}

TEST_CASE("argument validation", "[synthetic]") {
    REQUIRE_THROWS_AS(generate_synthetic(1, -1.0, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_synthetic(1, 1.0, 9), std::invalid_argument);

    SyntheticConfig bad;
    bad.classes = {{0.1, 0.0, 100.0, 1500.0}};  // beyond Nyquist at 2 kHz
    REQUIRE_THROWS_AS(generate_synthetic(1, 1.0, 0, bad), std::invalid_argument);
}
