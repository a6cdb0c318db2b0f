#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "vdrl/metrics.hpp"
#include "vdrl/rng.hpp"

using namespace vdrl;

namespace {

// midrank formula: rank_i = |{x_j < x_i}| + (|{x_j == x_i}| + 1) / 2
std::vector<double> ranks_by_counting(const std::vector<double>& x) {
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::size_t less = 0, equal = 0;
        for (double v : x) {
            if (v < x[i]) ++less;
            if (v == x[i]) ++equal;
        }
        r[i] = static_cast<double>(less) + 0.5 * (static_cast<double>(equal) + 1.0);
    }
    return r;
}

double pearson_by_hand(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

EventSequence grid_events(const std::vector<std::vector<int>>& columns, int k, int max_run) {
    DenseCodes codes(columns[0].size(), columns.size(), k, 250.0);
    for (std::size_t c = 0; c < columns.size(); ++c)
        for (std::size_t t = 0; t < columns[c].size(); ++t)
            codes.at(t, c) = columns[c][t];
    return interleaved_encode(codes, max_run);
}

}  // namespace

TEST_CASE("pearson correlation goldens and errors") {
    REQUIRE(pearson_correlation({1, 2, 3}, {2, 4, 6}) == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(pearson_correlation({1, 2, 3}, {6, 4, 2}) == Catch::Approx(-1.0).epsilon(1e-12));
    REQUIRE(pearson_correlation({1, 2, 3, 4}, {1, 3, 2, 4}) ==
            Catch::Approx(0.8).epsilon(1e-12));
    REQUIRE_THROWS_AS(pearson_correlation({1, 2}, {1, 2, 3}), std::invalid_argument);
    REQUIRE_THROWS_AS(pearson_correlation({1}, {2}), std::invalid_argument);
    REQUIRE_THROWS_AS(pearson_correlation({2, 2, 2}, {1, 2, 3}), std::invalid_argument);
    REQUIRE_THROWS_AS(pearson_correlation({1, 2, 3}, {5, 5, 5}), std::invalid_argument);
}

TEST_CASE("spearman uses average ranks for ties") {
    REQUIRE(average_ranks({1, 2, 2, 3}) == std::vector<double>{1.0, 2.5, 2.5, 4.0});
    REQUIRE(average_ranks({5, 5, 5, 1}) == std::vector<double>{3.0, 3.0, 3.0, 1.0});
    REQUIRE(spearman_correlation({1, 2, 2, 3}, {10, 20, 20, 30}) ==
            Catch::Approx(1.0).epsilon(1e-12));
    // monotone but nonlinear: spearman saturates where pearson does not
    std::vector<double> x{1, 2, 3, 4, 5};
    std::vector<double> y{1, 8, 27, 64, 125};
    REQUIRE(spearman_correlation(x, y) == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(pearson_correlation(x, y) < 1.0);
    REQUIRE_THROWS_AS(spearman_correlation({2, 2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("correlations agree with direct evaluation on random pairs") {
    Rng rng(404);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(39);
        std::vector<double> x(n), y(n);
        bool tie_heavy = rng.uniform() < 0.5;
        do {
            for (std::size_t i = 0; i < n; ++i) {
                x[i] = tie_heavy ? static_cast<double>(rng.uniform_int(5)) : rng.uniform();
                y[i] = tie_heavy ? static_cast<double>(rng.uniform_int(5)) : rng.uniform();
            }
        } while (std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; }) ||
                 std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; }));

        REQUIRE(std::abs(pearson_correlation(x, y) - pearson_by_hand(x, y)) < 1e-12);
        const double expect = pearson_by_hand(ranks_by_counting(x), ranks_by_counting(y));
        REQUIRE(std::abs(spearman_correlation(x, y) - expect) < 1e-12);
    }
}

TEST_CASE("jump histogram golden and totals") {
    EventSequence seq = grid_events({{0, 1, 3}}, 3, 256);
    std::map<int, std::size_t> bins = jump_histogram(seq);
    REQUIRE(bins == std::map<int, std::size_t>{{1, 1}, {2, 1}});
    REQUIRE(histogram_total(bins) == seq.events.size() - seq.num_channels);

    SECTION("dense-grid overload agrees and handles constants") {
        DenseCodes codes(3, 1, 3, 250.0);
        codes.at(0, 0) = 0;
        codes.at(1, 0) = 1;
        codes.at(2, 0) = 3;
        REQUIRE(jump_histogram(codes) == bins);
        DenseCodes flat(16, 2, 3, 250.0);
        for (std::size_t t = 0; t < 16; ++t)
            for (std::size_t c = 0; c < 2; ++c) flat.at(t, c) = 2;
        REQUIRE(jump_histogram(flat).empty());

        Rng rng(44);
        for (int trial = 0; trial < 50; ++trial) {
            const int k = 1 + static_cast<int>(rng.uniform_int(7));
            DenseCodes g(2 + rng.uniform_int(63), 1 + rng.uniform_int(4), k, 250.0);
            for (std::size_t t = 0; t < g.num_steps; ++t)
                for (std::size_t c = 0; c < g.num_channels; ++c)
                    g.at(t, c) = static_cast<int>(rng.uniform_int(2 * k + 1)) - k;
            std::map<int, std::size_t> h = jump_histogram(g);
            REQUIRE(h == jump_histogram(interleaved_encode(g, 256)));
            REQUIRE(histogram_total(h) ==
                    count_events(g, static_cast<int>(g.num_steps)) - g.num_channels);
        }
    }

    SECTION("uncropped streams satisfy total == events - channels") {
        Rng rng(8);
        for (int trial = 0; trial < 100; ++trial) {
            const int k = 1 + static_cast<int>(rng.uniform_int(7));
            const std::size_t C = 1 + rng.uniform_int(4);
            const std::size_t T = 2 + rng.uniform_int(63);
            std::vector<std::vector<int>> cols(C, std::vector<int>(T));
            for (auto& col : cols)
                for (int& v : col) v = static_cast<int>(rng.uniform_int(2 * k + 1)) - k;
            EventSequence s = grid_events(cols, k, 256);
            std::map<int, std::size_t> h = jump_histogram(s);
            REQUIRE(histogram_total(h) == s.events.size() - s.num_channels);
            for (const auto& [jump, count] : h) {
                REQUIRE(jump >= 1);
                REQUIRE(jump <= 2 * k);
            }
        }
    }

    SECTION("length-cap splits do not add zero jumps") {
        EventSequence s = grid_events({{2, 2, 3}}, 3, 1);
        REQUIRE(s.events.size() == 3);
        std::map<int, std::size_t> h = jump_histogram(s);
        REQUIRE(h == std::map<int, std::size_t>{{1, 1}});
    }
}

TEST_CASE("barcode bins events by start time") {
    EventSequence seq;
    seq.num_channels = 2;
    seq.k = 7;
    seq.max_run_length = 256;
    seq.base_rate_hz = 250.0;
    seq.events = {{2, 3}, {0, 2}, {1, 6}, {3, 2}, {4, 3}};  // offsets 0,0,2,3,5
    std::vector<std::size_t> bins = barcode(seq, 2.0 / 250.0);
    REQUIRE(bins == std::vector<std::size_t>{2, 2, 1});

    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t C = 1 + rng.uniform_int(3);
        const std::size_t T = 4 + rng.uniform_int(60);
        std::vector<std::vector<int>> cols(C, std::vector<int>(T));
        for (auto& col : cols)
            for (int& v : col) v = static_cast<int>(rng.uniform_int(5)) - 2;
        EventSequence s = grid_events(cols, 2, 256);
        std::vector<std::size_t> b = barcode(s, 0.001 + 0.05 * rng.uniform());
        std::size_t total = 0;
        for (std::size_t n : b) total += n;
        REQUIRE(total == s.events.size());
    }

    REQUIRE_THROWS_AS(barcode(seq, 0.0), std::invalid_argument);
}

TEST_CASE("bit-rate arithmetic") {
    REQUIRE(pcm_bits_per_second(24000, 16) == 384000.0);
    REQUIRE(pcm_bits_per_second(24000, 8) == 192000.0);
    const double raw = raw_bits_per_second(75.0, 7, 256);
    REQUIRE(raw == 75.0 * (std::log2(15.0) + 8.0));
    REQUIRE(std::abs(raw - 893.0) / 893.0 < 0.01);
    REQUIRE(nll_bits_per_second(std::log(2.0), 10.0) == Catch::Approx(10.0).epsilon(1e-12));
    REQUIRE_THROWS_AS(pcm_bits_per_second(0, 16), std::invalid_argument);
    REQUIRE_THROWS_AS(raw_bits_per_second(-1, 7, 256), std::invalid_argument);
}

TEST_CASE("sign agreement summarises move directions") {
    SignAgreement a = sign_agreement({1, 2, 3, 2, 1});
    REQUIRE(a.moves == 4);
    REQUIRE(a.pairs == 3);
    REQUIRE(a.agreements == 2);
    REQUIRE(a.fraction() == Catch::Approx(2.0 / 3.0));

    SignAgreement holds = sign_agreement({1, 1, 2, 2, 3});
    REQUIRE(holds.moves == 2);
    REQUIRE(holds.pairs == 1);
    REQUIRE(holds.fraction() == 1.0);

    REQUIRE(sign_agreement({}).fraction() == 1.0);
    REQUIRE(sign_agreement({5}).fraction() == 1.0);
    REQUIRE(sign_agreement({0, 1, 0, 1}).fraction() == 0.0);
    REQUIRE(sign_agreement({1, 2, 3, 4}).fraction() == 1.0);
}
