#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include <vdrl/autodiff.hpp>
#include <vdrl/rng.hpp>

using namespace vdrl;

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0,
                     double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

double eval_loss(const std::vector<Tensor>& leaves, const GraphFn& fn) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(leaves.size());
    for (const Tensor& leaf : leaves) vars.push_back(tape.input(leaf, false));
    return tape.scalar(fn(tape, vars));
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences for every coordinate of every leaf.
void check_gradients(std::vector<Tensor> leaves, const GraphFn& fn, double tol = 3e-6,
                     double h = 1e-5) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& leaf : leaves) vars.push_back(tape.input(leaf, true));
    Var loss = fn(tape, vars);
    tape.backward(loss);

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const Tensor& g = tape.grad(vars[li]);
        for (std::size_t i = 0; i < leaves[li].size(); ++i) {
            double orig = leaves[li].data[i];
            leaves[li].data[i] = orig + h;
            double up = eval_loss(leaves, fn);
            leaves[li].data[i] = orig - h;
            double down = eval_loss(leaves, fn);
            leaves[li].data[i] = orig;
            double fd = (up - down) / (2 * h);
            double analytic = g.data.empty() ? 0.0 : g.data[i];
            double denom = std::max({1.0, std::abs(fd), std::abs(analytic)});
            INFO("leaf " << li << " coord " << i << " analytic " << analytic << " fd " << fd);
            REQUIRE(std::abs(analytic - fd) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("linear layer gradients", "[autodiff]") {
    Rng rng(101);
    Tensor proj = random_tensor(rng, {5, 4});
    check_gradients(
        {random_tensor(rng, {5, 3}), random_tensor(rng, {3, 4}), random_tensor(rng, {4})},
        [proj](Tape& t, const std::vector<Var>& v) {
            return t.weighted_sum(t.linear(v[0], v[1], v[2]), proj);
        });
}

TEST_CASE("conv1d gradients across stride and dilation", "[autodiff]") {
    Rng rng(102);
    struct Case {
        std::size_t T;
        int F, stride, dilation;
    };
    for (const Case& c : {Case{8, 3, 1, 1}, Case{8, 2, 2, 1}, Case{12, 2, 1, 4}, Case{12, 4, 3, 2},
                          Case{6, 1, 1, 1}}) {
        Tensor proj = random_tensor(rng, {c.T / static_cast<std::size_t>(c.stride), 3});
        check_gradients(
            {random_tensor(rng, {c.T, 2}),
             random_tensor(rng, {static_cast<std::size_t>(c.F), 2, 3}), random_tensor(rng, {3})},
            [proj, c](Tape& t, const std::vector<Var>& v) {
                return t.weighted_sum(t.conv1d(v[0], v[1], v[2], c.stride, c.dilation), proj);
            });
    }
}

TEST_CASE("conv1d is causal", "[autodiff]") {
    Rng rng(103);
    Tensor x = random_tensor(rng, {16, 2});
    Tensor w = random_tensor(rng, {3, 2, 2});
    Tensor b = random_tensor(rng, {2});

    Tape t0;
    Tensor base = t0.value(t0.conv1d(t0.input(x), t0.input(w), t0.input(b), 1, 2));

    // Perturb the input at step 9: outputs before step 9 must not move.
    Tensor xp = x;
    xp.at(9, 0) += 1.0;
    Tape t1;
    Tensor pert = t1.value(t1.conv1d(t1.input(xp), t1.input(w), t1.input(b), 1, 2));
    for (std::size_t j = 0; j < 9; ++j)
        for (std::size_t c = 0; c < 2; ++c) REQUIRE(pert.at(j, c) == base.at(j, c));
    REQUIRE(pert.at(9, 0) != base.at(9, 0));
}

TEST_CASE("embedding gradients scatter into the table", "[autodiff]") {
    Rng rng(104);
    std::vector<int> ids = {0, 3, 3, 6, 1};
    Tensor proj = random_tensor(rng, {5, 4});
    check_gradients({random_tensor(rng, {7, 4})},
                    [proj, ids](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.embedding(ids, v[0]), proj);
                    });

    Tape t;
    REQUIRE_THROWS_AS(t.embedding({7}, t.input(Tensor({7, 4}))), std::invalid_argument);
    REQUIRE_THROWS_AS(t.embedding({-1}, t.input(Tensor({7, 4}))), std::invalid_argument);
}

TEST_CASE("elementwise op gradients", "[autodiff]") {
    Rng rng(105);
    Tensor proj = random_tensor(rng, {4, 6});
    // Keep relu inputs away from the kink at zero.
    Tensor a = random_tensor(rng, {4, 6});
    for (double& v : a.data)
        if (std::abs(v) < 0.05) v = 0.1;

    check_gradients({a, random_tensor(rng, {4, 6})},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.mul(t.relu(v[0]), v[1]), proj);
                    });

    check_gradients({random_tensor(rng, {4, 6}), random_tensor(rng, {4, 6}),
                     random_tensor(rng, {4, 6})},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.add_many({v[0], v[1], v[2]}), proj);
                    });

    check_gradients({random_tensor(rng, {4, 6}), random_tensor(rng, {6})},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.add_row_vector(v[0], v[1]), proj);
                    });

    check_gradients({random_tensor(rng, {4, 6}), random_tensor(rng, {4, 6})},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.add_scaled(v[0], v[1], -2.5), proj);
                    });

    check_gradients({random_tensor(rng, {4, 6})},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.scale(v[0], 1.75), proj);
                    });
}

TEST_CASE("gated unit gradients", "[autodiff]") {
    Rng rng(106);
    Tensor proj = random_tensor(rng, {5, 3});
    check_gradients({random_tensor(rng, {5, 6}, -2, 2)},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.gated_unit(v[0]), proj);
                    });
}

TEST_CASE("shape op gradients", "[autodiff]") {
    Rng rng(107);
    {
        Tensor proj = random_tensor(rng, {12, 3});
        check_gradients({random_tensor(rng, {4, 3})},
                        [proj](Tape& t, const std::vector<Var>& v) {
                            return t.weighted_sum(t.upsample_nearest(v[0], 3), proj);
                        });
    }
    {
        Tensor proj = random_tensor(rng, {6, 2});
        check_gradients({random_tensor(rng, {6, 2})},
                        [proj](Tape& t, const std::vector<Var>& v) {
                            return t.weighted_sum(t.flip_time(v[0]), proj);
                        });
    }
    {
        Tensor proj = random_tensor(rng, {5, 7});
        check_gradients({random_tensor(rng, {5, 3}), random_tensor(rng, {5, 4})},
                        [proj](Tape& t, const std::vector<Var>& v) {
                            return t.weighted_sum(t.concat_cols(v[0], v[1]), proj);
                        });
    }
    {
        Tensor proj = random_tensor(rng, {7, 3});
        check_gradients({random_tensor(rng, {2, 3}), random_tensor(rng, {5, 3})},
                        [proj](Tape& t, const std::vector<Var>& v) {
                            return t.weighted_sum(t.concat_rows(v[0], v[1]), proj);
                        });
    }
}

TEST_CASE("layer norm gradients", "[autodiff]") {
    Rng rng(108);
    Tensor proj = random_tensor(rng, {6, 5});
    check_gradients({random_tensor(rng, {6, 5}, -2, 2), random_tensor(rng, {5}, 0.5, 1.5),
                     random_tensor(rng, {5})},
                    [proj](Tape& t, const std::vector<Var>& v) {
                        return t.weighted_sum(t.layer_norm(v[0], v[1], v[2]), proj);
                    });
}

TEST_CASE("attention gradients", "[autodiff]") {
    Rng rng(109);
    Tensor proj = random_tensor(rng, {6, 8});
    check_gradients(
        {random_tensor(rng, {6, 8}), random_tensor(rng, {6, 8}), random_tensor(rng, {6, 8}),
         random_tensor(rng, {2, 4})},
        [proj](Tape& t, const std::vector<Var>& v) {
            return t.weighted_sum(t.causal_attention(v[0], v[1], v[2], v[3], 2), proj);
        },
        5e-6);
}

TEST_CASE("attention is causal", "[autodiff]") {
    Rng rng(110);
    Tensor q = random_tensor(rng, {8, 4}), k = random_tensor(rng, {8, 4}),
           v = random_tensor(rng, {8, 4}), rb = random_tensor(rng, {2, 3});

    auto run = [&](const Tensor& qq, const Tensor& kk, const Tensor& vv) {
        Tape t;
        return t.value(
            t.causal_attention(t.input(qq), t.input(kk), t.input(vv), t.input(rb), 2));
    };
    Tensor base = run(q, k, v);
    Tensor k2 = k, v2 = v;
    k2.at(5, 1) += 1.0;
    v2.at(5, 2) -= 0.7;
    Tensor pert = run(q, k2, v2);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t d = 0; d < 4; ++d) REQUIRE(pert.at(i, d) == base.at(i, d));
    bool later_changed = false;
    for (std::size_t d = 0; d < 4; ++d)
        if (pert.at(5, d) != base.at(5, d)) later_changed = true;
    REQUIRE(later_changed);
}

TEST_CASE("cross-entropy matches a uniform-logit oracle and its gradients", "[autodiff]") {
    Rng rng(111);
    {
        Tape t;
        Var logits = t.input(Tensor({4, 7}, 0.3));
        Var loss = t.softmax_ce_mean(logits, {0, 3, 6, 2});
        REQUIRE(t.scalar(loss) == Catch::Approx(std::log(7.0)).epsilon(1e-12));
    }
    std::vector<int> targets = {1, 0, 4, 2, 4};
    check_gradients({random_tensor(rng, {5, 5}, -2, 2)},
                    [targets](Tape& t, const std::vector<Var>& v) {
                        return t.softmax_ce_mean(v[0], targets);
                    });
    std::vector<double> mask = {1, 1, 0, 1, 0};
    check_gradients({random_tensor(rng, {5, 5}, -2, 2)},
                    [targets, mask](Tape& t, const std::vector<Var>& v) {
                        return t.softmax_ce_mean(v[0], targets, mask);
                    });
}

TEST_CASE("masked rows receive no gradient", "[autodiff]") {
    Rng rng(112);
    Tape t;
    Var logits = t.input(random_tensor(rng, {4, 3}), true);
    Var loss = t.softmax_ce_mean(logits, {0, 1, 2, 0}, {1, 0, 1, 0});
    t.backward(loss);
    const Tensor& g = t.grad(logits);
    for (std::size_t j = 0; j < 3; ++j) {
        REQUIRE(g.at(1, j) == 0.0);
        REQUIRE(g.at(3, j) == 0.0);
        REQUIRE(g.at(0, j) != 0.0);
    }
}

TEST_CASE("margin and slowness tape ops match their analytic modules", "[autodiff]") {
    Rng rng(113);
    check_gradients({random_tensor(rng, {6, 3}, -2, 2)},
                    [](Tape& t, const std::vector<Var>& v) { return t.margin_op(v[0]); });
    for (auto kind : {SlownessKind::kL2, SlownessKind::kL1, SlownessKind::kGroupSparse}) {
        check_gradients({random_tensor(rng, {7, 2}, -1.5, 1.5)},
                        [kind](Tape& t, const std::vector<Var>& v) {
                            return t.slowness_op(v[0], kind);
                        });
    }
}

TEST_CASE("straight-through quantiser passes gradients unchanged", "[autodiff]") {
    Rng rng(114);
    QuantiserConfig cfg;
    cfg.k = 4;
    Tensor z = random_tensor(rng, {10, 2}, -1.6, 1.6);
    Tensor proj = random_tensor(rng, {10, 2});

    Tape t;
    Var zv = t.input(z, true);
    DenseCodes codes;
    Var q = t.straight_through_stq(zv, cfg, 250.0, &codes);
    Var loss = t.weighted_sum(q, proj);
    t.backward(loss);

    // Forward value is the quantised trajectory.
    DenseCodes expect = stq(z, cfg, 250.0);
    REQUIRE(codes.levels == expect.levels);
    const Tensor& qval = t.value(q);
    for (std::size_t i = 0; i < qval.size(); ++i)
        REQUIRE(qval.data[i] == Catch::Approx(expect.levels[i] / 4.0).margin(1e-15));

    // Backward hands the projection weights straight to z, bit for bit.
    const Tensor& g = t.grad(zv);
    for (std::size_t i = 0; i < g.size(); ++i) REQUIRE(g.data[i] == proj.data[i]);
}

TEST_CASE("composite network end-to-end finite differences", "[autodiff]") {
    Rng rng(115);
    // conv -> relu -> strided conv -> gated -> linear -> CE, plus margin and
    // slowness terms: the same op mix the models use, checked jointly.
    std::vector<int> targets = {0, 2, 1, 3};
    std::vector<Tensor> leaves = {
        random_tensor(rng, {8, 2}),          // input
        random_tensor(rng, {3, 2, 6}, -0.5, 0.5),  // conv w
        random_tensor(rng, {6}),             // conv b
        random_tensor(rng, {2, 6, 8}, -0.5, 0.5),  // strided conv w (stride 2)
        random_tensor(rng, {8}),             // strided conv b
        random_tensor(rng, {4, 4}, -0.7, 0.7),     // head w
        random_tensor(rng, {4}),             // head b
    };
    check_gradients(leaves, [targets](Tape& t, const std::vector<Var>& v) {
        Var h = t.relu(t.conv1d(v[0], v[1], v[2], 1, 1));
        Var g = t.gated_unit(t.conv1d(h, v[3], v[4], 2, 1));
        Var logits = t.linear(g, v[5], v[6]);
        Var nll = t.softmax_ce_mean(logits, targets);
        Var with_margin = t.add_scaled(nll, t.margin_op(g), 0.3);
        return t.add_scaled(with_margin, t.slowness_op(g, SlownessKind::kL2), 0.7);
    });
}

TEST_CASE("backward requires a scalar root and dead branches stay empty", "[autodiff]") {
    Tape t;
    Var a = t.input(Tensor({3, 2}, 1.0), true);
    Var b = t.input(Tensor({3, 2}, 2.0), true);
    Var used = t.scale(a, 2.0);
    REQUIRE_THROWS_AS(t.backward(used), std::logic_error);

    Var loss = t.weighted_sum(used, Tensor({3, 2}, 1.0));
    t.backward(loss);
    REQUIRE(t.grad(a).size() == 6);
    REQUIRE(t.grad(b).data.empty());  // b never fed the loss
}
