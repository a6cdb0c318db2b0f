#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "quantiser.hpp"
#include "slowness.hpp"
#include "tensor.hpp"

namespace vdrl {

/// Handle into a Tape's node list.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode autodiff tape. Build a graph with the op methods, then call
/// backward() on a scalar output; gradients of every requires-grad leaf are
/// available via grad(). One tape per forward pass; tapes are not reusable
/// after backward().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf node. Parameters pass requires_grad = true; data constants false.
    Var input(Tensor value, bool requires_grad = false) {
        Var v{nodes_.size()};
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return v;
    }

    const Tensor& value(Var v) const { return nodes_[check(v)].value; }

    /// Gradient of the backward() root with respect to node v. Empty tensor
    /// if the node never received a contribution (dead branch).
    const Tensor& grad(Var v) const { return nodes_[check(v)].grad; }

    std::size_t num_nodes() const { return nodes_.size(); }

    double scalar(Var v) const {
        const Tensor& t = value(v);
        if (t.size() != 1) throw std::logic_error("scalar: node is not a scalar");
        return t.data[0];
    }

    void backward(Var root) {
        Node& r = nodes_[check(root)];
        if (r.value.size() != 1) throw std::logic_error("backward: root must be a scalar");
        if (!r.requires_grad) throw std::logic_error("backward: root does not require grad");
        accumulate(root.id, Tensor({1}, 1.0));
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.requires_grad && !n.grad.data.empty()) n.backward();
        }
    }

    // ---- elementwise and shape ops ----

    Var add(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        check_same_shape(ta, tb, "add");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += tb.data[i];
        Var v = push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            if (needs_grad(a)) accumulate(a.id, g);
            if (needs_grad(b)) accumulate(b.id, g);
        });
        return v;
    }

    /// Sum of any number of same-shape tensors in one node.
    Var add_many(const std::vector<Var>& terms) {
        if (terms.empty()) throw std::invalid_argument("add_many: no terms");
        Tensor out = value(terms[0]);
        bool any_grad = needs_grad(terms[0]);
        for (std::size_t k = 1; k < terms.size(); ++k) {
            const Tensor& t = value(terms[k]);
            check_same_shape(out, t, "add_many");
            for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += t.data[i];
            any_grad = any_grad || needs_grad(terms[k]);
        }
        std::vector<Var> parents = terms;
        return push(std::move(out), any_grad, [this, parents](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            for (Var p : parents)
                if (needs_grad(p)) accumulate(p.id, g);
        });
    }

    /// [T, D] plus a [D] row vector broadcast over rows.
    Var add_row_vector(Var x, Var row) {
        const Tensor& tx = value(x);
        const Tensor& tr = value(row);
        if (tx.rank() != 2 || tr.rank() != 1 || tx.dim(1) != tr.dim(0))
            throw std::invalid_argument("add_row_vector: shape mismatch");
        Tensor out = tx;
        const std::size_t T = tx.dim(0), D = tx.dim(1);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t d = 0; d < D; ++d) out.data[t * D + d] += tr.data[d];
        return push(std::move(out), needs_grad(x) || needs_grad(row), [this, x, row, T, D](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            if (needs_grad(x)) accumulate(x.id, g);
            if (needs_grad(row)) {
                Tensor gr({D});
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t d = 0; d < D; ++d) gr.data[d] += g.data[t * D + d];
                accumulate(row.id, gr);
            }
        });
    }

    Var scale(Var a, double s) {
        Tensor out = value(a);
        for (double& v : out.data) v *= s;
        return push(std::move(out), needs_grad(a), [this, a, s](Var self) {
            if (!needs_grad(a)) return;
            Tensor g = nodes_[self.id].grad;
            for (double& v : g.data) v *= s;
            accumulate(a.id, g);
        });
    }

    /// a + s * b (used to assemble weighted losses).
    Var add_scaled(Var a, Var b, double s) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        check_same_shape(ta, tb, "add_scaled");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += s * tb.data[i];
        return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b, s](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            if (needs_grad(a)) accumulate(a.id, g);
            if (needs_grad(b)) {
                Tensor gb = g;
                for (double& v : gb.data) v *= s;
                accumulate(b.id, gb);
            }
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        check_same_shape(ta, tb, "mul");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= tb.data[i];
        return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            if (needs_grad(a)) {
                Tensor ga = g;
                const Tensor& tb2 = value(b);
                for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] *= tb2.data[i];
                accumulate(a.id, ga);
            }
            if (needs_grad(b)) {
                Tensor gb = g;
                const Tensor& ta2 = value(a);
                for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] *= ta2.data[i];
                accumulate(b.id, gb);
            }
        });
    }

    Var relu(Var a) {
        Tensor out = value(a);
        for (double& v : out.data)
            if (v < 0) v = 0;
        return push(std::move(out), needs_grad(a), [this, a](Var self) {
            if (!needs_grad(a)) return;
            const Tensor& g = nodes_[self.id].grad;
            const Tensor& x = value(a);
            Tensor ga(g.shape);
            for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] = x.data[i] > 0 ? g.data[i] : 0;
            accumulate(a.id, ga);
        });
    }

    /// Gated activation: input [T, 2H] -> tanh(u) * sigmoid(g) with u the
    /// first H columns and g the rest.
    Var gated_unit(Var a) {
        const Tensor& x = value(a);
        if (x.rank() != 2 || x.dim(1) % 2 != 0)
            throw std::invalid_argument("gated_unit: input must be [T, 2H]");
        const std::size_t T = x.dim(0), H = x.dim(1) / 2;
        Tensor out({T, H});
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t h = 0; h < H; ++h) {
                double u = std::tanh(x.data[t * 2 * H + h]);
                double s = sigmoid(x.data[t * 2 * H + H + h]);
                out.data[t * H + h] = u * s;
            }
        return push(std::move(out), needs_grad(a), [this, a, T, H](Var self) {
            if (!needs_grad(a)) return;
            const Tensor& g = nodes_[self.id].grad;
            const Tensor& x2 = value(a);
            Tensor ga({T, 2 * H});
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t h = 0; h < H; ++h) {
                    double u = std::tanh(x2.data[t * 2 * H + h]);
                    double s = sigmoid(x2.data[t * 2 * H + H + h]);
                    double go = g.data[t * H + h];
                    ga.data[t * 2 * H + h] = go * s * (1.0 - u * u);
                    ga.data[t * 2 * H + H + h] = go * u * s * (1.0 - s);
                }
            accumulate(a.id, ga);
        });
    }

    // ---- linear algebra ----

    /// x [T, Din] times w [Din, Dout] plus bias [Dout].
    Var linear(Var x, Var w, Var b) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        const Tensor& tb = value(b);
        if (tx.rank() != 2 || tw.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tw.dim(0) ||
            tw.dim(1) != tb.dim(0))
            throw std::invalid_argument("linear: shape mismatch");
        const std::size_t T = tx.dim(0), Din = tx.dim(1), Dout = tw.dim(1);
        Tensor out({T, Dout});
        for (std::size_t t = 0; t < T; ++t) {
            double* orow = &out.data[t * Dout];
            for (std::size_t d = 0; d < Dout; ++d) orow[d] = tb.data[d];
            const double* xrow = &tx.data[t * Din];
            for (std::size_t i = 0; i < Din; ++i) {
                double xi = xrow[i];
                const double* wrow = &tw.data[i * Dout];
                for (std::size_t d = 0; d < Dout; ++d) orow[d] += xi * wrow[d];
            }
        }
        return push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b),
                    [this, x, w, b, T, Din, Dout](Var self) {
                        const Tensor& g = nodes_[self.id].grad;
                        const Tensor& tx2 = value(x);
                        const Tensor& tw2 = value(w);
                        if (needs_grad(x)) {
                            Tensor gx({T, Din});
                            for (std::size_t t = 0; t < T; ++t) {
                                const double* grow = &g.data[t * Dout];
                                double* gxrow = &gx.data[t * Din];
                                for (std::size_t i = 0; i < Din; ++i) {
                                    const double* wrow = &tw2.data[i * Dout];
                                    double acc = 0;
                                    for (std::size_t d = 0; d < Dout; ++d) acc += wrow[d] * grow[d];
                                    gxrow[i] = acc;
                                }
                            }
                            accumulate(x.id, gx);
                        }
                        if (needs_grad(w)) {
                            Tensor gw({Din, Dout});
                            for (std::size_t t = 0; t < T; ++t) {
                                const double* xrow = &tx2.data[t * Din];
                                const double* grow = &g.data[t * Dout];
                                for (std::size_t i = 0; i < Din; ++i) {
                                    double xi = xrow[i];
                                    double* gwrow = &gw.data[i * Dout];
                                    for (std::size_t d = 0; d < Dout; ++d) gwrow[d] += xi * grow[d];
                                }
                            }
                            accumulate(w.id, gw);
                        }
                        if (needs_grad(b)) {
                            Tensor gb({Dout});
                            for (std::size_t t = 0; t < T; ++t)
                                for (std::size_t d = 0; d < Dout; ++d)
                                    gb.data[d] += g.data[t * Dout + d];
                            accumulate(b.id, gb);
                        }
                    });
    }

    /// Causal dilated 1-d convolution. x [T, Cin], w [F, Cin, Cout], b [Cout].
    /// Output step j looks at input steps j*stride - (F-1-f)*dilation, so the
    /// receptive field extends strictly backwards in time. T must be a
    /// multiple of stride; missing history reads as zero.
    Var conv1d(Var x, Var w, Var b, int stride = 1, int dilation = 1) {
        const Tensor& tx = value(x);
        const Tensor& tw = value(w);
        const Tensor& tb = value(b);
        if (tx.rank() != 2 || tw.rank() != 3 || tb.rank() != 1)
            throw std::invalid_argument("conv1d: bad ranks");
        if (tw.dim(1) != tx.dim(1) || tw.dim(2) != tb.dim(0))
            throw std::invalid_argument("conv1d: channel mismatch");
        if (stride < 1 || dilation < 1) throw std::invalid_argument("conv1d: bad stride/dilation");
        const std::size_t T = tx.dim(0);
        if (T % static_cast<std::size_t>(stride) != 0)
            throw std::invalid_argument("conv1d: length not divisible by stride");
        const std::size_t To = T / static_cast<std::size_t>(stride);
        const std::size_t F = tw.dim(0), Cin = tx.dim(1), Cout = tw.dim(2);

        Tensor out({To, Cout});
        for (std::size_t j = 0; j < To; ++j) {
            double* orow = &out.data[j * Cout];
            for (std::size_t d = 0; d < Cout; ++d) orow[d] = tb.data[d];
            for (std::size_t f = 0; f < F; ++f) {
                std::ptrdiff_t t = static_cast<std::ptrdiff_t>(j) * stride -
                                   static_cast<std::ptrdiff_t>(F - 1 - f) * dilation;
                if (t < 0) continue;
                const double* xrow = &tx.data[static_cast<std::size_t>(t) * Cin];
                const double* wmat = &tw.data[f * Cin * Cout];
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    double xi = xrow[ci];
                    const double* wrow = &wmat[ci * Cout];
                    for (std::size_t d = 0; d < Cout; ++d) orow[d] += xi * wrow[d];
                }
            }
        }
        return push(std::move(out), needs_grad(x) || needs_grad(w) || needs_grad(b),
                    [this, x, w, b, stride, dilation, T, To](Var self) {
                        const Tensor& g = nodes_[self.id].grad;
                        const Tensor& tx2 = value(x);
                        const Tensor& tw2 = value(w);
                        const std::size_t F = tw2.dim(0), Cin = tx2.dim(1), Cout = tw2.dim(2);
                        const bool need_x = needs_grad(x);
                        const bool need_w = needs_grad(w);
                        Tensor gx = need_x ? Tensor({T, Cin}) : Tensor();
                        Tensor gw = need_w ? Tensor({F, Cin, Cout}) : Tensor();
                        for (std::size_t j = 0; j < To; ++j) {
                            const double* grow = &g.data[j * Cout];
                            for (std::size_t f = 0; f < F; ++f) {
                                std::ptrdiff_t t =
                                    static_cast<std::ptrdiff_t>(j) * stride -
                                    static_cast<std::ptrdiff_t>(F - 1 - f) * dilation;
                                if (t < 0) continue;
                                const double* xrow = &tx2.data[static_cast<std::size_t>(t) * Cin];
                                const double* wmat = &tw2.data[f * Cin * Cout];
                                for (std::size_t ci = 0; ci < Cin; ++ci) {
                                    if (need_w) {
                                        double xi = xrow[ci];
                                        double* gwrow = &gw.data[(f * Cin + ci) * Cout];
                                        for (std::size_t d = 0; d < Cout; ++d)
                                            gwrow[d] += xi * grow[d];
                                    }
                                    if (need_x) {
                                        const double* wrow = &wmat[ci * Cout];
                                        double acc = 0;
                                        for (std::size_t d = 0; d < Cout; ++d)
                                            acc += wrow[d] * grow[d];
                                        gx.data[static_cast<std::size_t>(t) * Cin + ci] += acc;
                                    }
                                }
                            }
                        }
                        if (need_x) accumulate(x.id, gx);
                        if (need_w) accumulate(w.id, gw);
                        if (needs_grad(b)) {
                            Tensor gb({Cout});
                            for (std::size_t j = 0; j < To; ++j)
                                for (std::size_t d = 0; d < Cout; ++d)
                                    gb.data[d] += g.data[j * Cout + d];
                            accumulate(b.id, gb);
                        }
                    });
    }

    /// Row gather: out[t] = table[ids[t]].
    Var embedding(const std::vector<int>& ids, Var table) {
        const Tensor& tt = value(table);
        if (tt.rank() != 2) throw std::invalid_argument("embedding: table must be 2-d");
        const std::size_t V = tt.dim(0), D = tt.dim(1);
        Tensor out({ids.size(), D});
        for (std::size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= V)
                throw std::invalid_argument("embedding: id out of range");
            const double* src = &tt.data[static_cast<std::size_t>(ids[t]) * D];
            std::copy(src, src + D, &out.data[t * D]);
        }
        std::vector<int> ids_copy = ids;
        return push(std::move(out), needs_grad(table),
                    [this, table, ids_copy = std::move(ids_copy), V, D](Var self) {
                        if (!needs_grad(table)) return;
                        const Tensor& g = nodes_[self.id].grad;
                        Tensor gt({V, D});
                        for (std::size_t t = 0; t < ids_copy.size(); ++t) {
                            double* dst = &gt.data[static_cast<std::size_t>(ids_copy[t]) * D];
                            const double* src = &g.data[t * D];
                            for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                        }
                        accumulate(table.id, gt);
                    });
    }

    /// Repeat each row `factor` times: [T, C] -> [T*factor, C].
    Var upsample_nearest(Var x, int factor) {
        if (factor < 1) throw std::invalid_argument("upsample_nearest: bad factor");
        const Tensor& tx = value(x);
        if (tx.rank() != 2) throw std::invalid_argument("upsample_nearest: input must be 2-d");
        const std::size_t T = tx.dim(0), C = tx.dim(1), Fi = static_cast<std::size_t>(factor);
        Tensor out({T * Fi, C});
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t r = 0; r < Fi; ++r)
                std::copy(&tx.data[t * C], &tx.data[t * C] + C, &out.data[(t * Fi + r) * C]);
        return push(std::move(out), needs_grad(x), [this, x, T, C, Fi](Var self) {
            if (!needs_grad(x)) return;
            const Tensor& g = nodes_[self.id].grad;
            Tensor gx({T, C});
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t r = 0; r < Fi; ++r)
                    for (std::size_t c = 0; c < C; ++c)
                        gx.data[t * C + c] += g.data[(t * Fi + r) * C + c];
            accumulate(x.id, gx);
        });
    }

    /// Reverse rows (time axis). Used to run causal stacks anti-causally.
    Var flip_time(Var x) {
        const Tensor& tx = value(x);
        if (tx.rank() != 2) throw std::invalid_argument("flip_time: input must be 2-d");
        const std::size_t T = tx.dim(0), C = tx.dim(1);
        Tensor out({T, C});
        for (std::size_t t = 0; t < T; ++t)
            std::copy(&tx.data[t * C], &tx.data[t * C] + C, &out.data[(T - 1 - t) * C]);
        return push(std::move(out), needs_grad(x), [this, x, T, C](Var self) {
            if (!needs_grad(x)) return;
            const Tensor& g = nodes_[self.id].grad;
            Tensor gx({T, C});
            for (std::size_t t = 0; t < T; ++t)
                std::copy(&g.data[t * C], &g.data[t * C] + C, &gx.data[(T - 1 - t) * C]);
            accumulate(x.id, gx);
        });
    }

    Var concat_cols(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(0) != tb.dim(0))
            throw std::invalid_argument("concat_cols: shape mismatch");
        const std::size_t T = ta.dim(0), Da = ta.dim(1), Db = tb.dim(1);
        Tensor out({T, Da + Db});
        for (std::size_t t = 0; t < T; ++t) {
            std::copy(&ta.data[t * Da], &ta.data[t * Da] + Da, &out.data[t * (Da + Db)]);
            std::copy(&tb.data[t * Db], &tb.data[t * Db] + Db, &out.data[t * (Da + Db) + Da]);
        }
        return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b, T, Da, Db](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            if (needs_grad(a)) {
                Tensor ga({T, Da});
                for (std::size_t t = 0; t < T; ++t)
                    std::copy(&g.data[t * (Da + Db)], &g.data[t * (Da + Db)] + Da,
                              &ga.data[t * Da]);
                accumulate(a.id, ga);
            }
            if (needs_grad(b)) {
                Tensor gb({T, Db});
                for (std::size_t t = 0; t < T; ++t)
                    std::copy(&g.data[t * (Da + Db) + Da], &g.data[t * (Da + Db) + Da] + Db,
                              &gb.data[t * Db]);
                accumulate(b.id, gb);
            }
        });
    }

    Var concat_rows(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(1))
            throw std::invalid_argument("concat_rows: shape mismatch");
        const std::size_t Ta = ta.dim(0), Tb = tb.dim(0), D = ta.dim(1);
        Tensor out({Ta + Tb, D});
        std::copy(ta.data.begin(), ta.data.end(), out.data.begin());
        std::copy(tb.data.begin(), tb.data.end(), out.data.begin() + Ta * D);
        return push(std::move(out), needs_grad(a) || needs_grad(b), [this, a, b, Ta, Tb, D](Var self) {
            const Tensor& g = nodes_[self.id].grad;
            if (needs_grad(a)) {
                Tensor ga({Ta, D});
                std::copy(g.data.begin(), g.data.begin() + Ta * D, ga.data.begin());
                accumulate(a.id, ga);
            }
            if (needs_grad(b)) {
                Tensor gb({Tb, D});
                std::copy(g.data.begin() + Ta * D, g.data.end(), gb.data.begin());
                accumulate(b.id, gb);
            }
        });
    }

    /// Row-wise layer norm with learned gain and bias.
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Tensor& tx = value(x);
        const Tensor& tg = value(gain);
        const Tensor& tb = value(bias);
        if (tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1 || tg.dim(0) != tx.dim(1) ||
            tb.dim(0) != tx.dim(1))
            throw std::invalid_argument("layer_norm: shape mismatch");
        const std::size_t T = tx.dim(0), D = tx.dim(1);
        Tensor out({T, D});
        // Cache the normalised rows and inverse sigmas for backward.
        auto xhat = std::make_shared<Tensor>(Tensor({T, D}));
        auto inv_sigma = std::make_shared<std::vector<double>>(T);
        for (std::size_t t = 0; t < T; ++t) {
            const double* row = &tx.data[t * D];
            double mean = 0;
            for (std::size_t d = 0; d < D; ++d) mean += row[d];
            mean /= static_cast<double>(D);
            double var = 0;
            for (std::size_t d = 0; d < D; ++d) var += (row[d] - mean) * (row[d] - mean);
            var /= static_cast<double>(D);
            double inv = 1.0 / std::sqrt(var + eps);
            (*inv_sigma)[t] = inv;
            for (std::size_t d = 0; d < D; ++d) {
                double xh = (row[d] - mean) * inv;
                xhat->data[t * D + d] = xh;
                out.data[t * D + d] = tg.data[d] * xh + tb.data[d];
            }
        }
        return push(std::move(out), needs_grad(x) || needs_grad(gain) || needs_grad(bias),
                    [this, x, gain, bias, xhat, inv_sigma, T, D](Var self) {
                        const Tensor& g = nodes_[self.id].grad;
                        const Tensor& tg2 = value(gain);
                        if (needs_grad(gain)) {
                            Tensor gg({D});
                            for (std::size_t t = 0; t < T; ++t)
                                for (std::size_t d = 0; d < D; ++d)
                                    gg.data[d] += g.data[t * D + d] * xhat->data[t * D + d];
                            accumulate(gain.id, gg);
                        }
                        if (needs_grad(bias)) {
                            Tensor gb({D});
                            for (std::size_t t = 0; t < T; ++t)
                                for (std::size_t d = 0; d < D; ++d) gb.data[d] += g.data[t * D + d];
                            accumulate(bias.id, gb);
                        }
                        if (needs_grad(x)) {
                            Tensor gx({T, D});
                            for (std::size_t t = 0; t < T; ++t) {
                                double mean_u = 0, mean_ux = 0;
                                for (std::size_t d = 0; d < D; ++d) {
                                    double u = g.data[t * D + d] * tg2.data[d];
                                    mean_u += u;
                                    mean_ux += u * xhat->data[t * D + d];
                                }
                                mean_u /= static_cast<double>(D);
                                mean_ux /= static_cast<double>(D);
                                for (std::size_t d = 0; d < D; ++d) {
                                    double u = g.data[t * D + d] * tg2.data[d];
                                    gx.data[t * D + d] =
                                        (u - mean_u - xhat->data[t * D + d] * mean_ux) *
                                        (*inv_sigma)[t];
                                }
                            }
                            accumulate(x.id, gx);
                        }
                    });
    }

    /// Multi-head causal self-attention core. q, k, v are [N, D] with D a
    /// multiple of num_heads; rel_bias is [num_heads, W] of additive logits
    /// indexed by clipped distance min(i - j, W - 1). Returns [N, D].
    Var causal_attention(Var q, Var k, Var v, Var rel_bias, int num_heads) {
        const Tensor& tq = value(q);
        const Tensor& tk = value(k);
        const Tensor& tv = value(v);
        const Tensor& tr = value(rel_bias);
        if (tq.rank() != 2 || !tq.same_shape(tk) || !tq.same_shape(tv))
            throw std::invalid_argument("causal_attention: q/k/v must share [N, D]");
        if (num_heads < 1 || tq.dim(1) % static_cast<std::size_t>(num_heads) != 0)
            throw std::invalid_argument("causal_attention: D must divide into heads");
        if (tr.rank() != 2 || tr.dim(0) != static_cast<std::size_t>(num_heads) || tr.dim(1) < 1)
            throw std::invalid_argument("causal_attention: rel_bias must be [heads, window]");
        const std::size_t N = tq.dim(0), D = tq.dim(1);
        const std::size_t H = static_cast<std::size_t>(num_heads), dh = D / H;
        const std::size_t W = tr.dim(1);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

        // probs[h] is row-major [N, N], lower-triangular (j <= i).
        auto probs = std::make_shared<std::vector<Tensor>>();
        probs->reserve(H);
        Tensor out({N, D});
        std::vector<double> scores;
        for (std::size_t h = 0; h < H; ++h) {
            Tensor p({N, N});
            for (std::size_t i = 0; i < N; ++i) {
                scores.assign(i + 1, 0.0);
                double maxs = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* qp = &tq.data[i * D + h * dh];
                    const double* kp = &tk.data[j * D + h * dh];
                    double s = 0;
                    for (std::size_t d = 0; d < dh; ++d) s += qp[d] * kp[d];
                    s = s * inv_sqrt + tr.data[h * W + std::min(i - j, W - 1)];
                    scores[j] = s;
                    if (s > maxs) maxs = s;
                }
                double z = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - maxs);
                    z += scores[j];
                }
                double* prow = &p.data[i * N];
                double* orow = &out.data[i * D + h * dh];
                for (std::size_t j = 0; j <= i; ++j) {
                    double pj = scores[j] / z;
                    prow[j] = pj;
                    const double* vp = &tv.data[j * D + h * dh];
                    for (std::size_t d = 0; d < dh; ++d) orow[d] += pj * vp[d];
                }
            }
            probs->push_back(std::move(p));
        }
        bool needs = needs_grad(q) || needs_grad(k) || needs_grad(v) || needs_grad(rel_bias);
        return push(std::move(out), needs,
                    [this, q, k, v, rel_bias, probs, N, D, H, dh, W, inv_sqrt](Var self) {
                        const Tensor& g = nodes_[self.id].grad;
                        const Tensor& tq2 = value(q);
                        const Tensor& tk2 = value(k);
                        const Tensor& tv2 = value(v);
                        Tensor gq({N, D}), gk({N, D}), gv({N, D});
                        Tensor gr({H, W});
                        std::vector<double> dp, ds;
                        for (std::size_t h = 0; h < H; ++h) {
                            const Tensor& p = (*probs)[h];
                            for (std::size_t i = 0; i < N; ++i) {
                                const double* prow = &p.data[i * N];
                                const double* grow = &g.data[i * D + h * dh];
                                dp.assign(i + 1, 0.0);
                                double dot = 0;
                                for (std::size_t j = 0; j <= i; ++j) {
                                    const double* vp = &tv2.data[j * D + h * dh];
                                    double acc = 0;
                                    for (std::size_t d = 0; d < dh; ++d) acc += grow[d] * vp[d];
                                    dp[j] = acc;
                                    dot += acc * prow[j];
                                }
                                ds.assign(i + 1, 0.0);
                                for (std::size_t j = 0; j <= i; ++j)
                                    ds[j] = prow[j] * (dp[j] - dot);
                                const double* qp = &tq2.data[i * D + h * dh];
                                double* gqp = &gq.data[i * D + h * dh];
                                for (std::size_t j = 0; j <= i; ++j) {
                                    double s = ds[j];
                                    double pj = prow[j];
                                    const double* kp = &tk2.data[j * D + h * dh];
                                    double* gkp = &gk.data[j * D + h * dh];
                                    double* gvp = &gv.data[j * D + h * dh];
                                    for (std::size_t d = 0; d < dh; ++d) {
                                        gqp[d] += s * inv_sqrt * kp[d];
                                        gkp[d] += s * inv_sqrt * qp[d];
                                        gvp[d] += pj * grow[d];
                                    }
                                    gr.data[h * W + std::min(i - j, W - 1)] += s;
                                }
                            }
                        }
                        if (needs_grad(q)) accumulate(q.id, gq);
                        if (needs_grad(k)) accumulate(k.id, gk);
                        if (needs_grad(v)) accumulate(v.id, gv);
                        if (needs_grad(rel_bias)) accumulate(rel_bias.id, gr);
                    });
    }

    /// Mean masked cross-entropy in nats: logits [N, V], integer targets.
    /// An empty mask weights every row equally.
    Var softmax_ce_mean(Var logits, const std::vector<int>& targets,
                        const std::vector<double>& mask = {}) {
        const Tensor& tl = value(logits);
        if (tl.rank() != 2) throw std::invalid_argument("softmax_ce_mean: logits must be 2-d");
        const std::size_t N = tl.dim(0), V = tl.dim(1);
        if (targets.size() != N) throw std::invalid_argument("softmax_ce_mean: targets size");
        if (!mask.empty() && mask.size() != N)
            throw std::invalid_argument("softmax_ce_mean: mask size");
        double weight_total = 0;
        for (std::size_t i = 0; i < N; ++i) weight_total += mask.empty() ? 1.0 : mask[i];
        if (weight_total <= 0) throw std::invalid_argument("softmax_ce_mean: empty mask");

        auto probs = std::make_shared<Tensor>(Tensor({N, V}));
        double loss = 0;
        for (std::size_t i = 0; i < N; ++i) {
            int tgt = targets[i];
            if (tgt < 0 || static_cast<std::size_t>(tgt) >= V)
                throw std::invalid_argument("softmax_ce_mean: target out of range");
            const double* row = &tl.data[i * V];
            double maxv = row[0];
            for (std::size_t j = 1; j < V; ++j) maxv = std::max(maxv, row[j]);
            double z = 0;
            for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - maxv);
            double logz = std::log(z) + maxv;
            for (std::size_t j = 0; j < V; ++j) probs->data[i * V + j] = std::exp(row[j] - logz);
            double w = mask.empty() ? 1.0 : mask[i];
            loss += w * (logz - row[tgt]);
        }
        Tensor out({1}, loss / weight_total);
        std::vector<int> tcopy = targets;
        std::vector<double> mcopy = mask;
        return push(std::move(out), needs_grad(logits),
                    [this, logits, probs, tcopy = std::move(tcopy), mcopy = std::move(mcopy),
                     weight_total, N, V](Var self) {
                        if (!needs_grad(logits)) return;
                        double gscale = nodes_[self.id].grad.data[0] / weight_total;
                        Tensor gl({N, V});
                        for (std::size_t i = 0; i < N; ++i) {
                            double w = (mcopy.empty() ? 1.0 : mcopy[i]) * gscale;
                            if (w == 0) continue;
                            const double* prow = &probs->data[i * V];
                            double* grow = &gl.data[i * V];
                            for (std::size_t j = 0; j < V; ++j) grow[j] = w * prow[j];
                            grow[tcopy[i]] -= w;
                        }
                        accumulate(logits.id, gl);
                    });
    }

    // ---- task-specific ops ----

    /// Margin penalty as a tape node (sum of squared unit-range excursions).
    Var margin_op(Var z) {
        Tensor out({1}, margin_penalty(value(z)));
        return push(std::move(out), needs_grad(z), [this, z](Var self) {
            if (!needs_grad(z)) return;
            double gs = nodes_[self.id].grad.data[0];
            Tensor gz = margin_penalty_grad(value(z));
            for (double& g : gz.data) g *= gs;
            accumulate(z.id, gz);
        });
    }

    /// Slowness penalty as a tape node, using the analytic gradient.
    Var slowness_op(Var z, SlownessKind kind, const SlownessOptions& opts = {}) {
        Tensor out({1}, slowness_penalty(value(z), kind, opts));
        return push(std::move(out), needs_grad(z), [this, z, kind, opts](Var self) {
            if (!needs_grad(z)) return;
            double gs = nodes_[self.id].grad.data[0];
            Tensor gz = slowness_gradient(value(z), kind, opts);
            for (double& g : gz.data) g *= gs;
            accumulate(z.id, gz);
        });
    }

    /// Schmitt-trigger quantisation with a straight-through gradient: the
    /// forward value is the quantised trajectory (levels / k); the backward
    /// pass hands the incoming gradient to z unchanged, even outside [-1, 1].
    /// The integer grid is exposed through `codes_out` for rate measurement.
    Var straight_through_stq(Var z, const QuantiserConfig& cfg, double base_rate_hz,
                             DenseCodes* codes_out = nullptr) {
        DenseCodes codes = stq(value(z), cfg, base_rate_hz);
        if (codes_out) *codes_out = codes;
        Tensor out = levels_to_real(codes);
        return push(std::move(out), needs_grad(z), [this, z](Var self) {
            if (!needs_grad(z)) return;
            accumulate(z.id, nodes_[self.id].grad);
        });
    }

    /// Fixed-weight reduction to a scalar: sum(x * weights). Handy for
    /// probing gradients of non-scalar outputs.
    Var weighted_sum(Var x, const Tensor& weights) {
        const Tensor& tx = value(x);
        check_same_shape(tx, weights, "weighted_sum");
        double acc = 0;
        for (std::size_t i = 0; i < tx.size(); ++i) acc += tx.data[i] * weights.data[i];
        Tensor wcopy = weights;
        return push(Tensor({1}, acc), needs_grad(x), [this, x, wcopy = std::move(wcopy)](Var self) {
            if (!needs_grad(x)) return;
            double gs = nodes_[self.id].grad.data[0];
            Tensor gx = wcopy;
            for (double& g : gx.data) g *= gs;
            accumulate(x.id, gx);
        });
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void()> backward;
    };

    std::size_t check(Var v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw std::logic_error("invalid Var");
        return v.id;
    }

    bool needs_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    void accumulate(std::size_t id, const Tensor& g) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) {
            n.grad = g;
            return;
        }
        check_same_shape(n.grad, g, "accumulate");
        for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
    }

    template <typename Backward>
    Var push(Tensor value, bool requires_grad, Backward&& backward) {
        Var v{nodes_.size()};
        Node node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        if (requires_grad)
            node.backward = [fn = std::forward<Backward>(backward), v]() mutable { fn(v); };
        nodes_.push_back(std::move(node));
        return v;
    }

    static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

    std::vector<Node> nodes_;
};

}  // namespace vdrl
