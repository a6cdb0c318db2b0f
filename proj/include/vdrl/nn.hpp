#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace vdrl {

/// Named handle to a model parameter tensor. Models expose their parameters
/// in a stable order; optimizer state and checkpoints key off the names.
struct ParamRef {
    std::string name;
    Tensor* tensor;
};

inline void fill_normal(Tensor& t, Rng& rng, double stddev) {
    for (double& v : t.data) v = rng.normal(0.0, stddev);
}

/// He-style stddev for ReLU-ish fan-in.
inline double he_stddev(std::size_t fan_in) {
    return std::sqrt(2.0 / static_cast<double>(fan_in));
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moment buffers are lazily shaped on the first
/// step and are exposed for checkpointing.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<ParamRef>& params, const std::vector<Tensor>& grads,
              double lr_override = -1.0) {
        if (params.size() != grads.size())
            throw std::invalid_argument("AdamOptimizer: params/grads size mismatch");
        if (m_.empty()) {
            for (const ParamRef& p : params) {
                m_.emplace_back(p.tensor->shape);
                v_.emplace_back(p.tensor->shape);
            }
        }
        if (m_.size() != params.size())
            throw std::invalid_argument("AdamOptimizer: parameter count changed");
        ++t_;
        const double lr = lr_override > 0 ? lr_override : cfg_.lr;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i].tensor;
            const Tensor& g = grads[i];
            check_same_shape(p, g, "AdamOptimizer");
            for (std::size_t j = 0; j < p.size(); ++j) {
                double gj = g.data[j];
                m_[i].data[j] = cfg_.beta1 * m_[i].data[j] + (1.0 - cfg_.beta1) * gj;
                v_[i].data[j] = cfg_.beta2 * v_[i].data[j] + (1.0 - cfg_.beta2) * gj * gj;
                double mhat = m_[i].data[j] / bc1;
                double vhat = v_[i].data[j] / bc2;
                p.data[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    std::uint64_t step_count() const { return t_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }

    /// Restore from checkpointed state.
    void restore(std::vector<Tensor> m, std::vector<Tensor> v, std::uint64_t t) {
        m_ = std::move(m);
        v_ = std::move(v);
        t_ = t;
    }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

/// Exponential moving average of parameters, kept alongside training and
/// swapped in for evaluation.
class PolyakAverager {
public:
    explicit PolyakAverager(double decay = 0.9999) : decay_(decay) {
        if (decay < 0 || decay >= 1)
            throw std::invalid_argument("PolyakAverager: decay must be in [0, 1)");
    }

    void update(const std::vector<ParamRef>& params) {
        if (shadow_.empty()) {
            for (const ParamRef& p : params) shadow_.push_back(*p.tensor);
            return;
        }
        if (shadow_.size() != params.size())
            throw std::invalid_argument("PolyakAverager: parameter count changed");
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Tensor& p = *params[i].tensor;
            check_same_shape(shadow_[i], p, "PolyakAverager");
            for (std::size_t j = 0; j < p.size(); ++j)
                shadow_[i].data[j] = decay_ * shadow_[i].data[j] + (1.0 - decay_) * p.data[j];
        }
    }

    bool initialised() const { return !shadow_.empty(); }
    double decay() const { return decay_; }
    std::vector<Tensor>& shadows() { return shadow_; }

    /// Copy the averaged weights into the live parameters.
    void apply_to(const std::vector<ParamRef>& params) const {
        if (shadow_.size() != params.size())
            throw std::invalid_argument("PolyakAverager: not initialised for these params");
        for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = shadow_[i];
    }

    void restore(std::vector<Tensor> shadows) { shadow_ = std::move(shadows); }

private:
    double decay_;
    std::vector<Tensor> shadow_;
};

/// Sums per-example gradients across a batch before an optimizer step.
class GradientAccumulator {
public:
    void reset(const std::vector<ParamRef>& params) {
        grads_.clear();
        for (const ParamRef& p : params) grads_.emplace_back(p.tensor->shape);
    }

    /// Bind all parameters onto a tape as grad-requiring leaves.
    static std::vector<Var> bind(Tape& tape, const std::vector<ParamRef>& params) {
        std::vector<Var> vars;
        vars.reserve(params.size());
        for (const ParamRef& p : params) vars.push_back(tape.input(*p.tensor, true));
        return vars;
    }

    /// Accumulate the tape's gradients for the bound parameter leaves.
    void add(const Tape& tape, const std::vector<Var>& bound) {
        if (bound.size() != grads_.size())
            throw std::invalid_argument("GradientAccumulator: binding size mismatch");
        for (std::size_t i = 0; i < bound.size(); ++i) {
            const Tensor& g = tape.grad(bound[i]);
            if (g.data.empty()) continue;  // parameter did not reach the loss
            check_same_shape(grads_[i], g, "GradientAccumulator");
            for (std::size_t j = 0; j < g.size(); ++j) grads_[i].data[j] += g.data[j];
        }
    }

    void scale(double s) {
        for (Tensor& g : grads_)
            for (double& v : g.data) v *= s;
    }

    double norm() const {
        double acc = 0;
        for (const Tensor& g : grads_)
            for (double v : g.data) acc += v * v;
        return std::sqrt(acc);
    }

    const std::vector<Tensor>& grads() const { return grads_; }

private:
    std::vector<Tensor> grads_;
};

}  // namespace vdrl
