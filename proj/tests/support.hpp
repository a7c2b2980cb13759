#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/reduction.hpp"
#include "tokenprune/rl.hpp"
#include "tokenprune/rng.hpp"
#include "tokenprune/tape.hpp"
#include "tokenprune/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace tptest {

using namespace tokenprune;
using numerics::GradientSet;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = dist(rng);
    }
    return m;
}

inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t hidden = 8, HeadKind head = HeadKind::classification) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden = hidden;
    c.heads = 2;
    c.ffn_inner = 2 * hidden;
    c.vocab_size = 32;
    c.max_len = 16;
    c.reduction_positions = layers > 1 ? std::vector<std::size_t>{1} : std::vector<std::size_t>{};
    c.head_kind = head;
    c.num_classes = 3;
    c.policy_init_bias = 0.0;
    return c;
}

/// Initialized model with every parameter nudged off its init value, so no gradient is
/// trivially zero (LayerNorm gains of exactly 1, zero biases, ...).
inline transformer::Model generic_model(const ModelConfig& config, std::uint64_t seed, double jitter = 0.3) {
    auto model = transformer::Model::initialize(config, seed);
    Rng rng = make_stream(seed, "test_jitter");
    std::normal_distribution<double> dist(0.0, jitter);
    model.for_each_parameter([&](Parameter& p) {
        for (double& v : p.value.data()) {
            v += dist(rng);
        }
    });
    return model;
}

inline std::vector<int> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
    std::vector<int> t(n);
    std::uniform_int_distribution<int> dist(1, static_cast<int>(vocab) - 1);
    for (auto& v : t) {
        v = dist(rng);
    }
    t[0] = 0;
    return t;
}

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖, floor).
inline double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-10) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        na += a.data()[i] * a.data()[i];
        nb += b.data()[i] * b.data()[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Central differences of `loss` for every entry of every parameter in `params`.
inline GradientSet finite_differences(const std::vector<Parameter*>& params, const std::function<double()>& loss,
                                      double h = 1e-6) {
    GradientSet out;
    for (Parameter* p : params) {
        Matrix g(p->value.rows(), p->value.cols());
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double& x = p->value.data()[i];
            const double keep = x;
            x = keep + h;
            const double up = loss();
            x = keep - h;
            const double down = loss();
            x = keep;
            g.data()[i] = (up - down) / (2.0 * h);
        }
        out[p->name] = std::move(g);
    }
    return out;
}

/// Norm-wise relative error between analytic and numeric gradients, taken over all of `params` at once.
inline double max_gradient_error(const std::vector<Parameter*>& params, const GradientSet& analytic,
                                 const std::function<double()>& loss, double h = 1e-6) {
    const GradientSet numeric = finite_differences(params, loss, h);
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (Parameter* p : params) {
        const auto it = analytic.find(p->name);
        const Matrix& num = numeric.at(p->name);
        for (std::size_t i = 0; i < num.size(); ++i) {
            const double a = it == analytic.end() ? 0.0 : it->second.data()[i];
            diff += (a - num.data()[i]) * (a - num.data()[i]);
            na += a * a;
            nn += num.data()[i] * num.data()[i];
        }
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

inline std::vector<Parameter*> all_parameters(transformer::Model& model,
                                              const std::function<bool(const std::string&)>& keep = {}) {
    std::vector<Parameter*> out;
    model.for_each_parameter([&](Parameter& p) {
        if (!keep || keep(p.name)) {
            out.push_back(&p);
        }
    });
    return out;
}

/// Exact expected reward of a single-module model by enumerating all 2^n plans over the n tokens
/// (anchor unprotected). Gradient: Σ_a P(a)·R(a)·∇log P(a), on the policy parameters.
struct ExactObjective {
    double value = 0.0;
    GradientSet gradient;
};

inline ExactObjective exact_objective(const transformer::Model& model, const std::vector<int>& tokens, const Label& gold,
                                      double lambda, bool with_gradient = true) {
    const std::size_t n = tokens.size();
    reduction::ReduceOptions ro;
    ro.protect_anchor = false;
    const auto full = transformer::full_forward(model, tokens);
    const auto probs = reduction::policy_probs(full.hidden[model.config.reduction_positions.at(0)], model.policies[0]);
    ExactObjective out;
    Tape tape;
    Var surrogate = tape.constant(Matrix(1, 1));
    for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
        std::vector<std::uint8_t> mask(n);
        double p = 1.0;
        for (std::size_t j = 0; j < n; ++j) {
            mask[j] = (bits >> j) & 1U;
            p *= mask[j] != 0 ? probs[j] : 1.0 - probs[j];
        }
        const auto trace = reduction::reduced_forward(model, tokens, reduction::mask_gate({mask}), ro);
        const double r = rl::compute_reward(model, trace, gold, lambda).total;
        out.value += p * r;
        if (with_gradient) {
            surrogate = tape.add(surrogate, tape.scale(rl::plan_log_prob(tape, model, trace), p * r));
        }
    }
    if (with_gradient) {
        tape.backward(surrogate);
        for (auto& [name, g] : tape.parameter_gradients()) {
            if (transformer::is_policy_parameter(name)) {
                out.gradient.emplace(name, std::move(g));
            }
        }
    }
    return out;
}

} // namespace tptest
