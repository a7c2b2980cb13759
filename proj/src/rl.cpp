#include "tokenprune/rl.hpp"

#include "tokenprune/errors.hpp"
#include "tokenprune/reduction.hpp"
#include "tokenprune/strategies.hpp"

#include <algorithm>
#include <cmath>

namespace tokenprune::rl {

RewardBreakdown RewardBreakdown::make(double log_likelihood, std::size_t selected_count, double lambda) {
    RewardBreakdown r;
    r.clamped = !(log_likelihood >= kLogFloor);
    r.log_likelihood = r.clamped ? kLogFloor : log_likelihood;
    r.selected_count = selected_count;
    r.lambda = lambda;
    r.total = r.log_likelihood - lambda * static_cast<double>(selected_count);
    return r;
}

RewardBreakdown compute_reward(const Model& model, const transformer::LayerTrace& trace, const Label& gold,
                               double lambda) {
    if (lambda < 0.0) {
        throw ParameterError("lambda must be non-negative");
    }
    const auto pred = transformer::predict(model, reduction::assemble_final_states(trace));
    return RewardBreakdown::make(transformer::log_likelihood(pred, gold), trace.plan.selected_count(), lambda);
}

Rollout rollout(const Model& model, std::span<const int> token_ids, const Label& gold, double lambda, Rng& rng,
                const reduction::ReduceOptions& options) {
    const auto gate = reduction::policy_gate(model, reduction::DecisionMode::sample, &rng);
    Rollout r;
    r.trace = reduction::reduced_forward(model, token_ids, gate, options);
    r.reward = compute_reward(model, r.trace, gold, lambda);
    return r;
}

Var plan_log_prob(Tape& tape, const Model& model, const transformer::LayerTrace& trace) {
    Var total = tape.constant(Matrix(1, 1));
    for (std::size_t t = 0; t < trace.plan.modules.size(); ++t) {
        const auto& m = trace.plan.modules[t];
        const Var lp = reduction::log_policy(tape, trace.hidden.at(m.position), model.policies.at(t), m.action,
                                             m.controlled);
        total = tape.add(total, lp);
    }
    return total;
}

GradientSet reinforce_gradient(const Model& model, std::span<const Rollout> rollouts, bool use_baseline) {
    GradientSet out;
    const std::size_t k = rollouts.size();
    if (k == 0 || (use_baseline && k == 1)) {
        return out;
    }
    double baseline = 0.0;
    if (use_baseline) {
        for (const auto& r : rollouts) {
            baseline += r.reward.total;
        }
        baseline /= static_cast<double>(k);
    }
    const double norm = use_baseline ? 1.0 / static_cast<double>(k - 1) : 1.0 / static_cast<double>(k);
    Tape tape;
    Var surrogate = tape.constant(Matrix(1, 1));
    for (const auto& r : rollouts) {
        const double coef = (r.reward.total - baseline) * norm;
        if (coef == 0.0) {
            continue;
        }
        surrogate = tape.add(surrogate, tape.scale(plan_log_prob(tape, model, r.trace), coef));
    }
    tape.backward(surrogate);
    for (auto& [name, g] : tape.parameter_gradients()) {
        if (transformer::is_policy_parameter(name)) {
            out.emplace(name, std::move(g));
        }
    }
    return out;
}

ReinforceEstimate reinforce_gradient(const Model& model, std::span<const int> token_ids, const Label& gold,
                                     double lambda, std::size_t num_samples, Rng& rng, bool use_baseline,
                                     const reduction::ReduceOptions& options) {
    if (num_samples == 0) {
        throw ParameterError("num_action_samples must be >= 1");
    }
    std::vector<Rollout> rollouts;
    rollouts.reserve(num_samples);
    for (std::size_t k = 0; k < num_samples; ++k) {
        rollouts.push_back(rollout(model, token_ids, gold, lambda, rng, options));
    }
    ReinforceEstimate est;
    est.gradient = reinforce_gradient(model, rollouts, use_baseline);
    for (const auto& r : rollouts) {
        est.rewards.push_back(r.reward);
        est.baseline += r.reward.total;
    }
    est.baseline /= static_cast<double>(num_samples);
    return est;
}

std::size_t expected_select_count(std::span<const double> probs) {
    if (probs.empty()) {
        return 0;
    }
    double total = 0.0;
    for (double p : probs) {
        total += p;
    }
    const auto k = static_cast<std::size_t>(std::floor(total + 0.5));
    return std::clamp<std::size_t>(k, 1, probs.size());
}

ImitationTargets imitation_targets(const Model& model, std::span<const int> token_ids, const Label& gold) {
    const std::size_t L = model.config.num_layers;
    const auto scores = strategies::residual_importance(model, token_ids, gold, strategies::default_shallow_layer(L),
                                                        strategies::default_deep_layer(L));
    ImitationTargets out;
    const transformer::Gate gate = [&](std::size_t module, const Matrix& states, std::span<const std::size_t> survivors) {
        transformer::GateDecision d;
        d.probs = reduction::policy_probs(states, model.policies.at(module));
        d.select = strategies::top_k_mask(scores.scores, survivors, expected_select_count(d.probs));
        out.masks.push_back(d.select);
        return d;
    };
    out.trace = reduction::reduced_forward(model, token_ids, gate);
    return out;
}

Var imitation_loss(Tape& tape, const Model& model, const transformer::LayerTrace& trace) {
    std::size_t count = 0;
    for (const auto& m : trace.plan.modules) {
        count += static_cast<std::size_t>(std::count(m.controlled.begin(), m.controlled.end(), 1));
    }
    const Var lp = plan_log_prob(tape, model, trace);
    return tape.scale(lp, count == 0 ? 0.0 : -1.0 / static_cast<double>(count));
}

TeacherLogits teacher_logits(const Model& teacher, std::span<const int> token_ids) {
    Tape tape;
    const auto pass = transformer::forward(tape, teacher, token_ids, {});
    const auto head = transformer::head_logits(tape, teacher, pass.hidden.back());
    TeacherLogits t;
    t.logits = tape.value(head.logits);
    if (head.kind == HeadKind::span) {
        t.end_logits = tape.value(head.end_logits);
    }
    return t;
}

namespace {

// KL(softmax(teacher/τ) ‖ softmax(student/τ)) for one row of logits.
Var soft_kl(Tape& tape, Var student, const Matrix& teacher, double temperature) {
    if (tape.value(student).cols() != teacher.cols() || teacher.rows() != 1) {
        throw ShapeError("kd_loss: student and teacher logits differ in shape");
    }
    const Matrix p = numerics::softmax_rows(numerics::scale(teacher, 1.0 / temperature));
    double entropy_term = 0.0;
    for (double v : p.data()) {
        if (v > 0.0) {
            entropy_term += v * std::log(v);
        }
    }
    const Var log_q = tape.log(tape.softmax_rows(tape.scale(student, 1.0 / temperature)));
    const Var cross = tape.sum(tape.mul(log_q, tape.constant(p)));
    return tape.add(tape.constant(Matrix(1, 1, entropy_term)), tape.scale(cross, -1.0));
}

} // namespace

Var kd_loss(Tape& tape, const transformer::HeadOutput& student, const TeacherLogits& teacher, const Label& gold,
            double temperature, double alpha) {
    if (!(temperature > 0.0) || alpha < 0.0 || alpha > 1.0) {
        throw ParameterError("kd_loss: need temperature > 0 and alpha in [0, 1]");
    }
    Var kl = soft_kl(tape, student.logits, teacher.logits, temperature);
    if (student.kind == HeadKind::span) {
        kl = tape.add(kl, soft_kl(tape, student.end_logits, teacher.end_logits, temperature));
    }
    const Var ce = transformer::task_loss(tape, student, gold);
    return tape.add(tape.scale(kl, alpha * temperature * temperature), tape.scale(ce, 1.0 - alpha));
}

Adam::Adam(const TrainConfig& config)
    : beta1_(config.adam_beta1), beta2_(config.adam_beta2), eps_(config.adam_eps) {}

void Adam::step(Model& model, const GradientSet& gradient, double learning_rate,
                const std::function<bool(const std::string&)>& filter) {
    step(model, gradient, [&](const std::string& name) { return !filter || filter(name) ? learning_rate : 0.0; });
}

void Adam::step(Model& model, const GradientSet& gradient, const std::function<double(const std::string&)>& rate) {
    ++state_.step;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
    model.for_each_parameter([&](Parameter& p) {
        const auto it = gradient.find(p.name);
        if (it == gradient.end()) {
            return;
        }
        const double learning_rate = rate(p.name);
        if (learning_rate == 0.0) {
            return;
        }
        const Matrix& g = it->second;
        if (!g.same_shape(p.value)) {
            throw ShapeError("Adam: gradient shape mismatch for " + p.name);
        }
        auto& m = state_.m.try_emplace(p.name, p.value.rows(), p.value.cols()).first->second;
        auto& v = state_.v.try_emplace(p.name, p.value.rows(), p.value.cols()).first->second;
        auto pd = p.value.data();
        auto gd = g.data();
        auto md = m.data();
        auto vd = v.data();
        for (std::size_t i = 0; i < pd.size(); ++i) {
            md[i] = beta1_ * md[i] + (1.0 - beta1_) * gd[i];
            vd[i] = beta2_ * vd[i] + (1.0 - beta2_) * gd[i] * gd[i];
            pd[i] -= learning_rate * (md[i] / c1) / (std::sqrt(vd[i] / c2) + eps_);
        }
    });
}

double scheduled_rate(double base, std::size_t step, std::size_t total_steps, double warmup_fraction) {
    if (total_steps == 0) {
        return base;
    }
    const double warm = std::max(1.0, std::ceil(warmup_fraction * static_cast<double>(total_steps)));
    const double s = static_cast<double>(step) + 1.0;
    if (s <= warm) {
        return base * s / warm;
    }
    const double rest = static_cast<double>(total_steps) - warm;
    return base * std::max(0.0, (static_cast<double>(total_steps) - s + 1.0) / std::max(rest, 1.0));
}

} // namespace tokenprune::rl
