#include "tokenprune/pipeline.hpp"

#include "tokenprune/errors.hpp"
#include "tokenprune/reduction.hpp"
#include "tokenprune/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace tokenprune::pipeline {

std::string to_string(EvalMode mode) {
    switch (mode) {
    case EvalMode::greedy:
        return "greedy";
    case EvalMode::sample:
        return "sample";
    case EvalMode::full:
        return "full";
    }
    return "unknown";
}

EvalMode parse_eval_mode(const std::string& text) {
    if (text == "greedy") {
        return EvalMode::greedy;
    }
    if (text == "sample") {
        return EvalMode::sample;
    }
    if (text == "full") {
        return EvalMode::full;
    }
    throw ParameterError("unknown eval mode '" + text + "'");
}

EvalResult evaluate(const Model& model, const synthetic::Dataset& data, EvalMode mode, double threshold,
                    std::uint64_t seed) {
    EvalResult res;
    if (data.examples.empty()) {
        return res;
    }
    double metric = 0.0;
    double loglik = 0.0;
    double selected = 0.0;
    double prob_sum = 0.0;
    std::size_t prob_count = 0;
    double recall = 0.0;
    std::size_t recall_count = 0;
    for (std::size_t i = 0; i < data.examples.size(); ++i) {
        const auto& ex = data.examples[i];
        transformer::LayerTrace trace;
        if (mode == EvalMode::full) {
            trace = transformer::full_forward(model, ex.tokens);
        } else {
            Rng rng = make_stream(seed, "eval_sample", i);
            const auto gate = reduction::policy_gate(
                model, mode == EvalMode::sample ? reduction::DecisionMode::sample : reduction::DecisionMode::greedy,
                &rng, threshold);
            trace = reduction::reduced_forward(model, ex.tokens, gate);
        }
        const auto pred = transformer::predict(model, reduction::assemble_final_states(trace));
        metric += transformer::score(transformer::decode(pred), ex.label);
        loglik += std::max(transformer::log_likelihood(pred, ex.label), rl::kLogFloor);
        selected += static_cast<double>(trace.plan.selected_count());
        for (const auto& m : trace.plan.modules) {
            for (std::size_t j = 0; j < m.probs.size(); ++j) {
                if (m.controlled[j] != 0) {
                    prob_sum += m.probs[j];
                    ++prob_count;
                }
            }
        }
        if (std::count(ex.signal.begin(), ex.signal.end(), 1) > 0) {
            recall += synthetic::selection_recall(trace, ex.signal);
            ++recall_count;
        }
        const auto report = profiling::trace_flops(trace, model.config, mode != EvalMode::full);
        res.rows.push_back({i, ex.tokens.size(), report.total, report.reference_total, report.speedup});
        res.flops += report.total;
        res.reference_flops += report.reference_total;
    }
    const double n = static_cast<double>(data.examples.size());
    res.metric = metric / n;
    res.mean_log_likelihood = loglik / n;
    res.mean_selected = selected / n;
    res.mean_select_prob = prob_count == 0 ? 1.0 : prob_sum / static_cast<double>(prob_count);
    res.signal_recall = recall_count == 0 ? 1.0 : recall / static_cast<double>(recall_count);
    res.flops_speedup = static_cast<double>(res.reference_flops) / static_cast<double>(res.flops);
    return res;
}

nlohmann::json HistoryRecord::to_json() const {
    return {{"stage", stage},
            {"epoch", epoch},
            {"dev_metric", dev_metric},
            {"mean_selected", mean_selected},
            {"flops_speedup", flops_speedup},
            {"reward_mean", reward_mean}};
}

HistoryRecord HistoryRecord::from_json(const nlohmann::json& j) {
    HistoryRecord r;
    r.stage = j.at("stage").get<int>();
    r.epoch = j.at("epoch").get<std::size_t>();
    r.dev_metric = j.at("dev_metric").get<double>();
    r.mean_selected = j.at("mean_selected").get<double>();
    r.flops_speedup = j.at("flops_speedup").get<double>();
    r.reward_mean = j.at("reward_mean").get<double>();
    return r;
}

TrainState initial_state(const ModelConfig& model_config, const TrainConfig& train_config) {
    model_config.validate();
    train_config.validate();
    return TrainState{Model::initialize(model_config, train_config.seed), std::nullopt, {}, 1, 0, 0.0, {}};
}

WallTimeComparison compare_wall_time(const Model& model, std::span<const synthetic::Example> batch, double threshold,
                                     std::size_t repeats) {
    WallTimeComparison cmp;
    const auto gate = reduction::policy_gate(model, reduction::DecisionMode::greedy, nullptr, threshold);
    std::uint64_t flops = 0;
    std::uint64_t reference = 0;
    for (const auto& ex : batch) {
        const auto report = profiling::trace_flops(reduction::reduced_forward(model, ex.tokens, gate), model.config);
        flops += report.total;
        reference += report.reference_total;
    }
    cmp.flops_speedup = flops == 0 ? 1.0 : static_cast<double>(reference) / static_cast<double>(flops);
    cmp.full = profiling::measure_wall_time(
        [&] {
            for (const auto& ex : batch) {
                const auto trace = transformer::full_forward(model, ex.tokens);
                (void)transformer::predict(model, trace.hidden.back());
            }
        },
        repeats);
    cmp.reduced = profiling::measure_wall_time(
        [&] {
            for (const auto& ex : batch) {
                const auto trace = reduction::reduced_forward(model, ex.tokens, gate);
                (void)transformer::predict(model, reduction::assemble_final_states(trace));
            }
        },
        repeats);
    cmp.time_speedup = cmp.full.median_seconds / cmp.reduced.median_seconds;
    return cmp;
}

std::uint64_t non_policy_hash(const Model& model) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    model.for_each_parameter([&](const Parameter& p) {
        if (transformer::is_policy_parameter(p.name)) {
            return;
        }
        h = splitmix64(h ^ fnv1a(p.name));
        for (double v : p.value.data()) {
            std::uint64_t bits = 0;
            std::memcpy(&bits, &v, sizeof bits);
            h = splitmix64(h ^ bits);
        }
    });
    return h;
}

namespace {

bool is_policy(const std::string& name) { return transformer::is_policy_parameter(name); }
bool is_not_policy(const std::string& name) { return !transformer::is_policy_parameter(name); }

void check_finite(const Model& model) {
    model.for_each_parameter([](const Parameter& p) {
        if (!p.value.all_finite()) {
            throw DivergenceError("non-finite values in parameter " + p.name);
        }
    });
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int stage, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_stream(seed, "shuffle", static_cast<std::uint64_t>(stage) * 1000 + epoch);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// Example-level gradient contributions for one optimisation step.
struct StepContext {
    TrainState& state;
    const synthetic::Dataset& train;
    const TrainConfig& config;
    const std::vector<rl::TeacherLogits>* teacher = nullptr;
    double reward_sum = 0.0;
    std::size_t reward_count = 0;
};

numerics::GradientSet stage1_gradient(StepContext& ctx, std::size_t index) {
    const auto& ex = ctx.train.examples[index];
    Tape tape;
    const auto pass = transformer::forward(tape, ctx.state.model, ex.tokens, {});
    const auto head = transformer::head_logits(tape, ctx.state.model, pass.hidden.back());
    const Var loss = transformer::task_loss(tape, head, ex.label);
    ctx.reward_sum += -tape.value(loss)(0, 0);
    ++ctx.reward_count;
    return numerics::grad(tape, loss);
}

numerics::GradientSet imitation_gradient(StepContext& ctx, std::size_t index) {
    const auto& ex = ctx.train.examples[index];
    const auto targets = rl::imitation_targets(ctx.state.model, ex.tokens, ex.label);
    Tape tape;
    const Var loss = rl::imitation_loss(tape, ctx.state.model, targets.trace);
    ctx.reward_sum += -tape.value(loss)(0, 0);
    ++ctx.reward_count;
    return numerics::grad(tape, loss);
}

numerics::GradientSet reinforce_descent(StepContext& ctx, std::size_t index, Rng& rng) {
    const auto& ex = ctx.train.examples[index];
    auto est = rl::reinforce_gradient(ctx.state.model, ex.tokens, ex.label, ctx.config.lambda,
                                      ctx.config.num_action_samples, rng);
    for (const auto& r : est.rewards) {
        ctx.reward_sum += r.total;
        ++ctx.reward_count;
    }
    numerics::GradientSet descent;
    numerics::accumulate(descent, est.gradient, -1.0);
    return descent;
}

numerics::GradientSet stage3_gradient(StepContext& ctx, std::size_t index, Rng& rng) {
    const auto& ex = ctx.train.examples[index];
    numerics::GradientSet total = reinforce_descent(ctx, index, rng);
    for (auto& [name, g] : total) {
        g = numerics::scale(g, ctx.config.rl_beta);
    }
    // The student distils under the plan it would execute at inference time.
    const auto gate =
        reduction::policy_gate(ctx.state.model, reduction::DecisionMode::greedy, nullptr, ctx.config.greedy_threshold);
    Tape tape;
    const auto pass = reduction::reduced_forward(tape, ctx.state.model, ex.tokens, gate);
    const Var states = reduction::assemble_final_states(tape, pass);
    const auto head = transformer::head_logits(tape, ctx.state.model, states);
    const Var loss = rl::kd_loss(tape, head, ctx.teacher->at(index), ex.label, ctx.config.kd_temperature,
                                 ctx.config.kd_alpha);
    numerics::accumulate(total, numerics::grad(tape, loss));
    return total;
}

HistoryRecord record_epoch(TrainState& state, const synthetic::Dataset& dev, const TrainConfig& config,
                           double reward_mean, EvalResult* eval_out) {
    const EvalMode mode = state.stage == 1 ? EvalMode::full : EvalMode::greedy;
    EvalResult eval = evaluate(state.model, dev, mode, config.greedy_threshold, config.seed);
    HistoryRecord rec;
    rec.stage = state.stage;
    rec.epoch = state.epochs_done;
    rec.dev_metric = eval.metric;
    rec.mean_selected = eval.mean_selected;
    rec.flops_speedup = eval.flops_speedup;
    rec.reward_mean = reward_mean;
    if (eval_out != nullptr) {
        *eval_out = std::move(eval);
    }
    return rec;
}

} // namespace

void train_pipeline(TrainState& state, const synthetic::Dataset& train, const synthetic::Dataset& dev,
                    const TrainConfig& config, const PipelineHooks& hooks) {
    config.validate();
    if (train.examples.empty() || dev.examples.empty()) {
        throw InputError("train_pipeline: train and dev sets must be non-empty");
    }
    const std::size_t batches = (train.examples.size() + config.batch_size - 1) / config.batch_size;
    std::vector<rl::TeacherLogits> teacher_cache;

    while (state.stage <= 3) {
        const int stage = state.stage;
        const std::size_t epochs = config.stage_epochs(stage);
        const std::size_t total_steps = epochs * batches;
        const double base_lr = stage == 1 ? config.learning_rate
                               : stage == 2 ? config.policy_learning_rate
                                            : config.finetune_learning_rate;
        const auto imitation_steps = static_cast<std::size_t>(
            std::llround(config.resolved_imitation_fraction(state.model.config.head_kind) * static_cast<double>(total_steps)));

        if (stage == 3 && teacher_cache.empty()) {
            if (!state.teacher) {
                throw ContractError("stage 3 needs the stage-1 teacher");
            }
            teacher_cache.reserve(train.examples.size());
            for (const auto& ex : train.examples) {
                teacher_cache.push_back(rl::teacher_logits(*state.teacher, ex.tokens));
            }
        }

        rl::Adam adam(config);
        adam.state() = state.optimizer;

        while (state.epochs_done < epochs) {
            const std::size_t epoch = state.epochs_done;
            const auto order = epoch_order(train.examples.size(), config.seed, stage, epoch);
            Rng rng = make_stream(config.seed, "policy_sampling", static_cast<std::uint64_t>(stage) * 1000 + epoch);
            StepContext ctx{state, train, config, &teacher_cache};
            for (std::size_t b = 0; b < batches; ++b) {
                const std::size_t step = epoch * batches + b;
                const std::size_t begin = b * config.batch_size;
                const std::size_t end = std::min(begin + config.batch_size, order.size());
                numerics::GradientSet batch_grad;
                for (std::size_t i = begin; i < end; ++i) {
                    numerics::GradientSet g;
                    if (stage == 1) {
                        g = stage1_gradient(ctx, order[i]);
                    } else if (stage == 2) {
                        g = step < imitation_steps ? imitation_gradient(ctx, order[i])
                                                   : reinforce_descent(ctx, order[i], rng);
                    } else {
                        g = stage3_gradient(ctx, order[i], rng);
                    }
                    numerics::accumulate(batch_grad, g, 1.0 / static_cast<double>(end - begin));
                }
                const double lr = rl::scheduled_rate(base_lr, step, total_steps, config.warmup_fraction);
                if (stage == 1) {
                    adam.step(state.model, batch_grad, lr, is_not_policy);
                } else if (stage == 2) {
                    adam.step(state.model, batch_grad, lr, is_policy);
                } else {
                    const double policy_lr =
                        rl::scheduled_rate(config.policy_learning_rate, step, total_steps, config.warmup_fraction);
                    adam.step(state.model, batch_grad,
                              [&](const std::string& name) { return is_policy(name) ? policy_lr : lr; });
                }
            }
            check_finite(state.model);
            ++state.epochs_done;
            state.optimizer = adam.state();

            EvalResult eval;
            const double reward_mean = ctx.reward_count == 0 ? 0.0 : ctx.reward_sum / static_cast<double>(ctx.reward_count);
            state.history.push_back(record_epoch(state, dev, config, reward_mean, &eval));
            if (stage == 1) {
                state.stage1_log_likelihood = eval.mean_log_likelihood;
            } else if (stage == 3 || state.epochs_done * batches > imitation_steps) {
                // Epochs of pure imitation warmup are not checked: the policy is not yet optimising the task.
                const double reference = std::max(-state.stage1_log_likelihood, 0.1);
                if (!std::isfinite(eval.mean_log_likelihood) ||
                    -eval.mean_log_likelihood > config.divergence_factor * reference) {
                    throw DivergenceError("dev log-likelihood " + std::to_string(eval.mean_log_likelihood) +
                                          " degraded more than " + std::to_string(config.divergence_factor) +
                                          "x from the stage-1 level " + std::to_string(state.stage1_log_likelihood));
                }
            }

            if (state.epochs_done == epochs) {
                if (stage == 1) {
                    state.teacher = state.model;
                }
                state.stage = stage + 1;
                state.epochs_done = 0;
                state.optimizer = {};
            }
            if (hooks.on_epoch && !hooks.on_epoch(state)) {
                return;
            }
            if (state.stage != stage) {
                break;
            }
        }
        if (hooks.last_stage != 0 && stage >= hooks.last_stage) {
            return;
        }
    }
}

} // namespace tokenprune::pipeline
