#include "tokenprune/reduction.hpp"

#include "tokenprune/errors.hpp"

#include <algorithm>
#include <map>

namespace tokenprune::reduction {

Var policy_logits(Tape& tape, Var states, const PolicyParams& params) {
    const Var inner = tape.gelu(tape.add_row(tape.matmul(states, tape.parameter(params.w1)), tape.parameter(params.b1)));
    return tape.add_row(tape.matmul(inner, tape.parameter(params.w2)), tape.parameter(params.b2));
}

std::vector<double> policy_probs(const Matrix& states, const PolicyParams& params) {
    if (states.rows() == 0) {
        throw InputError("policy_probs: no tokens");
    }
    Tape tape;
    const Matrix& p = tape.value(tape.sigmoid(policy_logits(tape, tape.constant(states), params)));
    return {p.data().begin(), p.data().end()};
}

Var log_policy(Tape& tape, const Matrix& states, const PolicyParams& params, std::span<const std::uint8_t> actions,
               std::span<const std::uint8_t> include) {
    const std::size_t n = states.rows();
    if (actions.size() != n || include.size() != n) {
        throw ShapeError("log_policy: action/include length does not match state rows");
    }
    Matrix select_coef(n, 1);
    Matrix skip_coef(n, 1);
    for (std::size_t j = 0; j < n; ++j) {
        if (include[j] == 0) {
            continue;
        }
        (actions[j] != 0 ? select_coef : skip_coef)(j, 0) = 1.0;
    }
    const Var z = policy_logits(tape, tape.constant(states), params);
    // log(1 - σ(z)) = log σ(-z)
    const Var log_select = tape.log_sigmoid(z);
    const Var log_skip = tape.log_sigmoid(tape.scale(z, -1.0));
    return tape.add(tape.sum(tape.mul(log_select, tape.constant(std::move(select_coef)))),
                    tape.sum(tape.mul(log_skip, tape.constant(std::move(skip_coef)))));
}

std::vector<std::uint8_t> decide(std::span<const double> probs, DecisionMode mode, Rng* rng, double threshold) {
    std::vector<std::uint8_t> out(probs.size());
    if (mode == DecisionMode::sample && rng == nullptr) {
        throw ContractError("decide: sampling needs a generator");
    }
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (mode == DecisionMode::sample) {
            out[i] = uniform01(*rng) < probs[i] ? 1 : 0;
        } else {
            out[i] = probs[i] >= threshold ? 1 : 0;
        }
    }
    return out;
}

Gate policy_gate(const Model& model, DecisionMode mode, Rng* rng, double threshold) {
    return [&model, mode, rng, threshold](std::size_t module, const Matrix& states, std::span<const std::size_t>) {
        transformer::GateDecision d;
        d.probs = policy_probs(states, model.policies.at(module));
        d.select = decide(d.probs, mode, rng, threshold);
        return d;
    };
}

Gate plan_gate(const ActionPlan& plan) {
    return [plan](std::size_t module, const Matrix&, std::span<const std::size_t> survivors) {
        const auto& rec = plan.modules.at(module);
        if (!std::equal(survivors.begin(), survivors.end(), rec.survivors_in.begin(), rec.survivors_in.end())) {
            throw ContractError("plan_gate: survivors differ from the recorded plan");
        }
        return transformer::GateDecision{rec.action, rec.probs};
    };
}

Gate mask_gate(std::vector<std::vector<std::uint8_t>> masks) {
    return [masks = std::move(masks)](std::size_t module, const Matrix&, std::span<const std::size_t>) {
        return transformer::GateDecision{masks.at(module), {}};
    };
}

Gate position_gate(std::vector<std::vector<std::uint8_t>> keep) {
    return [keep = std::move(keep)](std::size_t module, const Matrix&, std::span<const std::size_t> survivors) {
        transformer::GateDecision d;
        for (std::size_t pos : survivors) {
            d.select.push_back(keep.at(module).at(pos));
        }
        return d;
    };
}

TapedForward reduced_forward(Tape& tape, const Model& model, std::span<const int> token_ids, const Gate& gate,
                             const ReduceOptions& options) {
    transformer::ForwardOptions fo;
    fo.gate = &gate;
    fo.protect_anchor = options.protect_anchor;
    fo.record_attention = options.record_attention;
    fo.positions = options.positions;
    return transformer::forward(tape, model, token_ids, fo);
}

LayerTrace reduced_forward(const Model& model, std::span<const int> token_ids, const Gate& gate,
                           const ReduceOptions& options) {
    Tape tape;
    return std::move(reduced_forward(tape, model, token_ids, gate, options).trace);
}

namespace {

// Row index of original token `pos` inside hidden[layer].
std::size_t row_of(const LayerTrace& trace, std::size_t layer, std::size_t pos) {
    const auto& s = trace.survivors.at(layer);
    const auto it = std::lower_bound(s.begin(), s.end(), pos);
    if (it == s.end() || *it != pos) {
        throw ContractError("assemble_final_states: token missing from its termination layer");
    }
    return static_cast<std::size_t>(it - s.begin());
}

} // namespace

Matrix assemble_final_states(const LayerTrace& trace) {
    const std::size_t n = trace.num_tokens();
    if (n == 0 || trace.hidden.empty()) {
        throw ContractError("assemble_final_states: incomplete trace");
    }
    Matrix out(n, trace.hidden.front().cols());
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t layer = trace.termination_layer[j];
        const auto src = trace.hidden.at(layer).row(row_of(trace, layer, j));
        std::copy(src.begin(), src.end(), out.row(j).begin());
    }
    return out;
}

Var assemble_final_states(Tape& tape, const TapedForward& pass) {
    const LayerTrace& trace = pass.trace;
    const std::size_t n = trace.num_tokens();
    // Gather each termination layer's rows, concatenate, then permute back to original order.
    std::map<std::size_t, std::vector<std::size_t>> by_layer;
    for (std::size_t j = 0; j < n; ++j) {
        by_layer[trace.termination_layer[j]].push_back(j);
    }
    if (by_layer.size() == 1 && by_layer.begin()->first == trace.num_layers() &&
        trace.survivors.back().size() == n) {
        return pass.hidden.back();
    }
    std::vector<Var> parts;
    std::vector<std::size_t> order;
    for (const auto& [layer, tokens] : by_layer) {
        std::vector<std::size_t> rows;
        for (std::size_t j : tokens) {
            rows.push_back(row_of(trace, layer, j));
            order.push_back(j);
        }
        parts.push_back(tape.gather_rows(pass.hidden.at(layer), std::move(rows)));
    }
    const Var stacked = tape.concat_rows(parts);
    std::vector<std::size_t> inverse(n);
    for (std::size_t i = 0; i < order.size(); ++i) {
        inverse[order[i]] = i;
    }
    return tape.gather_rows(stacked, std::move(inverse));
}

nlohmann::json trace_to_json(const LayerTrace& trace, std::span<const int> token_ids) {
    nlohmann::json j;
    j["num_layers"] = trace.num_layers();
    j["tokens"] = std::vector<int>(token_ids.begin(), token_ids.end());
    j["termination_layer"] = trace.termination_layer;
    j["fallback_used"] = trace.fallback_used;
    nlohmann::json modules = nlohmann::json::array();
    for (const auto& m : trace.plan.modules) {
        nlohmann::json jm;
        jm["position"] = m.position;
        jm["survivors"] = m.survivors_in;
        jm["probs"] = m.probs;
        jm["action"] = m.action;
        jm["select"] = m.select;
        jm["fallback"] = m.fallback;
        jm["selected_count"] = m.selected_count();
        modules.push_back(std::move(jm));
    }
    j["modules"] = std::move(modules);
    return j;
}

} // namespace tokenprune::reduction
