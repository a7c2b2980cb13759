#pragma once

#include "tokenprune/rng.hpp"
#include "tokenprune/transformer.hpp"

#include <json.hpp>

#include <span>
#include <vector>

namespace tokenprune::reduction {

using transformer::ActionPlan;
using transformer::Gate;
using transformer::LayerTrace;
using transformer::Model;
using transformer::PolicyParams;
using transformer::TapedForward;

/// Per-token Select logits, n × 1.
Var policy_logits(Tape& tape, Var states, const PolicyParams& params);
/// π(Select | h) for every row of `states`.
std::vector<double> policy_probs(const Matrix& states, const PolicyParams& params);

/// Σ_j log π(actions[j] | states[j]) over rows with include[j] != 0. `states` enters as a constant,
/// so only the policy parameters receive gradient.
Var log_policy(Tape& tape, const Matrix& states, const PolicyParams& params, std::span<const std::uint8_t> actions,
               std::span<const std::uint8_t> include);

enum class DecisionMode { sample, greedy };

/// sample: independent Bernoulli(p) draws from `rng`; greedy: Select iff p >= threshold.
std::vector<std::uint8_t> decide(std::span<const double> probs, DecisionMode mode, Rng* rng, double threshold = 0.5);

/// Gate that scores survivors with the module's policy and decides with `mode`.
/// `rng` must outlive the gate when sampling.
Gate policy_gate(const Model& model, DecisionMode mode, Rng* rng, double threshold = 0.5);
/// Replays the pre-override actions of a recorded plan (probabilities are carried over).
Gate plan_gate(const ActionPlan& plan);
/// Fixed masks over each module's entering tokens.
Gate mask_gate(std::vector<std::vector<std::uint8_t>> masks);
/// Masks given over original positions; each module keeps the survivors flagged in `keep[t]`.
Gate position_gate(std::vector<std::vector<std::uint8_t>> keep);

struct ReduceOptions {
    bool protect_anchor = true;
    bool record_attention = false;
    std::optional<std::vector<std::size_t>> positions;
};

TapedForward reduced_forward(Tape& tape, const Model& model, std::span<const int> token_ids, const Gate& gate,
                             const ReduceOptions& options = {});
LayerTrace reduced_forward(const Model& model, std::span<const int> token_ids, const Gate& gate,
                           const ReduceOptions& options = {});

/// Row j = H_{termination_layer(j)} at token j, original order.
Matrix assemble_final_states(const LayerTrace& trace);
Var assemble_final_states(Tape& tape, const TapedForward& pass);

/// Diagnostic dump: tokens, termination layers, and per-module probabilities and masks.
nlohmann::json trace_to_json(const LayerTrace& trace, std::span<const int> token_ids);

} // namespace tokenprune::reduction
