#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/profiling.hpp"
#include "tokenprune/rl.hpp"
#include "tokenprune/synthetic.hpp"
#include "tokenprune/transformer.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tokenprune::pipeline {

using transformer::Model;

enum class EvalMode { greedy, sample, full };

std::string to_string(EvalMode mode);
EvalMode parse_eval_mode(const std::string& text);

struct EvalResult {
    double metric = 0.0;               // accuracy or token F1
    double mean_log_likelihood = 0.0;
    double mean_selected = 0.0;        // Σ Select actions per example, controlled tokens only
    double mean_select_prob = 1.0;     // mean π(Select) over controlled tokens
    double signal_recall = 1.0;        // over examples that carry signal tokens
    std::uint64_t flops = 0;
    std::uint64_t reference_flops = 0;
    double flops_speedup = 1.0;        // reference_flops / flops
    std::vector<profiling::FlopsRow> rows;
};

/// Runs every example through the model. `full` skips the reduction modules entirely.
EvalResult evaluate(const Model& model, const synthetic::Dataset& data, EvalMode mode, double threshold = 0.5,
                    std::uint64_t seed = 1);

struct HistoryRecord {
    int stage = 1;
    std::size_t epoch = 0; // 1-based within the stage
    double dev_metric = 0.0;
    double mean_selected = 0.0;
    double flops_speedup = 1.0;
    double reward_mean = 0.0;

    nlohmann::json to_json() const;
    static HistoryRecord from_json(const nlohmann::json& j);
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
    Model model;
    std::optional<Model> teacher;  // frozen stage-1 copy, set once stage 1 completes
    rl::AdamState optimizer;
    int stage = 1;                 // stage currently running; 4 = finished
    std::size_t epochs_done = 0;   // completed epochs of `stage`
    double stage1_log_likelihood = 0.0;
    std::vector<HistoryRecord> history;
};

TrainState initial_state(const ModelConfig& model_config, const TrainConfig& train_config);

struct PipelineHooks {
    /// Called after every completed epoch with the updated state; return false to stop early.
    std::function<bool(const TrainState&)> on_epoch;
    /// Stop once this stage is finished (0 = run to the end).
    int last_stage = 0;
};

/// Runs the remaining stages from `state`:
/// 1. task training of transformer and heads on the full model;
/// 2. policy-only training: imitation warmup for the first steps, REINFORCE afterwards;
/// 3. joint training with distillation from the stage-1 teacher plus β × REINFORCE.
/// Throws DivergenceError when the dev log-likelihood collapses relative to stage 1.
void train_pipeline(TrainState& state, const synthetic::Dataset& train, const synthetic::Dataset& dev,
                    const TrainConfig& config, const PipelineHooks& hooks = {});

struct WallTimeComparison {
    double flops_speedup = 1.0;  // Σ reference / Σ reduced over the batch
    double time_speedup = 1.0;   // full-model median time / reduced median time
    profiling::WallTime full;
    profiling::WallTime reduced;
};

/// Times greedy reduced inference against the full model on the same batch.
WallTimeComparison compare_wall_time(const Model& model, std::span<const synthetic::Example> batch,
                                     double threshold = 0.5, std::size_t repeats = 20);

/// Fingerprint over every non-policy parameter value.
std::uint64_t non_policy_hash(const Model& model);

} // namespace tokenprune::pipeline
