#pragma once

#include "tokenprune/synthetic.hpp"
#include "tokenprune/transformer.hpp"

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace tokenprune::strategies {

enum class StrategyKind { random, attention, residual };

std::string to_string(StrategyKind kind);
StrategyKind parse_strategy(const std::string& text);

struct ImportanceScores {
    std::vector<double> scores; // one per original token
    StrategyKind kind = StrategyKind::random;
    std::size_t shallow_layer = 0; // l (residual), or accumulated layer count (attention)
    std::size_t deep_layer = 0;    // r (residual only)
};

/// I.i.d. uniform [0, 1) scores.
ImportanceScores random_importance(std::size_t n, std::uint64_t seed);

/// Attention mass each token receives, summed over layers 1..upto_layer, heads and query rows.
/// Needs a trace recorded with attention and no reduction.
ImportanceScores attention_importance(const transformer::LayerTrace& trace, std::size_t upto_layer);

/// First-order estimate of the task-loss increase when token j's layer-r state is replaced by its
/// layer-l state: ∂loss/∂H_r[j] · (H_l − H_r)[j]. Requires the gold label.
ImportanceScores residual_importance(const transformer::Model& model, std::span<const int> token_ids, const Label& gold,
                                     std::size_t shallow, std::size_t deep, double loss_scale = 1.0);

/// ⌈L/3⌉ and ⌈3L/4⌉.
std::size_t default_shallow_layer(std::size_t num_layers);
std::size_t default_deep_layer(std::size_t num_layers);

/// Top-k among `candidates` (original positions) by descending score, ties to the lower position.
/// Returns a mask over `candidates`.
std::vector<std::uint8_t> top_k_mask(std::span<const double> scores, std::span<const std::size_t> candidates, std::size_t k);
std::vector<std::uint8_t> top_k_mask(std::span<const double> scores, std::size_t k);

struct EliminationOptions {
    StrategyKind strategy = StrategyKind::residual;
    double keep_ratio = 0.2;
    std::size_t layer = 0; // eliminate after this many layers; 0 = default shallow layer
    std::size_t deep_layer = 0; // residual r; 0 = default
    std::uint64_t seed = 1;     // random strategy
};

struct EliminationResult {
    double metric = 0.0;
    double flops_speedup = 1.0;
    double mean_kept_fraction = 1.0;
};

/// Scores every example with the strategy, keeps the top ⌈keep_ratio·n⌉ tokens plus the anchor
/// after `layer` layers, and evaluates predictions from the mixed-layer final states.
EliminationResult theoretical_elimination_eval(const transformer::Model& model, const synthetic::Dataset& data,
                                               const EliminationOptions& options);

struct CurveRow {
    std::string strategy;
    double keep_ratio = 1.0;
    double metric = 0.0;
    double flops_speedup = 1.0;
};

void write_curve_csv(std::ostream& out, std::span<const CurveRow> rows);

} // namespace tokenprune::strategies
