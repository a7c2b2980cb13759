#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/transformer.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

namespace tokenprune::profiling {

// Counting convention: 2 FLOPs per multiply-accumulate, matmuls only. Softmax, LayerNorm,
// GeLU, biases, embeddings and prediction heads are left out.

/// 8nd² (Q,K,V,O projections) + 4n²d (scores and context) + 4n·d·ffn_inner (FFN).
std::uint64_t layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t heads, std::uint64_t ffn_inner);
/// 2·n·(d·d_p + d_p) for one policy network over n tokens.
std::uint64_t policy_flops(std::uint64_t n, std::uint64_t d, std::uint64_t d_policy);

struct FlopsReport {
    std::vector<std::uint64_t> layer;   // per Transformer layer at its actual row count
    std::vector<std::uint64_t> policy;  // per executed reduction module
    std::uint64_t total = 0;            // Σ layer + Σ policy
    std::uint64_t reference_total = 0;  // all layers at the original length, no policy
    double speedup = 1.0;               // reference_total / total
};

/// `include_policy` = false for fixed heuristic masks that run no policy network.
FlopsReport trace_flops(const transformer::LayerTrace& trace, const ModelConfig& config, bool include_policy = true);

struct FlopsRow {
    std::size_t example_id = 0;
    std::size_t orig_len = 0;
    std::uint64_t flops = 0;
    std::uint64_t reference_flops = 0;
    double speedup = 1.0;
};

void write_flops_csv(std::ostream& out, std::span<const FlopsRow> rows);

struct WallTime {
    double median_seconds = 0.0;
    std::size_t repeats = 0;
    std::size_t inner_iterations = 1; // work() calls per timed sample
    bool enlarged = false;            // resolution too coarse at one call per sample
};

/// Median over `repeats` timed samples after `warmup` untimed calls. Samples shorter than
/// `min_sample_seconds` are enlarged by repeating the work inside each sample.
WallTime measure_wall_time(const std::function<void()>& work, std::size_t repeats = 20, std::size_t warmup = 2,
                           double min_sample_seconds = 2e-3);

double spearman(std::span<const double> x, std::span<const double> y);

} // namespace tokenprune::profiling
