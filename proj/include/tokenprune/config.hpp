#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tokenprune {

enum class HeadKind { classification, span };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& text);

using KeyValues = std::map<std::string, std::string>;

/// Parses flat `key=value` lines; blank lines and `#` comments are ignored.
KeyValues parse_key_values(const std::string& text);
std::string format_key_values(const KeyValues& kv);

struct ModelConfig {
    std::size_t num_layers = 6;
    std::size_t hidden = 32;
    std::size_t heads = 2;
    std::size_t ffn_inner = 64;
    std::size_t vocab_size = 256;
    std::size_t max_len = 64;
    // Module t sits before (0-based) layer reduction_positions[t]; its input is H_{p_t}.
    std::vector<std::size_t> reduction_positions{1, 2};
    HeadKind head_kind = HeadKind::classification;
    std::size_t num_classes = 4;
    // Initial sigmoid bias of every policy network.
    double policy_init_bias = 1.0;

    std::size_t head_dim() const { return hidden / heads; }
    std::size_t num_modules() const { return reduction_positions.size(); }

    /// Throws ParameterError on inconsistent settings.
    void validate() const;

    KeyValues to_key_values() const;
    /// Consumes the keys it knows; returns false when `key` is not a model key.
    bool apply(const std::string& key, const std::string& value);
};

struct TrainConfig {
    std::size_t num_action_samples = 8;
    // Unset means 0.5 for classification and 0.2 for span extraction.
    std::optional<double> imitation_fraction;
    double lambda = 0.01;
    std::size_t epochs = 3;
    std::size_t batch_size = 16;
    double learning_rate = 3e-3;          // stage 1
    double policy_learning_rate = 1e-2;   // policy networks, stages 2 and 3
    double finetune_learning_rate = 3e-4; // transformer and heads, stage 3
    double warmup_fraction = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double kd_temperature = 2.0;
    double kd_alpha = 0.5;
    double rl_beta = 0.1;
    double greedy_threshold = 0.5;
    double divergence_factor = 10.0;
    std::uint64_t seed = 1;

    double resolved_imitation_fraction(HeadKind kind) const;
    std::size_t stage_epochs(int stage) const;

    void validate() const;
    KeyValues to_key_values() const;
    bool apply(const std::string& key, const std::string& value);
};

} // namespace tokenprune
