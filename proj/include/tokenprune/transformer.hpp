#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/matrix.hpp"
#include "tokenprune/tape.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace tokenprune {

using numerics::Matrix;
using numerics::Parameter;
using numerics::Tape;
using numerics::Var;

struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    friend bool operator==(const Span&, const Span&) = default;
};

/// Class id for classification, inclusive (start, end) for span extraction.
using Label = std::variant<std::size_t, Span>;

namespace transformer {

struct AttentionParams {
    std::vector<Parameter> query_w, query_b, key_w, key_b, value_w, value_b, out_w; // one per head
    Parameter out_b;
};

struct LayerParams {
    AttentionParams attention;
    Parameter ln1_gamma, ln1_beta;
    Parameter ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
    Parameter ln2_gamma, ln2_beta;
};

/// Per-module token scorer: sigmoid(W2ᵀ GeLU(W1ᵀ h + b1) + b2).
struct PolicyParams {
    Parameter w1; // d × d_p
    Parameter b1; // 1 × d_p
    Parameter w2; // d_p × 1
    Parameter b2; // 1 × 1
};

struct HeadParams {
    Parameter cls_w, cls_b;          // classification from the anchor state
    Parameter span_start, span_end;  // 1 × d scorers over every token
};

struct Model {
    ModelConfig config;
    Parameter token_embedding, position_embedding, embed_ln_gamma, embed_ln_beta;
    std::vector<LayerParams> layers;
    std::vector<PolicyParams> policies;
    HeadParams head;

    static Model initialize(const ModelConfig& config, std::uint64_t seed);

    template <class F>
    void for_each_parameter(F&& fn) {
        visit(*this, fn);
    }
    template <class F>
    void for_each_parameter(F&& fn) const {
        visit(*this, fn);
    }

    std::size_t parameter_count() const;
    /// Looks up a parameter by name; nullptr when absent.
    Parameter* find(const std::string& name);

private:
    template <class Self, class F>
    static void visit(Self& m, F& fn) {
        fn(m.token_embedding);
        fn(m.position_embedding);
        fn(m.embed_ln_gamma);
        fn(m.embed_ln_beta);
        for (auto& l : m.layers) {
            for (std::size_t h = 0; h < l.attention.query_w.size(); ++h) {
                fn(l.attention.query_w[h]);
                fn(l.attention.query_b[h]);
                fn(l.attention.key_w[h]);
                fn(l.attention.key_b[h]);
                fn(l.attention.value_w[h]);
                fn(l.attention.value_b[h]);
                fn(l.attention.out_w[h]);
            }
            fn(l.attention.out_b);
            fn(l.ln1_gamma);
            fn(l.ln1_beta);
            fn(l.ffn_in_w);
            fn(l.ffn_in_b);
            fn(l.ffn_out_w);
            fn(l.ffn_out_b);
            fn(l.ln2_gamma);
            fn(l.ln2_beta);
        }
        for (auto& p : m.policies) {
            fn(p.w1);
            fn(p.b1);
            fn(p.w2);
            fn(p.b2);
        }
        fn(m.head.cls_w);
        fn(m.head.cls_b);
        fn(m.head.span_start);
        fn(m.head.span_end);
    }
};

inline bool is_policy_parameter(const std::string& name) { return name.rfind("policy", 0) == 0; }

// ---------------------------------------------------------------------------
// Layer-level operations

/// Token embedding + position embedding, then LayerNorm.
Var embed(Tape& tape, const Model& model, std::span<const int> token_ids, std::span<const std::size_t> positions);
Matrix embed(const Model& model, std::span<const int> token_ids, std::span<const std::size_t> positions);

struct LayerOutput {
    Var hidden;
    std::vector<Var> attention; // per head, n × n, rows sum to one
};

/// M = LN(H + SelfATT(H)); H' = LN(M + FFN(M)).
LayerOutput layer_forward(Tape& tape, Var hidden, const LayerParams& params);
Matrix layer_forward(const Matrix& hidden, const LayerParams& params);

// ---------------------------------------------------------------------------
// Prediction heads

struct HeadOutput {
    HeadKind kind = HeadKind::classification;
    Var logits;     // 1 × classes, or 1 × n start logits
    Var end_logits; // span only: 1 × n
};

struct Prediction {
    HeadKind kind = HeadKind::classification;
    std::vector<double> class_probs;
    std::vector<double> start_probs;
    std::vector<double> end_probs;
};

/// `final_states` holds one row per original token in original order (row 0 = anchor).
HeadOutput head_logits(Tape& tape, const Model& model, Var final_states);
Prediction predict(const Model& model, const Matrix& final_states);
Prediction to_prediction(const Tape& tape, const HeadOutput& out);

/// Cross-entropy of the gold label (sum of start and end terms for spans).
Var task_loss(Tape& tape, const HeadOutput& out, const Label& gold);
/// log Pr(gold) under `pred`; -inf when the gold probability underflows to zero.
double log_likelihood(const Prediction& pred, const Label& gold);

/// Argmax class, or the best (start, end) pair with start <= end < start + max_span.
Label decode(const Prediction& pred, std::size_t max_span = 16);
/// 1/0 accuracy for classes, token-overlap F1 for spans.
double score(const Label& predicted, const Label& gold);

// ---------------------------------------------------------------------------
// Forward passes with optional token reduction

/// What a reduction module did to the tokens entering it.
struct ModuleActions {
    std::size_t position = 0;                 // sits before this 0-based layer; input state is H_position
    std::vector<std::size_t> survivors_in;    // original positions entering the module
    std::vector<double> probs;                // π(Select) per entering token; empty for fixed masks
    std::vector<std::uint8_t> action;         // decision before overrides (1 = Select)
    std::vector<std::uint8_t> select;         // effective mask after anchor protection / fallback
    std::vector<std::uint8_t> controlled;     // 0 where the decision is overridden by anchor protection
    bool fallback = false;                    // selection was empty, anchor forced back in

    /// Σ action over controlled tokens: the count penalised by the reward.
    std::size_t selected_count() const;
};

struct ActionPlan {
    std::vector<ModuleActions> modules;
    std::size_t selected_count() const;
};

struct LayerTrace {
    std::vector<Matrix> hidden;                           // H_0 (embeddings) … H_L
    std::vector<std::vector<std::size_t>> survivors;      // original positions of the rows of hidden[i]
    std::vector<std::size_t> termination_layer;           // per original token
    std::vector<std::vector<Matrix>> attention;           // [layer][head] when recorded
    ActionPlan plan;
    bool fallback_used = false;

    std::size_t num_tokens() const { return termination_layer.size(); }
    std::size_t num_layers() const { return hidden.empty() ? 0 : hidden.size() - 1; }
};

struct GateDecision {
    std::vector<std::uint8_t> select;
    std::vector<double> probs;
};

/// Called at every reduction module with the module's input state and the original positions of its rows.
using Gate = std::function<GateDecision(std::size_t module, const Matrix& states, std::span<const std::size_t> survivors)>;

struct ForwardOptions {
    const Gate* gate = nullptr;                            // no gate: every module is a no-op
    std::optional<std::vector<std::size_t>> positions;    // overrides config.reduction_positions
    bool protect_anchor = true;
    bool record_attention = false;
};

struct TapedForward {
    LayerTrace trace;
    std::vector<Var> hidden; // tape nodes matching trace.hidden
};

TapedForward forward(Tape& tape, const Model& model, std::span<const int> token_ids, const ForwardOptions& options);

/// All L layers, no reduction; termination layer L for every token.
LayerTrace full_forward(const Model& model, std::span<const int> token_ids, bool record_attention = false);

/// Runs layers [from, to) on `hidden`.
Var run_layers(Tape& tape, const Model& model, Var hidden, std::size_t from, std::size_t to);

} // namespace transformer
} // namespace tokenprune
