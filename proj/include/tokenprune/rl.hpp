#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/reduction.hpp"
#include "tokenprune/rng.hpp"
#include "tokenprune/tape.hpp"
#include "tokenprune/transformer.hpp"

#include <functional>
#include <span>
#include <vector>

namespace tokenprune::rl {

using numerics::GradientSet;
using transformer::Model;

/// Floor applied to log-likelihoods of zero-probability labels.
inline constexpr double kLogFloor = -1e9;

struct RewardBreakdown {
    double log_likelihood = 0.0;
    std::size_t selected_count = 0;
    double lambda = 0.0;
    double total = 0.0;
    bool clamped = false; // gold probability was zero; log_likelihood holds kLogFloor

    static RewardBreakdown make(double log_likelihood, std::size_t selected_count, double lambda);
};

/// R = log Pr(gold | assembled final states) − λ · (Select actions over controlled tokens, all modules).
RewardBreakdown compute_reward(const Model& model, const transformer::LayerTrace& trace, const Label& gold,
                               double lambda);

struct Rollout {
    transformer::LayerTrace trace;
    RewardBreakdown reward;
};

/// One sampled plan: reduced forward with Bernoulli decisions drawn from `rng`.
Rollout rollout(const Model& model, std::span<const int> token_ids, const Label& gold, double lambda, Rng& rng,
                const reduction::ReduceOptions& options = {});

/// Σ_t Σ_j log π(a_tj | s_tj) of a recorded plan, over controlled tokens only.
Var plan_log_prob(Tape& tape, const Model& model, const transformer::LayerTrace& trace);

struct ReinforceEstimate {
    GradientSet gradient; // ascent direction on policy parameters
    std::vector<RewardBreakdown> rewards;
    double baseline = 0.0;
};

/// K sampled plans for one example. With the mean baseline the estimate is
/// (1/(K−1)) Σ_k (R_k − b) ∇ log π(plan_k), which is unbiased; K = 1 gives zero.
/// Without a baseline it is (1/K) Σ_k R_k ∇ log π(plan_k).
ReinforceEstimate reinforce_gradient(const Model& model, std::span<const int> token_ids, const Label& gold,
                                     double lambda, std::size_t num_samples, Rng& rng, bool use_baseline = true,
                                     const reduction::ReduceOptions& options = {});

/// Same estimator from already-evaluated rollouts (order fixed by index).
GradientSet reinforce_gradient(const Model& model, std::span<const Rollout> rollouts, bool use_baseline = true);

/// Round-half-up of Σ probs, clamped to [1, probs.size()].
std::size_t expected_select_count(std::span<const double> probs);

struct ImitationTargets {
    transformer::LayerTrace trace;           // forward pass taken under the target masks
    std::vector<std::vector<std::uint8_t>> masks; // per module, over its entering survivors
};

/// Top-K residual-importance tokens among each module's survivors, K from the current policy.
ImitationTargets imitation_targets(const Model& model, std::span<const int> token_ids, const Label& gold);

/// Mean over controlled tokens of −log π(target). Differentiable in the policy parameters only.
Var imitation_loss(Tape& tape, const Model& model, const transformer::LayerTrace& trace);

struct TeacherLogits {
    Matrix logits;
    Matrix end_logits; // span heads only
};

TeacherLogits teacher_logits(const Model& teacher, std::span<const int> token_ids);

/// α·τ²·KL(softmax(teacher/τ) ‖ softmax(student/τ)) + (1−α)·CE(student, gold). Span heads add the
/// start and end terms.
Var kd_loss(Tape& tape, const transformer::HeadOutput& student, const TeacherLogits& teacher, const Label& gold,
            double temperature, double alpha);

struct AdamState {
    std::map<std::string, Matrix> m;
    std::map<std::string, Matrix> v;
    std::size_t step = 0;
};

/// Adam on the named parameters that appear in the gradient set and pass `filter`.
class Adam {
public:
    explicit Adam(const TrainConfig& config);

    /// Descent step: p ← p − lr · m̂ / (√v̂ + ε).
    void step(Model& model, const GradientSet& gradient, double learning_rate,
              const std::function<bool(const std::string&)>& filter = {});
    /// Per-parameter rates; a rate of zero leaves that parameter and its moments untouched.
    void step(Model& model, const GradientSet& gradient, const std::function<double(const std::string&)>& rate);

    AdamState& state() { return state_; }
    const AdamState& state() const { return state_; }

private:
    double beta1_, beta2_, eps_;
    AdamState state_;
};

/// Linear warmup over the first `warmup_fraction` of steps, then linear decay to zero.
double scheduled_rate(double base, std::size_t step, std::size_t total_steps, double warmup_fraction);

} // namespace tokenprune::rl
