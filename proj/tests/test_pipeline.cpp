#include "support.hpp"

#include "tokenprune/checkpoint.hpp"
#include "tokenprune/errors.hpp"
#include "tokenprune/pipeline.hpp"
#include "tokenprune/reduction.hpp"

#include <doctest.h>

#include <sstream>

using namespace tptest;
using namespace tokenprune::pipeline;

namespace {

struct Fixture {
    ModelConfig model;
    TrainConfig train;
    synthetic::Dataset train_set;
    synthetic::Dataset dev_set;
};

Fixture small_task(std::size_t n_train = 48, std::size_t n_dev = 24) {
    Fixture f;
    f.model = tiny_config(3);
    f.model.vocab_size = 64;
    f.model.max_len = 16;
    f.model.num_classes = 4;
    f.model.reduction_positions = {1, 2};
    f.model.policy_init_bias = 1.0;
    f.train.epochs = 1;
    f.train.batch_size = 8;
    f.train.num_action_samples = 3;
    f.train.seed = 5;
    synthetic::KeywordParams p;
    p.n_examples = n_train + n_dev;
    p.seq_len_min = 8;
    p.seq_len_max = 16;
    p.vocab_size = 64;
    p.signal_count = 3;
    auto all = synthetic::gen_keyword_task(p);
    f.train_set.header = f.dev_set.header = all.header;
    f.train_set.examples.assign(all.examples.begin(), all.examples.begin() + static_cast<std::ptrdiff_t>(n_train));
    f.dev_set.examples.assign(all.examples.begin() + static_cast<std::ptrdiff_t>(n_train), all.examples.end());
    return f;
}

bool same_parameters(const transformer::Model& a, const transformer::Model& b) {
    bool same = true;
    std::vector<const Parameter*> pa, pb;
    a.for_each_parameter([&](const Parameter& p) { pa.push_back(&p); });
    b.for_each_parameter([&](const Parameter& p) { pb.push_back(&p); });
    if (pa.size() != pb.size()) {
        return false;
    }
    for (std::size_t i = 0; i < pa.size(); ++i) {
        same = same && pa[i]->name == pb[i]->name && pa[i]->value == pb[i]->value;
    }
    return same;
}

std::uint64_t policy_hash(const transformer::Model& m) {
    std::uint64_t h = 0;
    m.for_each_parameter([&](const Parameter& p) {
        if (transformer::is_policy_parameter(p.name)) {
            for (double v : p.value.data()) {
                h = splitmix64(h ^ std::hash<double>{}(v));
            }
        }
    });
    return h;
}

} // namespace

TEST_CASE("eval mode names") {
    for (auto m : {EvalMode::greedy, EvalMode::sample, EvalMode::full}) {
        CHECK(parse_eval_mode(to_string(m)) == m);
    }
    CHECK_THROWS_AS(parse_eval_mode("beam"), ParameterError);
}

TEST_CASE("stage epoch counts") {
    TrainConfig c;
    for (std::size_t n : {1, 2, 3, 4, 5}) {
        c.epochs = n;
        CHECK(c.stage_epochs(1) == n);
        CHECK(c.stage_epochs(2) == (n + 2) / 2);
        CHECK(c.stage_epochs(3) == n);
    }
    c.epochs = 3;
    CHECK(c.stage_epochs(2) == 2);
    CHECK(c.resolved_imitation_fraction(HeadKind::classification) == 0.5);
    CHECK(c.resolved_imitation_fraction(HeadKind::span) == 0.2);
}

TEST_CASE("evaluate") {
    auto f = small_task();
    const auto model = generic_model(f.model, 3);

    const auto full = evaluate(model, f.dev_set, EvalMode::full);
    CHECK(full.flops_speedup == 1.0);
    CHECK(full.mean_selected == 0.0);
    CHECK(full.signal_recall == 1.0);

    double metric = 0.0;
    for (const auto& ex : f.dev_set.examples) {
        const auto trace = transformer::full_forward(model, ex.tokens);
        metric += transformer::score(transformer::decode(transformer::predict(model, trace.hidden.back())), ex.label);
    }
    CHECK(full.metric == doctest::Approx(metric / static_cast<double>(f.dev_set.size())).epsilon(1e-15));

    for (auto mode : {EvalMode::greedy, EvalMode::sample}) {
        const auto r = evaluate(model, f.dev_set, mode);
        REQUIRE(r.rows.size() == f.dev_set.size());
        std::uint64_t flops = 0, reference = 0;
        for (const auto& row : r.rows) {
            flops += row.flops;
            reference += row.reference_flops;
            CHECK(row.orig_len == f.dev_set.examples[row.example_id].tokens.size());
        }
        CHECK(flops == r.flops);
        CHECK(reference == r.reference_flops);
        CHECK(r.reference_flops == full.reference_flops);
        CHECK(r.mean_select_prob > 0.0);
        CHECK(r.mean_select_prob < 1.0);
    }
    const auto s1 = evaluate(model, f.dev_set, EvalMode::sample, 0.5, 4);
    const auto s2 = evaluate(model, f.dev_set, EvalMode::sample, 0.5, 4);
    CHECK(s1.metric == s2.metric);
    CHECK(s1.flops == s2.flops);
    CHECK(evaluate(model, synthetic::Dataset{}, EvalMode::greedy).metric == 0.0);
}

TEST_CASE("history records") {
    HistoryRecord r{2, 3, 0.75, 12.5, 2.25, -0.5};
    const auto back = HistoryRecord::from_json(r.to_json());
    CHECK(back.stage == 2);
    CHECK(back.epoch == 3);
    CHECK(back.dev_metric == 0.75);
    CHECK(back.mean_selected == 12.5);
    CHECK(back.flops_speedup == 2.25);
    CHECK(back.reward_mean == -0.5);
    CHECK_THROWS(HistoryRecord::from_json(nlohmann::json{{"stage", 1}}));
}

TEST_CASE("non-policy hash") {
    auto model = generic_model(tiny_config(), 1);
    const auto h = non_policy_hash(model);
    model.policies[0].w1.value(0, 0) += 1.0;
    CHECK(non_policy_hash(model) == h);
    model.layers[0].ffn_in_b.value(0, 1) += 1e-15;
    CHECK(non_policy_hash(model) != h);
}

TEST_CASE("stages respect their freeze contracts") {
    auto f = small_task();
    auto state = initial_state(f.model, f.train);
    const auto policy_before = policy_hash(state.model);
    const auto hash_before = non_policy_hash(state.model);

    train_pipeline(state, f.train_set, f.dev_set, f.train, {{}, 1});
    CHECK(state.stage == 2);
    CHECK(state.epochs_done == 0);
    REQUIRE(state.teacher.has_value());
    CHECK(same_parameters(*state.teacher, state.model));
    CHECK(policy_hash(state.model) == policy_before);
    const auto hash_stage1 = non_policy_hash(state.model);
    CHECK(hash_stage1 != hash_before);

    train_pipeline(state, f.train_set, f.dev_set, f.train, {{}, 2});
    CHECK(state.stage == 3);
    CHECK(non_policy_hash(state.model) == hash_stage1);
    CHECK(policy_hash(state.model) != policy_before);

    train_pipeline(state, f.train_set, f.dev_set, f.train);
    CHECK(state.stage == 4);
    CHECK(non_policy_hash(state.model) != hash_stage1);
    CHECK(non_policy_hash(*state.teacher) == hash_stage1);

    // One record per epoch: N + ⌈(N+1)/2⌉ + N.
    REQUIRE(state.history.size() == 3);
    CHECK(state.history[0].stage == 1);
    CHECK(state.history[1].stage == 2);
    CHECK(state.history[2].stage == 3);
    CHECK(state.history[0].flops_speedup == 1.0);
    const auto last = evaluate(state.model, f.dev_set, EvalMode::greedy, f.train.greedy_threshold, f.train.seed);
    CHECK(last.metric == state.history.back().dev_metric);
    CHECK(last.flops_speedup == state.history.back().flops_speedup);
}

TEST_CASE("interrupted training resumes to identical results") {
    auto f = small_task();
    f.train.epochs = 2;

    auto straight = initial_state(f.model, f.train);
    train_pipeline(straight, f.train_set, f.dev_set, f.train);
    REQUIRE(straight.stage == 4);

    auto state = initial_state(f.model, f.train);
    std::size_t interruptions = 0;
    while (state.stage <= 3) {
        PipelineHooks stop_each_epoch;
        stop_each_epoch.on_epoch = [](const TrainState&) { return false; };
        train_pipeline(state, f.train_set, f.dev_set, f.train, stop_each_epoch);
        // Persist and reload between epochs, as a killed process would.
        std::stringstream ss;
        checkpoint::write(ss, f.model, f.train, state);
        state = checkpoint::read(ss).state;
        ++interruptions;
    }
    CHECK(interruptions == 6);
    CHECK(same_parameters(state.model, straight.model));
    REQUIRE(state.history.size() == straight.history.size());
    for (std::size_t i = 0; i < state.history.size(); ++i) {
        CHECK(state.history[i].to_json() == straight.history[i].to_json());
    }
}

TEST_CASE("divergence guard") {
    auto f = small_task();
    f.train.divergence_factor = 1e-9;
    auto state = initial_state(f.model, f.train);
    train_pipeline(state, f.train_set, f.dev_set, f.train, {{}, 1});
    CHECK_THROWS_AS(train_pipeline(state, f.train_set, f.dev_set, f.train), DivergenceError);
}

TEST_CASE("divergence guard skips pure imitation epochs") {
    auto f = small_task();
    f.train.epochs = 3; // stage 2: 2 epochs, the first entirely imitation
    f.train.divergence_factor = 1e-9;
    auto state = initial_state(f.model, f.train);
    train_pipeline(state, f.train_set, f.dev_set, f.train, {{}, 1});
    std::size_t stage2_epochs = 0;
    PipelineHooks hooks;
    hooks.on_epoch = [&](const TrainState&) {
        ++stage2_epochs;
        return true;
    };
    CHECK_THROWS_AS(train_pipeline(state, f.train_set, f.dev_set, f.train, hooks), DivergenceError);
    CHECK(stage2_epochs == 1);
    CHECK(state.stage == 2);
}

TEST_CASE("pipeline input checks") {
    auto f = small_task();
    auto state = initial_state(f.model, f.train);
    CHECK_THROWS_AS(train_pipeline(state, synthetic::Dataset{}, f.dev_set, f.train), InputError);
    auto bad = f.train;
    bad.batch_size = 0;
    CHECK_THROWS_AS(train_pipeline(state, f.train_set, f.dev_set, bad), ParameterError);
    CHECK_THROWS_AS(initial_state(f.model, bad), ParameterError);
    state.stage = 3;
    CHECK_THROWS_AS(train_pipeline(state, f.train_set, f.dev_set, f.train), ContractError);
}

TEST_CASE("checkpoint round trip") {
    auto f = small_task();
    auto state = initial_state(f.model, f.train);
    train_pipeline(state, f.train_set, f.dev_set, f.train, {{}, 2});
    state.epochs_done = 0;

    std::stringstream ss;
    checkpoint::write(ss, f.model, f.train, state);
    const std::string bytes = ss.str();
    const auto back = checkpoint::read(ss);
    CHECK(back.model_config.to_key_values() == f.model.to_key_values());
    CHECK(back.train_config.to_key_values() == f.train.to_key_values());
    CHECK(same_parameters(back.state.model, state.model));
    REQUIRE(back.state.teacher.has_value());
    CHECK(same_parameters(*back.state.teacher, *state.teacher));
    CHECK(back.state.stage == state.stage);
    CHECK(back.state.stage1_log_likelihood == state.stage1_log_likelihood);
    CHECK(back.state.history.size() == state.history.size());

    // Re-serialising the loaded checkpoint reproduces the bytes.
    std::stringstream again;
    checkpoint::write(again, back.model_config, back.train_config, back.state);
    CHECK(again.str() == bytes);

    SUBCASE("corruption is reported") {
        std::stringstream bad_magic("TPRN9xxxxxxxxxxxxxxxx");
        CHECK_THROWS_AS(checkpoint::read(bad_magic), InputError);
        std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
        CHECK_THROWS_AS(checkpoint::read(truncated), InputError);
        CHECK_THROWS_AS(checkpoint::load("/nonexistent/dir/model.tprn"), InputError);
    }
}
