#include "support.hpp"

#include "tokenprune/errors.hpp"
#include "tokenprune/reduction.hpp"

#include <doctest.h>

#include <numeric>

using namespace tptest;
using namespace tokenprune::reduction;
using transformer::full_forward;

namespace {

std::vector<std::uint8_t> random_mask(std::size_t n, Rng& rng, double p = 0.5) {
    std::vector<std::uint8_t> m(n);
    for (auto& v : m) {
        v = uniform01(rng) < p ? 1 : 0;
    }
    return m;
}

} // namespace

TEST_CASE("policy probabilities") {
    Rng rng(1);
    auto model = generic_model(tiny_config(), 2);
    const Matrix h = random_matrix(6, 8, rng);
    SUBCASE("zero parameters give one half") {
        auto p = model.policies[0];
        for (auto* q : {&p.w1, &p.b1, &p.w2, &p.b2}) {
            q->value = Matrix(q->value.rows(), q->value.cols());
        }
        for (double v : policy_probs(h, p)) {
            CHECK(v == 0.5);
        }
    }
    SUBCASE("row permutation permutes the probabilities") {
        const auto base = policy_probs(h, model.policies[0]);
        const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
        const auto permuted = policy_probs(numerics::gather_rows(h, perm), model.policies[0]);
        for (std::size_t i = 0; i < perm.size(); ++i) {
            CHECK(permuted[i] == base[perm[i]]);
        }
    }
    SUBCASE("monotone in the output bias") {
        auto p = model.policies[0];
        std::vector<double> last(6, 0.0);
        for (double b : {-5.0, -1.0, 0.0, 2.0, 10.0, 40.0}) {
            p.b2.value(0, 0) = b;
            const auto probs = policy_probs(h, p);
            for (std::size_t i = 0; i < probs.size(); ++i) {
                CHECK(probs[i] >= last[i]);
                last[i] = probs[i];
            }
        }
        for (double v : last) {
            CHECK(v > 1.0 - 1e-12);
        }
    }
}

TEST_CASE("decide") {
    const std::vector<double> probs{0.9, 0.1};
    CHECK(decide(probs, DecisionMode::greedy, nullptr) == std::vector<std::uint8_t>{1, 0});
    CHECK(decide(std::vector<double>{0.5}, DecisionMode::greedy, nullptr) == std::vector<std::uint8_t>{1});
    CHECK_THROWS_AS(decide(probs, DecisionMode::sample, nullptr), tokenprune::ContractError);
    Rng a(7), b(7);
    const std::vector<double> many(50, 0.4);
    CHECK(decide(many, DecisionMode::sample, &a) == decide(many, DecisionMode::sample, &b));
    Rng rng(8);
    const std::vector<double> p3(100000, 0.3);
    const auto draws = decide(p3, DecisionMode::sample, &rng);
    const double rate = std::accumulate(draws.begin(), draws.end(), 0.0) / 1e5;
    CHECK(std::abs(rate - 0.3) < 0.01);
}

TEST_CASE("all-Select equals full_forward bit-for-bit") {
    Rng rng(2);
    auto config = tiny_config(4);
    config.reduction_positions = {1, 2, 3};
    const auto model = generic_model(config, 3);
    for (int trial = 0; trial < 10; ++trial) {
        const auto tokens = random_tokens(2 + trial, 32, rng);
        const auto full = full_forward(model, tokens);
        const auto red = reduced_forward(model, tokens, mask_gate({std::vector<std::uint8_t>(tokens.size(), 1),
                                                                   std::vector<std::uint8_t>(tokens.size(), 1),
                                                                   std::vector<std::uint8_t>(tokens.size(), 1)}));
        for (std::size_t l = 0; l < full.hidden.size(); ++l) {
            CHECK(red.hidden[l] == full.hidden[l]);
        }
        CHECK(red.termination_layer == full.termination_layer);
        CHECK(red.plan.selected_count() == 3 * (tokens.size() - 1));
    }
}

TEST_CASE("all-Skip at module 1 freezes every token at H_1") {
    auto config = tiny_config(3);
    config.reduction_positions = {1};
    const auto model = generic_model(config, 4);
    const std::vector<int> tokens{0, 5, 6, 7};
    const auto trace = reduced_forward(model, tokens, mask_gate({{0, 0, 0, 0}}));
    CHECK(trace.termination_layer == std::vector<std::size_t>{3, 1, 1, 1});
    CHECK(!trace.fallback_used); // the anchor is protected, so the selection is not empty
    const Matrix fin = assemble_final_states(trace);
    for (std::size_t j = 1; j < 4; ++j) {
        for (std::size_t c = 0; c < 8; ++c) {
            CHECK(fin(j, c) == trace.hidden[1](j, c));
        }
    }
    CHECK(trace.plan.modules[0].controlled[0] == 0);
    CHECK(trace.plan.selected_count() == 0);

    ReduceOptions unprotected;
    unprotected.protect_anchor = false;
    const auto bare = reduced_forward(model, tokens, mask_gate({{0, 0, 0, 0}}), unprotected);
    CHECK(bare.fallback_used);
    CHECK(bare.plan.modules[0].fallback);
    CHECK(bare.survivors.back() == std::vector<std::size_t>{0});
}

TEST_CASE("mask [1,0,1,0] keeps two rows in original order") {
    auto config = tiny_config(3);
    config.reduction_positions = {1};
    const auto model = generic_model(config, 5);
    const std::vector<int> tokens{0, 9, 10, 11};
    const auto trace = reduced_forward(model, tokens, mask_gate({{1, 0, 1, 0}}));
    CHECK(trace.hidden[1].rows() == 4);
    CHECK(trace.hidden[2].rows() == 2);
    CHECK(trace.hidden[3].rows() == 2);
    CHECK(trace.survivors[2] == std::vector<std::size_t>{0, 2});
    CHECK(trace.termination_layer == std::vector<std::size_t>{3, 1, 3, 1});
}

TEST_CASE("a gate with the wrong mask length is a contract error") {
    const auto model = generic_model(tiny_config(), 6);
    CHECK_THROWS_AS(reduced_forward(model, std::vector<int>{0, 1, 2}, mask_gate({{1, 1}})), tokenprune::ContractError);
}

TEST_CASE("random plans keep every trace invariant") {
    Rng rng(9);
    auto config = tiny_config(5);
    config.reduction_positions = {1, 2, 4};
    const auto model = generic_model(config, 7);
    for (int trial = 0; trial < 60; ++trial) {
        const auto tokens = random_tokens(1 + rng() % 16, 32, rng);
        const std::size_t n = tokens.size();
        std::vector<std::vector<std::uint8_t>> keep;
        for (int t = 0; t < 3; ++t) {
            keep.push_back(random_mask(n, rng, 0.6));
        }
        ReduceOptions opts;
        opts.protect_anchor = trial % 2 == 0;
        const auto trace = reduced_forward(model, tokens, position_gate(keep), opts);
        for (std::size_t l = 0; l < trace.survivors.size(); ++l) {
            const auto& s = trace.survivors[l];
            CHECK(!s.empty());
            CHECK(std::adjacent_find(s.begin(), s.end(), std::greater_equal<>()) == s.end());
            CHECK(trace.hidden[l].rows() == s.size());
            if (l > 0) {
                CHECK(s.size() <= trace.survivors[l - 1].size());
            }
        }
        for (std::size_t t = 0; t < trace.plan.modules.size(); ++t) {
            const auto& m = trace.plan.modules[t];
            const bool any_skip = std::count(m.select.begin(), m.select.end(), 0) > 0;
            const std::size_t p = m.position;
            CHECK((trace.survivors[p + 1].size() < trace.survivors[p].size()) == any_skip);
        }
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t term = trace.termination_layer[j];
            const auto in = [&](std::size_t l) {
                return std::binary_search(trace.survivors[l].begin(), trace.survivors[l].end(), j);
            };
            CHECK(in(term));
            if (term < 5) {
                CHECK(!in(term + 1));
            }
        }
        // Trace-replay oracle: each final row is the bit-exact state of that token entering the module that skipped it.
        const Matrix fin = reduction::assemble_final_states(trace);
        for (const auto& m : trace.plan.modules) {
            for (std::size_t r = 0; r < m.survivors_in.size(); ++r) {
                if (m.select[r] == 0) {
                    const auto src = trace.hidden[m.position].row(r);
                    CHECK(std::equal(src.begin(), src.end(), fin.row(m.survivors_in[r]).begin()));
                }
            }
        }
    }
}

TEST_CASE("taped final-state assembly matches the value version and differentiates") {
    Rng rng(10);
    auto model = generic_model(tiny_config(3), 8);
    model.config.reduction_positions = {1, 2};
    const auto tokens = random_tokens(7, 32, rng);
    const auto gate = position_gate({{1, 0, 1, 1, 0, 1, 1}, {1, 1, 1, 0, 1, 1, 0}});
    Tape tape;
    const auto pass = reduced_forward(tape, model, tokens, gate);
    const Var fin = assemble_final_states(tape, pass);
    CHECK(tape.value(fin) == assemble_final_states(pass.trace));

    const Label gold{std::size_t{2}};
    const auto head = transformer::head_logits(tape, model, fin);
    const auto g = numerics::grad(tape, transformer::task_loss(tape, head, gold));
    const auto loss = [&] {
        Tape t;
        const auto p = reduced_forward(t, model, tokens, gate);
        return t.value(transformer::task_loss(t, transformer::head_logits(t, model, assemble_final_states(t, p)), gold))(0, 0);
    };
    const auto params = all_parameters(model, [](const std::string& n) { return !transformer::is_policy_parameter(n); });
    CHECK(max_gradient_error(params, g, loss) < 1e-4);
}

TEST_CASE("log_policy matches the closed form and its gradient") {
    Rng rng(11);
    auto model = generic_model(tiny_config(), 12);
    const Matrix h = random_matrix(5, 8, rng);
    const std::vector<std::uint8_t> actions{1, 0, 1, 1, 0};
    const std::vector<std::uint8_t> include{0, 1, 1, 1, 1};
    const auto probs = policy_probs(h, model.policies[0]);
    double expected = 0.0;
    for (std::size_t j = 1; j < 5; ++j) {
        expected += std::log(actions[j] ? probs[j] : 1.0 - probs[j]);
    }
    Tape tape;
    const Var lp = log_policy(tape, h, model.policies[0], actions, include);
    CHECK(tape.value(lp)(0, 0) == doctest::Approx(expected).epsilon(1e-12));
    const auto g = numerics::grad(tape, lp);
    CHECK(g.size() == 4); // policy parameters only: the states enter as constants
    auto& p = model.policies[0];
    const double err = max_gradient_error({&p.w1, &p.b1, &p.w2, &p.b2}, g, [&] {
        Tape t;
        return t.value(log_policy(t, h, p, actions, include))(0, 0);
    });
    CHECK(err < 1e-4);
    CHECK_THROWS_AS(log_policy(tape, h, p, std::vector<std::uint8_t>{1}, include), tokenprune::ShapeError);
}

TEST_CASE("plan_gate replays a sampled plan exactly") {
    Rng rng(13);
    const auto model = generic_model(tiny_config(3), 14);
    const auto tokens = random_tokens(10, 32, rng);
    Rng sampler(5);
    const auto trace = reduced_forward(model, tokens, policy_gate(model, DecisionMode::sample, &sampler));
    const auto again = reduced_forward(model, tokens, plan_gate(trace.plan));
    CHECK(again.termination_layer == trace.termination_layer);
    CHECK(again.hidden.back() == trace.hidden.back());
    const auto other = random_tokens(11, 32, rng);
    CHECK_THROWS_AS(reduced_forward(model, other, plan_gate(trace.plan)), tokenprune::ContractError);
}

TEST_CASE("trace JSON lists per-module masks and termination layers") {
    const auto model = generic_model(tiny_config(3), 15);
    const std::vector<int> tokens{0, 4, 5, 6};
    const auto trace = reduced_forward(model, tokens, policy_gate(model, DecisionMode::greedy, nullptr));
    const auto j = trace_to_json(trace, tokens);
    CHECK(j.at("tokens").size() == 4);
    CHECK(j.at("termination_layer").size() == 4);
    CHECK(j.at("modules").size() == 1);
}
