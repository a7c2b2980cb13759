#include "tokenprune/strategies.hpp"

#include "tokenprune/errors.hpp"
#include "tokenprune/profiling.hpp"
#include "tokenprune/reduction.hpp"
#include "tokenprune/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tokenprune::strategies {

std::string to_string(StrategyKind kind) {
    switch (kind) {
    case StrategyKind::random:
        return "random";
    case StrategyKind::attention:
        return "attention";
    case StrategyKind::residual:
        return "residual";
    }
    return "unknown";
}

StrategyKind parse_strategy(const std::string& text) {
    if (text == "random") {
        return StrategyKind::random;
    }
    if (text == "attention") {
        return StrategyKind::attention;
    }
    if (text == "residual") {
        return StrategyKind::residual;
    }
    throw ParameterError("unknown strategy '" + text + "'");
}

ImportanceScores random_importance(std::size_t n, std::uint64_t seed) {
    if (n == 0) {
        throw InputError("random_importance: n must be >= 1");
    }
    Rng rng = make_stream(seed, "random_importance");
    ImportanceScores s;
    s.kind = StrategyKind::random;
    s.scores.resize(n);
    for (double& v : s.scores) {
        v = uniform01(rng);
    }
    return s;
}

ImportanceScores attention_importance(const transformer::LayerTrace& trace, std::size_t upto_layer) {
    if (trace.attention.size() < upto_layer || upto_layer == 0) {
        throw ContractError("attention_importance: trace lacks attention records for " + std::to_string(upto_layer) +
                            " layers");
    }
    const std::size_t n = trace.num_tokens();
    ImportanceScores s;
    s.kind = StrategyKind::attention;
    s.shallow_layer = upto_layer;
    s.scores.assign(n, 0.0);
    for (std::size_t layer = 0; layer < upto_layer; ++layer) {
        if (trace.survivors[layer + 1].size() != n) {
            throw ContractError("attention_importance: needs an unreduced trace");
        }
        for (const Matrix& a : trace.attention[layer]) {
            for (std::size_t q = 0; q < a.rows(); ++q) {
                for (std::size_t k = 0; k < a.cols(); ++k) {
                    s.scores[k] += a(q, k);
                }
            }
        }
    }
    return s;
}

ImportanceScores residual_importance(const transformer::Model& model, std::span<const int> token_ids, const Label& gold,
                                     std::size_t shallow, std::size_t deep, double loss_scale) {
    if (shallow >= deep || deep > model.config.num_layers) {
        throw ParameterError("residual_importance: need l < r <= L (got l=" + std::to_string(shallow) +
                             ", r=" + std::to_string(deep) + ")");
    }
    Tape tape;
    const auto pass = transformer::forward(tape, model, token_ids, {});
    const auto head = transformer::head_logits(tape, model, pass.hidden.back());
    const Var loss = tape.scale(transformer::task_loss(tape, head, gold), loss_scale);
    tape.backward(loss);
    const Matrix g = tape.gradient(pass.hidden[deep]);
    const Matrix& hr = pass.trace.hidden[deep];
    const Matrix& hl = pass.trace.hidden[shallow];

    ImportanceScores s;
    s.kind = StrategyKind::residual;
    s.shallow_layer = shallow;
    s.deep_layer = deep;
    s.scores.assign(token_ids.size(), 0.0);
    for (std::size_t j = 0; j < token_ids.size(); ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) {
            dot += g(j, c) * (hl(j, c) - hr(j, c));
        }
        s.scores[j] = dot;
    }
    return s;
}

std::size_t default_shallow_layer(std::size_t num_layers) { return (num_layers + 2) / 3; }

std::size_t default_deep_layer(std::size_t num_layers) { return (3 * num_layers + 3) / 4; }

std::vector<std::uint8_t> top_k_mask(std::span<const double> scores, std::span<const std::size_t> candidates, std::size_t k) {
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = scores[candidates[a]];
        const double sb = scores[candidates[b]];
        if (sa != sb) {
            return sa > sb;
        }
        return candidates[a] < candidates[b];
    });
    std::vector<std::uint8_t> mask(candidates.size(), 0);
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
        mask[order[i]] = 1;
    }
    return mask;
}

std::vector<std::uint8_t> top_k_mask(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> all(scores.size());
    std::iota(all.begin(), all.end(), 0);
    return top_k_mask(scores, all, k);
}

EliminationResult theoretical_elimination_eval(const transformer::Model& model, const synthetic::Dataset& data,
                                               const EliminationOptions& options) {
    if (!(options.keep_ratio > 0.0 && options.keep_ratio <= 1.0)) {
        throw ParameterError("keep_ratio must lie in (0, 1]");
    }
    const std::size_t L = model.config.num_layers;
    const std::size_t layer = options.layer == 0 ? default_shallow_layer(L) : options.layer;
    const std::size_t deep = options.deep_layer == 0 ? default_deep_layer(L) : options.deep_layer;
    if (layer < 1 || layer > L - 1) {
        throw ParameterError("elimination layer must lie in [1, L-1]");
    }

    EliminationResult res;
    double metric = 0.0;
    double kept = 0.0;
    std::uint64_t flops = 0;
    std::uint64_t reference = 0;
    reduction::ReduceOptions ro;
    ro.positions = std::vector<std::size_t>{layer};
    for (std::size_t i = 0; i < data.examples.size(); ++i) {
        const auto& ex = data.examples[i];
        const std::size_t n = ex.tokens.size();
        ImportanceScores s;
        switch (options.strategy) {
        case StrategyKind::random:
            s = random_importance(n, splitmix64(options.seed) + i);
            break;
        case StrategyKind::attention:
            s = attention_importance(transformer::full_forward(model, ex.tokens, true), layer);
            break;
        case StrategyKind::residual:
            s = residual_importance(model, ex.tokens, ex.label, layer, deep);
            break;
        }
        const auto k = static_cast<std::size_t>(std::ceil(options.keep_ratio * static_cast<double>(n) - 1e-12));
        auto mask = top_k_mask(s.scores, k);
        mask[0] = 1;
        const auto gate = reduction::position_gate({mask});
        const auto trace = reduction::reduced_forward(model, ex.tokens, gate, ro);
        const auto pred = transformer::predict(model, reduction::assemble_final_states(trace));
        metric += transformer::score(transformer::decode(pred), ex.label);
        kept += static_cast<double>(std::count(mask.begin(), mask.end(), 1)) / static_cast<double>(n);
        const auto report = profiling::trace_flops(trace, model.config, false);
        flops += report.total;
        reference += report.reference_total;
    }
    const double count = static_cast<double>(std::max<std::size_t>(data.examples.size(), 1));
    res.metric = metric / count;
    res.mean_kept_fraction = kept / count;
    res.flops_speedup = flops == 0 ? 1.0 : static_cast<double>(reference) / static_cast<double>(flops);
    return res;
}

void write_curve_csv(std::ostream& out, std::span<const CurveRow> rows) {
    out << "strategy,keep_ratio,metric,flops_speedup\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.strategy << ',' << r.keep_ratio << ',' << r.metric << ',' << r.flops_speedup << '\n';
    }
}

} // namespace tokenprune::strategies
