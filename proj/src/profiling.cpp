#include "tokenprune/profiling.hpp"

#include "tokenprune/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace tokenprune::profiling {

std::uint64_t layer_flops(std::uint64_t n, std::uint64_t d, std::uint64_t /*heads*/, std::uint64_t ffn_inner) {
    return 8 * n * d * d + 4 * n * n * d + 4 * n * d * ffn_inner;
}

std::uint64_t policy_flops(std::uint64_t n, std::uint64_t d, std::uint64_t d_policy) {
    return 2 * n * (d * d_policy + d_policy);
}

FlopsReport trace_flops(const transformer::LayerTrace& trace, const ModelConfig& config, bool include_policy) {
    if (trace.survivors.size() != config.num_layers + 1) {
        throw ContractError("trace_flops: trace does not cover every layer");
    }
    FlopsReport r;
    const std::uint64_t n = trace.num_tokens();
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        // Layer i consumes (and emits) the rows recorded for H_{i+1}.
        const std::uint64_t rows = trace.survivors[i + 1].size();
        r.layer.push_back(layer_flops(rows, config.hidden, config.heads, config.ffn_inner));
        r.reference_total += layer_flops(n, config.hidden, config.heads, config.ffn_inner);
    }
    if (include_policy) {
        for (const auto& m : trace.plan.modules) {
            r.policy.push_back(policy_flops(m.survivors_in.size(), config.hidden, config.hidden));
        }
    }
    r.total = std::accumulate(r.layer.begin(), r.layer.end(), std::uint64_t{0}) +
              std::accumulate(r.policy.begin(), r.policy.end(), std::uint64_t{0});
    r.speedup = static_cast<double>(r.reference_total) / static_cast<double>(r.total);
    return r;
}

void write_flops_csv(std::ostream& out, std::span<const FlopsRow> rows) {
    out << "example_id,orig_len,flops,reference_flops,speedup\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.example_id << ',' << r.orig_len << ',' << r.flops << ',' << r.reference_flops << ',' << r.speedup << '\n';
    }
}

WallTime measure_wall_time(const std::function<void()>& work, std::size_t repeats, std::size_t warmup,
                           double min_sample_seconds) {
    using Clock = std::chrono::steady_clock;
    const auto time_once = [&](std::size_t inner) {
        const auto t0 = Clock::now();
        for (std::size_t i = 0; i < inner; ++i) {
            work();
        }
        return std::chrono::duration<double>(Clock::now() - t0).count();
    };
    for (std::size_t i = 0; i < warmup; ++i) {
        work();
    }
    WallTime wt;
    wt.repeats = std::max<std::size_t>(repeats, 1);
    while (time_once(wt.inner_iterations) < min_sample_seconds && wt.inner_iterations < (1u << 20)) {
        wt.inner_iterations *= 2;
        wt.enlarged = true;
    }
    std::vector<double> samples;
    for (std::size_t r = 0; r < wt.repeats; ++r) {
        samples.push_back(time_once(wt.inner_iterations) / static_cast<double>(wt.inner_iterations));
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t mid = samples.size() / 2;
    wt.median_seconds = samples.size() % 2 == 1 ? samples[mid] : 0.5 * (samples[mid - 1] + samples[mid]);
    return wt;
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

} // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ContractError("spearman: need two equally sized samples of length >= 2");
    }
    const auto rx = ranks(x);
    const auto ry = ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace tokenprune::profiling
