#include "tokenprune/synthetic.hpp"

#include "tokenprune/errors.hpp"
#include "tokenprune/rng.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace tokenprune::synthetic {

std::string to_string(TaskKind kind) { return kind == TaskKind::keyword ? "keyword" : "span"; }

TaskKind parse_task_kind(const std::string& text) {
    if (text == "keyword") {
        return TaskKind::keyword;
    }
    if (text == "span") {
        return TaskKind::marker_span;
    }
    throw ParameterError("unknown task '" + text + "' (expected keyword or span)");
}

VocabBands VocabBands::make(std::size_t vocab_size, std::size_t n_classes, std::size_t class_width) {
    VocabBands b;
    b.filler_begin = static_cast<int>(vocab_size / 2);
    b.filler_end = static_cast<int>(vocab_size);
    const int room = b.filler_begin - b.class_begin;
    if (n_classes == 0 || room < static_cast<int>(n_classes)) {
        throw ParameterError("vocabulary of " + std::to_string(vocab_size) + " too small for " +
                             std::to_string(n_classes) + " class bands");
    }
    if (class_width == 0) {
        throw ParameterError("class band width must be >= 1");
    }
    b.class_width = std::min(static_cast<int>(class_width), room / static_cast<int>(n_classes));
    return b;
}

std::optional<std::size_t> VocabBands::class_of(int token) const {
    if (token < class_begin || token >= filler_begin) {
        return std::nullopt;
    }
    const auto c = static_cast<std::size_t>((token - class_begin) / class_width);
    return c;
}

namespace {

std::size_t uniform_index(Rng& rng, std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); }

int uniform_in(Rng& rng, int lo, int hi_exclusive) { return std::uniform_int_distribution<int>(lo, hi_exclusive - 1)(rng); }

std::size_t draw_length(Rng& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

void check_lengths(std::size_t lo, std::size_t hi) {
    if (lo > hi || lo < 2) {
        throw ParameterError("sequence length range must satisfy 2 <= min <= max");
    }
}

} // namespace

Dataset gen_keyword_task(const KeywordParams& p) {
    check_lengths(p.seq_len_min, p.seq_len_max);
    if (p.signal_count < 1 || p.signal_count >= p.seq_len_min) {
        throw ParameterError("signal_count must be >= 1 and < seq_len");
    }
    if (p.n_classes < 2 && p.signal_count > 1) {
        throw ParameterError("keyword task needs at least two classes");
    }
    const VocabBands bands = VocabBands::make(p.vocab_size, p.n_classes, p.class_width);
    Dataset data;
    data.task = TaskKind::keyword;
    data.header = {{"generator", "keyword"},
                   {"n_examples", p.n_examples},
                   {"seq_len_min", p.seq_len_min},
                   {"seq_len_max", p.seq_len_max},
                   {"n_classes", p.n_classes},
                   {"signal_count", p.signal_count},
                   {"vocab_size", p.vocab_size},
                   {"class_width", bands.class_width},
                   {"seed", p.seed}};
    data.examples.reserve(p.n_examples);
    for (std::size_t i = 0; i < p.n_examples; ++i) {
        Rng rng = make_stream(p.seed, "keyword", i);
        const std::size_t len = draw_length(rng, p.seq_len_min, p.seq_len_max);
        const std::size_t label = uniform_index(rng, p.n_classes);

        // A strict majority of the signal tokens comes from the label's band.
        const std::size_t majority = p.signal_count / 2 + 1;
        std::vector<std::size_t> classes(majority, label);
        while (classes.size() < p.signal_count) {
            std::size_t c = uniform_index(rng, p.n_classes - 1);
            classes.push_back(c >= label ? c + 1 : c);
        }
        std::vector<std::size_t> slots(len - 1);
        std::iota(slots.begin(), slots.end(), 1);
        std::shuffle(slots.begin(), slots.end(), rng);

        Example ex;
        ex.tokens.assign(len, 0);
        ex.signal.assign(len, 0);
        for (std::size_t k = 1; k < len; ++k) {
            ex.tokens[k] = uniform_in(rng, bands.filler_begin, bands.filler_end);
        }
        for (std::size_t s = 0; s < p.signal_count; ++s) {
            const int base = bands.class_begin + static_cast<int>(classes[s]) * bands.class_width;
            ex.tokens[slots[s]] = uniform_in(rng, base, base + bands.class_width);
            ex.signal[slots[s]] = 1;
        }
        ex.tokens[0] = bands.anchor;
        ex.label = label;
        data.examples.push_back(std::move(ex));
    }
    return data;
}

Dataset gen_marker_span_task(const SpanParams& p) {
    check_lengths(p.seq_len_min, p.seq_len_max);
    if (p.seq_len_min < 8) {
        throw ParameterError("span task needs seq_len >= 8");
    }
    const VocabBands bands = VocabBands::make(p.vocab_size, 1);
    const std::size_t types = bands.marker_types;
    Dataset data;
    data.task = TaskKind::marker_span;
    data.header = {{"generator", "span"},
                   {"n_examples", p.n_examples},
                   {"seq_len_min", p.seq_len_min},
                   {"seq_len_max", p.seq_len_max},
                   {"marker_types", types},
                   {"vocab_size", p.vocab_size},
                   {"seed", p.seed}};
    data.examples.reserve(p.n_examples);
    for (std::size_t i = 0; i < p.n_examples; ++i) {
        Rng rng = make_stream(p.seed, "span", i);
        const std::size_t len = draw_length(rng, p.seq_len_min, p.seq_len_max);
        const std::size_t query_pos = 1 + uniform_index(rng, 3);
        const std::size_t query_type = uniform_index(rng, types);
        const std::size_t room = len - query_pos - 1;

        std::vector<std::size_t> run_len(types);
        for (auto& l : run_len) {
            l = 1 + uniform_index(rng, 3);
        }
        if (std::accumulate(run_len.begin(), run_len.end(), std::size_t{0}) > room) {
            std::fill(run_len.begin(), run_len.end(), 1);
        }
        std::vector<std::size_t> order(types);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);

        // Interleave the runs (as blocks) with filler slots uniformly at random.
        const std::size_t filler = room - std::accumulate(run_len.begin(), run_len.end(), std::size_t{0});
        std::vector<std::uint8_t> is_block(filler + types, 0);
        std::fill(is_block.begin(), is_block.begin() + static_cast<std::ptrdiff_t>(types), 1);
        std::shuffle(is_block.begin(), is_block.end(), rng);

        Example ex;
        ex.tokens.assign(len, 0);
        ex.signal.assign(len, 0);
        ex.tokens[0] = bands.anchor;
        for (std::size_t k = 1; k <= query_pos; ++k) {
            ex.tokens[k] = uniform_in(rng, bands.filler_begin, bands.filler_end);
        }
        ex.tokens[query_pos] = bands.query_begin + static_cast<int>(query_type);
        ex.signal[query_pos] = 1;
        std::size_t cursor = query_pos + 1;
        std::size_t next_block = 0;
        Span answer;
        for (std::uint8_t block : is_block) {
            if (block == 0) {
                ex.tokens[cursor++] = uniform_in(rng, bands.filler_begin, bands.filler_end);
                continue;
            }
            const std::size_t type = order[next_block++];
            const std::size_t start = cursor;
            for (std::size_t r = 0; r < run_len[type]; ++r) {
                ex.tokens[cursor] = bands.answer_begin + static_cast<int>(type);
                if (type == query_type) {
                    ex.signal[cursor] = 1;
                }
                ++cursor;
            }
            if (type == query_type) {
                answer = {start, cursor - 1};
            }
        }
        ex.label = answer;
        data.examples.push_back(std::move(ex));
    }
    return data;
}

std::size_t majority_vote_oracle(const std::vector<int>& tokens, const VocabBands& bands) {
    std::vector<std::size_t> votes;
    for (int t : tokens) {
        if (const auto c = bands.class_of(t)) {
            if (*c >= votes.size()) {
                votes.resize(*c + 1, 0);
            }
            ++votes[*c];
        }
    }
    if (votes.empty()) {
        throw InputError("majority_vote_oracle: no signal tokens");
    }
    return static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

Span marker_scan_oracle(const std::vector<int>& tokens, const VocabBands& bands) {
    const auto types = static_cast<int>(bands.marker_types);
    const auto q = std::find_if(tokens.begin(), tokens.end(),
                                [&](int t) { return t >= bands.query_begin && t < bands.query_begin + types; });
    if (q == tokens.end()) {
        throw InputError("marker_scan_oracle: no query marker");
    }
    const int target = bands.answer_begin + (*q - bands.query_begin);
    const auto first = std::find(tokens.begin(), tokens.end(), target);
    if (first == tokens.end()) {
        throw InputError("marker_scan_oracle: answer marker missing");
    }
    auto last = first;
    while (last + 1 != tokens.end() && *(last + 1) == target) {
        ++last;
    }
    return {static_cast<std::size_t>(first - tokens.begin()), static_cast<std::size_t>(last - tokens.begin())};
}

double selection_recall(const transformer::LayerTrace& trace, const std::vector<std::uint8_t>& signal) {
    if (signal.size() != trace.num_tokens()) {
        throw ContractError("selection_recall: signal mask length differs from the trace");
    }
    std::size_t total = 0;
    std::size_t kept = 0;
    for (std::size_t j = 0; j < signal.size(); ++j) {
        if (signal[j] != 0) {
            ++total;
            kept += trace.termination_layer[j] == trace.num_layers() ? 1 : 0;
        }
    }
    return total == 0 ? 1.0 : static_cast<double>(kept) / static_cast<double>(total);
}

void write_jsonl(std::ostream& out, const Dataset& data) {
    nlohmann::json header = data.header;
    header["task"] = to_string(data.task);
    out << nlohmann::json{{"header", header}}.dump() << '\n';
    for (const auto& ex : data.examples) {
        nlohmann::json j;
        j["tokens"] = ex.tokens;
        if (std::holds_alternative<std::size_t>(ex.label)) {
            j["label"] = std::get<std::size_t>(ex.label);
        } else {
            const Span s = std::get<Span>(ex.label);
            j["label"] = {s.start, s.end};
        }
        j["signal"] = ex.signal;
        out << j.dump() << '\n';
    }
}

Dataset read_jsonl(std::istream& in) {
    Dataset data;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!have_header) {
            if (!j.contains("header")) {
                throw InputError("dataset: first line must be the generator header");
            }
            data.header = j["header"];
            data.task = parse_task_kind(data.header.value("task", "keyword"));
            data.header.erase("task");
            have_header = true;
            continue;
        }
        try {
            Example ex;
            ex.tokens = j.at("tokens").get<std::vector<int>>();
            ex.signal = j.at("signal").get<std::vector<std::uint8_t>>();
            const auto& lab = j.at("label");
            if (lab.is_array()) {
                ex.label = Span{lab.at(0).get<std::size_t>(), lab.at(1).get<std::size_t>()};
            } else {
                ex.label = lab.get<std::size_t>();
            }
            if (ex.signal.size() != ex.tokens.size()) {
                throw InputError("signal mask length differs from token count");
            }
            data.examples.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!have_header) {
        throw InputError("dataset: empty file");
    }
    return data;
}

void save_dataset(const std::string& path, const Dataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw InputError("cannot write dataset to '" + path + "'");
    }
    write_jsonl(out, data);
    if (!out) {
        throw InputError("failed writing dataset to '" + path + "'");
    }
}

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open dataset '" + path + "'");
    }
    return read_jsonl(in);
}

} // namespace tokenprune::synthetic
