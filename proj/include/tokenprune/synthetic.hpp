#pragma once

#include "tokenprune/transformer.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace tokenprune::synthetic {

struct Example {
    std::vector<int> tokens;          // tokens[0] is always the anchor (id 0)
    Label label;
    std::vector<std::uint8_t> signal; // tokens that causally determine the label
};

enum class TaskKind { keyword, marker_span };

std::string to_string(TaskKind kind);
TaskKind parse_task_kind(const std::string& text);

/// Disjoint id ranges: anchor, query markers, answer markers, class signal bands, neutral filler.
struct VocabBands {
    int anchor = 0;
    int query_begin = 1;
    int answer_begin = 8;
    int class_begin = 16;
    int class_width = 1;
    int filler_begin = 128;
    int filler_end = 256;
    std::size_t marker_types = 3;

    /// `class_width` is capped so every band fits below the filler range.
    static VocabBands make(std::size_t vocab_size, std::size_t n_classes, std::size_t class_width = 1);
    std::optional<std::size_t> class_of(int token) const;
};

struct KeywordParams {
    std::size_t n_examples = 20000;
    std::size_t seq_len_min = 48; // total length, anchor included
    std::size_t seq_len_max = 64;
    std::size_t n_classes = 4;
    std::size_t signal_count = 4;
    std::size_t class_width = 1; // distinct token ids per class band
    std::size_t vocab_size = 256;
    std::uint64_t seed = 1;
};

struct SpanParams {
    std::size_t n_examples = 20000;
    std::size_t seq_len_min = 48;
    std::size_t seq_len_max = 64;
    std::size_t vocab_size = 256;
    std::uint64_t seed = 1;
};

struct Dataset {
    TaskKind task = TaskKind::keyword;
    nlohmann::json header; // generator parameters and seed
    std::vector<Example> examples;

    std::size_t size() const { return examples.size(); }
};

/// Label = class owning a strict majority of the signal tokens.
Dataset gen_keyword_task(const KeywordParams& params);
/// A query marker near the front names the answer-marker type whose run is the label span.
Dataset gen_marker_span_task(const SpanParams& params);

/// Bag-of-words vote over class bands.
std::size_t majority_vote_oracle(const std::vector<int>& tokens, const VocabBands& bands);
/// Finds the query marker, then the run of its answer marker.
Span marker_scan_oracle(const std::vector<int>& tokens, const VocabBands& bands);

/// Fraction of signal tokens that survived every reduction module.
double selection_recall(const transformer::LayerTrace& trace, const std::vector<std::uint8_t>& signal);

void write_jsonl(std::ostream& out, const Dataset& data);
Dataset read_jsonl(std::istream& in);
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

} // namespace tokenprune::synthetic
