#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/synthetic.hpp"

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace tokenprune::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kDivergence = 3 };

/// Every ModelConfig and TrainConfig key plus data and output settings, as flat key=value text.
struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    std::string data_path;
    std::string dev_path;      // empty: split the tail of data_path
    double dev_fraction = 0.1;
    std::string output_dir;

    KeyValues to_key_values() const;
    /// Throws ParameterError for unknown keys.
    void apply(const std::string& key, const std::string& value);
    void apply(const KeyValues& kv);
};

/// TOKENPRUNE_OUT when set, otherwise the working directory.
std::string output_root();
/// Absolute paths pass through; relative ones are placed under output_root().
std::string resolve_output(const std::string& path);

/// Deterministic tail split: the last ⌈dev_fraction·n⌉ examples form the dev set.
std::pair<synthetic::Dataset, synthetic::Dataset> split_dataset(const synthetic::Dataset& data, double dev_fraction);

/// Adopts vocabulary, class count and head kind from a dataset header.
void adopt_dataset_shape(ModelConfig& model, const synthetic::Dataset& data);

/// Parses and runs one command; returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace tokenprune::cli
