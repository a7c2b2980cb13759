#pragma once

#include "tokenprune/config.hpp"
#include "tokenprune/pipeline.hpp"

#include <iosfwd>
#include <string>

namespace tokenprune::checkpoint {

// TPRN1 layout (little-endian):
//   "TPRN1", u32 version,
//   u64 length + key=value config text,
//   u64 length + JSON progress record (stage, epochs, optimizer step, history),
//   u64 entry count, then per entry: u32 name length, name, u32 ndims, u64 dims[ndims], f64 payload.
// Entry names: model parameters as-is, "teacher.<name>", "adam.m.<name>", "adam.v.<name>".

struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    pipeline::TrainState state;
};

void write(std::ostream& out, const ModelConfig& model_config, const TrainConfig& train_config,
           const pipeline::TrainState& state);
Checkpoint read(std::istream& in);

/// Writes through a temporary file and renames, so an interrupted save never leaves a torn file.
void save(const std::string& path, const ModelConfig& model_config, const TrainConfig& train_config,
          const pipeline::TrainState& state);
Checkpoint load(const std::string& path);

} // namespace tokenprune::checkpoint
