#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dprune/config.hpp"
#include "dprune/model.hpp"
#include "dprune/pruner.hpp"
#include "dprune/train.hpp"

namespace dprune::harness {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ExperimentConfig config;
  det::Model model;
  int epoch = 0;             // completed training epochs
  bool ldt_trained = false;  // trained with alpha or beta > 0
  OptimizerState optimizer;
  std::vector<prune::PruneMask> prune_history;
};

// Layout (little endian): "LDTC", u32 version, config JSON, graph, named
// parameter tensors, training state, prune history. Every variable-size field
// is prefixed by its length.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

// Written to a temporary file in the same directory, then renamed.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint read_checkpoint(const std::filesystem::path& path);

bool operator==(const Checkpoint& a, const Checkpoint& b);

}  // namespace dprune::harness
