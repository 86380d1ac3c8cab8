#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "dprune/detector.hpp"
#include "dprune/discriminant.hpp"
#include "dprune/model.hpp"
#include "dprune/pruner.hpp"
#include "dprune/synthdet.hpp"
#include "dprune/train.hpp"

namespace dprune::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class PruneMethod { kLdt, kRandom, kL1 };
enum class SignMode { kAbs, kSigned };

struct PruneConfig {
  double target_rate = 0.5;
  int rounds = 2;
  int retrain_epochs = 10;
  int images = 128;  // D
  double a = 1.2;
  double b = 0.062;
  prune::UtilitySource utility = prune::UtilitySource::kNeck;
  bool location = true;
  SignMode sign = SignMode::kAbs;
  PruneMethod method = PruneMethod::kLdt;
  int batch_size = 32;
  void validate() const;
  bool operator==(const PruneConfig&) const = default;
};

// arch.seed is not part of the file: parameter init follows `seed`.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  data::DatasetConfig data;
  det::ArchConfig arch;
  OptimizerConfig optimizer;
  det::DetectionLossConfig detection;
  ldt::LdtConfig ldt;
  PruneConfig prune;

  void validate() const;
  det::ArchConfig model_arch() const;
  bool operator==(const ExperimentConfig&) const = default;
};

// JSON text with every key present, keys sorted.
std::string render_config(const ExperimentConfig& config);
// Missing keys keep their defaults; unknown keys and out-of-range values
// raise ConfigError.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

const char* method_name(PruneMethod m);

}  // namespace dprune::harness
