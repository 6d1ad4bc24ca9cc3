#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmae/evalkit.hpp"
#include "xmae/model.hpp"
#include "xmae/oracle.hpp"
#include "xmae/synthgen.hpp"
#include "xmae/training.hpp"

namespace xmae {

struct OracleConfig {
  // Cross-reconstruction scenario.
  int horizon = 5;
  int true_delay = 2;
  std::vector<std::vector<double>> transition{{0.85, 0.15}, {0.30, 0.70}};
  std::vector<double> emit_ecg{0.0, 1.0};
  std::vector<double> emit_ppg{0.0, 1.0};
  double flip_prob = 0.0;
  std::vector<int> visible_ecg{0};
  // Symmetric-objective scenario on the period-two chain.
  int sym_horizon = 6;
  std::vector<int> sym_delays{0, 1, 2, 3};
  std::size_t mc_samples = 1000000;
  std::uint64_t mc_seed = 77;

  oracle::ToyProcess cross_process() const;
};

enum class EvalSplit { Validation, All };

struct EvalConfig {
  EvalOptions options;
  EvalSplit split = EvalSplit::Validation;
};

// Every field optional; unknown keys anywhere throw Error(Config).
struct RunConfig {
  SynthConfig synth;  // synth.preprocess holds the preprocess section
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  OracleConfig oracle;
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& c);

// Parse errors carry line and column.
nlohmann::json parse_json_text(const std::string& text, const std::string& origin);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace xmae
