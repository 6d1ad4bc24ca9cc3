#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "xmae/model.hpp"

namespace xmae {

// Named f32 tensor as stored on disk.
struct StoredTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

// Adam moments and step counter, shaped like the model parameters.
struct OptimState {
  ModelParams<float> m;
  ModelParams<float> v;
  std::int64_t step = 0;
};

OptimState make_optim_state(const ModelParams<float>& params);

struct Checkpoint {
  ModelParams<float> params;
  std::optional<OptimState> optim;
};

nlohmann::json model_config_to_json(const ModelConfig& c, Objective objective);
// Throws Error(Config) on unknown keys or bad values.
ModelConfig model_config_from_json(const nlohmann::json& j, Objective* objective = nullptr);

// File layout: "XCKP", u32 version, u32 config length, config JSON,
// u32 tensor count, then per tensor u16 name length, name, u8 rank,
// u32 dims[rank], f32 data. Optimizer tensors use the reserved names
// optim.m.<name>, optim.v.<name> and optim.step.
std::vector<std::uint8_t> encode_checkpoint(const ModelParams<float>& params, const OptimState* optim = nullptr);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                     const OptimState* optim = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace xmae
