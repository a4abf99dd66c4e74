#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "ccbert/jsonl.hpp"
#include "ccbert/model.hpp"

namespace ccbert {

// Binary checkpoint: magic "CCBERTCKPT", u32 version, length-prefixed UTF-8
// JSON config block, then named tensors (u64 name length, name bytes, u64
// rank, u64 dims, raw float32 little-endian values).
inline constexpr char kCheckpointMagic[] = "CCBERTCKPT";
inline constexpr uint32_t kCheckpointVersion = 1;

json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const json& j);

struct CheckpointMeta {
  std::string kind = "pretrain";  // "pretrain" or "finetune"
  int64_t step = 0;
  bool has_adam = false;
};

// Writes params (and optimizer state when meta.has_adam) atomically.
void save_checkpoint(const std::string& path, ModelParams<float>& params,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
  ModelParams<float> params;
  CheckpointMeta meta;
};

// Rejects magic/version/config problems and any tensor whose name or shape
// does not match the config, naming the offending tensor.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace ccbert
