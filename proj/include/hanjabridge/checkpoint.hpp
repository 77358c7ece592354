#pragma once

// Checkpoint file: 8-byte magic, u32 format version, u64 header length, a JSON header (model
// config, step, optimizer settings, named-tensor index, free-form extras) and a little-endian
// payload. Parameters and optimizer moments are 32-bit floats; a serialized queue keeps its
// 64-bit vectors so a resumed run sees exactly the same references.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "hanjabridge/distill.hpp"
#include "hanjabridge/model.hpp"
#include "hanjabridge/train.hpp"

namespace hb {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Params<float> params;
  std::uint64_t step = 0;
  std::optional<AdamState<float>> optimizer;
  std::optional<InstanceQueue> queue;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Params<float>& params, std::uint64_t step,
                     const AdamState<float>* optimizer = nullptr, const InstanceQueue* queue = nullptr,
                     const nlohmann::json& extra = nlohmann::json::object());

// Throws CheckpointError on a bad magic, an unknown version, a truncated payload, or (when
// `expected` is given) a config whose shapes differ from it.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

// Reads only the JSON header.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

}  // namespace hb
