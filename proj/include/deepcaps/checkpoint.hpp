#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "deepcaps/config.hpp"
#include "deepcaps/model.hpp"

namespace deepcaps {

// Layout:
//   "DCAPCKPT"            8 bytes
//   version               uint8 (kCheckpointVersion)
//   header length         uint64 little-endian
//   header                JSON text (architecture, tensor table, step, rng, metrics)
//   payload length        uint64 little-endian, in bytes
//   payload               float32 little-endian, parameters then buffers in
//                         registry order
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  std::string kind;  // "param" or "buffer"
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  Json architecture;
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  std::string rng_state;
  Json metrics = Json::object();
  std::vector<CheckpointTensor> tensors;
};

Checkpoint snapshot(const Model<float>& model, std::uint64_t step, std::size_t epoch, const std::string& rng_state,
                    const Json& metrics);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Distinct errors: CheckpointHeaderError (bad magic or unreadable header),
// CheckpointVersionError, CheckpointTruncatedError.
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies tensors into `model`. ArchitectureMismatchError if the architecture
// or tensor table differs.
void restore(Model<float>& model, const Checkpoint& ckpt);

std::unique_ptr<Model<float>> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace deepcaps
