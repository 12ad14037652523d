#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <torch/torch.h>

#include "retrostory/config.h"

namespace retrostory {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// In-memory form of a checkpoint file: an embedded ModelConfig, free-form
// metadata and named float32 tensors.
//
// File layout (little endian):
//   "RSTORYCK" | u32 version | u64 header bytes | header JSON |
//   float32 payload | SHA-256 of everything before it (32 bytes)
struct Archive {
  std::string kind;
  ModelConfig config;
  Json meta = Json::object();
  std::map<std::string, torch::Tensor> tensors;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);

// Reads and fully validates the file before returning: bad magic, version
// mismatch, truncation and checksum failures throw CheckpointError.
Archive load_archive(const std::filesystem::path& path);

// Copies every parameter and buffer of `module` into the archive under
// `prefix` (e.g. "model.").
void export_module(const torch::nn::Module& module, const std::string& prefix, Archive& archive);

// Loads tensors named `prefix + name` into the module. With strict=true,
// every module tensor must be present with a matching shape and nothing is
// modified unless all of them are. With strict=false, matching tensors are
// copied and the names that were not found are returned.
std::vector<std::string> import_module(torch::nn::Module& module, const std::string& prefix,
                                       const Archive& archive, bool strict = true);

// Throws CheckpointError listing differing keys when the embedded config does
// not equal `expected`.
void require_config(const Archive& archive, const ModelConfig& expected);

}  // namespace retrostory
