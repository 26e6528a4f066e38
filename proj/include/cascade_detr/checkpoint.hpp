#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cascade_detr/model.hpp"

namespace cdetr {

// Container layout (docs/checkpoint.md):
//   8 bytes   magic "CDETRCKP"
//   u32 LE    format version
//   u64 LE    header length in bytes
//   header    UTF-8 text, one "key=value" per line: config.*, meta.*, and
//             "param=<name> <d0>x<d1>..." in payload order
//   payload   each parameter as flat float64 little-endian, row-major
constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointInfo {
    std::uint32_t version = 0;
    ModelConfig config;
    std::vector<std::pair<std::string, Shape>> manifest;
    std::map<std::string, std::string> meta;
};

void save_checkpoint(const CascadeDetr& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& meta = {});

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Builds a model from the stored config and parameters.
CascadeDetr load_checkpoint(const std::filesystem::path& path);

// Loads parameters into an existing model. Rejects a checkpoint whose config
// or manifest differs, naming every differing field.
void load_checkpoint_into(CascadeDetr& model, const std::filesystem::path& path);

}  // namespace cdetr
