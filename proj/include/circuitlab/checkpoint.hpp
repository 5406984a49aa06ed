#pragma once

// Checkpoint container:
//
//   bytes 0..7    magic "CLCKPT01"
//   bytes 8..15   manifest length N, uint64 little-endian
//   next N bytes  UTF-8 JSON manifest
//   remainder     tensors, float32 little-endian, row-major, in manifest order
//
// The manifest holds format_version, model_config, vocab (token list),
// vocab_hash (16 hex digits), tensors [{name, shape [rows, cols], offset,
// count}] with offsets in floats from the start of the tensor block, and a
// free-form "extra" object.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitlab/grammar.hpp"
#include "circuitlab/model.hpp"

namespace circuitlab {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::vector<std::string> vocab;
  std::uint64_t vocab_hash = 0;
  nlohmann::json extra = nlohmann::json::object();
};

// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& cfg,
                     const Vocabulary& vocab, const nlohmann::json& extra = nlohmann::json::object());

// Validates magic, manifest, every tensor shape against the stored config and
// the vocabulary hash. When `expected` is given its hash must match too.
// Throws CheckpointError.
Checkpoint load_checkpoint(const std::filesystem::path& path, const Vocabulary* expected = nullptr);

std::string hash_hex(std::uint64_t h);

}  // namespace circuitlab
