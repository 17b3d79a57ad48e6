#pragma once

#include <cstddef>

#include <json.hpp>

#include "ct2rep/volume.hpp"

namespace ct2rep {

// Non-overlapping patch extents along (depth, height, width).
struct PatchSize {
  std::size_t temporal = 12;
  std::size_t height = 24;
  std::size_t width = 24;
};

struct ModelConfig {
  Dims3 volume_shape{240, 480, 480};
  PatchSize patch;
  std::size_t dim = 512;

  std::size_t vision_layers = 2;
  std::size_t vision_heads = 4;
  std::size_t mlp_ratio = 4;

  std::size_t encoder_layers = 3;
  std::size_t encoder_heads = 8;
  std::size_t decoder_layers = 3;
  std::size_t decoder_heads = 8;

  std::size_t memory_slots = 3;
  std::size_t memory_heads = 8;
  bool memory_gates = true;

  // Transformer blocks over the prior report (longitudinal model only).
  std::size_t report_encoder_layers = 1;

  std::size_t vocab_size = 0;  // filled from the vocabulary at training time

  // Full-scale architecture.
  static ModelConfig paper();
  // 24x48x48 volumes, 6x12x12 patches, D=64: trains in minutes on a CPU.
  static ModelConfig desk();
  // 2x2x2 token grid with D=8 for finite-difference checks.
  static ModelConfig tiny();

  // Throws ShapeError/ContractError describing the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace ct2rep
