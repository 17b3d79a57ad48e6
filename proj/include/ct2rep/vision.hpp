#pragma once

// 3D vision feature extractor: patch embedding followed by alternating
// spatial (per temporal slice) and causal (per spatial position, across
// temporal slices) transformer blocks. The token grid keeps its
// (batch, T, H/p1, W/p2, D) shape through every block.

#include <array>
#include <cstddef>
#include <vector>

#include "ct2rep/config.hpp"
#include "ct2rep/nn.hpp"
#include "ct2rep/volume.hpp"

namespace ct2rep {

struct TokenGrid {
  std::size_t batch = 1;
  std::size_t temporal = 0;  // T
  std::size_t height = 0;    // H / p1
  std::size_t width = 0;     // W / p2
  std::size_t dim = 0;       // D

  std::size_t spatial() const { return height * width; }
  std::size_t cells() const { return batch * temporal * spatial(); }
  std::array<std::size_t, 5> dims() const { return {batch, temporal, height, width, dim}; }
  bool operator==(const TokenGrid&) const = default;
};

// Token grid for a volume shape; throws ShapeError when not divisible.
TokenGrid token_grid(const Dims3& volume, const PatchSize& patch, std::size_t dim, std::size_t batch = 1);

// Shape-only walk of the reshape chain, without touching any data:
// spatial view (B*T) x (h*w) x D, causal view (h*w) x (B*T) x D.
std::array<std::size_t, 3> spatial_view(const TokenGrid& g);
std::array<std::size_t, 3> causal_view(const TokenGrid& g);
TokenGrid from_spatial_view(const std::array<std::size_t, 3>& view, const TokenGrid& like);
TokenGrid from_causal_view(const std::array<std::size_t, 3>& view, const TokenGrid& like);
TokenGrid encoder_output_grid(const ModelConfig& cfg);

// Embedded CT tokens. Row (b, t, i, j) of `tokens` is
// ((b * T + t) * h + i) * w + j.
struct CtTokens {
  TokenGrid grid;
  Tensor tokens;  // [cells × D]
};

// Row layouts for the two attention patterns over a token grid.
SeqLayout spatial_layout(const TokenGrid& g);
SeqLayout causal_layout(const TokenGrid& g);

class VisionEncoder {
 public:
  static VisionEncoder init(const ModelConfig& cfg, Rng& rng);

  // Flattened (p_t × p1 × p2) patches, one row per grid cell. Requires a
  // normalized volume with the configured shape.
  Tensor extract_patches(const Volume3D& v) const;
  CtTokens patch_embed(const Volume3D& v) const;
  CtTokens patch_embed(const std::vector<Volume3D>& batch) const;
  CtTokens spatial_block(const CtTokens& z, std::size_t layer) const;
  CtTokens causal_block(const CtTokens& z, std::size_t layer) const;
  CtTokens forward(const CtTokens& embedded) const;
  // patch_embed then all blocks; returns N = T*h*w feature rows of width D.
  Tensor encode(const Volume3D& v) const;

  std::size_t layers() const { return spatial_.size(); }
  TransformerBlock& spatial_layer(std::size_t i) { return spatial_.at(i); }
  TransformerBlock& causal_layer(std::size_t i) { return causal_.at(i); }
  Linear& patch_projection() { return patch_proj_; }
  Tensor& temporal_positions() { return temporal_pos_; }
  Tensor& spatial_positions() { return spatial_pos_; }
  const TokenGrid& grid() const { return grid_; }

  void visit(const std::string& prefix, const ParamVisitor& f);

 private:
  ModelConfig cfg_;
  TokenGrid grid_;
  Linear patch_proj_;
  Tensor temporal_pos_;  // [T × D]
  Tensor spatial_pos_;   // [(h*w) × D]
  std::vector<TransformerBlock> spatial_;
  std::vector<TransformerBlock> causal_;
};

}  // namespace ct2rep
