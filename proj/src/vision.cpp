#include "ct2rep/vision.hpp"

#include <string>

namespace ct2rep {

TokenGrid token_grid(const Dims3& volume, const PatchSize& patch, std::size_t dim, std::size_t batch) {
  const std::size_t p[3] = {patch.temporal, patch.height, patch.width};
  for (std::size_t a = 0; a < 3; ++a) {
    if (p[a] == 0 || volume[a] % p[a] != 0) {
      throw ShapeError("volume shape [" + std::to_string(volume[0]) + "x" + std::to_string(volume[1]) + "x" +
                       std::to_string(volume[2]) + "] is not divisible by patch [" + std::to_string(p[0]) + "x" +
                       std::to_string(p[1]) + "x" + std::to_string(p[2]) + "]");
    }
  }
  if (dim == 0 || batch == 0) throw ShapeError("token grid needs positive dim and batch");
  return {batch, volume[0] / p[0], volume[1] / p[1], volume[2] / p[2], dim};
}

std::array<std::size_t, 3> spatial_view(const TokenGrid& g) {
  return {g.batch * g.temporal, g.height * g.width, g.dim};
}

std::array<std::size_t, 3> causal_view(const TokenGrid& g) {
  return {g.height * g.width, g.batch * g.temporal, g.dim};
}

TokenGrid from_spatial_view(const std::array<std::size_t, 3>& view, const TokenGrid& like) {
  if (view[0] % like.batch != 0 || view[1] != like.height * like.width) {
    throw ShapeError("spatial view does not fold back onto the token grid");
  }
  return {like.batch, view[0] / like.batch, like.height, like.width, view[2]};
}

TokenGrid from_causal_view(const std::array<std::size_t, 3>& view, const TokenGrid& like) {
  if (view[1] % like.batch != 0 || view[0] != like.height * like.width) {
    throw ShapeError("causal view does not fold back onto the token grid");
  }
  return {like.batch, view[1] / like.batch, like.height, like.width, view[2]};
}

TokenGrid encoder_output_grid(const ModelConfig& cfg) {
  TokenGrid g = token_grid(cfg.volume_shape, cfg.patch, cfg.dim);
  for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
    g = from_spatial_view(spatial_view(g), g);
    g = from_causal_view(causal_view(g), g);
  }
  return g;
}

SeqLayout spatial_layout(const TokenGrid& g) { return SeqLayout::contiguous(g.batch * g.temporal, g.spatial()); }

SeqLayout causal_layout(const TokenGrid& g) {
  SeqLayout layout;
  layout.length = g.temporal;
  layout.pos_stride = g.spatial();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t s = 0; s < g.spatial(); ++s) layout.bases.push_back(b * g.temporal * g.spatial() + s);
  return layout;
}

VisionEncoder VisionEncoder::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  VisionEncoder e;
  e.cfg_ = cfg;
  e.grid_ = token_grid(cfg.volume_shape, cfg.patch, cfg.dim);
  const std::size_t patch_voxels = cfg.patch.temporal * cfg.patch.height * cfg.patch.width;
  e.patch_proj_ = Linear::init(patch_voxels, cfg.dim, rng);
  e.temporal_pos_ = init_embedding(e.grid_.temporal, cfg.dim, rng);
  e.spatial_pos_ = init_embedding(e.grid_.spatial(), cfg.dim, rng);
  for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
    e.spatial_.push_back(TransformerBlock::init(cfg.dim, cfg.vision_heads, cfg.mlp_ratio, rng));
    e.causal_.push_back(TransformerBlock::init(cfg.dim, cfg.vision_heads, cfg.mlp_ratio, rng));
  }
  return e;
}

Tensor VisionEncoder::extract_patches(const Volume3D& v) const {
  if (v.unit != VolumeUnit::normalized) {
    throw StateError(std::string("vision encoder expects a normalized volume, got ") + unit_name(v.unit));
  }
  if (v.shape != cfg_.volume_shape) {
    // Surfaces divisibility problems first, then the configuration mismatch.
    token_grid(v.shape, cfg_.patch, cfg_.dim);
    throw ShapeError("volume shape does not match the configured encoder input");
  }
  const auto& p = cfg_.patch;
  const std::size_t patch_voxels = p.temporal * p.height * p.width;
  std::vector<double> rows(grid_.temporal * grid_.spatial() * patch_voxels);
  std::size_t out = 0;
  for (std::size_t t = 0; t < grid_.temporal; ++t)
    for (std::size_t i = 0; i < grid_.height; ++i)
      for (std::size_t j = 0; j < grid_.width; ++j)
        for (std::size_t dz = 0; dz < p.temporal; ++dz)
          for (std::size_t dy = 0; dy < p.height; ++dy)
            for (std::size_t dx = 0; dx < p.width; ++dx)
              rows[out++] = v.at(t * p.temporal + dz, i * p.height + dy, j * p.width + dx);
  return Tensor({grid_.temporal * grid_.spatial(), patch_voxels}, std::move(rows));
}

CtTokens VisionEncoder::patch_embed(const std::vector<Volume3D>& batch) const {
  if (batch.empty()) throw ShapeError("patch_embed: empty batch");
  std::vector<Tensor> patches;
  for (const auto& v : batch) patches.push_back(extract_patches(v));
  Tensor flat = patches.size() == 1 ? patches.front() : concat_rows(patches);
  TokenGrid g = grid_;
  g.batch = batch.size();
  std::vector<std::size_t> t_idx, s_idx;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t t = 0; t < g.temporal; ++t)
      for (std::size_t s = 0; s < g.spatial(); ++s) {
        t_idx.push_back(t);
        s_idx.push_back(s);
      }
  Tensor tokens = add(add(patch_proj_(flat), gather_rows(temporal_pos_, t_idx)), gather_rows(spatial_pos_, s_idx));
  return {g, tokens};
}

CtTokens VisionEncoder::patch_embed(const Volume3D& v) const { return patch_embed(std::vector<Volume3D>{v}); }

CtTokens VisionEncoder::spatial_block(const CtTokens& z, std::size_t layer) const {
  return {z.grid, spatial_.at(layer)(z.tokens, spatial_layout(z.grid), /*causal=*/false)};
}

CtTokens VisionEncoder::causal_block(const CtTokens& z, std::size_t layer) const {
  return {z.grid, causal_.at(layer)(z.tokens, causal_layout(z.grid), /*causal=*/true)};
}

CtTokens VisionEncoder::forward(const CtTokens& embedded) const {
  CtTokens z = embedded;
  for (std::size_t l = 0; l < spatial_.size(); ++l) {
    z = spatial_block(z, l);
    z = causal_block(z, l);
  }
  return z;
}

Tensor VisionEncoder::encode(const Volume3D& v) const { return forward(patch_embed(v)).tokens; }

void VisionEncoder::visit(const std::string& prefix, const ParamVisitor& f) {
  patch_proj_.visit(prefix + ".patch_proj", f);
  f(prefix + ".temporal_pos", temporal_pos_);
  f(prefix + ".spatial_pos", spatial_pos_);
  for (std::size_t l = 0; l < spatial_.size(); ++l) {
    spatial_[l].visit(prefix + ".spatial." + std::to_string(l), f);
    causal_[l].visit(prefix + ".causal." + std::to_string(l), f);
  }
}

}  // namespace ct2rep
