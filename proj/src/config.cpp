#include "ct2rep/config.hpp"

#include <string>

#include "ct2rep/tensor.hpp"

namespace ct2rep {

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.volume_shape = {24, 48, 48};
  c.patch = {6, 12, 12};
  c.dim = 64;
  c.vision_layers = 2;
  c.vision_heads = 4;
  c.encoder_layers = 2;
  c.encoder_heads = 2;
  c.decoder_layers = 2;
  c.decoder_heads = 2;
  c.memory_heads = 2;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.volume_shape = {4, 4, 4};
  c.patch = {2, 2, 2};
  c.dim = 8;
  c.vision_layers = 1;
  c.vision_heads = 2;
  c.mlp_ratio = 2;
  c.encoder_layers = 1;
  c.encoder_heads = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.memory_slots = 2;
  c.memory_heads = 2;
  c.vocab_size = 12;
  return c;
}

void ModelConfig::validate() const {
  const std::size_t patch_dims[3] = {patch.temporal, patch.height, patch.width};
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch_dims[a] == 0 || volume_shape[a] == 0 || volume_shape[a] % patch_dims[a] != 0) {
      throw ShapeError("volume axis " + std::to_string(a) + " of length " + std::to_string(volume_shape[a]) +
                       " is not divisible by patch size " + std::to_string(patch_dims[a]));
    }
  }
  auto heads_ok = [&](std::size_t heads, const char* what) {
    if (heads == 0 || dim % heads != 0) {
      throw ShapeError(std::string(what) + " heads (" + std::to_string(heads) + ") must divide dim " +
                       std::to_string(dim));
    }
  };
  if (dim == 0) throw ShapeError("dim must be positive");
  heads_ok(vision_heads, "vision");
  heads_ok(encoder_heads, "encoder");
  heads_ok(decoder_heads, "decoder");
  heads_ok(memory_heads, "memory");
  if (memory_slots == 0) throw ContractError("memory_slots must be positive");
  if (mlp_ratio == 0) throw ContractError("mlp_ratio must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"volume_shape", c.volume_shape},
                     {"patch", {c.patch.temporal, c.patch.height, c.patch.width}},
                     {"dim", c.dim},
                     {"vision_layers", c.vision_layers},
                     {"vision_heads", c.vision_heads},
                     {"mlp_ratio", c.mlp_ratio},
                     {"encoder_layers", c.encoder_layers},
                     {"encoder_heads", c.encoder_heads},
                     {"decoder_layers", c.decoder_layers},
                     {"decoder_heads", c.decoder_heads},
                     {"memory_slots", c.memory_slots},
                     {"memory_heads", c.memory_heads},
                     {"memory_gates", c.memory_gates},
                     {"report_encoder_layers", c.report_encoder_layers},
                     {"vocab_size", c.vocab_size}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d = c;
  if (j.contains("volume_shape")) d.volume_shape = j.at("volume_shape").get<Dims3>();
  if (j.contains("patch")) {
    const auto p = j.at("patch").get<std::array<std::size_t, 3>>();
    d.patch = {p[0], p[1], p[2]};
  }
  auto read = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  read("dim", d.dim);
  read("vision_layers", d.vision_layers);
  read("vision_heads", d.vision_heads);
  read("mlp_ratio", d.mlp_ratio);
  read("encoder_layers", d.encoder_layers);
  read("encoder_heads", d.encoder_heads);
  read("decoder_layers", d.decoder_layers);
  read("decoder_heads", d.decoder_heads);
  read("memory_slots", d.memory_slots);
  read("memory_heads", d.memory_heads);
  read("memory_gates", d.memory_gates);
  read("report_encoder_layers", d.report_encoder_layers);
  read("vocab_size", d.vocab_size);
  c = d;
}

}  // namespace ct2rep
