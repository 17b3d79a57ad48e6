#include <doctest.h>

#include "ct2rep/vision.hpp"
#include "gradcheck.hpp"

using namespace ct2rep;
using namespace ct2rep::testing;

namespace {

Volume3D random_volume(const ModelConfig& cfg, Rng& rng) {
  Volume3D v = Volume3D::filled(cfg.volume_shape, {1, 1, 1}, 0.0, VolumeUnit::normalized);
  for (auto& x : v.data) x = rng.uniform(-1, 1);
  return v;
}

}  // namespace

TEST_SUITE("vision-encoder") {
  TEST_CASE("full-scale grid is 20x20x20x512") {
    const TokenGrid g = encoder_output_grid(ModelConfig::paper());
    CHECK(g.dims() == std::array<std::size_t, 5>{1, 20, 20, 20, 512});
  }

  TEST_CASE("indivisible shapes raise a shape error") {
    CHECK_THROWS_AS(token_grid({25, 48, 48}, {6, 12, 12}, 64), ShapeError);
    ModelConfig cfg = ModelConfig::desk();
    cfg.volume_shape = {24, 50, 48};
    CHECK_THROWS_AS(cfg.validate(), ShapeError);
  }

  TEST_CASE("views fold back onto the same grid") {
    const TokenGrid g{2, 3, 4, 5, 8};
    CHECK(spatial_view(g) == std::array<std::size_t, 3>{6, 20, 8});
    CHECK(causal_view(g) == std::array<std::size_t, 3>{20, 6, 8});
    CHECK(from_spatial_view(spatial_view(g), g) == g);
    CHECK(from_causal_view(causal_view(g), g) == g);
  }

  TEST_CASE("encoder requires normalized input of the configured shape") {
    Rng rng(1);
    const ModelConfig cfg = ModelConfig::tiny();
    const auto enc = VisionEncoder::init(cfg, rng);
    Volume3D v = random_volume(cfg, rng);
    v.unit = VolumeUnit::hounsfield;
    CHECK_THROWS_AS(enc.encode(v), StateError);
    Volume3D wrong = Volume3D::filled({4, 4, 6}, {1, 1, 1}, 0, VolumeUnit::normalized);
    CHECK_THROWS_AS(enc.encode(wrong), ShapeError);
  }

  TEST_CASE("blocks preserve shape and batch items stay independent") {
    Rng rng(2);
    const ModelConfig cfg = ModelConfig::tiny();
    const auto enc = VisionEncoder::init(cfg, rng);
    const Volume3D a = random_volume(cfg, rng);
    const Volume3D b = random_volume(cfg, rng);
    const CtTokens z = enc.patch_embed(std::vector<Volume3D>{a, b});
    CHECK(z.tokens.shape() == Shape{16, 8});
    const CtTokens s = enc.spatial_block(z, 0);
    const CtTokens c = enc.causal_block(s, 0);
    CHECK(s.tokens.shape() == z.tokens.shape());
    CHECK(c.tokens.shape() == z.tokens.shape());
    const Tensor alone = enc.encode(a);
    const Tensor batched = enc.forward(z).tokens;
    for (std::size_t i = 0; i < alone.numel(); ++i) CHECK(batched.at(i) == doctest::Approx(alone.at(i)).epsilon(1e-13));
  }

  TEST_CASE("causal block ignores later temporal slices exactly") {
    Rng rng(3);
    ModelConfig cfg = ModelConfig::tiny();
    cfg.volume_shape = {8, 4, 4};
    const auto enc = VisionEncoder::init(cfg, rng);
    const CtTokens z = enc.patch_embed(random_volume(cfg, rng));
    const std::size_t hw = z.grid.spatial();
    CtTokens perturbed = z;
    perturbed.tokens = z.tokens.clone();
    for (std::size_t i = 2 * hw * 8; i < perturbed.tokens.numel(); ++i) perturbed.tokens.mutable_data()[i] += 3.0;
    const Tensor y0 = enc.causal_block(z, 0).tokens;
    const Tensor y1 = enc.causal_block(perturbed, 0).tokens;
    for (std::size_t i = 0; i < 2 * hw * 8; ++i) CHECK(y0.at(i) == y1.at(i));
  }

  TEST_CASE("encoder gradients match finite differences") {
    Rng rng(4);
    const ModelConfig cfg = ModelConfig::tiny();
    auto enc = VisionEncoder::init(cfg, rng);
    const Volume3D v = random_volume(cfg, rng);
    std::vector<Tensor> params;
    enc.visit("visual", [&](const std::string&, Tensor& t) { params.push_back(t); });
    const auto r = grad_check(params, [&] { return weighted_sum(enc.encode(v)); });
    CAPTURE(r.worst);
    CHECK(r.max_rel_error < 1e-4);
  }
}
