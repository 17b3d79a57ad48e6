#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ct2rep/longitudinal.hpp"
#include "gradcheck.hpp"

using namespace ct2rep;
using namespace ct2rep::testing;

namespace {

ManifestEntry visit(const std::string& patient, const std::string& time, const std::string& path) {
  ManifestEntry e;
  e.id = path;
  e.meta.patient_id = patient;
  e.meta.study_time = time;
  e.meta.source_path = path;
  return e;
}

Volume3D random_volume(const ModelConfig& cfg, Rng& rng) {
  Volume3D v = Volume3D::filled(cfg.volume_shape, {1, 1, 1}, 0.0, VolumeUnit::normalized);
  for (auto& x : v.data) x = rng.uniform(-1, 1);
  return v;
}

void check_row_stochastic(const Tensor& w) {
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < w.cols(); ++c) {
      CHECK(w.at(r, c) >= 0.0);
      s += w.at(r, c);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

}  // namespace

TEST_SUITE("longitudinal") {
  TEST_CASE("build_pairs emits every earlier/later combination") {
    const std::vector<ManifestEntry> entries = {
        visit("A", "2021-03-01T00:00:00", "a2"), visit("B", "2020-01-01T00:00:00", "b0"),
        visit("A", "2020-03-01T00:00:00", "a1"), visit("A", "2022-03-01T00:00:00", "a3"),
        visit("A", "2019-03-01T00:00:00", "a0"), visit("C", "2020-01-01T00:00:00", "c0")};
    const auto pairs = build_pairs(entries);
    REQUIRE(pairs.size() == 6);  // C(4,2) for A, none for B and C
    for (const auto& p : pairs) {
      CHECK(p.patient_id == "A");
      CHECK(p.old_time < p.new_time);
    }
    CHECK(pairs.front().old_visit.id == "a0");
    CHECK(pairs.front().new_visit.id == "a1");
    CHECK(pairs.back().old_visit.id == "a2");
    CHECK(pairs.back().new_visit.id == "a3");
  }

  TEST_CASE("equal study times are paired in source-path order") {
    const std::vector<ManifestEntry> entries = {visit("A", "2021-03-01T00:00:00", "z"),
                                                visit("A", "2021-03-01T00:00:00", "m"),
                                                visit("A", "2020-03-01T00:00:00", "q")};
    const auto pairs = build_pairs(entries);
    REQUIRE(pairs.size() == 3);
    CHECK(pairs[0].old_visit.id == "q");
    CHECK(pairs[0].new_visit.id == "m");
    CHECK(pairs[2].old_visit.id == "m");
    CHECK(pairs[2].new_visit.id == "z");
  }

  TEST_CASE("bad timestamps are rejected") {
    CHECK_THROWS_AS(build_pairs({visit("A", "not a time", "x"), visit("A", "2020-01-01T00:00:00", "y")}),
                    IngestionError);
  }

  TEST_CASE("pairs manifest rejects a prior visit that is later") {
    const auto dir = std::filesystem::temp_directory_path() / "ct2rep_pairs_test";
    std::filesystem::create_directories(dir);
    Volume3D raw = Volume3D::filled({2, 2, 2}, {1, 1, 1}, 0.0, VolumeUnit::raw);
    write_payload(dir / "v.i16", raw);
    ManifestEntry a = visit("A", "2021-01-01T00:00:00", "a");
    ManifestEntry b = visit("A", "2020-01-01T00:00:00", "b");
    a.volume = b.volume = raw;
    LongitudinalPair p{"A", a, b, 0, 0};
    std::ofstream(dir / "pairs.jsonl") << to_pairs_row(p, "v.i16", "v.i16").dump() << '\n';
    try {
      load_pairs_manifest(dir / "pairs.jsonl");
      FAIL("expected IngestionError");
    } catch (const IngestionError& e) {
      CHECK(e.kind() == IngestionError::Kind::bad_timestamp);
    }
    std::swap(p.old_visit, p.new_visit);
    std::ofstream(dir / "pairs.jsonl") << to_pairs_row(p, "v.i16", "v.i16").dump() << '\n';
    CHECK(load_pairs_manifest(dir / "pairs.jsonl").size() == 1);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("fusion shapes and stochastic cross-attention") {
    Rng rng(11);
    const auto model = LongitudinalModel::init(ModelConfig::tiny(), rng);
    const std::size_t d = model.config().dim;
    for (std::size_t n_ip : {std::size_t{1}, std::size_t{5}}) {
      const Tensor vol = random_tensor({n_ip, d}, rng);
      const Tensor rep = random_tensor({3, d}, rng);
      const auto f = model.fuse_prior(vol, rep);
      CHECK(f.h_ip.shape() == Shape{n_ip, d});
      CHECK(f.h_rp.shape() == Shape{3, d});
      CHECK(f.r_star.shape() == Shape{3, n_ip});
      CHECK(f.i_star.shape() == Shape{n_ip, 3});
      CHECK(f.h_l.shape() == Shape{3 + n_ip, d});
      check_row_stochastic(f.r_star);
      check_row_stochastic(f.i_star);
    }
    CHECK_THROWS_AS(model.fuse_prior(Tensor(), random_tensor({3, d}, rng)), ContractError);
    CHECK_THROWS_AS(model.fuse_prior(random_tensor({2, d}, rng), Tensor()), ContractError);
    const Volume3D x = random_volume(model.config(), rng);
    CHECK_THROWS_AS(model.encode_prior(x, std::vector<std::size_t>{}), ContractError);
  }

  TEST_CASE("zeroed fusion output reproduces the base model exactly") {
    Rng rng(12);
    auto model = LongitudinalModel::init(ModelConfig::tiny(), rng);
    model.zero_longitudinal();
    const Volume3D x_new = random_volume(model.config(), rng);
    const Volume3D x_old = random_volume(model.config(), rng);
    const std::vector<std::size_t> r_old = {kBos, 4, 6, kEos};
    const std::vector<std::size_t> r_new = {kBos, 5, 7, 8, kEos};
    CHECK(model.loss(x_new, x_old, r_old, r_new).item() == model.base.loss(x_new, r_new).item());
    const Tensor h = model.base.encode(x_new);
    const auto f = model.encode_prior(x_old, r_old);
    const auto a = model.decode_step_long(h, std::span(r_new).first(3), f);
    const auto b = model.base.decode_step(h, std::span(r_new).first(3));
    CHECK(a.logits == b.logits);
    DecodeOptions opts;
    opts.max_tokens = 12;
    CHECK(model.generate_long(x_new, x_old, r_old, opts) == model.base.generate(x_new, opts));
  }

  TEST_CASE("prior report receives gradient through the loss") {
    Rng rng(13);
    auto model = LongitudinalModel::init(ModelConfig::tiny(), rng);
    const Volume3D x_new = random_volume(model.config(), rng);
    const Volume3D x_old = random_volume(model.config(), rng);
    const std::vector<std::size_t> r_old = {kBos, 4, 6, kEos};
    const std::vector<std::size_t> r_new = {kBos, 5, 7, 8, kEos};
    OptimizerSettings s;
    Adam adam = make_optimizer(named_parameters(model), s);
    train_step_long(model, adam, x_new, x_old, r_old, r_new);
    double report_grad = 0.0;
    for (const auto& [name, t] : named_parameters(model)) {
      if (name.rfind("longitudinal.report_", 0) == 0 && t.has_grad())
        for (double g : t.grad()) report_grad += std::abs(g);
    }
    CHECK(report_grad > 0.0);
  }

  TEST_CASE("longitudinal loss gradients match finite differences") {
    Rng rng(14);
    auto model = LongitudinalModel::init(ModelConfig::tiny(), rng);
    const Volume3D x_new = random_volume(model.config(), rng);
    const Volume3D x_old = random_volume(model.config(), rng);
    const std::vector<std::size_t> r_old = {kBos, 4, 6, kEos};
    const std::vector<std::size_t> r_new = {kBos, 5, 7, 8, kEos};
    std::vector<Tensor> params;
    for (auto& [name, t] : named_parameters(model)) params.push_back(t);
    const auto r = grad_check(params, [&] { return model.loss(x_new, x_old, r_old, r_new); });
    CAPTURE(r.worst);
    CHECK(r.max_rel_error < 1e-3);
  }
}
