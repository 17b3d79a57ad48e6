#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ct2rep/harness.hpp"
#include "ct2rep/synth.hpp"

using namespace ct2rep;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig small_config() {
  RunConfig c = RunConfig::desk();
  c.model.volume_shape = {8, 16, 16};
  c.model.patch = {4, 8, 8};
  c.model.dim = 16;
  c.model.vision_heads = c.model.encoder_heads = c.model.decoder_heads = c.model.memory_heads = 2;
  c.model.vision_layers = c.model.encoder_layers = c.model.decoder_layers = 1;
  c.model.mlp_ratio = 2;
  c.preprocess = {{45.0, 22.5, 22.5}, {8, 16, 16}};
  c.max_tokens = 40;
  c.seed = 17;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

SynthDataset small_dataset(const fs::path& dir, std::size_t patients, std::size_t visits) {
  SynthOptions o;
  o.n_patients = patients;
  o.min_visits = o.max_visits = visits;
  o.val_fraction = 0.0;
  o.seed = 4;
  o.target = small_config().preprocess;
  return synth_dataset(o, dir);
}

}  // namespace

TEST_SUITE("harness-cli") {
  TEST_CASE("paper preset carries the published hyperparameters") {
    const RunConfig c = RunConfig::paper();
    CHECK(c.optimizer.lr_visual == 5e-5);
    CHECK(c.optimizer.lr_other == 1e-4);
    CHECK(c.optimizer.hyper.beta1 == 0.9);
    CHECK(c.optimizer.hyper.beta2 == 0.99);
    CHECK(c.lr_gamma == 0.1);
    CHECK(c.max_tokens == 300);
    CHECK(c.model.dim == 512);
    CHECK(c.model.volume_shape == Dims3{240, 480, 480});
    CHECK(c.preprocess.target_shape == Dims3{240, 480, 480});
    CHECK(lr_scale_for_epoch(c, 9) == 1.0);
    CHECK(lr_scale_for_epoch(c, 10) == doctest::Approx(0.1));
    CHECK(lr_scale_for_epoch(c, 25) == doctest::Approx(0.01));
    CHECK(lr_scale_for_epoch(RunConfig::desk(), 25) == 1.0);
  }

  TEST_CASE("config JSON round trip and partial overrides") {
    RunConfig c = small_config();
    c.kind = ModelKind::longitudinal;
    c.zero_priors = true;
    c.decode_mode = DecodeMode::beam;
    const nlohmann::json j = c;
    RunConfig back = RunConfig::paper();
    from_json(j, back);
    CHECK(nlohmann::json(back) == j);
    RunConfig partial = RunConfig::paper();
    from_json(nlohmann::json::parse(R"({"epochs": 3, "optimizer": {"lr_other": 0.5}})"), partial);
    CHECK(partial.epochs == 3);
    CHECK(partial.optimizer.lr_other == 0.5);
    CHECK(partial.optimizer.lr_visual == 5e-5);
    CHECK_THROWS_AS(parse_kind("sideways"), ContractError);
  }

  TEST_CASE("encode_target caps length with EOS last") {
    const Vocabulary v = Vocabulary::build({"a b c d e f"});
    const auto ids = encode_target("a b c d e f", v, 4);
    CHECK(ids.size() == 5);
    CHECK(ids.front() == kBos);
    CHECK(ids.back() == kEos);
    CHECK(encode_target("a b", v, 4).size() == 4);
  }

  TEST_CASE("epoch order is a seeded permutation") {
    const auto a = epoch_order(3, 0, 10);
    auto sorted = a;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 10; ++i) CHECK(sorted[i] == i);
    CHECK(a == epoch_order(3, 0, 10));
    CHECK(a != epoch_order(3, 1, 10));
  }

  TEST_CASE("checkpoint round trip and corruption") {
    const Vocabulary vocab = Vocabulary::build({"heart size is normal"});
    for (ModelKind kind : {ModelKind::base, ModelKind::longitudinal}) {
      RunConfig c = small_config();
      c.kind = kind;
      Session s = Session::create(c, vocab);
      const std::string bytes = serialize_checkpoint(s.capture());
      const Checkpoint ck = parse_checkpoint(bytes);
      CHECK(ck.kind == kind);
      CHECK(serialize_checkpoint(Session::from_checkpoint(ck).capture()) == bytes);

      std::string bad = bytes;
      bad[0] = 'X';
      CHECK_THROWS_AS(parse_checkpoint(bad), CheckpointError);
      bad = bytes;
      bad[8] = 9;  // version
      CHECK_THROWS_AS(parse_checkpoint(bad), CheckpointError);
      CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointError);
      CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, 30)), CheckpointError);
      CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), CheckpointError);
      Checkpoint wrong = ck;
      wrong.weights.pop_back();
      CHECK_THROWS_AS(Session::from_checkpoint(wrong), CheckpointError);
      wrong = ck;
      wrong.weights[0].shape.push_back(1);
      CHECK_THROWS_AS(Session::from_checkpoint(wrong), CheckpointError);
    }
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ck.ckpt"), CheckpointError);
  }

  TEST_CASE("resumed training is bit-identical to an uninterrupted run") {
    TempDir tmp("ct2rep_resume_test");
    const auto ds = small_dataset(tmp.path / "data", 3, 1);
    RunConfig c = small_config();
    c.max_steps = 7;
    const auto full = run_train(c, ds.train_manifest, tmp.path / "full");
    CHECK(full.steps == 7);
    CHECK(full.final_epoch_loss == doctest::Approx((full.losses[3] + full.losses[4] + full.losses[5]) / 3));
    c.max_steps = 2;
    CHECK(std::isnan(run_train(c, ds.train_manifest, tmp.path / "short").final_epoch_loss));
    c.max_steps = 4;
    run_train(c, ds.train_manifest, tmp.path / "split");
    c.max_steps = 7;
    const auto resumed = run_train(c, ds.train_manifest, tmp.path / "split", tmp.path / "split" / "checkpoint.ckpt");
    CHECK(resumed.steps == 7);
    CHECK(resumed.losses.size() == 3);
    CHECK(slurp(full.checkpoint) == slurp(resumed.checkpoint));
    CHECK(slurp(full.loss_log) == slurp(resumed.loss_log));
    CHECK(checkpoint_roundtrip(full.checkpoint));
    const Checkpoint ck = load_checkpoint(full.checkpoint);
    CHECK(ck.step == 7);
    CHECK(ck.epoch == 2);
    CHECK(ck.epoch_offset == 1);

    c.kind = ModelKind::longitudinal;
    CHECK_THROWS_AS(run_train(c, ds.train_pairs, tmp.path / "x", full.checkpoint), ContractError);
  }

  TEST_CASE("longitudinal training needs pairs") {
    TempDir tmp("ct2rep_nopairs_test");
    const auto ds = small_dataset(tmp.path / "data", 2, 1);
    CHECK(ds.train_pair_list.empty());
    RunConfig c = small_config();
    c.kind = ModelKind::longitudinal;
    CHECK_THROWS_AS(run_train(c, ds.train_pairs, tmp.path / "run"), ContractError);
  }

  TEST_CASE("generate and eval contracts") {
    TempDir tmp("ct2rep_generate_test");
    const auto ds = small_dataset(tmp.path / "data", 2, 3);
    RunConfig c = small_config();
    c.kind = ModelKind::longitudinal;
    c.max_steps = 2;
    const auto r = run_train(c, ds.train_pairs, tmp.path / "run");
    CHECK_THROWS_AS(run_generate(r.checkpoint, ds.train_manifest, ModelKind::base, tmp.path / "g.jsonl"),
                    ContractError);
    const auto gen = run_generate(r.checkpoint, ds.train_pairs, ModelKind::longitudinal, tmp.path / "g.jsonl");
    CHECK(gen.size() == 6);  // C(3,2) pairs for each of two patients
    const auto m = run_eval(tmp.path / "g.jsonl", ds.train_pairs);
    CHECK(m.bleu[0] >= 0.0);
    CHECK_THROWS_AS(run_eval(tmp.path / "g.jsonl", ds.train_manifest), ContractError);

    std::ofstream(tmp.path / "empty.jsonl").close();
    const auto none = run_generate(r.checkpoint, tmp.path / "empty.jsonl", ModelKind::longitudinal,
                                   tmp.path / "none.jsonl");
    CHECK(none.empty());
    CHECK(fs::exists(tmp.path / "none.jsonl"));
    CHECK(fs::file_size(tmp.path / "none.jsonl") == 0);
  }
}
