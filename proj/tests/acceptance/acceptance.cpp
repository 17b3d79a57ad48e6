// Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
// non-zero when any fails. Pass criterion numbers as arguments to run a
// subset; scratch files go to ./acceptance_work.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ct2rep/harness.hpp"
#include "ct2rep/synth.hpp"
#include "ct2rep/vision.hpp"
#include "gradcheck.hpp"

using namespace ct2rep;
using namespace ct2rep::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = "acceptance_work";

// Collects failed expectations; a criterion passes when none were recorded.
struct Check {
  std::vector<std::string> failures;
  std::vector<std::string> notes;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Volume3D random_volume(const Dims3& shape, Rng& rng) {
  Volume3D v = Volume3D::filled(shape, {1, 1, 1}, 0.0, VolumeUnit::normalized);
  for (auto& x : v.data) x = rng.uniform(-1, 1);
  return v;
}

std::vector<Tensor> tensors_of(const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

SynthDataset make_dataset(const fs::path& dir, std::size_t patients, std::size_t visits, std::uint64_t seed) {
  SynthOptions o;
  o.n_patients = patients;
  o.min_visits = o.max_visits = visits;
  o.persistence = 0.8;
  o.val_fraction = 0.0;
  o.seed = seed;
  o.target = RunConfig::desk().preprocess;
  return synth_dataset(o, dir);
}

// Manifest of the later visit of every pair, for base-model runs on the
// same targets as the longitudinal runs.
fs::path write_new_visit_manifest(const SynthDataset& ds, const fs::path& dir) {
  const fs::path path = dir / "pairs_new_visits.jsonl";
  std::ofstream out(path);
  for (const auto& p : ds.train_pair_list) out << to_manifest_row(p.new_visit, p.new_visit.meta.source_path).dump() << '\n';
  return path;
}

// ---------------------------------------------------------------------------

void criterion_1(Check& c) {
  Rng rng(101);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.patch = {1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)};
    cfg.volume_shape = {cfg.patch.temporal * (1 + rng.below(4)), cfg.patch.height * (1 + rng.below(4)),
                        cfg.patch.width * (1 + rng.below(4))};
    cfg.vision_heads = 1 + rng.below(3);
    cfg.encoder_heads = cfg.decoder_heads = cfg.memory_heads = cfg.vision_heads;
    cfg.dim = cfg.vision_heads * (2 + rng.below(3));
    cfg.vision_layers = 1 + rng.below(2);
    const std::size_t batch = 1 + rng.below(2);
    Rng init = rng.fork(static_cast<std::uint64_t>(trial));
    const auto enc = VisionEncoder::init(cfg, init);
    std::vector<Volume3D> volumes;
    for (std::size_t b = 0; b < batch; ++b) volumes.push_back(random_volume(cfg.volume_shape, rng));
    const TokenGrid expected = token_grid(cfg.volume_shape, cfg.patch, cfg.dim, batch);
    CtTokens z = enc.patch_embed(volumes);
    const std::string tag = "config " + std::to_string(trial);
    c.expect(z.grid == expected, tag + ": patch embedding grid");
    for (std::size_t l = 0; l < enc.layers(); ++l) {
      z = enc.spatial_block(z, l);
      c.expect(z.grid == expected && z.tokens.shape() == Shape{expected.cells(), cfg.dim},
               tag + ": spatial block " + std::to_string(l));
      z = enc.causal_block(z, l);
      c.expect(z.grid == expected && z.tokens.shape() == Shape{expected.cells(), cfg.dim},
               tag + ": causal block " + std::to_string(l));
    }
    c.expect(from_spatial_view(spatial_view(expected), expected) == expected, tag + ": spatial view");
    c.expect(from_causal_view(causal_view(expected), expected) == expected, tag + ": causal view");
  }
  const ModelConfig paper = ModelConfig::paper();
  paper.validate();
  const TokenGrid g = encoder_output_grid(paper);
  c.expect(g.dims() == std::array<std::size_t, 5>{1, 20, 20, 20, 512}, "full-scale grid is not 20x20x20x512");
  c.note("50 random configs; full scale " + std::to_string(g.temporal) + "x" + std::to_string(g.height) + "x" +
         std::to_string(g.width) + "x" + std::to_string(g.dim));
}

void criterion_2(Check& c) {
  Rng rng(202);
  ModelConfig cfg = ModelConfig::tiny();
  cfg.volume_shape = {8, 4, 4};  // T = 4 slices of 2x2 cells
  const auto enc = VisionEncoder::init(cfg, rng);
  const Volume3D v = random_volume(cfg.volume_shape, rng);
  const CtTokens z = enc.patch_embed(v);
  const std::size_t hw = z.grid.spatial(), d = cfg.dim, T = z.grid.temporal;
  const CtTokens base = enc.causal_block(z, 0);
  std::size_t checked = 0;
  for (std::size_t t = 1; t < T; ++t) {
    // Perturbation: change every token at temporal index >= t.
    Tensor perturbed = z.tokens.clone();
    auto data = perturbed.mutable_data();
    for (std::size_t i = t * hw * d; i < data.size(); ++i) data[i] += rng.uniform(-5, 5);
    const CtTokens out = enc.causal_block({z.grid, perturbed}, 0);
    for (std::size_t i = 0; i < t * hw * d; ++i, ++checked)
      c.expect(out.tokens.at(i) == base.tokens.at(i), "causal block: perturbation leaked at t=" + std::to_string(t));
    // Autodiff: outputs before t have exactly zero gradient w.r.t. inputs from t on.
    Tensor input = z.tokens.clone();
    input.set_requires_grad(true);
    {
      Tape tape;
      TapeScope scope(tape);
      const CtTokens o = enc.causal_block({z.grid, input}, 0);
      backward(weighted_sum(slice_rows(o.tokens, 0, t * hw)), tape);
    }
    for (std::size_t i = t * hw * d; i < input.numel(); ++i)
      c.expect(input.grad()[i] == 0.0, "causal block: nonzero gradient from t=" + std::to_string(t));
  }

  auto model = ReportModel::init(ModelConfig::tiny(), rng);
  const Tensor h = model.encode(random_volume(model.config().volume_shape, rng));
  const std::vector<std::size_t> ids = {kBos, 4, 5, 6, 7, 8, 9};
  const Tensor logits = model.decode_logits(h, ids);
  const std::size_t V = model.config().vocab_size;
  for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
    std::vector<std::size_t> changed = ids;
    for (std::size_t j = t + 1; j < ids.size(); ++j) changed[j] = 10 + (j % 2);
    const Tensor other = model.decode_logits(h, changed);
    for (std::size_t i = 0; i < (t + 1) * V; ++i, ++checked)
      c.expect(other.at(i) == logits.at(i), "decoder: target after position " + std::to_string(t) + " leaked");
    // Tokens after t are unique ids, so their embedding rows only enter
    // through positions > t.
    for (auto& [name, p] : named_parameters(model)) p.zero_grad();
    {
      Tape tape;
      TapeScope scope(tape);
      backward(weighted_sum(slice_rows(model.decode_logits(h, ids), 0, t + 1)), tape);
    }
    const auto grad = model.token_embedding.grad();
    for (std::size_t j = t + 1; j < ids.size(); ++j)
      for (std::size_t k = 0; k < model.config().dim; ++k)
        c.expect(grad[ids[j] * model.config().dim + k] == 0.0,
                 "decoder: gradient reaches token " + std::to_string(j) + " from logits <= " + std::to_string(t));
  }
  c.note(std::to_string(checked) + " outputs compared exactly");
}

void criterion_3(Check& c) {
  Rng rng(303);
  Tensor a = random_tensor({3, 4}, rng, 1.0, true);
  Tensor b = random_tensor({4, 5}, rng, 1.0, true);
  Tensor a2 = random_tensor({3, 4}, rng, 1.0, true);
  Tensor v = random_tensor({4}, rng, 1.0, true);
  Tensor g = random_tensor({4}, rng, 1.0, true);
  Tensor t3 = random_tensor({2, 3, 4}, rng, 2.0, true);
  Tensor q = random_tensor({6, 4}, rng, 1.0, true);
  Tensor k = random_tensor({6, 4}, rng, 1.0, true);
  Tensor val = random_tensor({6, 4}, rng, 1.0, true);
  const std::vector<std::size_t> ids = {2, 0, 2};
  const std::vector<std::size_t> targets = {1, 3, 0};
  const SeqLayout strided{{0, 1}, 3, 2};  // two interleaved sequences of length 3
  struct Case {
    const char* name;
    std::vector<Tensor> params;
    std::function<Tensor()> loss;
  };
  const std::vector<Case> ops = {
      {"matmul", {a, b}, [&] { return weighted_sum(matmul(a, b)); }},
      {"transpose", {a}, [&] { return weighted_sum(transpose(a)); }},
      {"add", {a, a2}, [&] { return weighted_sum(add(a, a2)); }},
      {"sub", {a, a2}, [&] { return weighted_sum(sub(a, a2)); }},
      {"mul", {a, a2}, [&] { return weighted_sum(mul(a, a2)); }},
      {"scale", {a}, [&] { return weighted_sum(scale(a, -1.7)); }},
      {"add_rowwise", {a, v}, [&] { return weighted_sum(add_rowwise(a, v)); }},
      {"mul_rowwise", {a, v}, [&] { return weighted_sum(mul_rowwise(a, v)); }},
      {"tanh", {a}, [&] { return weighted_sum(tanh(a)); }},
      {"sigmoid", {a}, [&] { return weighted_sum(sigmoid(a)); }},
      {"gelu", {a}, [&] { return weighted_sum(gelu(a)); }},
      {"softmax/0", {t3}, [&] { return weighted_sum(softmax(t3, 0)); }},
      {"softmax/1", {t3}, [&] { return weighted_sum(softmax(t3, 1)); }},
      {"softmax/2", {t3}, [&] { return weighted_sum(softmax(t3, 2)); }},
      {"normalize_last", {a}, [&] { return weighted_sum(normalize_last(a, 1e-6)); }},
      {"layer_norm", {a, g, v}, [&] { return weighted_sum(layer_norm(a, g, v, 1e-6)); }},
      {"reshape", {t3}, [&] { return weighted_sum(reshape(t3, {6, 4})); }},
      {"concat_rows", {a, a2}, [&] { return weighted_sum(concat_rows({a, a2, a})); }},
      {"slice_rows", {a}, [&] { return weighted_sum(slice_rows(a, 1, 3)); }},
      {"gather_rows", {a}, [&] { return weighted_sum(gather_rows(a, ids)); }},
      {"sum", {a}, [&] { return scale(sum(mul(a, a)), 0.5); }},
      {"mean", {a, a2}, [&] { return mean(mul(a, a2)); }},
      {"cross_entropy", {a}, [&] { return cross_entropy(a, targets, 99); }},
      {"attention", {q, k, val}, [&] { return weighted_sum(attention(q, k, val, {2, false})); }},
      {"attention/causal", {q, k, val}, [&] { return weighted_sum(attention(q, k, val, {2, true})); }},
      {"attention/strided", {q, k, val},
       [&] { return weighted_sum(attention(q, k, val, strided, strided, {1, true})); }},
  };
  double worst_op = 0.0;
  for (const auto& op : ops) {
    const auto r = grad_check(op.params, op.loss);
    worst_op = std::max(worst_op, r.max_rel_error);
    c.expect(r.max_rel_error < 1e-4, std::string("op ") + op.name + " rel error " + fmt("%.3g", r.max_rel_error));
  }

  // End to end on the smallest model: every parameter, every element.
  const ModelConfig tiny = ModelConfig::tiny();
  const std::vector<std::size_t> r_new = {kBos, 5, 7, 4, kEos};
  const std::vector<std::size_t> r_old = {kBos, 6, 8, 9, kEos};
  auto base = ReportModel::init(tiny, rng);
  const Volume3D x_new = random_volume(tiny.volume_shape, rng);
  const Volume3D x_old = random_volume(tiny.volume_shape, rng);
  const auto rb = grad_check(tensors_of(named_parameters(base)), [&] { return base.loss(x_new, r_new); });
  c.expect(rb.max_rel_error < 1e-3, "base loss rel error " + fmt("%.3g", rb.max_rel_error) + " at " + rb.worst);
  auto lng = LongitudinalModel::init(tiny, rng);
  const auto rl = grad_check(tensors_of(named_parameters(lng)), [&] { return lng.loss(x_new, x_old, r_old, r_new); });
  c.expect(rl.max_rel_error < 1e-3, "long loss rel error " + fmt("%.3g", rl.max_rel_error) + " at " + rl.worst);
  c.note(std::to_string(ops.size()) + " ops, worst " + fmt("%.2e", worst_op) + "; base " +
         std::to_string(rb.checked) + " coords " + fmt("%.2e", rb.max_rel_error) + "; long " +
         std::to_string(rl.checked) + " coords " + fmt("%.2e", rl.max_rel_error));
}

void criterion_4(Check& c) {
  Rng rng(404);
  double worst = 0.0;
  for (std::size_t dim : {8, 64}) {
    auto mcln = Mcln::init(dim, rng);
    mcln.zero_deltas();
    for (auto& x : mcln.gamma.mutable_data()) x = rng.uniform(0.5, 1.5);
    for (auto& x : mcln.beta.mutable_data()) x = rng.uniform(-1, 1);
    const Tensor x = random_tensor({7, dim}, rng, 4.0);
    const Tensor a = mcln(x, random_tensor({7, dim}, rng));
    const Tensor b = layer_norm(x, mcln.gamma, mcln.beta, kNormEps);
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
  }
  c.expect(worst < 1e-12, "MCLN deviates from layer norm by " + fmt("%.3g", worst));

  std::size_t sequences = 0;
  for (ModelConfig cfg : {ModelConfig::tiny(), ModelConfig::desk()}) {
    if (cfg.vocab_size == 0) cfg.vocab_size = 48;
    Rng init(405);
    auto lng = LongitudinalModel::init(cfg, init);
    lng.zero_longitudinal();
    for (int trial = 0; trial < 3; ++trial) {
      const Volume3D x_new = random_volume(cfg.volume_shape, rng);
      const Volume3D x_old = random_volume(cfg.volume_shape, rng);
      const std::vector<std::size_t> r_old = {kBos, 4 + rng.below(8), 4 + rng.below(8), kEos};
      for (DecodeMode mode : {DecodeMode::greedy, DecodeMode::beam}) {
        DecodeOptions opts;
        opts.mode = mode;
        opts.max_tokens = 24;
        c.expect(lng.generate_long(x_new, x_old, r_old, opts) == lng.base.generate(x_new, opts),
                 "zeroed longitudinal model decodes differently from the base model");
        ++sequences;
      }
    }
  }
  c.note("MCLN max diff " + fmt("%.1e", worst) + "; " + std::to_string(sequences) + " sequences token-identical");
}

// Trains in chunks, scoring the training set after each, until corpus
// BLEU-1 reaches 0.9 or 2000 steps.
double memorize(Check& c, ModelKind kind, const fs::path& data, const fs::path& out, std::int64_t& steps) {
  RunConfig cfg = RunConfig::desk();
  cfg.kind = kind;
  cfg.seed = 5;
  double bleu1 = 0.0;
  std::optional<fs::path> resume;
  for (std::size_t limit = 400; limit <= 2000; limit += 400) {
    cfg.max_steps = limit;
    const TrainResult r = run_train(cfg, data, out, resume);
    resume = r.checkpoint;
    steps = r.steps;
    run_generate(r.checkpoint, data, kind, out / "generated.jsonl");
    bleu1 = run_eval(out / "generated.jsonl", data).bleu[0];
    if (bleu1 >= 0.9) break;
  }
  const Checkpoint ck = load_checkpoint(out / "checkpoint.ckpt");
  c.expect(ck.vocab.size() <= 256, "vocabulary exceeds 256 tokens");
  c.expect(ck.config.model.volume_shape == Dims3{24, 48, 48} && ck.config.model.dim == 64, "not the desk config");
  return bleu1;
}

void criterion_5(Check& c) {
  const fs::path dir = kWork / "c5";
  const SynthDataset ds = make_dataset(dir / "data", 8, 2, 5);
  c.expect(ds.train_pair_list.size() == 8, "expected 8 pairs");
  std::int64_t base_steps = 0, long_steps = 0;
  const double base = memorize(c, ModelKind::base, write_new_visit_manifest(ds, dir / "data"), dir / "base", base_steps);
  const double lng = memorize(c, ModelKind::longitudinal, ds.train_pairs, dir / "long", long_steps);
  c.expect(base >= 0.9, "base BLEU-1 " + fmt("%.4f", base));
  c.expect(lng >= 0.9, "longitudinal BLEU-1 " + fmt("%.4f", lng));
  c.note("base BLEU-1 " + fmt("%.4f", base) + " after " + std::to_string(base_steps) + " steps; long BLEU-1 " +
         fmt("%.4f", lng) + " after " + std::to_string(long_steps) + " steps");
}

void criterion_6(Check& c) {
  const fs::path dir = kWork / "c6";
  const SynthDataset ds = make_dataset(dir / "data", 16, 3, 11);
  RunConfig cfg = RunConfig::desk();
  cfg.kind = ModelKind::longitudinal;
  cfg.seed = 11;
  cfg.max_steps = 10 * ds.train_pair_list.size();
  const TrainResult with_prior = run_train(cfg, ds.train_pairs, dir / "prior");
  cfg.zero_priors = true;
  const TrainResult zeroed = run_train(cfg, ds.train_pairs, dir / "zeroed");
  c.expect(with_prior.final_epoch_loss < zeroed.final_epoch_loss, "prior data did not lower the final loss");
  c.note(std::to_string(ds.train_pair_list.size()) + " pairs, " + std::to_string(cfg.max_steps) +
         " steps: final epoch loss " + fmt("%.4f", with_prior.final_epoch_loss) + " with priors vs " +
         fmt("%.4f", zeroed.final_epoch_loss) + " zeroed");
}

void criterion_7(Check& c) {
  struct FixtureCase {
    const char* candidate;
    const char* reference;
    double expected[6];  // BLEU-1..4, ROUGE-L, METEOR-lite
  };
  // Values from an independent brute-force implementation.
  const FixtureCase fixture[] = {
      {"the cat sat", "the cat sat on",
       {0.71653131057378927, 0.71653131057378927, 0.71653131057378927, 0, 0.8571428571428571, 0.75498575498575504}},
      {"the the the", "the cat", {0.33333333333333331, 0, 0, 0, 0.40000000000000002, 0.23809523809523808}},
      {"a b c d", "a c b d", {1, 0, 0, 0, 0.75, 0.5}},
      {"no pleural effusion is seen", "no pleural effusion",
       {0.59999999999999998, 0.54772255750516619, 0.46415888336127786, 0, 0.74999999999999989, 0.92013888888888906}},
      {"bilateral opacities in the lower lobes", "bilateral opacity in both lower lobe",
       {0.5, 0, 0, 0, 0.5, 0.80666666666666664}},
      {"heart size is normal", "heart size is normal", {1, 1, 1, 1, 1, 0.9921875}},
      {"mild emphysema and a small nodule", "a small nodule and mild emphysema",
       {1, 0.7745966692414834, 0.53132928459130546, 0, 0.5, 0.9375}},
      {"trachea both main bronchi are open", "trachea and both main bronchi are patent",
       {0.70540143740884509, 0.59855296782063871, 0.53325007177050276, 0.45480190470279069, 0.76923076923076916,
        0.70144927536231894}},
      {"calcified atherosclerotic plaques", "atherosclerotic calcified plaque seen",
       {0.47768754038252614, 0, 0, 0, 0.28571428571428575, 0.38461538461538464}},
      {"x y", "p q r", {0, 0, 0, 0, 0, 0}},
  };
  const char* names[] = {"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "METEOR-lite"};
  double worst = 0.0;
  for (std::size_t i = 0; i < std::size(fixture); ++i) {
    const auto cand = tokenize(fixture[i].candidate);
    const auto ref = tokenize(fixture[i].reference);
    const double got[6] = {bleu(cand, ref, 1), bleu(cand, ref, 2), bleu(cand, ref, 3),
                           bleu(cand, ref, 4), rouge_l(cand, ref), meteor_lite(cand, ref)};
    for (int m = 0; m < 6; ++m) {
      const double err = std::abs(got[m] - fixture[i].expected[m]);
      worst = std::max(worst, err);
      c.expect(err < 1e-6, "case " + std::to_string(i) + " " + names[m] + " " + fmt("%.9f", got[m]));
    }
  }

  // Hand-built confusion matrix: cardiomegaly TP1 FP1 FN1, lung nodule FP1
  // FN1, pleural effusion TP1, every other label empty.
  const std::vector<std::string> truth = {"Cardiomegaly. Lung nodule.", "Pleural effusion is seen.",
                                          "Heart size is normal.", "Cardiomegaly is present."};
  const std::vector<std::string> pred = {"Cardiomegaly is seen.", "Pleural effusion and nodule.", "Cardiomegaly.",
                                         "No cardiomegaly."};
  const auto ce = clinical_efficacy(pred, truth);
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const auto& s = ce.per_label[k];
    const std::string name(label_names()[k]);
    std::array<std::size_t, 3> want{0, 0, 0};
    std::array<double, 3> prf{0, 0, 0};
    if (name == "cardiomegaly") want = {1, 1, 1}, prf = {0.5, 0.5, 0.5};
    if (name == "lung nodule") want = {0, 1, 1};
    if (name == "pleural effusion") want = {1, 0, 0}, prf = {1, 1, 1};
    c.expect(s.tp == want[0] && s.fp == want[1] && s.fn == want[2], "CE counts for " + name);
    c.expect(s.precision == prf[0] && s.recall == prf[1] && s.f1 == prf[2], "CE scores for " + name);
  }
  c.expect(ce.mean.precision == 1.5 / 18 && ce.mean.recall == 1.5 / 18 && ce.mean.f1 == 1.5 / 18, "CE mean row");

  Rng rng(707);
  std::size_t mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const SynthSpec spec = random_spec(rng);
    if (extract_labels(synth_report(spec)) != spec.labels) ++mismatches;
  }
  c.expect(mismatches == 0, std::to_string(mismatches) + " of 1000 specs lose labels in the report");
  c.note("fixture max error " + fmt("%.1e", worst) + "; CE matrix exact; 1000/1000 label round trips");
}

void criterion_8(Check& c) {
  Volume3D raw = Volume3D::filled({1, 1, 6}, {1, 1, 1}, 0, VolumeUnit::raw);
  raw.data = {0, 24, 1024, 1224, 2000, 3000};
  const Volume3D hu = convert_and_clip(raw, VolumeMeta{});
  c.expect(hu.data == std::vector<double>{-1000, -1000, 0, 200, 200, 200}, "HU conversion/clip endpoints");

  // Ramp along every axis, upsampled 2x: interior samples equal the ramp
  // evaluated at the source coordinate of each output voxel centre.
  Volume3D ramp = Volume3D::filled({10, 12, 14}, {1.5, 0.75, 0.75}, 0, VolumeUnit::hounsfield);
  auto f = [](double z, double y, double x) { return 3.0 * z - 2.0 * y + 0.5 * x - 7.0; };
  for (std::size_t z = 0; z < 10; ++z)
    for (std::size_t y = 0; y < 12; ++y)
      for (std::size_t x = 0; x < 14; ++x) ramp.at(z, y, x) = f(z, y, x);
  const Volume3D up = resample_to_spacing(ramp, {0.75, 0.375, 0.375});
  c.expect(up.shape == Dims3{20, 24, 28}, "resampled shape");
  double worst = 0.0;
  auto src = [](std::size_t i) { return (static_cast<double>(i) + 0.5) * 0.5 - 0.5; };
  for (std::size_t z = 1; z + 1 < up.shape[0]; ++z)
    for (std::size_t y = 1; y + 1 < up.shape[1]; ++y)
      for (std::size_t x = 1; x + 1 < up.shape[2]; ++x)
        worst = std::max(worst, std::abs(up.at(z, y, x) - f(src(z), src(y), src(x))));
  c.expect(worst < 1e-6, "ramp resample error " + fmt("%.3g", worst));

  Volume3D odd = Volume3D::filled({5, 7, 9}, {1, 1, 1}, 0, VolumeUnit::hounsfield);
  for (std::size_t i = 0; i < odd.data.size(); ++i) odd.data[i] = static_cast<double>(i % 97) - 50.0;
  for (Dims3 target : {Dims3{3, 9, 4}, Dims3{8, 2, 9}, Dims3{5, 7, 9}}) {
    const Volume3D once = crop_or_pad_center(odd, target);
    c.expect(once.shape == target, "crop/pad shape");
    c.expect(crop_or_pad_center(once, target).data == once.data, "crop/pad is not idempotent");
  }

  Rng rng(808);
  for (std::size_t k = 1; k <= 6; ++k) {
    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < k; ++i) {
      ManifestEntry e;
      e.id = "v" + std::to_string(i);
      e.meta.patient_id = "P";
      e.meta.study_time = format_study_time(1577836800 + static_cast<std::int64_t>(i) * 86400 * 40);
      e.meta.source_path = e.id;
      entries.push_back(e);
    }
    for (std::size_t i = k; i > 1; --i) std::swap(entries[i - 1], entries[rng.below(i)]);
    const auto pairs = build_pairs(entries);
    c.expect(pairs.size() == k * (k - 1) / 2, "build_pairs count for k=" + std::to_string(k));
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : pairs) {
      c.expect(p.old_time < p.new_time, "pair not in strict chronological order");
      seen.insert({p.old_visit.id, p.new_visit.id});
    }
    c.expect(seen.size() == pairs.size(), "duplicate pairs");
  }
  c.note("ramp max error " + fmt("%.1e", worst) + "; pairs C(k,2) for k=1..6");
}

void criterion_9(Check& c) {
  const fs::path dir = kWork / "c9";
  const SynthDataset ds = make_dataset(dir / "data", 4, 2, 9);
  std::size_t compared = 0;
  for (ModelKind kind : {ModelKind::base, ModelKind::longitudinal}) {
    const fs::path data = kind == ModelKind::base ? ds.train_manifest : ds.train_pairs;
    RunConfig cfg = RunConfig::desk();
    cfg.kind = kind;
    cfg.seed = 9;
    cfg.max_steps = 12;
    std::vector<std::string> ckpt, log, reports;
    for (int run = 0; run < 2; ++run) {
      const fs::path out = dir / (std::string(kind_name(kind)) + std::to_string(run));
      const TrainResult r = run_train(cfg, data, out);
      run_generate(r.checkpoint, data, kind, out / "reports.jsonl");
      ckpt.push_back(slurp(r.checkpoint));
      log.push_back(slurp(r.loss_log));
      reports.push_back(slurp(out / "reports.jsonl"));
      c.expect(checkpoint_roundtrip(r.checkpoint), "checkpoint round trip is not byte-exact");
    }
    const std::string k = kind_name(kind);
    c.expect(!ckpt[0].empty() && ckpt[0] == ckpt[1], k + ": checkpoints differ between runs");
    c.expect(log[0] == log[1], k + ": loss logs differ between runs");
    c.expect(!reports[0].empty() && reports[0] == reports[1], k + ": reports differ between runs");
    compared += ckpt[0].size() + reports[0].size();
  }
  c.note(std::to_string(compared) + " bytes compared across base and long runs");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<void(Check&)>>> criteria = {
      {"shape contract", criterion_1},
      {"causality", criterion_2},
      {"gradient correctness", criterion_3},
      {"reduction invariants", criterion_4},
      {"memorization", criterion_5},
      {"longitudinal signal", criterion_6},
      {"metric oracles", criterion_7},
      {"preprocessing and pairing", criterion_8},
      {"determinism and persistence", criterion_9},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoi(argv[i]));
  fs::remove_all(kWork);
  fs::create_directories(kWork);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Check c;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].second(c);
    } catch (const std::exception& ex) {
      c.failures.push_back(std::string("exception: ") + ex.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool ok = c.failures.empty();
    failed += !ok;
    std::printf("%s criterion %d (%s) [%.1fs]", ok ? "PASS" : "FAIL", id, criteria[i].first, secs);
    for (const auto& n : c.notes) std::printf(" %s", n.c_str());
    std::printf("\n");
    for (std::size_t f = 0; f < c.failures.size() && f < 10; ++f) std::printf("    %s\n", c.failures[f].c_str());
    if (c.failures.size() > 10) std::printf("    ... %zu more\n", c.failures.size() - 10);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
