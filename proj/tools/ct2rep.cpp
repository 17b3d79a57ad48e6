// ct2rep: synth | train | generate | eval | inspect-checkpoint

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ct2rep/harness.hpp"
#include "ct2rep/synth.hpp"

namespace fs = std::filesystem;
using namespace ct2rep;

namespace {

struct Common {
  std::string config;
  std::string preset = "paper";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_mode) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--preset", c.preset, "Base configuration before --config")->check(CLI::IsMember({"paper", "desk"}));
  cmd->add_option("--seed", c.seed, "Random seed");
  if (with_mode) cmd->add_option("--mode", c.mode, "base or long")->check(CLI::IsMember({"base", "long"}));
  cmd->add_option("--out", c.out, "Output path")->required();
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.preset == "desk" ? RunConfig::desk() : RunConfig::paper();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw std::runtime_error("cannot open config " + c.config);
    from_json(nlohmann::json::parse(in), cfg);
  }
  if (c.seed) cfg.seed = *c.seed;
  if (c.mode) cfg.kind = parse_kind(*c.mode);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CT report generation: synthesize data, train, generate, evaluate"};
  app.require_subcommand(1);

  Common synth_c;
  SynthOptions synth_opts;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset (manifests, pairs, payloads)");
  add_common(synth, synth_c, false);
  synth->add_option("--patients", synth_opts.n_patients, "Number of patients");
  synth->add_option("--min-visits", synth_opts.min_visits, "Fewest visits per patient");
  synth->add_option("--max-visits", synth_opts.max_visits, "Most visits per patient");
  synth->add_option("--persistence", synth_opts.persistence, "Probability a finding persists to the next visit");
  synth->add_option("--val-fraction", synth_opts.val_fraction, "Fraction of patients held out");

  Common train_c;
  std::string train_data, resume;
  std::optional<std::size_t> max_steps, epochs;
  auto* train = app.add_subcommand("train", "Train a model; writes checkpoint.ckpt and loss.csv");
  add_common(train, train_c, true);
  train->add_option("--data", train_data, "Manifest (base) or pairs manifest (long)")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");
  train->add_option("--max-steps", max_steps, "Stop after this many steps in total");
  train->add_option("--epochs", epochs, "Number of epochs");

  Common gen_c;
  std::string gen_ckpt, gen_data;
  std::optional<std::string> decode;
  auto* gen = app.add_subcommand("generate", "Decode reports to JSON-lines {id, report}");
  add_common(gen, gen_c, true);
  gen->add_option("--checkpoint", gen_ckpt, "Checkpoint file")->required();
  gen->add_option("--data", gen_data, "Manifest (base) or pairs manifest (long)")->required();
  gen->add_option("--decode", decode, "greedy or beam")->check(CLI::IsMember({"greedy", "beam"}));

  std::string eval_pred, eval_truth, eval_out;
  auto* eval = app.add_subcommand("eval", "Score predictions against references");
  eval->add_option("--pred", eval_pred, "Generated reports (JSON-lines)")->required();
  eval->add_option("--truth", eval_truth, "Reference manifest or reports")->required();
  eval->add_option("--out", eval_out, "Metric JSON output")->required();

  std::string inspect_path;
  bool inspect_verify = false;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print a checkpoint's header");
  inspect->add_option("checkpoint", inspect_path, "Checkpoint file")->required();
  inspect->add_flag("--verify", inspect_verify, "Check that load and re-save reproduce the file byte for byte");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      const RunConfig cfg = resolve_config(synth_c);
      synth_opts.seed = cfg.seed;
      synth_opts.target = cfg.preprocess;
      const SynthDataset ds = synth_dataset(synth_opts, synth_c.out);
      std::printf("train: %zu volumes, %zu pairs\nval: %zu volumes, %zu pairs\n", ds.train.size(),
                  ds.train_pair_list.size(), ds.val.size(), ds.val_pair_list.size());
    } else if (*train) {
      RunConfig cfg = resolve_config(train_c);
      if (max_steps) cfg.max_steps = *max_steps;
      if (epochs) cfg.epochs = *epochs;
      std::optional<fs::path> from;
      if (!resume.empty()) from = resume;
      const TrainResult r = run_train(cfg, train_data, train_c.out, from);
      std::printf("steps %lld, ", static_cast<long long>(r.steps));
      if (std::isnan(r.final_epoch_loss))
        std::printf("no epoch completed\n");
      else
        std::printf("last epoch mean loss %.6f\n", r.final_epoch_loss);
      std::printf("checkpoint %s\n", r.checkpoint.c_str());
    } else if (*gen) {
      const RunConfig cfg = resolve_config(gen_c);
      std::optional<DecodeMode> mode;
      if (decode) mode = *decode == "beam" ? DecodeMode::beam : DecodeMode::greedy;
      const auto reports = run_generate(gen_ckpt, gen_data, cfg.kind, gen_c.out, mode);
      std::printf("%zu reports written to %s\n", reports.size(), gen_c.out.c_str());
    } else if (*eval) {
      const MetricReport m = run_eval(eval_pred, eval_truth);
      std::ofstream(eval_out) << to_json(m).dump(2) << '\n';
      std::fputs(format_table(m).c_str(), stdout);
    } else if (*inspect) {
      const Checkpoint ck = load_checkpoint(inspect_path);
      std::size_t values = 0;
      for (const auto& w : ck.weights) values += w.data.size();
      nlohmann::json summary = {{"format_version", kCheckpointVersion}, {"kind", kind_name(ck.kind)},
                                {"step", ck.step},
                                {"epoch", ck.epoch},
                                {"vocab_size", ck.vocab.size()},
                                {"tensors", ck.weights.size()},
                                {"parameters", values},
                                {"config", ck.config}};
      std::cout << summary.dump(2) << '\n';
      if (inspect_verify) {
        const bool ok = checkpoint_roundtrip(inspect_path);
        std::printf("round trip: %s\n", ok ? "byte-identical" : "MISMATCH");
        return ok ? 0 : 1;
      }
    }
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 0;
}
