#pragma once

// Run configuration, checkpoints and the train / generate / eval drivers.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ct2rep/longitudinal.hpp"
#include "ct2rep/metrics.hpp"
#include "ct2rep/model.hpp"
#include "ct2rep/text.hpp"

namespace ct2rep {

enum class ModelKind { base, longitudinal };

const char* kind_name(ModelKind kind);
// Accepts "base", "long" and "longitudinal".
ModelKind parse_kind(const std::string& s);

struct RunConfig {
  ModelConfig model;
  PreprocessConfig preprocess;
  std::size_t vocab_min_count = 1;
  OptimizerSettings optimizer;
  double lr_gamma = 0.1;
  std::size_t lr_step_epochs = 10;  // 0 disables the schedule
  std::size_t epochs = 20;
  std::size_t max_steps = 0;  // 0: no limit besides epochs
  std::size_t checkpoint_every_epochs = 1;
  std::size_t max_tokens = kMaxReportTokens;
  DecodeMode decode_mode = DecodeMode::greedy;
  std::size_t beam_size = 3;
  std::uint64_t seed = 0;
  ModelKind kind = ModelKind::base;
  // Longitudinal training with the prior volume set to zeros and the prior
  // report reduced to BOS EOS.
  bool zero_priors = false;

  static RunConfig paper();
  // 24x48x48 volumes, D=64, constant learning rate, at most 2000 steps.
  static RunConfig desk();
};

void to_json(nlohmann::json& j, const RunConfig& c);
// Missing keys keep the values already in `c`.
void from_json(const nlohmann::json& j, RunConfig& c);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

// File layout: "CT2REPCK", u32 version, u64 header length, JSON header,
// then every array's doubles little-endian in header order.
struct Checkpoint {
  RunConfig config;
  ModelKind kind = ModelKind::base;
  std::int64_t step = 0;
  std::size_t epoch = 0;         // epochs fully completed
  std::size_t epoch_offset = 0;  // samples done in the current epoch
  std::vector<std::string> vocab;
  std::vector<NamedArray> weights;
  std::vector<NamedArray> adam_m;
  std::vector<NamedArray> adam_v;
};

std::string serialize_checkpoint(const Checkpoint& ck);
// Parses the whole file before returning; throws CheckpointError.
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Load, re-serialize and compare bytes; returns true when identical.
bool checkpoint_roundtrip(const std::filesystem::path& path);

// A model of either kind with its vocabulary and optimizer.
class Session {
 public:
  static Session create(const RunConfig& cfg, const Vocabulary& vocab);
  static Session from_checkpoint(const Checkpoint& ck);

  Checkpoint capture() const;
  const RunConfig& config() const { return cfg_; }
  // Stopping point of the current run; stored in later checkpoints.
  void set_limits(std::size_t epochs, std::size_t max_steps) {
    cfg_.epochs = epochs;
    cfg_.max_steps = max_steps;
  }
  const Vocabulary& vocab() const { return vocab_; }
  ModelKind kind() const { return cfg_.kind; }
  ReportModel& base() { return kind() == ModelKind::base ? *base_ : long_->base; }
  LongitudinalModel& longitudinal();
  Adam& optimizer() { return *adam_; }
  std::vector<std::pair<std::string, Tensor>> parameters();

  std::int64_t step = 0;
  std::size_t epoch = 0;
  std::size_t epoch_offset = 0;

 private:
  RunConfig cfg_;
  Vocabulary vocab_;
  std::unique_ptr<ReportModel> base_;
  std::unique_ptr<LongitudinalModel> long_;
  std::unique_ptr<Adam> adam_;
};

// One preprocessed example; the prior fields are used by longitudinal runs.
struct Example {
  std::string id;
  Volume3D volume;
  std::string findings;
  Volume3D prior_volume;
  std::string prior_findings;
  std::vector<std::size_t> target;
  std::vector<std::size_t> prior_report;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_log;
  std::vector<double> losses;  // losses of this invocation, in step order
  std::int64_t steps = 0;      // total steps after the run
  // Mean loss over the last epoch completed in this run; NaN if none was.
  double final_epoch_loss = std::numeric_limits<double>::quiet_NaN();
};

// Trains on `data` (a manifest for base runs, a pairs manifest for
// longitudinal runs). Writes out_dir/checkpoint.ckpt and out_dir/loss.csv.
// With `resume`, continues from that checkpoint; the config's epochs and
// max_steps then set where to stop.
TrainResult run_train(const RunConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out_dir,
                      const std::optional<std::filesystem::path>& resume = std::nullopt);

struct GeneratedReport {
  std::string id;
  std::string report;
  std::vector<std::size_t> tokens;
};

// Decodes one report per manifest row (pairs manifest for longitudinal
// checkpoints) and writes JSON-lines {id, report} to out_file.
std::vector<GeneratedReport> run_generate(const std::filesystem::path& checkpoint, const std::filesystem::path& data,
                                          ModelKind mode, const std::filesystem::path& out_file,
                                          std::optional<DecodeMode> decode = std::nullopt);

// Reads {id, report}, manifest rows (findings) or pairs rows (the later
// visit's findings, keyed by pair_id) from both files, aligned by id. Throws ContractError naming ids present on only one side.
MetricReport run_eval(const std::filesystem::path& predictions, const std::filesystem::path& truth);

// Shared pieces used by the drivers and tests.
std::vector<std::size_t> encode_target(const std::string& text, const Vocabulary& vocab, std::size_t max_tokens);
// Reads a manifest (base) or pairs manifest (longitudinal) and preprocesses
// every volume. Token fields stay empty until encode_examples.
std::vector<Example> load_examples(const RunConfig& cfg, const std::filesystem::path& data);
std::vector<std::string> training_corpus(const std::vector<Example>& examples, ModelKind kind);
void encode_examples(std::vector<Example>& examples, const RunConfig& cfg, const Vocabulary& vocab);
double lr_scale_for_epoch(const RunConfig& cfg, std::size_t epoch);
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n);
double train_example(Session& s, const Example& ex);
std::vector<std::size_t> generate_example(Session& s, const Example& ex, const DecodeOptions& opts);

}  // namespace ct2rep
