#pragma once

// Procedural (volume, findings) samples with known abnormality labels, and
// multi-visit patients for longitudinal pairs.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ct2rep/longitudinal.hpp"
#include "ct2rep/metrics.hpp"
#include "ct2rep/volume.hpp"

namespace ct2rep {

struct SynthSpec {
  Dims3 shape{24, 48, 48};
  Spacing3 spacing{15.0, 7.5, 7.5};
  LabelVector labels{};
  std::uint64_t seed = 0;
  // Picks label paraphrases and negation sentences; shared across a patient's visits.
  std::uint64_t style_seed = 0;
};

// HU assigned to each label's signature, all distinct and in [-300, 200].
double signature_hu(std::size_t label);
// Signature centre in normalized (z, y, x) coordinates before jitter.
std::array<double, 3> signature_centre(std::size_t label);

// Raw int16-valued volume (slope 1, intercept -1024) and its metadata.
std::pair<Volume3D, VolumeMeta> synth_volume(const SynthSpec& spec);
std::string synth_report(const SynthSpec& spec);
// Labels drawn independently with probability p.
SynthSpec random_spec(Rng& rng, double p = 0.3);

struct SynthOptions {
  std::size_t n_patients = 8;
  std::size_t min_visits = 1;
  std::size_t max_visits = 3;
  double label_probability = 0.3;
  double persistence = 0.8;      // present label stays present at the next visit
  double onset_probability = 0.1;  // absent label appears at the next visit
  double val_fraction = 0.06;
  std::uint64_t seed = 0;
  PreprocessConfig target{{15.0, 7.5, 7.5}, {24, 48, 48}};
};

struct SynthDataset {
  std::filesystem::path train_manifest, val_manifest;
  std::filesystem::path train_pairs, val_pairs;
  std::vector<ManifestEntry> train, val;
  std::vector<LongitudinalPair> train_pair_list, val_pair_list;
};

// Writes payload/*.i16, train.jsonl, val.jsonl, train_pairs.jsonl and
// val_pairs.jsonl under out_dir. Patients are split, not visits.
SynthDataset synth_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir);

// "YYYY-MM-DDTHH:MM:SS" for seconds since the epoch (UTC).
std::string format_study_time(std::int64_t seconds);

}  // namespace ct2rep
