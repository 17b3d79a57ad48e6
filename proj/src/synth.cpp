#include "ct2rep/synth.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>

namespace ct2rep {

namespace {

constexpr double kAirHu = -1000.0;
constexpr double kTorsoHu = 40.0;
constexpr double kLungHu = -850.0;
constexpr double kIntercept = -1024.0;

struct Ellipsoid {
  std::array<double, 3> centre;  // normalized (z, y, x)
  std::array<double, 3> radius;
  bool contains(double z, double y, double x) const {
    const double dz = (z - centre[0]) / radius[0];
    const double dy = (y - centre[1]) / radius[1];
    const double dx = (x - centre[2]) / radius[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

const Ellipsoid kTorso{{0.5, 0.5, 0.5}, {0.45, 0.4, 0.45}};
const Ellipsoid kLeftLung{{0.5, 0.45, 0.3}, {0.35, 0.25, 0.14}};
const Ellipsoid kRightLung{{0.5, 0.45, 0.7}, {0.35, 0.25, 0.14}};

// Six in-plane sites on three levels; label 9 (lung nodule) lands on the
// left-lung site of the middle level.
constexpr std::array<std::array<double, 2>, 6> kSites = {{
    {0.35, 0.3}, {0.6, 0.3}, {0.35, 0.7}, {0.6, 0.7}, {0.5, 0.5}, {0.75, 0.5},
}};
constexpr std::array<double, 3> kLevels = {0.5, 0.25, 0.75};

struct Phrasing {
  std::vector<const char*> positive;
};

const std::array<Phrasing, kNumLabels>& phrasings() {
  static const std::array<Phrasing, kNumLabels> p = {{
      {{"A central venous catheter is seen.", "Medical material is present in the thorax.",
        "A cardiac pacemaker is noted."}},
      {{"Calcified atherosclerotic plaques are seen in the aorta.", "Arterial wall calcification is observed.",
        "Aortic calcification is present."}},
      {{"Cardiomegaly is present.", "Heart size is increased.", "The heart is enlarged."}},
      {{"Pericardial effusion is present.", "There is pericardial fluid.", "A small pericardial effusion is noted."}},
      {{"Coronary artery wall calcification is seen.", "Calcified coronary arteries are noted.",
        "There is coronary calcification."}},
      {{"Hiatal hernia is seen.", "A small hiatus hernia is present."}},
      {{"Mediastinal lymphadenopathy is present.", "Enlarged lymph nodes are seen in the mediastinum.",
        "Lymph nodes are enlarged."}},
      {{"Centrilobular emphysema is present.", "Emphysematous changes are seen in both lungs."}},
      {{"Atelectasis is seen in the lower lobe.", "Atelectatic changes are noted."}},
      {{"A nodule is seen in the left lung.", "Pulmonary nodules are present.",
        "A solid nodule is noted in the upper lobe."}},
      {{"Ground-glass opacities are seen.", "A lung opacity is present.", "Patchy opacity is noted in the right lung."}},
      {{"Fibrotic sequelae are seen.", "Fibrotic changes are noted in both lungs.", "Fibrotic bands are present."}},
      {{"Pleural effusion is present.", "Bilateral pleural fluid is seen.", "A small pleural effusion is noted."}},
      {{"Mosaic attenuation pattern is seen.", "A mosaic pattern is noted in both lungs."}},
      {{"Peribronchial thickening is present.", "Bronchial wall thickening is noted."}},
      {{"Consolidation is seen in the lower lobe.", "A consolidated area is present."}},
      {{"Bronchiectasis is present.", "Bronchiectatic changes are seen."}},
      {{"Interlobular septal thickening is present.", "Septal thickening is noted."}},
  }};
  return p;
}

}  // namespace

double signature_hu(std::size_t label) {
  return -300.0 + 500.0 * static_cast<double>(label) / static_cast<double>(kNumLabels - 1);
}

std::array<double, 3> signature_centre(std::size_t label) {
  const auto& site = kSites[label % kSites.size()];
  return {kLevels[label / kSites.size()], site[0], site[1]};
}

std::pair<Volume3D, VolumeMeta> synth_volume(const SynthSpec& spec) {
  if (spec.shape[0] == 0 || spec.shape[1] == 0 || spec.shape[2] == 0) throw ShapeError("synth_volume: empty shape");
  Rng rng(spec.seed);
  Rng noise = rng.fork(1);
  Rng jitter = rng.fork(2);
  std::vector<Ellipsoid> marks(kNumLabels);
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    auto c = signature_centre(k);
    for (auto& v : c) v += jitter.uniform(-0.02, 0.02);
    marks[k] = {c, {0.1, 0.09, 0.07}};
  }
  Volume3D v;
  v.shape = spec.shape;
  v.spacing = spec.spacing;
  v.unit = VolumeUnit::raw;
  v.data.resize(v.voxels());
  for (std::size_t z = 0; z < v.shape[0]; ++z) {
    const double nz = (static_cast<double>(z) + 0.5) / static_cast<double>(v.shape[0]);
    for (std::size_t y = 0; y < v.shape[1]; ++y) {
      const double ny = (static_cast<double>(y) + 0.5) / static_cast<double>(v.shape[1]);
      for (std::size_t x = 0; x < v.shape[2]; ++x) {
        const double nx = (static_cast<double>(x) + 0.5) / static_cast<double>(v.shape[2]);
        double hu = kAirHu;
        if (kTorso.contains(nz, ny, nx)) {
          hu = (kLeftLung.contains(nz, ny, nx) || kRightLung.contains(nz, ny, nx)) ? kLungHu : kTorsoHu;
        }
        for (std::size_t k = 0; k < kNumLabels; ++k) {
          if (spec.labels[k] && marks[k].contains(nz, ny, nx)) hu = std::max(hu, signature_hu(k));
        }
        hu += noise.normal(0.0, 8.0);
        v.at(z, y, x) = std::round(hu - kIntercept);
      }
    }
  }
  VolumeMeta meta;
  meta.rescale_slope = 1.0;
  meta.rescale_intercept = kIntercept;
  return {std::move(v), meta};
}

std::string synth_report(const SynthSpec& spec) {
  Rng style(spec.style_seed);
  std::string out = "Trachea, both main bronchi are open.";
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    const auto& options = phrasings()[k].positive;
    Rng pick = style.fork(100 + k);
    const char* sentence = options[pick.below(options.size())];
    if (spec.labels[k]) out += std::string(" ") + sentence;
  }
  // Which absent labels get a negation sentence, and its wording, is part of
  // the patient's style as well.
  for (std::size_t k = 0; k < kNumLabels; ++k) {
    Rng pick = style.fork(200 + k);
    const bool mention = pick.bernoulli(0.35);
    const bool first_form = pick.bernoulli(0.5);
    if (spec.labels[k] || !mention) continue;
    const std::string name(label_names()[k]);
    if (k == 2) {
      out += " Heart size is normal.";
    } else if (first_form) {
      out += " No " + name + " is observed.";
    } else {
      out += " There is no " + name + ".";
    }
  }
  return out;
}

SynthSpec random_spec(Rng& rng, double p) {
  SynthSpec s;
  for (auto& l : s.labels) l = rng.bernoulli(p);
  s.seed = rng.next();
  s.style_seed = rng.next();
  return s;
}

std::string format_study_time(std::int64_t seconds) {
  const std::time_t t = static_cast<std::time_t>(seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  return buf;
}

SynthDataset synth_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir) {
  if (opts.n_patients < 1) throw ContractError("synth_dataset: need at least one patient");
  if (opts.min_visits < 1 || opts.max_visits < opts.min_visits) throw ContractError("synth_dataset: bad visit range");
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "payload");
  const Rng root(opts.seed);

  std::vector<std::size_t> order(opts.n_patients);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split = root.fork(0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[split.below(i)]);
  const auto n_val = static_cast<std::size_t>(std::llround(opts.val_fraction * static_cast<double>(opts.n_patients)));
  std::vector<bool> is_val(opts.n_patients, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;

  const auto& tgt = opts.target;
  const std::int64_t epoch_2020 = 1577836800;
  SynthDataset ds;
  for (std::size_t p = 0; p < opts.n_patients; ++p) {
    Rng prng = root.fork(1000 + p);
    char pid_buf[24];
    std::snprintf(pid_buf, sizeof pid_buf, "P%04zu", p);
    const std::string pid = pid_buf;
    const std::size_t visits = opts.min_visits + prng.below(opts.max_visits - opts.min_visits + 1);
    const std::uint64_t style_seed = prng.next();
    LabelVector labels{};
    for (auto& l : labels) l = prng.bernoulli(opts.label_probability);
    std::int64_t time = epoch_2020 + static_cast<std::int64_t>(prng.below(365)) * 86400 +
                        static_cast<std::int64_t>(prng.below(36)) * 900;
    std::vector<ManifestEntry> entries;
    for (std::size_t v = 0; v < visits; ++v) {
      if (v > 0) {
        for (auto& l : labels) l = l ? prng.bernoulli(opts.persistence) : prng.bernoulli(opts.onset_probability);
        time += (30 + static_cast<std::int64_t>(prng.below(400))) * 86400;
      }
      SynthSpec spec;
      spec.labels = labels;
      spec.seed = prng.next();
      spec.style_seed = style_seed;
      for (std::size_t a = 0; a < 3; ++a) {
        const double extent = tgt.target_spacing[a] * static_cast<double>(tgt.target_shape[a]);
        spec.spacing[a] = tgt.target_spacing[a] * prng.uniform(0.8, 1.25);
        spec.spacing[a] = std::round(spec.spacing[a] * 1000.0) / 1000.0;
        const auto n = static_cast<long>(std::lround(extent / spec.spacing[a])) + static_cast<long>(prng.below(5)) - 2;
        spec.shape[a] = static_cast<std::size_t>(std::max(1L, n));
      }
      auto [volume, meta] = synth_volume(spec);
      const std::string vid = pid + "_v" + std::to_string(v);
      const std::string payload = "payload/" + vid + ".i16";
      write_payload(out_dir / payload, volume);
      ManifestEntry e;
      e.id = vid;
      e.meta = meta;
      e.meta.patient_id = pid;
      e.meta.study_time = format_study_time(time);
      e.meta.source_path = payload;
      e.volume = std::move(volume);
      e.findings = synth_report(spec);
      entries.push_back(std::move(e));
    }
    auto& dest = is_val[p] ? ds.val : ds.train;
    for (auto& e : entries) dest.push_back(std::move(e));
  }

  ds.train_pair_list = build_pairs(ds.train);
  ds.val_pair_list = build_pairs(ds.val);
  auto write_lines = [&](const fs::path& path, const auto& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestionError(IngestionError::Kind::io, "cannot write " + path.string());
    for (const auto& row : rows) out << row.dump() << '\n';
  };
  auto manifest_rows = [](const std::vector<ManifestEntry>& entries) {
    std::vector<nlohmann::json> rows;
    for (const auto& e : entries) rows.push_back(to_manifest_row(e, e.meta.source_path));
    return rows;
  };
  auto pair_rows = [](const std::vector<LongitudinalPair>& pairs) {
    std::vector<nlohmann::json> rows;
    for (const auto& p : pairs) rows.push_back(to_pairs_row(p, p.old_visit.meta.source_path, p.new_visit.meta.source_path));
    return rows;
  };
  ds.train_manifest = out_dir / "train.jsonl";
  ds.val_manifest = out_dir / "val.jsonl";
  ds.train_pairs = out_dir / "train_pairs.jsonl";
  ds.val_pairs = out_dir / "val_pairs.jsonl";
  write_lines(ds.train_manifest, manifest_rows(ds.train));
  write_lines(ds.val_manifest, manifest_rows(ds.val));
  write_lines(ds.train_pairs, pair_rows(ds.train_pair_list));
  write_lines(ds.val_pairs, pair_rows(ds.val_pair_list));
  return ds;
}

}  // namespace ct2rep
