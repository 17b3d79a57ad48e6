#include "ct2rep/volume.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace ct2rep {

const char* unit_name(VolumeUnit unit) {
  switch (unit) {
    case VolumeUnit::raw: return "raw";
    case VolumeUnit::hounsfield: return "hounsfield";
    case VolumeUnit::normalized: return "normalized";
  }
  return "?";
}

Volume3D Volume3D::filled(Dims3 shape, Spacing3 spacing, double value, VolumeUnit unit) {
  Volume3D v;
  v.shape = shape;
  v.spacing = spacing;
  v.unit = unit;
  v.data.assign(shape[0] * shape[1] * shape[2], value);
  return v;
}

std::int64_t parse_study_time(const std::string& iso) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
  int consumed = 0;
  bool ok = false;
  if (std::sscanf(iso.c_str(), "%4d-%2d-%2dT%2d:%2d:%2d%n", &y, &mo, &d, &h, &mi, &s, &consumed) == 6) {
    ok = static_cast<std::size_t>(consumed) == iso.size();
  } else if (std::sscanf(iso.c_str(), "%4d-%2d-%2dT%2d:%2d%n", &y, &mo, &d, &h, &mi, &consumed) == 5) {
    s = 0;
    ok = static_cast<std::size_t>(consumed) == iso.size();
  } else if (std::sscanf(iso.c_str(), "%4d-%2d-%2d%n", &y, &mo, &d, &consumed) == 3) {
    h = mi = s = 0;
    ok = static_cast<std::size_t>(consumed) == iso.size();
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ok || !ymd.ok() || h < 0 || h > 23 || mi < 0 || mi > 59 || s < 0 || s > 60) {
    throw IngestionError(IngestionError::Kind::bad_timestamp, "unparsable study_time '" + iso + "'");
  }
  const auto days = sys_days(ymd).time_since_epoch().count();
  return static_cast<std::int64_t>(days) * 86400 + h * 3600 + mi * 60 + s;
}

Volume3D convert_and_clip(const Volume3D& v, const VolumeMeta& meta) {
  if (v.unit != VolumeUnit::raw) {
    throw StateError(std::string("convert_and_clip expects a raw volume, got ") + unit_name(v.unit));
  }
  Volume3D out = v;
  out.unit = VolumeUnit::hounsfield;
  for (double& x : out.data) {
    x = std::clamp(x * meta.rescale_slope + meta.rescale_intercept, kHuMin, kHuMax);
  }
  return out;
}

namespace {

// Linear resample along one axis; voxel centers are aligned so the physical
// extent of the axis is preserved.
Volume3D resample_axis(const Volume3D& v, std::size_t axis, double target) {
  const std::size_t n = v.shape[axis];
  const double ratio = target / v.spacing[axis];
  const auto m = static_cast<std::size_t>(std::llround(static_cast<double>(n) / ratio));
  if (m == 0) throw ResampleError("resample: axis " + std::to_string(axis) + " would vanish");
  Volume3D out = v;
  out.shape[axis] = m;
  out.spacing[axis] = target;
  out.data.assign(out.voxels(), 0.0);

  std::vector<std::size_t> lo(m);
  std::vector<double> frac(m);
  for (std::size_t i = 0; i < m; ++i) {
    double c = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    auto base = static_cast<std::size_t>(std::floor(c));
    if (base >= n - 1) base = n - 2;
    lo[i] = base;
    frac[i] = c - static_cast<double>(base);
  }
  for (std::size_t z = 0; z < out.shape[0]; ++z) {
    for (std::size_t y = 0; y < out.shape[1]; ++y) {
      for (std::size_t x = 0; x < out.shape[2]; ++x) {
        std::array<std::size_t, 3> idx{z, y, x};
        const std::size_t i = idx[axis];
        idx[axis] = lo[i];
        const double a = v.at(idx[0], idx[1], idx[2]);
        idx[axis] = lo[i] + 1;
        const double b = v.at(idx[0], idx[1], idx[2]);
        out.at(z, y, x) = frac[i] == 0.0 ? a : a + (b - a) * frac[i];
      }
    }
  }
  return out;
}

}  // namespace

Volume3D resample_to_spacing(const Volume3D& v, const Spacing3& target) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (!(target[a] > 0.0) || !(v.spacing[a] > 0.0)) throw ResampleError("resample: spacing must be positive");
  }
  Volume3D out = v;
  for (std::size_t a = 0; a < 3; ++a) {
    if (out.spacing[a] == target[a]) continue;
    if (out.shape[a] < 2) {
      throw ResampleError("resample: axis " + std::to_string(a) + " has length " + std::to_string(out.shape[a]) +
                          " (need >= 2)");
    }
    out = resample_axis(out, a, target[a]);
  }
  return out;
}

Volume3D crop_or_pad_center(const Volume3D& v, const Dims3& target) {
  for (std::size_t t : target) {
    if (t == 0) throw ResampleError("crop_or_pad_center: target dims must be positive");
  }
  if (v.shape == target) return v;
  const double fill = v.unit == VolumeUnit::normalized ? -1.0 : kHuMin;
  Volume3D out = Volume3D::filled(target, v.spacing, fill, v.unit);
  // Offset of output index 0 in input coordinates (negative when padding).
  std::array<std::ptrdiff_t, 3> shift{};
  for (std::size_t a = 0; a < 3; ++a) {
    const auto n = static_cast<std::ptrdiff_t>(v.shape[a]);
    const auto t = static_cast<std::ptrdiff_t>(target[a]);
    shift[a] = n >= t ? (n - t) / 2 : -((t - n) / 2);
  }
  for (std::size_t z = 0; z < target[0]; ++z) {
    const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(z) + shift[0];
    if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(v.shape[0])) continue;
    for (std::size_t y = 0; y < target[1]; ++y) {
      const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + shift[1];
      if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(v.shape[1])) continue;
      for (std::size_t x = 0; x < target[2]; ++x) {
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) + shift[2];
        if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(v.shape[2])) continue;
        out.at(z, y, x) = v.at(static_cast<std::size_t>(sz), static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
    }
  }
  return out;
}

Volume3D normalize(const Volume3D& v) {
  if (v.unit != VolumeUnit::hounsfield) {
    throw StateError(std::string("normalize expects a hounsfield volume, got ") + unit_name(v.unit));
  }
  Volume3D out = v;
  out.unit = VolumeUnit::normalized;
  const double mid = 0.5 * (kHuMin + kHuMax);
  const double half = 0.5 * (kHuMax - kHuMin);
  for (double& x : out.data) x = (x - mid) / half;
  return out;
}

Volume3D preprocess(const Volume3D& raw, const VolumeMeta& meta, const PreprocessConfig& cfg) {
  Volume3D hu = convert_and_clip(raw, meta);
  hu = resample_to_spacing(hu, cfg.target_spacing);
  hu = crop_or_pad_center(hu, cfg.target_shape);
  return normalize(hu);
}

// ---------------------------------------------------------------------------

void write_payload(const std::filesystem::path& path, const Volume3D& raw) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError(IngestionError::Kind::io, "cannot write payload " + path.string());
  std::vector<unsigned char> bytes(raw.data.size() * 2);
  for (std::size_t i = 0; i < raw.data.size(); ++i) {
    const double r = std::round(raw.data[i]);
    if (r < std::numeric_limits<std::int16_t>::min() || r > std::numeric_limits<std::int16_t>::max()) {
      throw IngestionError(IngestionError::Kind::io, "payload value out of int16 range");
    }
    const auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(r));
    bytes[2 * i] = static_cast<unsigned char>(u & 0xff);
    bytes[2 * i + 1] = static_cast<unsigned char>(u >> 8);
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<double> read_payload(const std::filesystem::path& path, std::size_t expected_voxels,
                                 const std::string& context) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(IngestionError::Kind::missing_file, context + ": payload not found: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected_voxels * 2) {
    throw IngestionError(IngestionError::Kind::payload_mismatch,
                         context + ": payload has " + std::to_string(bytes.size()) + " bytes, shape needs " +
                             std::to_string(expected_voxels * 2));
  }
  std::vector<double> data(expected_voxels);
  for (std::size_t i = 0; i < expected_voxels; ++i) {
    const auto u = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
    data[i] = static_cast<double>(static_cast<std::int16_t>(u));
  }
  return data;
}

nlohmann::json to_manifest_row(const ManifestEntry& e, const std::string& payload) {
  nlohmann::json row;
  row["id"] = e.id;
  row["patient_id"] = e.meta.patient_id;
  row["study_time"] = e.meta.study_time;
  row["shape"] = {e.volume.shape[0], e.volume.shape[1], e.volume.shape[2]};
  row["spacing"] = {e.volume.spacing[0], e.volume.spacing[1], e.volume.spacing[2]};
  row["slope"] = e.meta.rescale_slope;
  row["intercept"] = e.meta.rescale_intercept;
  row["payload"] = payload;
  row["findings"] = e.findings;
  return row;
}

ManifestEntry from_manifest_row(const nlohmann::json& row, const std::filesystem::path& base_dir,
                                const std::string& context) {
  ManifestEntry e;
  try {
    e.meta.patient_id = row.at("patient_id").get<std::string>();
    e.meta.study_time = row.at("study_time").get<std::string>();
    const auto shape = row.at("shape").get<std::vector<std::size_t>>();
    const auto spacing = row.at("spacing").get<std::vector<double>>();
    if (shape.size() != 3 || spacing.size() != 3) throw std::invalid_argument("shape/spacing need 3 entries");
    for (std::size_t a = 0; a < 3; ++a) {
      if (shape[a] == 0) throw std::invalid_argument("zero-length axis");
      if (!(spacing[a] > 0.0)) throw std::invalid_argument("non-positive spacing");
      e.volume.shape[a] = shape[a];
      e.volume.spacing[a] = spacing[a];
    }
    e.meta.rescale_slope = row.at("slope").get<double>();
    e.meta.rescale_intercept = row.at("intercept").get<double>();
    e.meta.source_path = row.at("payload").get<std::string>();
    e.findings = row.value("findings", std::string{});
    e.id = row.value("id", e.meta.source_path);
  } catch (const std::exception& ex) {
    throw IngestionError(IngestionError::Kind::malformed_row, context + ": malformed row: " + ex.what());
  }
  parse_study_time(e.meta.study_time);
  e.volume.unit = VolumeUnit::raw;
  e.volume.data = read_payload(base_dir / e.meta.source_path, e.volume.voxels(), context);
  return e;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError(IngestionError::Kind::missing_file, "manifest not found: " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string context = path.filename().string() + " row " + std::to_string(line_no);
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& ex) {
      throw IngestionError(IngestionError::Kind::malformed_row, context + ": " + ex.what());
    }
    entries.push_back(from_manifest_row(row, path.parent_path(), context));
  }
  return entries;
}

}  // namespace ct2rep
