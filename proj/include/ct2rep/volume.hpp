#pragma once

// CT volume container, manifest ingestion and the preprocessing chain
// (HU conversion and clipping, spacing resample, center crop/pad, scaling).

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ct2rep {

enum class VolumeUnit { raw, hounsfield, normalized };

const char* unit_name(VolumeUnit unit);

inline constexpr double kHuMin = -1000.0;
inline constexpr double kHuMax = 200.0;

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ResampleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestionError : public std::runtime_error {
 public:
  enum class Kind { missing_file, malformed_row, payload_mismatch, bad_timestamp, io };
  IngestionError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

using Dims3 = std::array<std::size_t, 3>;    // (depth, height, width)
using Spacing3 = std::array<double, 3>;      // (z, y, x) in mm

struct Volume3D {
  Dims3 shape{};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<double> data;  // depth-major
  VolumeUnit unit = VolumeUnit::raw;

  static Volume3D filled(Dims3 shape, Spacing3 spacing, double value, VolumeUnit unit);
  std::size_t voxels() const { return shape[0] * shape[1] * shape[2]; }
  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * shape[1] + y) * shape[2] + x;
  }
  double at(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }
  double& at(std::size_t z, std::size_t y, std::size_t x) { return data[index(z, y, x)]; }
};

struct VolumeMeta {
  std::string patient_id;
  std::string study_time;  // ISO-8601, e.g. 2021-03-04T10:15:00
  double rescale_slope = 1.0;
  double rescale_intercept = -1024.0;
  std::string source_path;
};

// Seconds since 1970-01-01T00:00:00 for "YYYY-MM-DD[THH:MM[:SS]]".
// Throws IngestionError(bad_timestamp) when the string does not parse.
std::int64_t parse_study_time(const std::string& iso);

Volume3D convert_and_clip(const Volume3D& v, const VolumeMeta& meta);
Volume3D resample_to_spacing(const Volume3D& v, const Spacing3& target);
// Fill value for padding is air: -1000 HU, or -1 for normalized volumes.
Volume3D crop_or_pad_center(const Volume3D& v, const Dims3& target);
Volume3D normalize(const Volume3D& v);

struct PreprocessConfig {
  Spacing3 target_spacing{1.5, 0.75, 0.75};
  Dims3 target_shape{240, 480, 480};
};

// raw -> hounsfield -> resampled -> cropped/padded -> normalized.
Volume3D preprocess(const Volume3D& raw, const VolumeMeta& meta, const PreprocessConfig& cfg);

struct ManifestEntry {
  std::string id;
  VolumeMeta meta;
  Volume3D volume;  // unit raw
  std::string findings;
};

// Reads a JSON-lines manifest; payload paths resolve relative to the
// manifest's directory. Entries come back in file order.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);

// One manifest row: {id, patient_id, study_time, shape, spacing, slope,
// intercept, payload, findings}. `payload` is stored as given.
nlohmann::json to_manifest_row(const ManifestEntry& entry, const std::string& payload);
// Parses a row and loads its payload from base_dir / payload. `context`
// names the row in error messages.
ManifestEntry from_manifest_row(const nlohmann::json& row, const std::filesystem::path& base_dir,
                                const std::string& context);

// Writes the little-endian int16 payload; values are rounded and must fit.
void write_payload(const std::filesystem::path& path, const Volume3D& raw);
std::vector<double> read_payload(const std::filesystem::path& path, std::size_t expected_voxels,
                                 const std::string& context);

}  // namespace ct2rep
