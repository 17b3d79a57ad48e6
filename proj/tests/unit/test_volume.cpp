#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ct2rep/volume.hpp"

using namespace ct2rep;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ct2rep_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_SUITE("volio") {
  TEST_CASE("HU conversion and clipping endpoints") {
    Volume3D raw = Volume3D::filled({1, 1, 5}, {1, 1, 1}, 0, VolumeUnit::raw);
    raw.data = {0, 24, 1024, 1224, 3000};
    const VolumeMeta meta;  // slope 1, intercept -1024
    const Volume3D hu = convert_and_clip(raw, meta);
    CHECK(hu.unit == VolumeUnit::hounsfield);
    CHECK(hu.data == std::vector<double>{-1000, -1000, 0, 200, 200});
    CHECK_THROWS_AS(convert_and_clip(hu, meta), StateError);
  }

  TEST_CASE("normalize maps the clip window to [-1, 1]") {
    Volume3D hu = Volume3D::filled({1, 1, 3}, {1, 1, 1}, 0, VolumeUnit::hounsfield);
    hu.data = {-1000, -400, 200};
    const Volume3D n = normalize(hu);
    CHECK(n.data == std::vector<double>{-1, 0, 1});
    CHECK_THROWS_AS(normalize(n), StateError);
  }

  TEST_CASE("resample halves a ramp exactly") {
    Volume3D v = Volume3D::filled({8, 2, 2}, {1.0, 1.0, 1.0}, 0, VolumeUnit::hounsfield);
    for (std::size_t z = 0; z < 8; ++z)
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t x = 0; x < 2; ++x) v.at(z, y, x) = 3.0 * static_cast<double>(z) - 7.0;
    const Volume3D r = resample_to_spacing(v, {2.0, 1.0, 1.0});
    REQUIRE(r.shape == Dims3{4, 2, 2});
    for (std::size_t z = 0; z < 4; ++z) CHECK(r.at(z, 1, 1) == doctest::Approx(3.0 * (2.0 * z + 0.5) - 7.0).epsilon(1e-12));
  }

  TEST_CASE("resample rejects degenerate input") {
    Volume3D v = Volume3D::filled({1, 4, 4}, {1, 1, 1}, 0, VolumeUnit::hounsfield);
    CHECK_THROWS_AS(resample_to_spacing(v, {2.0, 1.0, 1.0}), ResampleError);
    CHECK_THROWS_AS(resample_to_spacing(v, {0.0, 1.0, 1.0}), ResampleError);
  }

  TEST_CASE("crop and pad keep the centre and are idempotent") {
    Volume3D v = Volume3D::filled({3, 5, 4}, {1, 1, 1}, 0, VolumeUnit::hounsfield);
    for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<double>(i);
    const Volume3D c = crop_or_pad_center(v, {5, 3, 4});
    CHECK(c.shape == Dims3{5, 3, 4});
    CHECK(c.at(0, 0, 0) == kHuMin);  // padded slab, low side gets floor(2/2) = 1
    CHECK(c.at(1, 0, 0) == v.at(0, 1, 0));
    CHECK(c.at(4, 2, 3) == kHuMin);
    CHECK(crop_or_pad_center(c, c.shape).data == c.data);
    CHECK(crop_or_pad_center(crop_or_pad_center(v, {5, 3, 4}), {5, 3, 4}).data == c.data);
  }

  TEST_CASE("study times parse and bad ones raise") {
    CHECK(parse_study_time("1970-01-02") == 86400);
    CHECK(parse_study_time("2021-03-04T10:15") + 30 == parse_study_time("2021-03-04T10:15:30"));
    try {
      parse_study_time("2021-13-01");
      FAIL("expected an error");
    } catch (const IngestionError& e) {
      CHECK(e.kind() == IngestionError::Kind::bad_timestamp);
    }
  }

  TEST_CASE("manifest round trip and ingestion errors") {
    const fs::path dir = scratch("manifest");
    ManifestEntry e;
    e.id = "a";
    e.meta.patient_id = "p1";
    e.meta.study_time = "2020-01-01T00:00:00";
    e.meta.source_path = "a.i16";
    e.volume = Volume3D::filled({2, 3, 4}, {1.5, 0.75, 0.75}, 1024, VolumeUnit::raw);
    e.volume.data[5] = -7;
    e.findings = "No pleural effusion.";
    write_payload(dir / "a.i16", e.volume);
    {
      std::ofstream out(dir / "m.jsonl");
      out << to_manifest_row(e, "a.i16").dump() << "\n\n";
    }
    const auto entries = load_manifest(dir / "m.jsonl");
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].volume.data == e.volume.data);
    CHECK(entries[0].volume.spacing == e.volume.spacing);
    CHECK(entries[0].findings == e.findings);

    auto kind_of = [](auto&& f) {
      try {
        f();
      } catch (const IngestionError& err) {
        return err.kind();
      }
      return IngestionError::Kind::io;
    };
    CHECK(kind_of([&] { load_manifest(dir / "missing.jsonl"); }) == IngestionError::Kind::missing_file);
    {
      std::ofstream out(dir / "bad.jsonl");
      out << "{\"patient_id\": 3}\n";
    }
    CHECK(kind_of([&] { load_manifest(dir / "bad.jsonl"); }) == IngestionError::Kind::malformed_row);
    {
      auto row = to_manifest_row(e, "a.i16");
      row["shape"] = {2, 3, 5};
      std::ofstream out(dir / "mismatch.jsonl");
      out << row.dump() << "\n";
    }
    CHECK(kind_of([&] { load_manifest(dir / "mismatch.jsonl"); }) == IngestionError::Kind::payload_mismatch);
  }

  TEST_CASE("preprocess reaches the target grid in normalized units") {
    Volume3D raw = Volume3D::filled({10, 20, 18}, {3.0, 1.5, 1.5}, 1024, VolumeUnit::raw);
    const Volume3D out = preprocess(raw, VolumeMeta{}, {{1.5, 0.75, 0.75}, {16, 40, 40}});
    CHECK(out.shape == Dims3{16, 40, 40});
    CHECK(out.unit == VolumeUnit::normalized);
    CHECK(out.at(8, 20, 20) == doctest::Approx((0.0 + 400.0) / 600.0));
  }
}
