#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vinehsi/cube.hpp"
#include "vinehsi/rng.hpp"

using namespace vinehsi;
using cube::HyperCube;
using cube::ReferencePair;
using cube::Units;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "vinehsi_cube_test";
  std::filesystem::create_directories(dir);
  return dir;
}

HyperCube make_cube(std::size_t lines, std::size_t samples, std::size_t bands,
                    std::uint64_t seed, Units units = Units::Reflectance) {
  HyperCube c;
  c.lines = lines;
  c.samples = samples;
  c.bands = bands;
  c.units = units;
  for (std::size_t b = 0; b < bands; ++b)
    c.wavelengths.push_back(400.0 + 600.0 * static_cast<double>(b) /
                                        static_cast<double>(bands > 1 ? bands - 1 : 1));
  c.data = Tensor<float>({lines, samples, bands});
  rng::Stream s(seed);
  for (std::size_t i = 0; i < c.data.size(); ++i)
    c.data[i] = static_cast<float>(s.next_uniform(0.0, 1.0));
  return c;
}

}  // namespace

TEST_CASE("cube save/load round-trip is bit-exact") {
  auto dir = temp_dir();
  HyperCube c = make_cube(5, 7, 11, 42);
  cube::save_cube(c, dir / "rt.hdr");
  HyperCube d = cube::load_cube(dir / "rt.hdr");
  REQUIRE(d.lines == 5);
  REQUIRE(d.samples == 7);
  REQUIRE(d.bands == 11);
  CHECK(d.units == Units::Reflectance);
  CHECK(d.wavelengths == c.wavelengths);
  REQUIRE(d.data.size() == c.data.size());
  for (std::size_t i = 0; i < c.data.size(); ++i) REQUIRE(d.data[i] == c.data[i]);
}

TEST_CASE("header arithmetic: 2x3x4 cube needs 96 bytes") {
  auto dir = temp_dir();
  HyperCube c = make_cube(2, 3, 4, 1);
  cube::save_cube(c, dir / "small.hdr");
  CHECK(std::filesystem::file_size(dir / "small.raw") == 96);
  CHECK_NOTHROW(cube::load_cube(dir / "small.hdr"));
}

TEST_CASE("payload size mismatch is reported with byte counts") {
  auto dir = temp_dir();
  HyperCube c = make_cube(2, 3, 100, 2);
  cube::save_cube(c, dir / "bad.hdr");
  // Truncate the payload to 99 bands' worth.
  std::filesystem::resize_file(dir / "bad.raw", 2 * 3 * 99 * sizeof(float));
  try {
    cube::load_cube(dir / "bad.hdr");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    std::string msg = e.what();
    CHECK(msg.find("2400") != std::string::npos);   // expected bytes
    CHECK(msg.find("2376") != std::string::npos);   // actual bytes
  }
}

TEST_CASE("garbled headers are rejected") {
  auto dir = temp_dir();
  HyperCube c = make_cube(2, 2, 3, 3);
  cube::save_cube(c, dir / "g.hdr");

  SECTION("missing key") {
    std::ofstream out(dir / "g.hdr");
    out << "lines = 2\nsamples = 2\n";  // no bands
    out.close();
    CHECK_THROWS_AS(cube::load_cube(dir / "g.hdr"), IoError);
  }
  SECTION("non-ascending wavelengths") {
    KeyValueFile kv = KeyValueFile::load(dir / "g.hdr");
    kv.set("wavelengths", "500,400,600");
    kv.set("bands", "3");
    kv.save(dir / "g.hdr");
    CHECK_THROWS_AS(cube::load_cube(dir / "g.hdr"), IoError);
  }
  SECTION("unsupported dtype") {
    KeyValueFile kv = KeyValueFile::load(dir / "g.hdr");
    kv.set("dtype", "f64");
    kv.save(dir / "g.hdr");
    CHECK_THROWS_AS(cube::load_cube(dir / "g.hdr"), IoError);
  }
}

TEST_CASE("empirical line correction maps dark to 0 and white to its reflectance") {
  HyperCube dn = make_cube(1, 3, 2, 4, Units::DigitalNumber);
  ReferencePair refs;
  refs.dark = {100.0, 200.0};
  refs.white = {1100.0, 2200.0};
  refs.white_reflectance = 0.9;

  // Pixel 0: at dark. Pixel 1: at white. Pixel 2: midway.
  for (std::size_t b = 0; b < 2; ++b) {
    dn.data(0, 0, b) = static_cast<float>(refs.dark[b]);
    dn.data(0, 1, b) = static_cast<float>(refs.white[b]);
    dn.data(0, 2, b) = static_cast<float>(0.5 * (refs.dark[b] + refs.white[b]));
  }
  HyperCube refl = cube::to_reflectance(dn, refs);
  CHECK(refl.units == Units::Reflectance);
  for (std::size_t b = 0; b < 2; ++b) {
    CHECK(refl.data(0, 0, b) == Catch::Approx(0.0));
    CHECK(refl.data(0, 1, b) == Catch::Approx(0.9));
    CHECK(refl.data(0, 2, b) == Catch::Approx(0.45));
  }
}

TEST_CASE("correction is affine per band on random references") {
  rng::Stream s(99);
  HyperCube dn = make_cube(3, 4, 6, 5, Units::DigitalNumber);
  ReferencePair refs;
  refs.white_reflectance = 1.0;
  for (std::size_t b = 0; b < 6; ++b) {
    double d = s.next_uniform(50.0, 500.0);
    refs.dark.push_back(d);
    refs.white.push_back(d + s.next_uniform(100.0, 4000.0));
  }
  // DN values as convex mixtures of dark and white: alpha in [0,1] must map to alpha.
  Tensor<float> alphas({3, 4, 6});
  for (std::size_t i = 0; i < alphas.size(); ++i)
    alphas[i] = static_cast<float>(s.next_unit());
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t sm = 0; sm < 4; ++sm)
      for (std::size_t b = 0; b < 6; ++b) {
        double a = alphas(l, sm, b);
        dn.data(l, sm, b) =
            static_cast<float>((1.0 - a) * refs.dark[b] + a * refs.white[b]);
      }
  HyperCube refl = cube::to_reflectance(dn, refs);
  for (std::size_t i = 0; i < refl.data.size(); ++i)
    CHECK(refl.data[i] == Catch::Approx(alphas[i]).margin(2e-4));
}

TEST_CASE("correction clamps and rejects bad references") {
  HyperCube dn = make_cube(1, 1, 1, 6, Units::DigitalNumber);
  ReferencePair refs;
  refs.dark = {100.0};
  refs.white = {200.0};
  refs.white_reflectance = 1.0;

  dn.data(0, 0, 0) = 50.0f;  // below dark
  CHECK(cube::to_reflectance(dn, refs).data[0] == 0.0f);
  dn.data(0, 0, 0) = 5000.0f;  // far over white
  CHECK(cube::to_reflectance(dn, refs).data[0] == 1.5f);

  ReferencePair bad = refs;
  bad.white[0] = 100.0;
  CHECK_THROWS_AS(cube::to_reflectance(dn, bad), NumericError);

  HyperCube already = make_cube(1, 1, 1, 7, Units::Reflectance);
  CHECK_THROWS_AS(cube::to_reflectance(already, refs), ConfigError);
}

TEST_CASE("ndvi formula, symmetry and range") {
  HyperCube c = make_cube(1, 3, 5, 8, Units::Reflectance);
  // wavelengths are 400,550,700,850,1000; red->700 (idx 2), nir->850 (idx 3)
  std::size_t red = cube::nearest_band(c, 670.0);
  std::size_t nir = cube::nearest_band(c, 800.0);
  CHECK(red == 2);
  CHECK(nir == 3);

  c.data(0, 0, red) = 0.2f;
  c.data(0, 0, nir) = 0.8f;
  c.data(0, 1, red) = 0.3f;
  c.data(0, 1, nir) = 0.3f;
  c.data(0, 2, red) = 0.0f;
  c.data(0, 2, nir) = 0.5f;
  Tensor<float> v = cube::ndvi(c, 670.0, 800.0);
  CHECK(v(0, 0) == Catch::Approx(0.6));
  CHECK(v(0, 1) == Catch::Approx(0.0));
  CHECK(v(0, 2) == Catch::Approx(1.0));

  rng::Stream s(11);
  HyperCube r = make_cube(6, 6, 5, 12, Units::Reflectance);
  Tensor<float> vr = cube::ndvi(r, 670.0, 800.0);
  for (std::size_t i = 0; i < vr.size(); ++i) {
    CHECK(vr[i] >= -1.0f);
    CHECK(vr[i] <= 1.0f);
  }

  CHECK_THROWS_AS(cube::ndvi(c, 200.0, 800.0), ConfigError);
  CHECK_THROWS_AS(cube::ndvi(c, 670.0, 1500.0), ConfigError);
}

TEST_CASE("ndvi of a zero-reflectance pixel is 0") {
  HyperCube c = make_cube(1, 1, 5, 13, Units::Reflectance);
  for (std::size_t b = 0; b < 5; ++b) c.data(0, 0, b) = 0.0f;
  CHECK(cube::ndvi(c)(0, 0) == 0.0f);
}

TEST_CASE("band trimming slices data and wavelengths consistently") {
  HyperCube c = make_cube(2, 2, 270, 14);
  HyperCube t = cube::trim_bands(c, 65, 205);
  REQUIRE(t.bands == 140);
  CHECK(t.wavelengths.front() == c.wavelengths[65]);
  CHECK(t.wavelengths.back() == c.wavelengths[204]);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t b = 0; b < 140; ++b)
        REQUIRE(t.data(l, s, b) == c.data(l, s, b + 65));

  HyperCube same = cube::trim_bands(c, 0, 270);
  CHECK(same.bands == 270);
  CHECK(same.data.storage() == c.data.storage());

  CHECK_THROWS_AS(cube::trim_bands(c, 10, 10), ConfigError);
  CHECK_THROWS_AS(cube::trim_bands(c, 20, 10), ConfigError);
  CHECK_THROWS_AS(cube::trim_bands(c, 0, 271), ConfigError);
}

TEST_CASE("reference pair file round-trip") {
  auto dir = temp_dir();
  ReferencePair refs;
  refs.dark = {1.5, 2.5, 3.5};
  refs.white = {100.0, 200.0, 300.0};
  refs.white_reflectance = 0.95;
  cube::save_references(refs, dir / "refs.txt");
  ReferencePair r2 = cube::load_references(dir / "refs.txt");
  CHECK(r2.dark == refs.dark);
  CHECK(r2.white == refs.white);
  CHECK(r2.white_reflectance == Catch::Approx(0.95));
}

TEST_CASE("u16 raster round-trip") {
  auto dir = temp_dir();
  Tensor<std::uint16_t> labels({3, 4});
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<std::uint16_t>(i * 7 % 5);
  cube::save_raster_u16(labels, dir / "labels.hdr");
  auto back = cube::load_raster_u16(dir / "labels.hdr");
  REQUIRE(back.shape() == labels.shape());
  CHECK(back.storage() == labels.storage());
}

TEST_CASE("f32 raster round-trip") {
  auto dir = temp_dir();
  Tensor<float> r({2, 5});
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = static_cast<float>(i) * 0.25f - 1.0f;
  cube::save_raster_f32(r, dir / "ndvi.hdr");
  auto back = cube::load_raster_f32(dir / "ndvi.hdr");
  REQUIRE(back.shape() == r.shape());
  CHECK(back.storage() == r.storage());
}
