#ifndef VINEHSI_CUBE_HPP
#define VINEHSI_CUBE_HPP

/// Hyperspectral cube I/O and radiometry.
///
/// On-disk format: a plain-text header (`key = value`) next to a raw binary
/// payload. The payload path is the header path with its extension replaced
/// by `.raw`. Multi-band cubes are stored band-sequential (band, line,
/// sample), 32-bit little-endian floats. In memory the cube is (line,
/// sample, band) so per-pixel spectra are contiguous.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::cube {

static_assert(std::endian::native == std::endian::little,
              "raw rasters are little-endian; big-endian hosts unsupported");

enum class Units { DigitalNumber, Reflectance, Features };

inline std::string units_name(Units u) {
  switch (u) {
    case Units::DigitalNumber: return "dn";
    case Units::Reflectance: return "reflectance";
    default: return "features";
  }
}

inline Units units_from_name(const std::string& s) {
  std::string n = lower(trim(s));
  if (n == "dn") return Units::DigitalNumber;
  if (n == "reflectance") return Units::Reflectance;
  if (n == "features") return Units::Features;
  throw IoError("unknown units: '" + s + "'");
}

struct HyperCube {
  std::size_t lines = 0;
  std::size_t samples = 0;
  std::size_t bands = 0;
  std::vector<double> wavelengths;  // nm, ascending, one per band
  Units units = Units::DigitalNumber;
  Tensor<float> data;  // (lines, samples, bands)

  float at(std::size_t l, std::size_t s, std::size_t b) const { return data(l, s, b); }
  float& at(std::size_t l, std::size_t s, std::size_t b) { return data(l, s, b); }

  /// Spectrum pointer for one pixel (bands contiguous).
  const float* pixel(std::size_t l, std::size_t s) const {
    return data.data() + (l * samples + s) * bands;
  }

  void validate() const {
    if (lines == 0 || samples == 0 || bands == 0)
      throw IoError("cube has zero extent");
    if (wavelengths.size() != bands)
      throw IoError("wavelength count " + std::to_string(wavelengths.size()) +
                    " does not match bands " + std::to_string(bands));
    for (std::size_t b = 1; b < bands; ++b)
      if (!(wavelengths[b] > wavelengths[b - 1]))
        throw IoError("wavelengths not strictly increasing at band " + std::to_string(b));
    if (data.size() != lines * samples * bands)
      throw IoError("cube data length mismatch");
  }
};

/// Per-band dark/white reference means for the empirical line correction.
struct ReferencePair {
  std::vector<double> dark;
  std::vector<double> white;
  double white_reflectance = 1.0;

  void validate() const {
    if (dark.size() != white.size() || dark.empty())
      throw IoError("reference vectors empty or of different length");
    if (!(white_reflectance > 0.0) || white_reflectance > 1.0)
      throw ConfigError("white_reflectance must be in (0, 1]");
    for (std::size_t b = 0; b < dark.size(); ++b)
      if (!(white[b] > dark[b]))
        throw NumericError("white <= dark at band " + std::to_string(b));
  }
};

inline std::filesystem::path raw_path_for(const std::filesystem::path& header_path) {
  std::filesystem::path p = header_path;
  p.replace_extension(".raw");
  return p;
}

namespace detail {

inline std::vector<double> parse_number_list(const std::string& csv, const std::string& what) {
  std::vector<double> out;
  for (const std::string& item : split(csv, ',')) {
    if (item.empty()) continue;
    out.push_back(parse_double(item, what));
  }
  return out;
}

inline std::string format_number_list(const std::vector<double>& v) {
  std::string s;
  char buf[64];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", v[i]);
    if (i) s += ",";
    s += buf;
  }
  return s;
}

inline void check_payload_size(const std::filesystem::path& raw, std::size_t expected_bytes) {
  std::error_code ec;
  auto actual = std::filesystem::file_size(raw, ec);
  if (ec) throw IoError("cannot stat " + raw.string());
  if (actual != expected_bytes)
    throw IoError("payload size mismatch for " + raw.string() + ": expected " +
                  std::to_string(expected_bytes) + " bytes, found " + std::to_string(actual));
}

inline void require(const KeyValueFile& kv, const std::string& key, const std::string& value,
                    const std::string& origin) {
  std::string have = lower(kv.get(key));
  if (have != value)
    throw IoError(origin + ": unsupported " + key + " '" + have + "' (expected " + value + ")");
}

}  // namespace detail

inline void save_cube(const HyperCube& cube, const std::filesystem::path& header_path) {
  cube.validate();
  KeyValueFile kv;
  kv.set("lines", std::to_string(cube.lines));
  kv.set("samples", std::to_string(cube.samples));
  kv.set("bands", std::to_string(cube.bands));
  kv.set("interleave", "bsq");
  kv.set("dtype", "f32");
  kv.set("byteorder", "little");
  kv.set("units", units_name(cube.units));
  kv.set("wavelengths", detail::format_number_list(cube.wavelengths));
  kv.save(header_path);

  // Transpose (line, sample, band) -> band-sequential file order.
  std::vector<float> bsq(cube.data.size());
  const std::size_t plane = cube.lines * cube.samples;
  for (std::size_t l = 0; l < cube.lines; ++l)
    for (std::size_t s = 0; s < cube.samples; ++s) {
      const float* px = cube.pixel(l, s);
      std::size_t at = l * cube.samples + s;
      for (std::size_t b = 0; b < cube.bands; ++b) bsq[b * plane + at] = px[b];
    }
  write_binary_file(raw_path_for(header_path), bsq.data(), bsq.size() * sizeof(float));
}

inline HyperCube load_cube(const std::filesystem::path& header_path) {
  KeyValueFile kv = KeyValueFile::load(header_path);
  const std::string origin = header_path.string();
  HyperCube cube;
  cube.lines = static_cast<std::size_t>(kv.get_int("lines"));
  cube.samples = static_cast<std::size_t>(kv.get_int("samples"));
  cube.bands = static_cast<std::size_t>(kv.get_int("bands"));
  detail::require(kv, "interleave", "bsq", origin);
  detail::require(kv, "dtype", "f32", origin);
  detail::require(kv, "byteorder", "little", origin);
  cube.units = units_from_name(kv.get("units"));
  cube.wavelengths = detail::parse_number_list(kv.get("wavelengths"), "wavelengths");

  const std::filesystem::path raw = raw_path_for(header_path);
  const std::size_t n = cube.lines * cube.samples * cube.bands;
  detail::check_payload_size(raw, n * sizeof(float));
  std::vector<char> bytes = read_binary_file(raw);
  const float* bsq = reinterpret_cast<const float*>(bytes.data());

  cube.data = Tensor<float>({cube.lines, cube.samples, cube.bands});
  const std::size_t plane = cube.lines * cube.samples;
  for (std::size_t l = 0; l < cube.lines; ++l)
    for (std::size_t s = 0; s < cube.samples; ++s) {
      float* px = cube.data.data() + (l * cube.samples + s) * cube.bands;
      std::size_t at = l * cube.samples + s;
      for (std::size_t b = 0; b < cube.bands; ++b) px[b] = bsq[b * plane + at];
    }
  cube.validate();
  return cube;
}

/// Single-band f32 raster (NDVI and friends); header carries no wavelengths.
inline void save_raster_f32(const Tensor<float>& raster, const std::filesystem::path& header_path) {
  if (raster.rank() != 2) throw ConfigError("raster must be rank 2");
  KeyValueFile kv;
  kv.set("lines", std::to_string(raster.extent(0)));
  kv.set("samples", std::to_string(raster.extent(1)));
  kv.set("bands", "1");
  kv.set("interleave", "bsq");
  kv.set("dtype", "f32");
  kv.set("byteorder", "little");
  kv.save(header_path);
  write_binary_file(raw_path_for(header_path), raster.data(), raster.size() * sizeof(float));
}

inline Tensor<float> load_raster_f32(const std::filesystem::path& header_path) {
  KeyValueFile kv = KeyValueFile::load(header_path);
  const std::string origin = header_path.string();
  auto lines = static_cast<std::size_t>(kv.get_int("lines"));
  auto samples = static_cast<std::size_t>(kv.get_int("samples"));
  if (kv.get_int("bands") != 1) throw IoError(origin + ": expected single-band raster");
  detail::require(kv, "dtype", "f32", origin);
  detail::require(kv, "byteorder", "little", origin);
  const std::filesystem::path raw = raw_path_for(header_path);
  detail::check_payload_size(raw, lines * samples * sizeof(float));
  std::vector<char> bytes = read_binary_file(raw);
  Tensor<float> t({lines, samples});
  std::copy_n(reinterpret_cast<const float*>(bytes.data()), t.size(), t.data());
  return t;
}

/// Single-band u16 raster (labels, masks, error maps).
inline void save_raster_u16(const Tensor<std::uint16_t>& raster,
                            const std::filesystem::path& header_path) {
  if (raster.rank() != 2) throw ConfigError("raster must be rank 2");
  KeyValueFile kv;
  kv.set("lines", std::to_string(raster.extent(0)));
  kv.set("samples", std::to_string(raster.extent(1)));
  kv.set("bands", "1");
  kv.set("interleave", "bsq");
  kv.set("dtype", "u16");
  kv.set("byteorder", "little");
  kv.save(header_path);
  write_binary_file(raw_path_for(header_path), raster.data(),
                    raster.size() * sizeof(std::uint16_t));
}

inline Tensor<std::uint16_t> load_raster_u16(const std::filesystem::path& header_path) {
  KeyValueFile kv = KeyValueFile::load(header_path);
  const std::string origin = header_path.string();
  auto lines = static_cast<std::size_t>(kv.get_int("lines"));
  auto samples = static_cast<std::size_t>(kv.get_int("samples"));
  if (kv.get_int("bands") != 1) throw IoError(origin + ": expected single-band raster");
  detail::require(kv, "dtype", "u16", origin);
  detail::require(kv, "byteorder", "little", origin);
  const std::filesystem::path raw = raw_path_for(header_path);
  detail::check_payload_size(raw, lines * samples * sizeof(std::uint16_t));
  std::vector<char> bytes = read_binary_file(raw);
  Tensor<std::uint16_t> t({lines, samples});
  std::copy_n(reinterpret_cast<const std::uint16_t*>(bytes.data()), t.size(), t.data());
  return t;
}

inline void save_references(const ReferencePair& refs, const std::filesystem::path& path) {
  refs.validate();
  KeyValueFile kv;
  kv.set("white_reflectance", std::to_string(refs.white_reflectance));
  kv.set("dark", detail::format_number_list(refs.dark));
  kv.set("white", detail::format_number_list(refs.white));
  kv.save(path);
}

inline ReferencePair load_references(const std::filesystem::path& path) {
  KeyValueFile kv = KeyValueFile::load(path);
  ReferencePair refs;
  refs.white_reflectance = kv.get_double("white_reflectance");
  refs.dark = detail::parse_number_list(kv.get("dark"), "dark");
  refs.white = detail::parse_number_list(kv.get("white"), "white");
  refs.validate();
  return refs;
}

/// Empirical line correction: per band, map dark -> 0 and white ->
/// white_reflectance, then clamp to [0, clamp_max].
inline HyperCube to_reflectance(const HyperCube& dn, const ReferencePair& refs,
                                double clamp_max = 1.5) {
  if (dn.units != Units::DigitalNumber)
    throw ConfigError("to_reflectance expects a DN cube");
  refs.validate();
  if (refs.dark.size() != dn.bands)
    throw ConfigError("reference length " + std::to_string(refs.dark.size()) +
                      " does not match cube bands " + std::to_string(dn.bands));
  if (!(clamp_max > 0.0)) throw ConfigError("clamp_max must be positive");

  HyperCube out = dn;
  out.units = Units::Reflectance;
  std::vector<double> gain(dn.bands), offset(dn.bands);
  for (std::size_t b = 0; b < dn.bands; ++b) {
    gain[b] = refs.white_reflectance / (refs.white[b] - refs.dark[b]);
    offset[b] = refs.dark[b];
  }
  float* p = out.data.data();
  const float* q = dn.data.data();
  const std::size_t pixels = dn.lines * dn.samples;
  for (std::size_t i = 0; i < pixels; ++i) {
    for (std::size_t b = 0; b < dn.bands; ++b) {
      double v = (static_cast<double>(q[i * dn.bands + b]) - offset[b]) * gain[b];
      if (v < 0.0) v = 0.0;
      if (v > clamp_max) v = clamp_max;
      p[i * dn.bands + b] = static_cast<float>(v);
    }
  }
  return out;
}

/// Index of the band whose wavelength is closest to `nm`.
inline std::size_t nearest_band(const HyperCube& cube, double nm) {
  if (nm < cube.wavelengths.front() || nm > cube.wavelengths.back())
    throw ConfigError("wavelength " + std::to_string(nm) + " nm outside cube range [" +
                      std::to_string(cube.wavelengths.front()) + ", " +
                      std::to_string(cube.wavelengths.back()) + "]");
  std::size_t best = 0;
  double best_gap = std::abs(cube.wavelengths[0] - nm);
  for (std::size_t b = 1; b < cube.bands; ++b) {
    double gap = std::abs(cube.wavelengths[b] - nm);
    if (gap < best_gap) {
      best_gap = gap;
      best = b;
    }
  }
  return best;
}

/// (NIR - RED) / (NIR + RED) with nearest-band lookup; 0 where the sum is 0.
inline Tensor<float> ndvi(const HyperCube& cube, double red_nm = 670.0, double nir_nm = 800.0) {
  if (cube.units != Units::Reflectance) throw ConfigError("ndvi expects a reflectance cube");
  const std::size_t red = nearest_band(cube, red_nm);
  const std::size_t nir = nearest_band(cube, nir_nm);
  Tensor<float> out({cube.lines, cube.samples});
  for (std::size_t l = 0; l < cube.lines; ++l)
    for (std::size_t s = 0; s < cube.samples; ++s) {
      const float* px = cube.pixel(l, s);
      double r = px[red], n = px[nir];
      double denom = n + r;
      out(l, s) = denom == 0.0 ? 0.0f : static_cast<float>((n - r) / denom);
    }
  return out;
}

/// Restrict to bands [keep_lo, keep_hi).
inline HyperCube trim_bands(const HyperCube& cube, std::size_t keep_lo, std::size_t keep_hi) {
  if (!(keep_lo < keep_hi) || keep_hi > cube.bands)
    throw ConfigError("invalid band range [" + std::to_string(keep_lo) + ", " +
                      std::to_string(keep_hi) + ") for " + std::to_string(cube.bands) +
                      " bands");
  HyperCube out;
  out.lines = cube.lines;
  out.samples = cube.samples;
  out.bands = keep_hi - keep_lo;
  out.units = cube.units;
  out.wavelengths.assign(cube.wavelengths.begin() + static_cast<std::ptrdiff_t>(keep_lo),
                         cube.wavelengths.begin() + static_cast<std::ptrdiff_t>(keep_hi));
  out.data = Tensor<float>({out.lines, out.samples, out.bands});
  for (std::size_t l = 0; l < cube.lines; ++l)
    for (std::size_t s = 0; s < cube.samples; ++s) {
      const float* src = cube.pixel(l, s);
      float* dst = out.data.data() + (l * out.samples + s) * out.bands;
      std::copy_n(src + keep_lo, out.bands, dst);
    }
  return out;
}

}  // namespace vinehsi::cube

#endif
