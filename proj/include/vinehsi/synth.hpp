#pragma once

// Synthetic vineyard swaths with known ground truth: striped class geometry,
// Gaussian-bump signatures with a red-edge ramp, convex boundary mixing, and
// the DN-domain twin with reference panels. Signatures are redrawn until even
// a half-soil blend clears the vegetation-index floor, so index masking never
// punches holes in the rows.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/cube.hpp"
#include "vinehsi/labeling.hpp"
#include "vinehsi/rng.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::synth {

struct SceneSpec {
  std::size_t lines = 256;
  std::size_t samples = 256;
  std::size_t n_classes = 8;
  std::size_t bands = 140;
  double wl_lo = 450.0;   // nm
  double wl_hi = 950.0;   // nm
  std::size_t stripe_width = 8;   // vineyard row, in lines
  std::size_t stripe_gap = 4;     // bare soil between rows
  double noise_std = 0.0;           // additive Gaussian, reflectance units
  std::size_t mixing_width = 1;     // boundary lines blended with the surroundings
  double min_signature_gap = 0.008; // smallest allowed RMS contrast between signatures
  std::uint64_t seed = 0;

  std::size_t n_stripes() const {
    if (lines < stripe_gap + stripe_width) return 0;
    return 1 + (lines - stripe_gap - stripe_width) / (stripe_width + stripe_gap);
  }

  void validate() const {
    if (lines == 0 || samples == 0) throw ConfigError("scene extent must be positive");
    if (n_classes < 1 || n_classes > 0xffff)
      throw ConfigError("class count out of range");
    if (bands < 4) throw ConfigError("need at least 4 bands");
    if (!(wl_lo < wl_hi)) throw ConfigError("wavelength range is empty");
    if (stripe_width == 0) throw ConfigError("stripe width must be positive");
    if (noise_std < 0.0) throw ConfigError("noise std must be non-negative");
    if (min_signature_gap < 0.0) throw ConfigError("signature gap must be non-negative");
    if (2 * mixing_width > stripe_width)
      throw ConfigError("mixing width exceeds half the stripe");
    if (n_stripes() < n_classes)
      throw ConfigError(std::to_string(n_classes) + " classes need at least " +
                        std::to_string(n_classes) + " stripes but only " +
                        std::to_string(n_stripes()) + " fit " + std::to_string(lines) +
                        " lines");
  }
};

struct Scene {
  cube::HyperCube reflectance;  // noisy, mixed
  cube::HyperCube dn;           // digital-number twin of the same data
  cube::ReferencePair references;
  labeling::LabelRaster labels;  // geometric ground truth, soil = 0
  std::vector<labeling::PolygonAnnotation> polygons;
  labeling::ClassTable classes;
  std::vector<std::vector<double>> signatures;  // clean per-class spectra
  std::vector<double> soil;
};

namespace detail {

inline double bump(double wl, double center, double width, double amplitude) {
  const double z = (wl - center) / width;
  return amplitude * std::exp(-0.5 * z * z);
}

inline double ramp(double wl, double center, double width, double plateau) {
  return plateau / (1.0 + std::exp(-(wl - center) / width));
}

/// Vegetation: low red, green bump, red-edge ramp to a NIR plateau, plus two
/// class-specific NIR bumps drawn from the stream.
inline std::vector<double> draw_signature(const std::vector<double>& wl, rng::Stream& s) {
  const double base = 0.03 + s.next_uniform(0.0, 0.02);
  const double green_amp = 0.06 + s.next_uniform(0.0, 0.06);
  const double edge_center = 700.0 + s.next_uniform(-8.0, 8.0);
  const double edge_width = 10.0 + s.next_uniform(0.0, 6.0);
  const double plateau = 0.42 + s.next_uniform(0.0, 0.16);
  const double b1_center = 760.0 + s.next_uniform(0.0, 60.0);
  const double b1_amp = s.next_uniform(-0.06, 0.06);
  const double b2_center = 840.0 + s.next_uniform(0.0, 90.0);
  const double b2_amp = s.next_uniform(-0.06, 0.06);
  std::vector<double> sig(wl.size());
  for (std::size_t b = 0; b < wl.size(); ++b) {
    double v = base + bump(wl[b], 550.0, 35.0, green_amp) +
               ramp(wl[b], edge_center, edge_width, plateau) +
               bump(wl[b], b1_center, 45.0, b1_amp) + bump(wl[b], b2_center, 55.0, b2_amp);
    sig[b] = std::min(std::max(v, 0.01), 0.9);
  }
  return sig;
}

/// Dark inter-row soil: a gentle upward ramp with no red edge.
inline std::vector<double> soil_signature(const std::vector<double>& wl) {
  std::vector<double> sig(wl.size());
  for (std::size_t b = 0; b < wl.size(); ++b) {
    const double t = (wl[b] - wl.front()) / (wl.back() - wl.front());
    sig[b] = 0.09 + 0.05 * t + bump(wl[b], 600.0, 120.0, 0.02);
  }
  return sig;
}

inline double l2_gap(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

inline std::size_t nearest_index(const std::vector<double>& wl, double target) {
  std::size_t best = 0;
  for (std::size_t b = 1; b < wl.size(); ++b)
    if (std::abs(wl[b] - target) < std::abs(wl[best] - target)) best = b;
  return best;
}

}  // namespace detail

/// Stripes of vegetation classes over soil, cycling class 1..n down the
/// swath. The geometric label raster ignores the spectra; boundary mixing and
/// noise only touch the cube.
inline Scene generate(const SceneSpec& spec) {
  spec.validate();
  Scene scene;

  std::vector<double> wl(spec.bands);
  for (std::size_t b = 0; b < spec.bands; ++b)
    wl[b] = spec.wl_lo + (spec.wl_hi - spec.wl_lo) * static_cast<double>(b) /
                            static_cast<double>(spec.bands - 1);

  // Signatures, redrawn until pairwise separation holds and every class --
  // even blended half-and-half with soil -- sits clearly on the vegetation
  // side of the red/NIR index.
  scene.soil = detail::soil_signature(wl);
  const std::size_t red_band = detail::nearest_index(wl, 670.0);
  const std::size_t nir_band = detail::nearest_index(wl, 800.0);
  auto veg_index = [&](const std::vector<double>& sig) {
    return (sig[nir_band] - sig[red_band]) / (sig[nir_band] + sig[red_band]);
  };
  for (std::size_t attempt = 0;; ++attempt) {
    if (attempt == 64)
      throw ConfigError("could not draw " + std::to_string(spec.n_classes) +
                        " separable signatures with RMS contrast " +
                        std::to_string(spec.min_signature_gap));
    rng::Stream draw(rng::mix(spec.seed, 0x736967u, attempt));
    scene.signatures.clear();
    for (std::size_t k = 0; k < spec.n_classes; ++k)
      scene.signatures.push_back(detail::draw_signature(wl, draw));
    double worst = std::numeric_limits<double>::infinity();
    bool green = true;
    for (std::size_t i = 0; i < spec.n_classes; ++i) {
      for (std::size_t j = i + 1; j < spec.n_classes; ++j)
        worst = std::min(worst, detail::l2_gap(scene.signatures[i], scene.signatures[j]));
      worst = std::min(worst, detail::l2_gap(scene.signatures[i], scene.soil));
      std::vector<double> blend(spec.bands);
      for (std::size_t b = 0; b < spec.bands; ++b)
        blend[b] = 0.5 * (scene.signatures[i][b] + scene.soil[b]);
      green = green && veg_index(scene.signatures[i]) >= 0.55 && veg_index(blend) >= 0.45;
    }
    const double worst_rms = worst / std::sqrt(static_cast<double>(spec.bands));
    if (worst_rms >= spec.min_signature_gap && green) break;
  }

  // Geometry: stripe k covers lines [gap + k*(width+gap), +width).
  scene.labels.lines = spec.lines;
  scene.labels.samples = spec.samples;
  scene.labels.labels = Tensor<std::uint16_t>({spec.lines, spec.samples});
  const std::size_t n_stripes = spec.n_stripes();
  std::vector<std::uint16_t> stripe_class(n_stripes);
  std::vector<std::size_t> stripe_top(n_stripes);
  for (std::size_t k = 0; k < n_stripes; ++k) {
    stripe_class[k] = static_cast<std::uint16_t>(1 + k % spec.n_classes);
    stripe_top[k] = spec.stripe_gap + k * (spec.stripe_width + spec.stripe_gap);
    for (std::size_t l = stripe_top[k]; l < stripe_top[k] + spec.stripe_width; ++l)
      for (std::size_t s = 0; s < spec.samples; ++s)
        scene.labels.labels(l, s) = stripe_class[k];
  }

  for (std::size_t k = 0; k < n_stripes; ++k) {
    labeling::PolygonAnnotation poly;
    poly.class_id = stripe_class[k];
    const double y0 = static_cast<double>(stripe_top[k]);
    const double y1 = static_cast<double>(stripe_top[k] + spec.stripe_width);
    const double x1 = static_cast<double>(spec.samples);
    poly.vertices = {{0.0, y0}, {x1, y0}, {x1, y1}, {0.0, y1}};
    scene.polygons.push_back(std::move(poly));
  }

  for (std::size_t k = 0; k < spec.n_classes; ++k)
    scene.classes[static_cast<std::uint16_t>(k + 1)] = "variety_" + std::to_string(k + 1);

  // Per-line spectra: each line has one composition (stripe, soil, or a
  // convex blend at stripe edges), constant across samples before noise.
  std::vector<std::vector<double>> line_spectrum(spec.lines, scene.soil);
  for (std::size_t k = 0; k < n_stripes; ++k) {
    const auto& sig = scene.signatures[stripe_class[k] - 1];
    for (std::size_t i = 0; i < spec.stripe_width; ++i) {
      const std::size_t l = stripe_top[k] + i;
      const std::size_t edge = std::min(i, spec.stripe_width - 1 - i);
      double own = 1.0;
      if (edge < spec.mixing_width)
        own = (static_cast<double>(edge) + 1.0) / (static_cast<double>(spec.mixing_width) + 1.0);
      auto& dst = line_spectrum[l];
      dst.resize(spec.bands);
      for (std::size_t b = 0; b < spec.bands; ++b)
        dst[b] = own * sig[b] + (1.0 - own) * scene.soil[b];
    }
  }

  scene.reflectance.lines = spec.lines;
  scene.reflectance.samples = spec.samples;
  scene.reflectance.bands = spec.bands;
  scene.reflectance.wavelengths = wl;
  scene.reflectance.units = cube::Units::Reflectance;
  scene.reflectance.data = Tensor<float>({spec.lines, spec.samples, spec.bands});
  rng::Stream noise(rng::mix(spec.seed, 0x6e6f6973u));
  for (std::size_t l = 0; l < spec.lines; ++l) {
    const auto& base = line_spectrum[l];
    for (std::size_t s = 0; s < spec.samples; ++s)
      for (std::size_t b = 0; b < spec.bands; ++b) {
        double v = base[b];
        if (spec.noise_std > 0.0) {
          v += spec.noise_std * noise.next_normal();
          v = std::min(std::max(v, 0.001), 1.4);
        }
        scene.reflectance.data(l, s, b) = static_cast<float>(v);
      }
  }
  scene.reflectance.validate();

  // Reference panels and the DN twin: dn = dark + r * (white - dark) / wr.
  rng::Stream panels(rng::mix(spec.seed, 0x72656673u));
  scene.references.dark.resize(spec.bands);
  scene.references.white.resize(spec.bands);
  scene.references.white_reflectance = 0.95;
  for (std::size_t b = 0; b < spec.bands; ++b) {
    scene.references.dark[b] = 80.0 + panels.next_uniform(0.0, 40.0);
    scene.references.white[b] = 2800.0 + panels.next_uniform(0.0, 800.0);
  }
  scene.references.validate();

  scene.dn = scene.reflectance;
  scene.dn.units = cube::Units::DigitalNumber;
  for (std::size_t i = 0; i < scene.dn.data.size(); ++i) {
    const std::size_t b = i % spec.bands;
    const double gain =
        (scene.references.white[b] - scene.references.dark[b]) / scene.references.white_reflectance;
    scene.dn.data[i] = static_cast<float>(
        scene.references.dark[b] + static_cast<double>(scene.reflectance.data[i]) * gain);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Spec file round trip

inline void save_scene_spec(const SceneSpec& spec, const std::filesystem::path& path) {
  KeyValueFile kv;
  kv.set("lines", std::to_string(spec.lines));
  kv.set("samples", std::to_string(spec.samples));
  kv.set("n_classes", std::to_string(spec.n_classes));
  kv.set("bands", std::to_string(spec.bands));
  kv.set("wl_lo", format_double(spec.wl_lo));
  kv.set("wl_hi", format_double(spec.wl_hi));
  kv.set("stripe_width", std::to_string(spec.stripe_width));
  kv.set("stripe_gap", std::to_string(spec.stripe_gap));
  kv.set("noise_std", format_double(spec.noise_std));
  kv.set("mixing_width", std::to_string(spec.mixing_width));
  kv.set("min_signature_gap", format_double(spec.min_signature_gap));
  kv.set("seed", std::to_string(spec.seed));
  kv.save(path);
}

inline SceneSpec load_scene_spec(const std::filesystem::path& path) {
  KeyValueFile kv = KeyValueFile::load(path);
  SceneSpec spec;
  spec.lines = static_cast<std::size_t>(kv.get_int("lines"));
  spec.samples = static_cast<std::size_t>(kv.get_int("samples"));
  spec.n_classes = static_cast<std::size_t>(kv.get_int("n_classes"));
  spec.bands = static_cast<std::size_t>(kv.get_int("bands"));
  spec.wl_lo = kv.get_double("wl_lo");
  spec.wl_hi = kv.get_double("wl_hi");
  spec.stripe_width = static_cast<std::size_t>(kv.get_int("stripe_width"));
  spec.stripe_gap = static_cast<std::size_t>(kv.get_int("stripe_gap"));
  spec.noise_std = kv.get_double("noise_std");
  spec.mixing_width = static_cast<std::size_t>(kv.get_int("mixing_width"));
  spec.min_signature_gap = kv.get_double("min_signature_gap");
  spec.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  spec.validate();
  return spec;
}

}  // namespace vinehsi::synth
