#pragma once

// The pipeline stages as pure file-to-file operations sharing one key-value
// config. Every stage writes its outputs plus a manifest (inputs with content
// hashes, config hash, seed, wall time) into its run directory, so a run can
// be audited and replayed from the directory alone.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/cube.hpp"
#include "vinehsi/evaluate.hpp"
#include "vinehsi/features.hpp"
#include "vinehsi/labeling.hpp"
#include "vinehsi/model.hpp"
#include "vinehsi/patchset.hpp"
#include "vinehsi/rng.hpp"
#include "vinehsi/synth.hpp"
#include "vinehsi/tensor.hpp"
#include "vinehsi/train.hpp"

namespace vinehsi::pipeline {

// ---------------------------------------------------------------------------
// Config

/// Every tunable of the pipeline. File keys and flag overrides go through
/// set(), so both spellings share one parser and one range check.
struct PipelineConfig {
  // geometry and architecture
  std::size_t patch_size = 23;
  std::size_t overlap = 22;
  std::size_t n_features = 40;
  std::string variant = "proposed";
  std::size_t n_classes = 0;  // 0: infer from the dataset
  // training
  std::size_t batch_size = 1024;
  std::size_t epochs = 500;
  double learning_rate = 1e-5;
  std::size_t n_splits = 9;
  std::size_t transforms_per_split = 2;
  double augment_p = 0.5;
  std::size_t patience = 20;
  std::size_t eval_batch = 512;
  // splitting and balancing
  double train_fraction = 0.68;
  double val_fraction = 0.12;
  double test_fraction = 0.20;
  std::size_t k_groups = 3;
  // correction, masking, features
  double clamp_max = 1.5;
  double ndvi_threshold = 0.4;
  double red_nm = 670.0;
  double nir_nm = 800.0;
  std::size_t fa_max_iter = 1000;
  double fa_tol = 1e-4;
  std::size_t fit_cap = 200000;
  std::size_t dsi_cap = 2000;
  // run control
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::size_t threads = 1;

  void set(const std::string& key, const std::string& value) {
    auto to_count = [&](std::size_t lo = 0) {
      const long long v = parse_int(value, key);
      if (v < static_cast<long long>(lo))
        throw ConfigError(key + " must be at least " + std::to_string(lo));
      return static_cast<std::size_t>(v);
    };
    if (key == "patch_size") patch_size = to_count(1);
    else if (key == "overlap") overlap = to_count(0);
    else if (key == "n_features") n_features = to_count(1);
    else if (key == "variant") variant = trim(value);
    else if (key == "n_classes") n_classes = to_count(0);
    else if (key == "batch_size") batch_size = to_count(1);
    else if (key == "epochs") epochs = to_count(1);
    else if (key == "learning_rate") learning_rate = parse_double(value, key);
    else if (key == "n_splits") n_splits = to_count(1);
    else if (key == "transforms_per_split") transforms_per_split = to_count(1);
    else if (key == "augment_p") augment_p = parse_double(value, key);
    else if (key == "patience") patience = to_count(1);
    else if (key == "eval_batch") eval_batch = to_count(1);
    else if (key == "train_fraction") train_fraction = parse_double(value, key);
    else if (key == "val_fraction") val_fraction = parse_double(value, key);
    else if (key == "test_fraction") test_fraction = parse_double(value, key);
    else if (key == "k_groups") k_groups = to_count(0);
    else if (key == "clamp_max") clamp_max = parse_double(value, key);
    else if (key == "ndvi_threshold") ndvi_threshold = parse_double(value, key);
    else if (key == "red_nm") red_nm = parse_double(value, key);
    else if (key == "nir_nm") nir_nm = parse_double(value, key);
    else if (key == "fa_max_iter") fa_max_iter = to_count(1);
    else if (key == "fa_tol") fa_tol = parse_double(value, key);
    else if (key == "fit_cap") fit_cap = to_count(2);
    else if (key == "dsi_cap") dsi_cap = to_count(4);
    else if (key == "seed") {
      seed = static_cast<std::uint64_t>(parse_int(value, key));
      seed_set = true;
    } else if (key == "threads") threads = to_count(1);
    else throw ConfigError("unknown config key '" + key + "'");
  }

  void validate() const {
    if (patch_size % 2 == 0) throw ConfigError("patch_size must be odd");
    if (overlap >= patch_size) throw ConfigError("overlap must be smaller than patch_size");
    if (!(learning_rate > 0.0) || learning_rate > 1.0)
      throw ConfigError("learning_rate must lie in (0, 1]");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (augment_p < 0.0 || augment_p > 1.0)
      throw ConfigError("augment_p must lie in [0, 1]");
    patches::SplitFractions{train_fraction, val_fraction, test_fraction}.validate();
    if (!(clamp_max > 0.0)) throw ConfigError("clamp_max must be positive");
    if (ndvi_threshold <= -1.0 || ndvi_threshold >= 1.0)
      throw ConfigError("ndvi_threshold must lie in (-1, 1)");
    if (!(red_nm > 0.0) || !(nir_nm > 0.0) || red_nm == nir_nm)
      throw ConfigError("red_nm and nir_nm must be positive and distinct");
    if (!(fa_tol > 0.0)) throw ConfigError("fa_tol must be positive");
    model::parse_variant(variant);
  }

  patches::SplitFractions fractions() const {
    return {train_fraction, val_fraction, test_fraction};
  }

  std::size_t stride() const { return patch_size - overlap; }

  /// Canonical text form; also the input of the config hash.
  std::string text() const {
    std::ostringstream out;
    auto put = [&](const char* key, const std::string& value) {
      out << key << " = " << value << "\n";
    };
    put("patch_size", std::to_string(patch_size));
    put("overlap", std::to_string(overlap));
    put("n_features", std::to_string(n_features));
    put("variant", variant);
    put("n_classes", std::to_string(n_classes));
    put("batch_size", std::to_string(batch_size));
    put("epochs", std::to_string(epochs));
    put("learning_rate", format_double(learning_rate));
    put("n_splits", std::to_string(n_splits));
    put("transforms_per_split", std::to_string(transforms_per_split));
    put("augment_p", format_double(augment_p));
    put("patience", std::to_string(patience));
    put("eval_batch", std::to_string(eval_batch));
    put("train_fraction", format_double(train_fraction));
    put("val_fraction", format_double(val_fraction));
    put("test_fraction", format_double(test_fraction));
    put("k_groups", std::to_string(k_groups));
    put("clamp_max", format_double(clamp_max));
    put("ndvi_threshold", format_double(ndvi_threshold));
    put("red_nm", format_double(red_nm));
    put("nir_nm", format_double(nir_nm));
    put("fa_max_iter", std::to_string(fa_max_iter));
    put("fa_tol", format_double(fa_tol));
    put("fit_cap", std::to_string(fit_cap));
    put("dsi_cap", std::to_string(dsi_cap));
    put("seed", std::to_string(seed));
    put("threads", std::to_string(threads));
    return out.str();
  }

  void require_seed(const std::string& stage) const {
    if (!seed_set)
      throw ConfigError(stage + " needs an explicit seed (config key 'seed' or --seed)");
  }
};

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  PipelineConfig cfg;
  for (const auto& [key, value] : KeyValueFile::load(path).entries()) cfg.set(key, value);
  return cfg;
}

// ---------------------------------------------------------------------------
// Run directories

inline std::string hash_hex(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(bytes)));
  return buf;
}

inline std::string file_hash(const std::filesystem::path& path) {
  const std::vector<char> bytes = read_binary_file(path);
  return hash_hex(std::string_view(bytes.data(), bytes.size()));
}

/// Collects the manifest of one stage run and writes it, together with the
/// effective config, when the stage finishes.
class StageRun {
 public:
  StageRun(std::string stage, std::filesystem::path dir)
      : stage_(std::move(stage)), dir_(std::move(dir)),
        start_(std::chrono::steady_clock::now()) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }

  /// Path for an output file; recorded in the manifest.
  std::filesystem::path out(const std::string& name) {
    lines_.emplace_back("output_" + name, name);
    return dir_ / name;
  }

  void input(const std::string& name, const std::filesystem::path& path) {
    lines_.emplace_back("input_" + name, path.string());
    lines_.emplace_back("input_" + name + "_hash", file_hash(path));
  }

  /// Header + raw twin of the cube/raster formats.
  void input_raster(const std::string& name, const std::filesystem::path& header) {
    input(name + "_header", header);
    input(name + "_raw", cube::raw_path_for(header));
  }

  void note(const std::string& key, const std::string& value) {
    lines_.emplace_back(key, value);
  }

  void finish(const PipelineConfig& cfg) {
    const std::string config_text = cfg.text();
    write_binary_file(dir_ / "config.txt", config_text.data(), config_text.size());

    std::ostringstream manifest;
    manifest << "stage = " << stage_ << "\n";
    manifest << "config_hash = " << hash_hex(config_text) << "\n";
    manifest << "seed = " << cfg.seed << "\n";
    for (const auto& [key, value] : lines_) manifest << key << " = " << value << "\n";
    const double wall = std::chrono::duration<double>(
        std::chrono::steady_clock::now() - start_).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", wall);
    manifest << "wall_seconds = " << buf << "\n";
    const std::string text = manifest.str();
    write_binary_file(dir_ / "manifest.txt", text.data(), text.size());
  }

 private:
  std::string stage_;
  std::filesystem::path dir_;
  std::vector<std::pair<std::string, std::string>> lines_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Shared pieces

inline labeling::LabelRaster load_labels(const std::filesystem::path& header) {
  labeling::LabelRaster raster;
  raster.labels = cube::load_raster_u16(header);
  raster.lines = raster.labels.extent(0);
  raster.samples = raster.labels.extent(1);
  return raster;
}

inline std::shared_ptr<const Tensor<float>> share_cube_data(cube::HyperCube&& cube) {
  return std::make_shared<const Tensor<float>>(std::move(cube.data));
}

/// The train/val/test membership both fit-features and extract must agree on:
/// patches on the stride grid of the config, shuffled and cut by the config
/// seed. The fit stage only consumes the refs, never patch values, so sharing
/// the full-band cube here costs nothing.
inline patches::SplitResult split_for(std::shared_ptr<const Tensor<float>> data,
                                      const labeling::LabelRaster& labels,
                                      const PipelineConfig& cfg) {
  auto set = patches::extract_patches(std::move(data), labels, cfg.patch_size,
                                      cfg.stride());
  return patches::split_patches(set, cfg.fractions(), cfg.seed);
}

/// Spectra of the given patch centers as an N×B matrix.
inline Tensor<float> center_spectra(const Tensor<float>& data,
                                    const patches::PatchSet& set) {
  const std::size_t bands = data.extent(2);
  Tensor<float> out({set.size(), bands});
  for (std::size_t i = 0; i < set.size(); ++i) {
    const patches::PatchRef& r = set.ref(i);
    std::memcpy(out.data() + i * bands, &data(r.line, r.sample, 0),
                bands * sizeof(float));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

inline void run_synth(const std::filesystem::path& scene_path,
                      const std::filesystem::path& out_dir,
                      const PipelineConfig& cfg) {
  StageRun run("synth", out_dir);
  run.input("scene", scene_path);
  const synth::SceneSpec scene_spec = synth::load_scene_spec(scene_path);
  const synth::Scene scene = synth::generate(scene_spec);

  cube::save_cube(scene.dn, run.out("dn.hdr"));
  cube::save_references(scene.references, run.out("references.txt"));
  labeling::save_annotations(scene.polygons, run.out("annotations.txt"));
  labeling::save_class_table(scene.classes, run.out("classes.txt"));
  cube::save_raster_u16(scene.labels.labels, run.out("truth.hdr"));

  run.note("lines", std::to_string(scene_spec.lines));
  run.note("samples", std::to_string(scene_spec.samples));
  run.note("bands", std::to_string(scene_spec.bands));
  run.note("classes", std::to_string(scene_spec.n_classes));
  run.note("stripes", std::to_string(scene_spec.n_stripes()));
  run.finish(cfg);
}

inline void run_correct(const std::filesystem::path& dn_header,
                        const std::filesystem::path& refs_path,
                        const std::filesystem::path& out_dir,
                        const PipelineConfig& cfg) {
  StageRun run("correct", out_dir);
  run.input_raster("dn", dn_header);
  run.input("references", refs_path);
  const cube::HyperCube dn = cube::load_cube(dn_header);
  const cube::ReferencePair refs = cube::load_references(refs_path);
  const cube::HyperCube reflectance = cube::to_reflectance(dn, refs, cfg.clamp_max);
  cube::save_cube(reflectance, run.out("reflectance.hdr"));
  run.finish(cfg);
}

inline void run_ndvi_mask(const std::filesystem::path& cube_header,
                          const std::filesystem::path& out_dir,
                          const PipelineConfig& cfg) {
  StageRun run("ndvi-mask", out_dir);
  run.input_raster("cube", cube_header);
  const cube::HyperCube reflectance = cube::load_cube(cube_header);
  const Tensor<float> index = cube::ndvi(reflectance, cfg.red_nm, cfg.nir_nm);
  cube::save_raster_f32(index, run.out("ndvi.hdr"));
  const Tensor<std::uint16_t> mask = labeling::threshold_mask(index, cfg.ndvi_threshold);
  cube::save_raster_u16(mask, run.out("mask.hdr"));

  std::size_t kept = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) kept += mask[i];
  run.note("kept", std::to_string(kept));
  run.note("total", std::to_string(mask.size()));
  run.finish(cfg);
}

inline void run_rasterize(const std::filesystem::path& annotations_path,
                          const std::filesystem::path& mask_header,
                          const std::filesystem::path& out_dir,
                          const PipelineConfig& cfg) {
  StageRun run("rasterize", out_dir);
  run.input("annotations", annotations_path);
  run.input_raster("mask", mask_header);
  const auto polygons = labeling::load_annotations(annotations_path);
  const Tensor<std::uint16_t> mask = cube::load_raster_u16(mask_header);
  const labeling::LabelRaster raster = labeling::rasterize_labels(polygons, mask);
  cube::save_raster_u16(raster.labels, run.out("labels.hdr"));
  for (const auto& [cls, count] : labeling::label_histogram(raster.labels))
    run.note("count_" + std::to_string(cls), std::to_string(count));
  run.finish(cfg);
}

inline void run_fit_features(const std::filesystem::path& cube_header,
                             const std::filesystem::path& labels_header,
                             const std::filesystem::path& out_dir,
                             const PipelineConfig& cfg) {
  cfg.require_seed("fit-features");
  StageRun run("fit-features", out_dir);
  run.input_raster("cube", cube_header);
  run.input_raster("labels", labels_header);

  cube::HyperCube reflectance = cube::load_cube(cube_header);
  const labeling::LabelRaster labels = load_labels(labels_header);
  const Tensor<float> data = std::move(reflectance.data);
  auto shared = std::shared_ptr<const Tensor<float>>(&data, [](const Tensor<float>*) {});

  const patches::SplitResult splits = split_for(shared, labels, cfg);
  const Tensor<float> train_pixels = center_spectra(data, splits.train);
  const Tensor<float> fit_pixels =
      features::subsample_rows(train_pixels, cfg.fit_cap, cfg.seed);
  const features::FactorModel factors =
      features::fit_factor_model(fit_pixels, cfg.n_features, static_cast<int>(cfg.fa_max_iter),
                                 cfg.fa_tol);
  features::save_factor_model(factors, run.out("factors.bin"));

  // Separability read-out on a capped, seeded subsample of the fitting set.
  std::vector<std::size_t> order(splits.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng::Stream stream(rng::mix(cfg.seed, 0x647369u));  // lane tag: dsi
  stream.shuffle(order);
  order.resize(std::min(order.size(), cfg.dsi_cap));
  std::sort(order.begin(), order.end());
  const patches::PatchSet dsi_set = splits.train.subset(order);
  const features::DsiResult sep =
      features::dsi(features::transform(factors, center_spectra(data, dsi_set)),
                    dsi_set.refs() | [](const std::vector<patches::PatchRef>& refs) {
                      std::vector<std::uint16_t> out(refs.size());
                      for (std::size_t i = 0; i < refs.size(); ++i) out[i] = refs[i].label;
                      return out;
                    }(dsi_set.refs()));

  std::ostringstream report;
  report << "dsi = " << format_double(sep.value) << "\n";
  report << "dsi_samples = " << dsi_set.size() << "\n";
  report << "dsi_excluded = " << sep.excluded.size() << "\n";
  report << "converged = " << (factors.converged ? 1 : 0) << "\n";
  const std::vector<double> ev = features::explained_variance(factors);
  for (std::size_t j = 0; j < ev.size(); ++j)
    report << "explained_variance_" << j << " = " << format_double(ev[j]) << "\n";
  const std::string text = report.str();
  write_binary_file(run.out("report.txt"), text.data(), text.size());
  run.note("fit_pixels", std::to_string(fit_pixels.extent(0)));
  run.finish(cfg);
}

inline void run_extract(const std::filesystem::path& cube_header,
                        const std::filesystem::path& factors_path,
                        const std::filesystem::path& labels_header,
                        const std::filesystem::path& out_dir,
                        const PipelineConfig& cfg) {
  cfg.require_seed("extract");
  StageRun run("extract", out_dir);
  run.input_raster("cube", cube_header);
  run.input("factors", factors_path);
  run.input_raster("labels", labels_header);

  cube::HyperCube reflectance = cube::load_cube(cube_header);
  const features::FactorModel factors = features::load_factor_model(factors_path);
  const labeling::LabelRaster labels = load_labels(labels_header);

  // Transform every pixel; the cube layout already is a (pixels × bands) matrix.
  const std::size_t lines = reflectance.lines, samples = reflectance.samples;
  Tensor<float> pixels({lines * samples, reflectance.bands});
  std::memcpy(pixels.data(), reflectance.data.data(),
              reflectance.data.size() * sizeof(float));
  Tensor<float> scores = features::transform(factors, pixels);

  cube::HyperCube feature_cube;
  feature_cube.lines = lines;
  feature_cube.samples = samples;
  feature_cube.bands = factors.n_features;
  feature_cube.units = cube::Units::Features;
  feature_cube.wavelengths.resize(factors.n_features);
  for (std::size_t j = 0; j < factors.n_features; ++j)
    feature_cube.wavelengths[j] = static_cast<double>(j);
  feature_cube.data = Tensor<float>({lines, samples, factors.n_features});
  std::memcpy(feature_cube.data.data(), scores.data(), scores.size() * sizeof(float));
  cube::save_cube(feature_cube, run.out("features.hdr"));

  auto shared = share_cube_data(std::move(feature_cube));
  patches::SplitResult splits = split_for(shared, labels, cfg);
  splits.train = patches::balance(splits.train, cfg.k_groups, cfg.seed);

  patches::save_patch_payload(splits.train, run.out("train.bin"));
  patches::save_patch_payload(splits.val, run.out("val.bin"));
  patches::save_patch_payload(splits.test, run.out("test.bin"));
  patches::save_manifest(patches::make_manifest(splits, cfg.stride(), cfg.seed),
                         run.out("dataset.txt"));
  run.note("train_patches", std::to_string(splits.train.size()));
  run.note("val_patches", std::to_string(splits.val.size()));
  run.note("test_patches", std::to_string(splits.test.size()));
  run.finish(cfg);
}

inline std::size_t max_class(const patches::PatchSetManifest& manifest) {
  std::size_t top = 0;
  for (const auto& counts : manifest.counts)
    for (const auto& [cls, count] : counts)
      if (count > 0) top = std::max(top, static_cast<std::size_t>(cls));
  return top;
}

inline model::ArchitectureSpec arch_from(const PipelineConfig& cfg,
                                         const patches::PatchSetManifest& manifest) {
  if (manifest.window != cfg.patch_size)
    throw ConfigError("dataset was extracted with window " +
                      std::to_string(manifest.window) + " but patch_size is " +
                      std::to_string(cfg.patch_size));
  if (manifest.n_features != cfg.n_features)
    throw ConfigError("dataset holds " + std::to_string(manifest.n_features) +
                      " features but n_features is " + std::to_string(cfg.n_features));
  const std::size_t top = max_class(manifest);
  std::size_t n_classes = cfg.n_classes ? cfg.n_classes : top;
  if (n_classes < top)
    throw ConfigError("dataset holds class " + std::to_string(top) +
                      " but n_classes is " + std::to_string(n_classes));
  model::ArchitectureSpec spec;
  spec.patch_size = cfg.patch_size;
  spec.n_features = cfg.n_features;
  spec.n_classes = n_classes;
  spec.variant = model::parse_variant(cfg.variant);
  return spec;
}

inline train::TrainOptions train_options(const PipelineConfig& cfg) {
  train::TrainOptions opt;
  opt.epochs = cfg.epochs;
  opt.batch_size = cfg.batch_size;
  opt.n_splits = cfg.n_splits;
  opt.transforms_per_split = cfg.transforms_per_split;
  opt.augment_p = cfg.augment_p;
  opt.lr = cfg.learning_rate;
  opt.patience = cfg.patience;
  opt.eval_batch = cfg.eval_batch;
  opt.seed = cfg.seed;
  return opt;
}

inline void run_train(const std::filesystem::path& data_dir,
                      const std::filesystem::path& out_dir,
                      const PipelineConfig& cfg,
                      const std::filesystem::path& pretrained = {},
                      bool reinit_head = true) {
  cfg.require_seed("train");
  StageRun run("train", out_dir);
  run.input("dataset", data_dir / "dataset.txt");
  run.input("train", data_dir / "train.bin");
  run.input("val", data_dir / "val.bin");

  const auto manifest = patches::load_manifest(data_dir / "dataset.txt");
  const model::ArchitectureSpec spec = arch_from(cfg, manifest);
  const auto train_set = patches::load_patch_payload(data_dir / "train.bin",
                                                     manifest.window, manifest.n_features);
  const auto val_set = patches::load_patch_payload(data_dir / "val.bin",
                                                   manifest.window, manifest.n_features);

  auto net = model::build_model<float>(spec, cfg.seed);
  if (!pretrained.empty()) {
    run.input("pretrained", pretrained);
    run.note("reinit_head", reinit_head ? "1" : "0");
    model::load_pretrained(net, pretrained, reinit_head);
  }

  const train::TrainResult result = train::train_model(net, train_set, val_set,
                                                       train_options(cfg));
  model::save_model(net, run.out("model.bin"));
  model::save_spec(spec, run.out("arch.txt"));
  train::save_history(result.history, run.out("history.csv"));

  run.note("epochs_run", std::to_string(result.epochs_run));
  run.note("stopped_early", result.stopped_early ? "1" : "0");
  run.note("best_row", std::to_string(result.best_row));
  run.note("best_val_loss", format_double(result.best_val_loss));
  run.finish(cfg);
}

inline model::Model<float> load_trained(const std::filesystem::path& model_dir) {
  const model::ArchitectureSpec spec = model::load_spec(model_dir / "arch.txt");
  auto net = model::build_model<float>(spec, 0);
  model::load_model(net, model_dir / "model.bin");
  return net;
}

inline evaluate::Metrics run_evaluate(const std::filesystem::path& data_dir,
                                      const std::filesystem::path& model_dir,
                                      const std::string& split,
                                      const std::filesystem::path& out_dir,
                                      const PipelineConfig& cfg) {
  if (split != "train" && split != "val" && split != "test")
    throw ConfigError("split must be train, val, or test, not '" + split + "'");
  StageRun run("evaluate", out_dir);
  run.input("dataset", data_dir / "dataset.txt");
  run.input("payload", data_dir / (split + ".bin"));
  run.input("model", model_dir / "model.bin");
  run.input("arch", model_dir / "arch.txt");

  const auto manifest = patches::load_manifest(data_dir / "dataset.txt");
  auto net = load_trained(model_dir);
  const auto set = patches::load_patch_payload(data_dir / (split + ".bin"),
                                               manifest.window, manifest.n_features);
  const evaluate::EvalReport report = evaluate::evaluate_model(net, set, cfg.eval_batch);
  const evaluate::Metrics metrics = evaluate::metrics(report.cm);

  const std::string text = evaluate::format_report(report.cm);
  write_binary_file(run.out("report.txt"), text.data(), text.size());
  const std::string csv = evaluate::confusion_csv(report.cm);
  write_binary_file(run.out("confusion.csv"), csv.data(), csv.size());
  run.note("split", split);
  run.finish(cfg);
  return metrics;
}

inline void run_predict_map(const std::filesystem::path& features_header,
                            const std::filesystem::path& labels_header,
                            const std::filesystem::path& model_dir,
                            const std::filesystem::path& out_dir,
                            const PipelineConfig& cfg) {
  StageRun run("predict-map", out_dir);
  run.input_raster("features", features_header);
  run.input_raster("labels", labels_header);
  run.input("model", model_dir / "model.bin");
  run.input("arch", model_dir / "arch.txt");

  cube::HyperCube feature_cube = cube::load_cube(features_header);
  const labeling::LabelRaster labels = load_labels(labels_header);
  auto net = load_trained(model_dir);
  const evaluate::ErrorMap map =
      evaluate::error_map(net, share_cube_data(std::move(feature_cube)), labels,
                          cfg.eval_batch);

  cube::save_raster_u16(map.raster, run.out("errormap.hdr"));
  const std::string text = evaluate::format_report(map.cm);
  write_binary_file(run.out("report.txt"), text.data(), text.size());
  const std::string csv = evaluate::confusion_csv(map.cm);
  write_binary_file(run.out("confusion.csv"), csv.data(), csv.size());
  run.note("evaluated", std::to_string(map.evaluated));
  run.note("wrong", std::to_string(map.wrong));
  run.finish(cfg);
}

inline void run_export_features(const std::filesystem::path& data_dir,
                                const std::string& split,
                                const std::filesystem::path& model_dir,
                                const std::filesystem::path& out_dir,
                                const PipelineConfig& cfg) {
  if (split != "train" && split != "val" && split != "test")
    throw ConfigError("split must be train, val, or test, not '" + split + "'");
  StageRun run("export-features", out_dir);
  run.input("dataset", data_dir / "dataset.txt");
  run.input("payload", data_dir / (split + ".bin"));
  run.input("model", model_dir / "model.bin");
  run.input("arch", model_dir / "arch.txt");

  const auto manifest = patches::load_manifest(data_dir / "dataset.txt");
  auto net = load_trained(model_dir);
  const auto set = patches::load_patch_payload(data_dir / (split + ".bin"),
                                               manifest.window, manifest.n_features);
  const Tensor<float> feats = evaluate::export_features(net, set);

  std::ostringstream csv;
  csv << "label";
  for (std::size_t j = 0; j < feats.extent(1); ++j) csv << ",f" << j;
  csv << "\n";
  for (std::size_t i = 0; i < feats.extent(0); ++i) {
    csv << set.label(i);
    for (std::size_t j = 0; j < feats.extent(1); ++j)
      csv << "," << format_double(feats(i, j));
    csv << "\n";
  }
  const std::string text = csv.str();
  write_binary_file(run.out("features.csv"), text.data(), text.size());
  run.note("rows", std::to_string(feats.extent(0)));
  run.note("width", std::to_string(feats.extent(1)));
  run.finish(cfg);
}

// ---------------------------------------------------------------------------
// Parameter audit

/// Reference parameter budget of the published design at M=23, F=40, c=17.
constexpr std::size_t kTargetTotal = 562995;

inline std::string param_audit_text(const PipelineConfig& cfg) {
  model::ArchitectureSpec spec;
  spec.patch_size = cfg.patch_size;
  spec.n_features = cfg.n_features;
  spec.n_classes = cfg.n_classes ? cfg.n_classes : 17;
  spec.variant = model::parse_variant(cfg.variant);
  auto net = model::build_model<float>(spec, 0);
  const model::ParamAudit audit = model::audit_params(net);

  auto widths = [](const model::InceptionWidths& w) {
    std::ostringstream out;
    out << w.b1x1 << "," << w.b3x3 << "," << w.b5x5 << "," << w.pool_proj << ","
        << w.reduce3 << "," << w.reduce5;
    return out.str();
  };

  std::ostringstream out;
  out << "variant = " << cfg.variant << "\n";
  out << "patch_size = " << spec.patch_size << "\n";
  out << "n_features = " << spec.n_features << "\n";
  out << "n_classes = " << spec.n_classes << "\n";
  out << "stage1_widths = " << widths(spec.stage1) << "\n";
  out << "stage2_widths = " << widths(spec.stage2) << "\n";
  out << "flatten_width = " << net.flatten_width() << "\n";
  out << "trainable = " << audit.trainable << "\n";
  out << "non_trainable = " << audit.non_trainable << "\n";
  out << "total = " << audit.total() << "\n";
  out << "target_total = " << kTargetTotal << "\n";
  const double delta = 100.0 *
      (static_cast<double>(audit.total()) - static_cast<double>(kTargetTotal)) /
      static_cast<double>(kTargetTotal);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", delta);
  out << "delta_percent = " << buf << "\n";
  for (const auto& entry : audit.entries) {
    out << "param_" << entry.name << " = " << entry.count
        << (entry.trainable ? "" : " fixed") << "\n";
  }
  return out.str();
}

inline std::string run_param_audit(const std::filesystem::path& out_dir,
                                   const PipelineConfig& cfg) {
  const std::string text = param_audit_text(cfg);
  if (!out_dir.empty()) {
    StageRun run("param-audit", out_dir);
    write_binary_file(run.out("audit.txt"), text.data(), text.size());
    run.finish(cfg);
  }
  return text;
}

// ---------------------------------------------------------------------------
// Sweeps

/// Train on the given split's train set and score the test set; the in-memory
/// core the sweep cells share.
inline evaluate::Metrics fit_and_score(std::shared_ptr<const Tensor<float>> data,
                                       const labeling::LabelRaster& labels,
                                       const PipelineConfig& cfg, std::uint64_t seed,
                                       double use_fraction = 1.0) {
  PipelineConfig cell = cfg;
  cell.seed = seed;
  cell.seed_set = true;
  patches::SplitResult splits = split_for(data, labels, cell);
  if (use_fraction < 1.0) {
    std::vector<std::size_t> order(splits.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng::Stream stream(rng::mix(seed, 0x66726163u));  // lane tag: frac
    stream.shuffle(order);
    const std::size_t keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(
               use_fraction * static_cast<double>(order.size()))));
    order.resize(keep);
    std::sort(order.begin(), order.end());
    splits.train = splits.train.subset(order);
  }
  splits.train = patches::balance(splits.train, cell.k_groups, seed);

  model::ArchitectureSpec spec;
  spec.patch_size = cell.patch_size;
  spec.n_features = cell.n_features;
  std::size_t top = 0;
  for (const auto& [cls, count] : splits.train.class_counts())
    top = std::max(top, static_cast<std::size_t>(cls));
  spec.n_classes = cell.n_classes ? cell.n_classes : top;
  spec.variant = model::parse_variant(cell.variant);

  auto net = model::build_model<float>(spec, seed);
  train::train_model(net, splits.train, splits.val, train_options(cell));
  return evaluate::metrics(evaluate::evaluate_model(net, splits.test, cell.eval_batch).cm);
}

inline std::vector<evaluate::SweepRow> run_sweep(
    const std::filesystem::path& features_header,
    const std::filesystem::path& labels_header, const std::string& vary,
    const std::vector<std::string>& values, const std::vector<std::uint64_t>& seeds,
    const std::filesystem::path& out_dir, const PipelineConfig& cfg) {
  cfg.require_seed("sweep");
  if (vary != "patch" && vary != "fraction" && vary != "variant")
    throw ConfigError("sweep can vary patch, fraction, or variant, not '" + vary + "'");
  if (values.empty()) throw ConfigError("sweep needs at least one value");

  StageRun run("sweep", out_dir);
  run.input_raster("features", features_header);
  run.input_raster("labels", labels_header);

  cube::HyperCube feature_cube = cube::load_cube(features_header);
  const labeling::LabelRaster labels = load_labels(labels_header);
  auto shared = share_cube_data(std::move(feature_cube));

  std::vector<evaluate::SweepCell> cells;
  for (const std::string& value : values) {
    PipelineConfig cell = cfg;
    double fraction = 1.0;
    if (vary == "patch") {
      const std::size_t m = static_cast<std::size_t>(parse_int(value, "patch"));
      if (m <= cfg.stride())
        throw ConfigError("patch size " + value + " leaves no room for stride " +
                          std::to_string(cfg.stride()));
      cell.overlap = m - cfg.stride();  // hold the stride, not the overlap
      cell.patch_size = m;
    } else if (vary == "fraction") {
      fraction = parse_double(value, "fraction");
      if (!(fraction > 0.0) || fraction > 1.0)
        throw ConfigError("fraction must lie in (0, 1]");
    } else {
      cell.variant = value;
      model::parse_variant(value);
    }
    cells.push_back({vary + "=" + value, [shared, &labels, cell, fraction](std::uint64_t seed) {
                       return fit_and_score(shared, labels, cell, seed, fraction);
                     }});
  }

  const std::vector<evaluate::SweepRow> rows = evaluate::sweep(cells, seeds);
  const std::string csv = evaluate::sweep_csv(rows);
  write_binary_file(run.out("sweep.csv"), csv.data(), csv.size());
  run.note("cells", std::to_string(cells.size()));
  run.note("seeds", std::to_string(seeds.size()));
  run.finish(cfg);
  return rows;
}

}  // namespace vinehsi::pipeline
