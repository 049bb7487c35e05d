#pragma once

// Labeled window extraction, split/balance bookkeeping, dihedral augmentation
// and the batch stream consumed by the trainer.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/labeling.hpp"
#include "vinehsi/rng.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::patches {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

struct SplitFractions {
  double train = 0.68;
  double val = 0.12;
  double test = 0.20;

  void validate() const {
    if (!(train > 0.0) || !(val > 0.0) || !(test > 0.0))
      throw ConfigError("split fractions must be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
  }
};

/// Where a patch came from: center pixel of the window in the source cube.
struct PatchRef {
  std::uint32_t line = 0;
  std::uint32_t sample = 0;
  std::uint16_t label = 0;
};

inline bool operator==(const PatchRef& a, const PatchRef& b) {
  return a.line == b.line && a.sample == b.sample && a.label == b.label;
}

/// A set of M×M×F patches with center labels. Patches extracted from a
/// feature cube stay views onto the shared cube and materialize on demand;
/// sets loaded from a payload file own their records directly. Subsetting
/// (split, balance) shares the backing store either way.
class PatchSet {
 public:
  PatchSet() = default;

  PatchSet(std::shared_ptr<const Tensor<float>> source, std::uint32_t cube_id,
           std::size_t window, std::vector<PatchRef> refs)
      : source_(std::move(source)),
        refs_(std::move(refs)),
        cube_id_(cube_id),
        window_(window),
        n_features_(source_->extent(2)) {}

  PatchSet(std::shared_ptr<const std::vector<float>> records, std::uint32_t cube_id,
           std::size_t window, std::size_t n_features, std::vector<PatchRef> refs)
      : records_(std::move(records)),
        refs_(std::move(refs)),
        cube_id_(cube_id),
        window_(window),
        n_features_(n_features) {}

  std::size_t size() const { return refs_.size(); }
  bool empty() const { return refs_.empty(); }
  std::size_t window() const { return window_; }
  std::size_t n_features() const { return n_features_; }
  std::uint32_t cube_id() const { return cube_id_; }
  const PatchRef& ref(std::size_t i) const { return refs_[i]; }
  std::uint16_t label(std::size_t i) const { return refs_[i].label; }
  const std::vector<PatchRef>& refs() const { return refs_; }

  std::size_t patch_volume() const { return window_ * window_ * n_features_; }

  /// Copy patch i into `dst` (patch_volume() floats, row-major M×M×F).
  void copy_patch(std::size_t i, float* dst) const {
    const PatchRef& r = refs_[i];
    if (records_) {
      std::memcpy(dst, records_->data() + i * patch_volume(),
                  patch_volume() * sizeof(float));
      return;
    }
    const Tensor<float>& src = *source_;
    const std::size_t half = window_ / 2;
    const std::size_t top = r.line - half;
    const std::size_t left = r.sample - half;
    const std::size_t row_floats = window_ * n_features_;
    for (std::size_t a = 0; a < window_; ++a) {
      const float* row = &src(top + a, left, 0);
      std::memcpy(dst + a * row_floats, row, row_floats * sizeof(float));
    }
  }

  Tensor<float> patch(std::size_t i) const {
    Tensor<float> out({window_, window_, n_features_});
    copy_patch(i, &out[0]);
    return out;
  }

  PatchSet subset(const std::vector<std::size_t>& indices) const {
    std::vector<PatchRef> refs(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) refs[i] = refs_[indices[i]];
    if (records_) {
      auto rec = std::make_shared<std::vector<float>>(indices.size() * patch_volume());
      for (std::size_t i = 0; i < indices.size(); ++i)
        std::memcpy(rec->data() + i * patch_volume(),
                    records_->data() + indices[i] * patch_volume(),
                    patch_volume() * sizeof(float));
      return PatchSet(std::move(rec), cube_id_, window_, n_features_, std::move(refs));
    }
    return PatchSet(source_, cube_id_, window_, std::move(refs));
  }

  std::map<std::uint16_t, std::size_t> class_counts() const {
    std::map<std::uint16_t, std::size_t> counts;
    for (const PatchRef& r : refs_) ++counts[r.label];
    return counts;
  }

 private:
  std::shared_ptr<const Tensor<float>> source_;          // lazy backing (L×S×F)
  std::shared_ptr<const std::vector<float>> records_;    // eager backing
  std::vector<PatchRef> refs_;
  std::uint32_t cube_id_ = 0;
  std::size_t window_ = 0;
  std::size_t n_features_ = 0;
};

/// Every full window on the stride grid whose center label is nonzero becomes
/// a patch. Windows that would run past the raster edge are skipped, never
/// padded.
inline PatchSet extract_patches(std::shared_ptr<const Tensor<float>> features,
                                const labeling::LabelRaster& labels, std::size_t window,
                                std::size_t stride, std::uint32_t cube_id = 0) {
  if (!features || features->rank() != 3)
    throw ConfigError("extract_patches expects a rank-3 feature cube");
  const std::size_t lines = features->extent(0);
  const std::size_t samples = features->extent(1);
  if (labels.lines != lines || labels.samples != samples)
    throw ConfigError("label raster is " + std::to_string(labels.lines) + "x" +
                      std::to_string(labels.samples) + " but features are " +
                      std::to_string(lines) + "x" + std::to_string(samples));
  if (window % 2 == 0) throw ConfigError("window size must be odd");
  if (stride < 1 || stride > window)
    throw ConfigError("stride must lie in [1, window]");
  if (window > lines || window > samples)
    throw ConfigError("window " + std::to_string(window) +
                      " exceeds raster extent " + std::to_string(lines) + "x" +
                      std::to_string(samples));

  const std::size_t half = window / 2;
  std::vector<PatchRef> refs;
  for (std::size_t top = 0; top + window <= lines; top += stride) {
    for (std::size_t left = 0; left + window <= samples; left += stride) {
      const std::size_t cl = top + half;
      const std::size_t cs = left + half;
      const std::uint16_t label = labels.labels(cl, cs);
      if (label == 0) continue;
      refs.push_back({static_cast<std::uint32_t>(cl),
                      static_cast<std::uint32_t>(cs), label});
    }
  }
  return PatchSet(std::move(features), cube_id, window, std::move(refs));
}

struct SplitResult {
  PatchSet train, val, test;

  const PatchSet& of(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Val: return val;
      default: return test;
    }
  }
};

/// Seeded shuffle then partition. Val and test take the floor of their
/// fraction; train absorbs the remainder.
inline SplitResult split_patches(const PatchSet& patches, SplitFractions fractions,
                                 std::uint64_t seed) {
  fractions.validate();
  const std::size_t n = patches.size();
  const std::size_t n_val = static_cast<std::size_t>(std::floor(fractions.val * static_cast<double>(n)));
  const std::size_t n_test = static_cast<std::size_t>(std::floor(fractions.test * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;
  if (n >= 5 && (n_train == 0 || n_val == 0 || n_test == 0))
    throw ConfigError("split leaves an empty partition: train " +
                      std::to_string(n_train) + ", val " + std::to_string(n_val) +
                      ", test " + std::to_string(n_test));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng::Stream stream(rng::mix(seed, 0x73706c69u));  // lane tag: split
  stream.shuffle(order);

  auto take = [&](std::size_t begin, std::size_t count) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(begin + count));
    std::sort(idx.begin(), idx.end());
    return patches.subset(idx);
  };
  SplitResult result;
  result.train = take(0, n_train);
  result.val = take(n_train, n_val);
  result.test = take(n_train + n_val, n_test);
  return result;
}

/// Downsample the k most frequent classes to the count of the (k+1)-th most
/// frequent one. Frequency ties break toward the smaller class id, which the
/// descending sort below makes the later (kept-smaller) entry.
inline PatchSet balance(const PatchSet& patches, std::size_t k_groups,
                        std::uint64_t seed) {
  const auto counts = patches.class_counts();
  if (k_groups >= counts.size() && !(k_groups == 0 && counts.empty()))
    throw ConfigError("k_groups " + std::to_string(k_groups) +
                      " must be less than the number of classes " +
                      std::to_string(counts.size()));
  if (k_groups == 0) return patches.subset([&] {
    std::vector<std::size_t> all(patches.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }());

  std::vector<std::pair<std::uint16_t, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  const std::size_t target = ranked[k_groups].second;

  std::vector<std::size_t> keep;
  keep.reserve(patches.size());
  for (std::size_t rank = 0; rank < ranked.size(); ++rank) {
    const std::uint16_t cls = ranked[rank].first;
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < patches.size(); ++i)
      if (patches.label(i) == cls) members.push_back(i);
    if (rank < k_groups && members.size() > target) {
      rng::Stream stream(rng::mix(seed, 0x62616cu, cls));  // lane tag: balance
      stream.shuffle(members);
      members.resize(target);
    }
    keep.insert(keep.end(), members.begin(), members.end());
  }
  std::sort(keep.begin(), keep.end());
  return patches.subset(keep);
}

// ---------------------------------------------------------------------------
// Dihedral-8 augmentation

enum class Dihedral : std::uint8_t {
  Identity = 0,
  Rot90 = 1,
  Rot180 = 2,
  Rot270 = 3,
  FlipH = 4,        // mirror left-right
  FlipV = 5,        // mirror top-bottom
  Transpose = 6,    // main diagonal
  AntiTranspose = 7
};

constexpr std::size_t kDihedralOrder = 8;

/// Source coordinates feeding output cell (i, j) of an m×m grid.
inline void dihedral_source(Dihedral g, std::size_t m, std::size_t i, std::size_t j,
                            std::size_t& si, std::size_t& sj) {
  const std::size_t n = m - 1;
  switch (g) {
    case Dihedral::Identity: si = i; sj = j; break;
    case Dihedral::Rot90: si = n - j; sj = i; break;
    case Dihedral::Rot180: si = n - i; sj = n - j; break;
    case Dihedral::Rot270: si = j; sj = n - i; break;
    case Dihedral::FlipH: si = i; sj = n - j; break;
    case Dihedral::FlipV: si = n - i; sj = j; break;
    case Dihedral::Transpose: si = j; sj = i; break;
    default: si = n - j; sj = n - i; break;
  }
}

/// Apply g to the spatial axes of an M×M×F patch; spectral axis untouched.
inline Tensor<float> apply_dihedral(const Tensor<float>& patch, Dihedral g) {
  if (patch.rank() != 3 || patch.extent(0) != patch.extent(1))
    throw ConfigError("dihedral transforms need a square M×M×F patch");
  const std::size_t m = patch.extent(0);
  const std::size_t f = patch.extent(2);
  Tensor<float> out({m, m, f});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t si, sj;
      dihedral_source(g, m, i, j, si, sj);
      std::memcpy(&out(i, j, 0), &patch(si, sj, 0), f * sizeof(float));
    }
  return out;
}

/// With probability p, one uniformly drawn non-identity dihedral element.
inline Dihedral draw_dihedral(double p, rng::Stream& stream) {
  if (p < 0.0 || p > 1.0) throw ConfigError("augmentation probability must lie in [0, 1]");
  if (p <= 0.0) return Dihedral::Identity;
  const double u = stream.next_unit();
  if (u >= p) return Dihedral::Identity;
  return static_cast<Dihedral>(1 + stream.next_below(kDihedralOrder - 1));
}

inline Tensor<float> augment(const Tensor<float>& patch, double p, std::uint64_t seed) {
  rng::Stream stream(rng::mix(seed, 0x617567u));  // lane tag: augment
  return apply_dihedral(patch, draw_dihedral(p, stream));
}

// ---------------------------------------------------------------------------
// Batch stream

struct Batch {
  Tensor<float> x;               // N×M×M×F
  std::vector<std::uint16_t> y;  // N center labels
  std::vector<std::size_t> indices;  // positions in the source PatchSet
  std::size_t visit = 0;         // which (chunk, transform) visit emitted it
};

/// One epoch's worth of training batches: the set is partitioned into
/// n_splits chunks, each chunk is visited transforms_per_split times with its
/// own shuffle and augmentation draws, and batches never straddle a visit.
class BatchStream {
 public:
  BatchStream(const PatchSet& patches, std::size_t batch_size, std::size_t n_splits,
              std::size_t transforms_per_split, double augment_p, std::uint64_t seed,
              std::uint64_t epoch)
      : set_(&patches), batch_size_(batch_size) {
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (n_splits < 1) throw ConfigError("n_splits must be at least 1");
    if (transforms_per_split < 1)
      throw ConfigError("transforms_per_split must be at least 1");
    if (augment_p < 0.0 || augment_p > 1.0)
      throw ConfigError("augmentation probability must lie in [0, 1]");

    const std::size_t n = patches.size();
    std::vector<std::size_t> epoch_order(n);
    for (std::size_t i = 0; i < n; ++i) epoch_order[i] = i;
    rng::Stream chunker(rng::mix(seed, epoch, 0x6368756eu));  // lane tag: chunk
    chunker.shuffle(epoch_order);

    plan_.reserve(n * transforms_per_split);
    const std::size_t base = n_splits ? n / n_splits : 0;
    const std::size_t rem = n_splits ? n % n_splits : 0;
    std::size_t offset = 0;
    for (std::size_t c = 0; c < n_splits; ++c) {
      const std::size_t chunk_size = base + (c < rem ? 1 : 0);
      std::vector<std::size_t> chunk(epoch_order.begin() + static_cast<std::ptrdiff_t>(offset),
                                     epoch_order.begin() + static_cast<std::ptrdiff_t>(offset + chunk_size));
      offset += chunk_size;
      if (chunk.empty()) continue;
      for (std::size_t visit = 0; visit < transforms_per_split; ++visit) {
        rng::Stream vs(rng::mix(seed, epoch, c, visit + 1));
        std::vector<std::size_t> order = chunk;
        vs.shuffle(order);
        for (std::size_t idx : order)
          plan_.push_back({idx, draw_dihedral(augment_p, vs)});
        visit_ends_.push_back(plan_.size());
      }
    }
  }

  std::size_t n_batches() const {
    std::size_t total = 0;
    std::size_t begin = 0;
    for (std::size_t end : visit_ends_) {
      total += (end - begin + batch_size_ - 1) / batch_size_;
      begin = end;
    }
    return total;
  }

  void reset() {
    cursor_ = 0;
    visit_cursor_ = 0;
  }

  /// Materialize the next batch; false once the epoch is exhausted.
  bool next(Batch& out) {
    if (cursor_ >= plan_.size()) return false;
    while (visit_cursor_ < visit_ends_.size() && visit_ends_[visit_cursor_] <= cursor_)
      ++visit_cursor_;
    const std::size_t visit_end = visit_ends_[visit_cursor_];
    const std::size_t take = std::min(batch_size_, visit_end - cursor_);
    out.visit = visit_cursor_;

    const std::size_t m = set_->window();
    const std::size_t f = set_->n_features();
    out.x = Tensor<float>({take, m, m, f});
    out.y.resize(take);
    out.indices.resize(take);
    std::vector<float> scratch(set_->patch_volume());
    for (std::size_t b = 0; b < take; ++b) {
      const PlanEntry& entry = plan_[cursor_ + b];
      out.y[b] = set_->label(entry.index);
      out.indices[b] = entry.index;
      float* dst = &out.x(b, 0, 0, 0);
      if (entry.transform == Dihedral::Identity) {
        set_->copy_patch(entry.index, dst);
      } else {
        set_->copy_patch(entry.index, scratch.data());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < m; ++j) {
            std::size_t si, sj;
            dihedral_source(entry.transform, m, i, j, si, sj);
            std::memcpy(dst + (i * m + j) * f, scratch.data() + (si * m + sj) * f,
                        f * sizeof(float));
          }
      }
    }
    cursor_ += take;
    return true;
  }

 private:
  struct PlanEntry {
    std::size_t index;
    Dihedral transform;
  };

  const PatchSet* set_ = nullptr;
  std::size_t batch_size_ = 1;
  std::vector<PlanEntry> plan_;
  std::vector<std::size_t> visit_ends_;
  std::size_t cursor_ = 0;
  std::size_t visit_cursor_ = 0;
};

/// Plain in-order batch (no shuffle, no augmentation) for evaluation paths.
inline Batch materialize(const PatchSet& patches, std::size_t begin, std::size_t end) {
  if (begin > end || end > patches.size())
    throw ConfigError("materialize range out of bounds");
  const std::size_t n = end - begin;
  Batch batch;
  batch.x = Tensor<float>({n, patches.window(), patches.window(), patches.n_features()});
  batch.y.resize(n);
  batch.indices.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    patches.copy_patch(begin + i, &batch.x(i, 0, 0, 0));
    batch.y[i] = patches.label(begin + i);
    batch.indices[i] = begin + i;
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Payload and manifest files

/// Records of [label u16][M×M×F f32], all little-endian.
inline void save_patch_payload(const PatchSet& patches, const std::filesystem::path& path) {
  const std::size_t volume = patches.patch_volume();
  std::vector<char> buffer(patches.size() * (2 + volume * sizeof(float)));
  std::vector<float> scratch(volume);
  char* out = buffer.data();
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const std::uint16_t label = patches.label(i);
    std::memcpy(out, &label, 2);
    out += 2;
    patches.copy_patch(i, scratch.data());
    std::memcpy(out, scratch.data(), volume * sizeof(float));
    out += volume * sizeof(float);
  }
  write_binary_file(path, buffer.data(), buffer.size());
}

inline PatchSet load_patch_payload(const std::filesystem::path& path, std::size_t window,
                                   std::size_t n_features, std::uint32_t cube_id = 0) {
  const std::vector<char> buffer = read_binary_file(path);
  const std::size_t volume = window * window * n_features;
  const std::size_t record = 2 + volume * sizeof(float);
  if (volume == 0) throw ConfigError("patch payload needs positive window and feature count");
  if (buffer.size() % record != 0)
    throw IoError(path.string() + ": size " + std::to_string(buffer.size()) +
                  " is not a whole number of " + std::to_string(record) +
                  "-byte records");
  const std::size_t n = buffer.size() / record;
  auto records = std::make_shared<std::vector<float>>(n * volume);
  std::vector<PatchRef> refs(n);
  const char* in = buffer.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::uint16_t label = 0;
    std::memcpy(&label, in, 2);
    in += 2;
    if (label == 0)
      throw IoError(path.string() + ": record " + std::to_string(i) +
                    " has label 0 (unlabeled)");
    refs[i] = {0, 0, label};
    std::memcpy(records->data() + i * volume, in, volume * sizeof(float));
    in += volume * sizeof(float);
  }
  for (float v : *records)
    if (!std::isfinite(v)) throw IoError(path.string() + ": non-finite patch value");
  return PatchSet(std::move(records), cube_id, window, n_features, std::move(refs));
}

struct PatchSetManifest {
  std::vector<std::uint32_t> cube_ids;
  std::size_t window = 0;
  std::size_t n_features = 0;
  std::size_t stride = 0;
  std::uint64_t seed = 0;
  // counts[split][class] = patches of that class in the split
  std::array<std::map<std::uint16_t, std::size_t>, 3> counts;
};

inline PatchSetManifest make_manifest(const SplitResult& splits, std::size_t stride,
                                      std::uint64_t seed) {
  PatchSetManifest manifest;
  manifest.cube_ids = {splits.train.cube_id()};
  manifest.window = splits.train.window();
  manifest.n_features = splits.train.n_features();
  manifest.stride = stride;
  manifest.seed = seed;
  for (int s = 0; s < 3; ++s)
    manifest.counts[static_cast<std::size_t>(s)] =
        splits.of(static_cast<Split>(s)).class_counts();
  return manifest;
}

inline void save_manifest(const PatchSetManifest& manifest, const std::filesystem::path& path) {
  KeyValueFile kv;
  std::string ids;
  for (std::size_t i = 0; i < manifest.cube_ids.size(); ++i) {
    if (i) ids += ",";
    ids += std::to_string(manifest.cube_ids[i]);
  }
  kv.set("cube_ids", ids);
  kv.set("window", std::to_string(manifest.window));
  kv.set("n_features", std::to_string(manifest.n_features));
  kv.set("stride", std::to_string(manifest.stride));
  kv.set("seed", std::to_string(manifest.seed));
  for (int s = 0; s < 3; ++s) {
    const char* name = split_name(static_cast<Split>(s));
    std::size_t total = 0;
    for (const auto& [cls, count] : manifest.counts[static_cast<std::size_t>(s)]) {
      kv.set(std::string("count_") + name + "_" + std::to_string(cls),
             std::to_string(count));
      total += count;
    }
    kv.set(std::string("total_") + name, std::to_string(total));
  }
  kv.save(path);
}

inline PatchSetManifest load_manifest(const std::filesystem::path& path) {
  KeyValueFile kv = KeyValueFile::load(path);
  PatchSetManifest manifest;
  for (const std::string& token : split(kv.get("cube_ids"), ','))
    manifest.cube_ids.push_back(
        static_cast<std::uint32_t>(parse_int(trim(token), "cube_ids")));
  manifest.window = static_cast<std::size_t>(kv.get_int("window"));
  manifest.n_features = static_cast<std::size_t>(kv.get_int("n_features"));
  manifest.stride = static_cast<std::size_t>(kv.get_int("stride"));
  manifest.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
  for (const auto& [key, value] : kv.entries()) {
    if (key.rfind("count_", 0) != 0) continue;
    const std::string rest = key.substr(6);
    const std::size_t underscore = rest.find('_');
    if (underscore == std::string::npos) throw IoError("malformed manifest key " + key);
    const std::string name = rest.substr(0, underscore);
    const std::uint16_t cls =
        static_cast<std::uint16_t>(parse_int(rest.substr(underscore + 1), key));
    int s = name == "train" ? 0 : name == "val" ? 1 : name == "test" ? 2 : -1;
    if (s < 0) throw IoError("unknown split in manifest key " + key);
    manifest.counts[static_cast<std::size_t>(s)][cls] =
        static_cast<std::size_t>(parse_int(value, key));
  }
  return manifest;
}

}  // namespace vinehsi::patches
