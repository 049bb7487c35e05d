#pragma once

// Scoring: confusion matrices and the OA/AA/kappa/f1 family, spatial error
// maps, pre-softmax feature export, and the seeded experiment sweeps.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/labeling.hpp"
#include "vinehsi/model.hpp"
#include "vinehsi/patchset.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::evaluate {

using model::Model;
using nn::Mode;
using patches::PatchSet;

// ---------------------------------------------------------------------------
// Confusion matrix and metric family

/// Rows are ground truth, columns predictions, both 0-based.
struct ConfusionMatrix {
  std::size_t n_classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t c) : n_classes(c), counts(c * c, 0) {
    if (c < 1) throw ConfigError("confusion matrix needs at least one class");
  }

  std::uint64_t& at(std::size_t truth, std::size_t pred) {
    return counts[truth * n_classes + pred];
  }
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * n_classes + pred];
  }

  void add(std::size_t truth, std::size_t pred) {
    if (truth >= n_classes || pred >= n_classes)
      throw ConfigError("class index outside the confusion matrix");
    ++at(truth, pred);
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::uint64_t v : counts) t += v;
    return t;
  }

  std::uint64_t row_sum(std::size_t k) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < n_classes; ++j) t += at(k, j);
    return t;
  }

  std::uint64_t col_sum(std::size_t k) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < n_classes; ++i) t += at(i, k);
    return t;
  }

  void merge(const ConfusionMatrix& other) {
    if (other.n_classes != n_classes) throw ConfigError("confusion matrix size mismatch");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  }
};

struct Metrics {
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  double f1_macro = 0.0;
};

/// Classes absent from the ground truth are left out of the AA and f1 means;
/// a class never predicted and never hit contributes an f1 of zero.
inline Metrics metrics(const ConfusionMatrix& cm) {
  const double total = static_cast<double>(cm.total());
  if (total == 0.0) throw ConfigError("confusion matrix is empty");

  Metrics out;
  double trace = 0.0;
  for (std::size_t k = 0; k < cm.n_classes; ++k) trace += static_cast<double>(cm.at(k, k));
  out.oa = trace / total;

  double recall_sum = 0.0, f1_sum = 0.0, pe = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < cm.n_classes; ++k) {
    const double row = static_cast<double>(cm.row_sum(k));
    const double col = static_cast<double>(cm.col_sum(k));
    const double diag = static_cast<double>(cm.at(k, k));
    pe += (row / total) * (col / total);
    if (row == 0.0) continue;
    ++present;
    recall_sum += diag / row;
    f1_sum += (row + col) > 0.0 ? 2.0 * diag / (row + col) : 0.0;
  }
  out.aa = recall_sum / static_cast<double>(present);
  out.f1_macro = f1_sum / static_cast<double>(present);
  // pe = 1 forces a single diagonal cell, i.e. perfect agreement.
  out.kappa = pe >= 1.0 ? 1.0 : (out.oa - pe) / (1.0 - pe);
  return out;
}

inline std::string format_report(const ConfusionMatrix& cm) {
  const Metrics m = metrics(cm);
  std::ostringstream out;
  out << "oa = " << format_double(m.oa) << "\n"
      << "aa = " << format_double(m.aa) << "\n"
      << "kappa = " << format_double(m.kappa) << "\n"
      << "f1 = " << format_double(m.f1_macro) << "\n"
      << "evaluated = " << cm.total() << "\n";
  for (std::size_t k = 0; k < cm.n_classes; ++k) {
    const std::uint64_t row = cm.row_sum(k);
    if (row == 0) continue;
    out << "recall_" << (k + 1) << " = "
        << format_double(static_cast<double>(cm.at(k, k)) / static_cast<double>(row))
        << "\n";
  }
  return out.str();
}

inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  for (std::size_t i = 0; i < cm.n_classes; ++i) {
    for (std::size_t j = 0; j < cm.n_classes; ++j) {
      if (j) out << ',';
      out << cm.at(i, j);
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Model evaluation

struct EvalReport {
  ConfusionMatrix cm;
  std::vector<std::uint16_t> predicted;  // 1-based class per patch
};

/// Frozen-model pass over a patch set: argmax of the softmax per patch.
inline EvalReport evaluate_model(Model<float>& model, const PatchSet& set,
                                 std::size_t eval_batch = 512) {
  if (set.empty()) throw ConfigError("evaluation set is empty");
  if (set.window() != model.spec.patch_size || set.n_features() != model.spec.n_features)
    throw ConfigError("patch geometry " + std::to_string(set.window()) + "x" +
                      std::to_string(set.n_features()) +
                      " does not match the architecture");
  const std::size_t c = model.spec.n_classes;
  EvalReport report;
  report.cm = ConfusionMatrix(c);
  report.predicted.resize(set.size());
  for (std::size_t begin = 0; begin < set.size(); begin += eval_batch) {
    const std::size_t end = std::min(set.size(), begin + eval_batch);
    patches::Batch batch = patches::materialize(set, begin, end);
    Tensor<float> logits = model.forward(batch.x, Mode::Infer, 0);
    for (std::size_t i = 0; i < batch.y.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (logits(i, k) > logits(i, arg)) arg = k;
      const std::uint16_t truth = batch.y[i];
      if (truth < 1 || truth > c)
        throw ConfigError("patch label " + std::to_string(truth) + " outside 1.." +
                          std::to_string(c));
      report.cm.add(truth - 1, arg);
      report.predicted[begin + i] = static_cast<std::uint16_t>(arg + 1);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Spatial error map

enum : std::uint16_t { kUnlabeled = 0, kCorrect = 1, kWrong = 2 };

struct ErrorMap {
  Tensor<std::uint16_t> raster;  // L×S tri-state
  std::uint64_t evaluated = 0;
  std::uint64_t wrong = 0;
  ConfusionMatrix cm;
};

/// Predict every labeled pixel that has a full window and compare against the
/// ground truth; pixels without a label or a window stay unlabeled.
inline ErrorMap error_map(Model<float>& model,
                          std::shared_ptr<const Tensor<float>> features,
                          const labeling::LabelRaster& labels,
                          std::size_t eval_batch = 512) {
  PatchSet set = patches::extract_patches(std::move(features), labels,
                                          model.spec.patch_size, 1);
  ErrorMap out;
  out.raster = Tensor<std::uint16_t>({labels.lines, labels.samples});
  if (set.empty()) {
    out.cm = ConfusionMatrix(model.spec.n_classes);
    return out;
  }
  EvalReport report = evaluate_model(model, set, eval_batch);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto& ref = set.ref(i);
    const bool hit = report.predicted[i] == ref.label;
    out.raster(ref.line, ref.sample) = hit ? kCorrect : kWrong;
    if (!hit) ++out.wrong;
  }
  out.evaluated = set.size();
  out.cm = std::move(report.cm);
  return out;
}

// ---------------------------------------------------------------------------
// Pre-softmax feature export

/// Activations entering the dense head (the flattened stage-two output),
/// N×flatten_width, dropout inert in inference. Patches are forwarded one at
/// a time: matrix-kernel blocking depends on the batch extent, so equal
/// patches only reproduce each other's rows bit for bit at a fixed shape.
inline Tensor<float> export_features(Model<float>& model, const PatchSet& set) {
  if (set.empty()) throw ConfigError("patch set is empty");
  if (set.window() != model.spec.patch_size || set.n_features() != model.spec.n_features)
    throw ConfigError("patch geometry does not match the architecture");
  if (model.layers.empty()) throw ConfigError("model has no layers");
  const std::size_t width = model.flatten_width();
  Tensor<float> out({set.size(), width});
  for (std::size_t i = 0; i < set.size(); ++i) {
    patches::Batch batch = patches::materialize(set, i, i + 1);
    Tensor<float> x = std::move(batch.x);
    for (std::size_t l = 0; l + 1 < model.layers.size(); ++l)
      x = model.layers[l]->forward(x, Mode::Infer, 0);
    if (x.rank() != 2 || x.extent(1) != width)
      throw ConfigError("head input is not the flattened stage output");
    for (std::size_t j = 0; j < width; ++j) out(i, j) = x(0, j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment sweeps

struct SweepCell {
  std::string id;
  std::function<Metrics(std::uint64_t seed)> run;
};

struct SweepRow {
  std::string cell;
  std::string metric;  // oa | aa | kappa | f1 | failed
  double mean = 0.0;
  double stddev = 0.0;
  double runtime_seconds = 0.0;
  std::string error;  // non-empty only for failed rows
};

inline double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

/// Run every cell once per seed; a throwing cell is recorded as failed and
/// the sweep moves on.
inline std::vector<SweepRow> sweep(const std::vector<SweepCell>& cells,
                                   const std::vector<std::uint64_t>& seeds) {
  if (cells.empty()) throw ConfigError("sweep grid is empty");
  if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
  std::vector<SweepRow> rows;
  for (const auto& cell : cells) {
    const auto started = std::chrono::steady_clock::now();
    std::vector<double> oa, aa, kappa, f1;
    std::string failure;
    for (std::uint64_t seed : seeds) {
      try {
        Metrics m = cell.run(seed);
        oa.push_back(m.oa);
        aa.push_back(m.aa);
        kappa.push_back(m.kappa);
        f1.push_back(m.f1_macro);
      } catch (const std::exception& e) {
        failure = e.what();
        break;
      }
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (!failure.empty()) {
      rows.push_back({cell.id, "failed", 0.0, 0.0, elapsed, failure});
      continue;
    }
    auto push = [&](const std::string& name, const std::vector<double>& xs) {
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      rows.push_back({cell.id, name, mean, sample_std(xs, mean), elapsed, ""});
    };
    push("oa", oa);
    push("aa", aa);
    push("kappa", kappa);
    push("f1", f1);
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "cell,metric,mean,std,runtime_seconds\n";
  for (const auto& r : rows)
    out << r.cell << ',' << r.metric << ',' << format_double(r.mean) << ','
        << format_double(r.stddev) << ',' << format_double(r.runtime_seconds)
        << '\n';
  return out.str();
}

}  // namespace vinehsi::evaluate
