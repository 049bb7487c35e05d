#pragma once

// Fitting loop: chunked epochs over a BatchStream, RMSprop updates, per-chunk
// validation, patience-based early stopping, and best-checkpoint retention.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/model.hpp"
#include "vinehsi/nn.hpp"
#include "vinehsi/patchset.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::train {

using model::Model;
using nn::Mode;
using patches::Batch;
using patches::BatchStream;
using patches::PatchSet;

// ---------------------------------------------------------------------------
// Early stopping

/// Halts once `patience` consecutive validation observations fail to strictly
/// improve on the best loss seen; ties count as stagnation.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be at least 1");
  }

  /// Feed the next validation loss; true while training should continue.
  bool observe(double val_loss) {
    ++observed_;
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_index_ = observed_ - 1;
      stagnant_ = 0;
    } else {
      ++stagnant_;
    }
    return stagnant_ < patience_;
  }

  bool improved_last() const { return observed_ > 0 && stagnant_ == 0; }
  std::size_t best_index() const { return best_index_; }
  double best_loss() const { return best_loss_; }
  std::size_t stagnant() const { return stagnant_; }
  std::size_t observed() const { return observed_; }

 private:
  std::size_t patience_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t best_index_ = 0;
  std::size_t stagnant_ = 0;
  std::size_t observed_ = 0;
};

// ---------------------------------------------------------------------------
// Options, history, results

struct TrainOptions {
  std::size_t epochs = 500;
  std::size_t batch_size = 1024;
  std::size_t n_splits = 9;
  std::size_t transforms_per_split = 2;
  double augment_p = 0.5;
  double lr = 1e-5;
  double rho = 0.9;
  double rms_eps = 1e-7;
  std::size_t patience = 20;
  std::size_t eval_batch = 512;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (batch_size < 1) throw ConfigError("batch size must be at least 1");
    if (eval_batch < 1) throw ConfigError("eval batch must be at least 1");
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
    if (patience < 1) throw ConfigError("patience must be at least 1");
  }
};

/// One row per (epoch, chunk): train metrics over that chunk's visits, then a
/// validation pass. Epochs are 1-based, split indices 0-based.
struct HistoryRow {
  std::size_t epoch = 0;
  std::size_t split_index = 0;
  double train_loss = 0.0;
  double train_oa = 0.0;
  double val_loss = 0.0;
  double val_oa = 0.0;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  std::size_t best_row = 0;     // index into history
  double best_val_loss = 0.0;
  std::vector<nn::NamedTensor> best_params;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

/// Called after each history row, before the stop decision takes effect.
using RowCallback = std::function<void(const HistoryRow&, Model<float>&)>;

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::ostringstream out;
  out << "epoch,split_index,train_loss,train_oa,val_loss,val_oa\n";
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.split_index << ',' << format_double(r.train_loss)
        << ',' << format_double(r.train_oa) << ',' << format_double(r.val_loss)
        << ',' << format_double(r.val_oa) << '\n';
  }
  return out.str();
}

inline void save_history(const std::vector<HistoryRow>& rows,
                         const std::filesystem::path& path) {
  const std::string text = history_csv(rows);
  write_binary_file(path, text.data(), text.size());
}

// ---------------------------------------------------------------------------
// Shared pieces

inline std::vector<int> to_class_indices(const std::vector<std::uint16_t>& y,
                                         std::size_t n_classes) {
  std::vector<int> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < 1 || y[i] > n_classes)
      throw ConfigError("patch label " + std::to_string(y[i]) +
                        " outside 1.." + std::to_string(n_classes));
    out[i] = static_cast<int>(y[i]) - 1;
  }
  return out;
}

struct EvalStats {
  double loss = 0.0;
  double oa = 0.0;
  std::size_t count = 0;
};

/// Mean cross-entropy and overall accuracy of a frozen model over a patch set.
inline EvalStats evaluate_loss(Model<float>& model, const PatchSet& set,
                               std::size_t eval_batch) {
  if (set.empty()) throw ConfigError("evaluation set is empty");
  const std::size_t c = model.spec.n_classes;
  EvalStats stats;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < set.size(); begin += eval_batch) {
    const std::size_t end = std::min(set.size(), begin + eval_batch);
    Batch batch = patches::materialize(set, begin, end);
    const std::vector<int> ys = to_class_indices(batch.y, c);
    Tensor<float> logits = model.forward(batch.x, Mode::Infer, 0);
    auto ce = nn::softmax_cross_entropy(logits, ys);
    loss_sum += ce.loss * static_cast<double>(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (logits(i, k) > logits(i, arg)) arg = k;
      if (static_cast<int>(arg) == ys[i]) ++correct;
    }
  }
  stats.count = set.size();
  stats.loss = loss_sum / static_cast<double>(set.size());
  stats.oa = static_cast<double>(correct) / static_cast<double>(set.size());
  return stats;
}

// ---------------------------------------------------------------------------
// The fitting loop

/// Train until the epoch budget or the patience runs out, then restore the
/// minimum-validation-loss snapshot into the model.
inline TrainResult train_model(Model<float>& model, const PatchSet& train_set,
                               const PatchSet& val_set, const TrainOptions& opt,
                               const RowCallback& on_row = {}) {
  opt.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");
  if (val_set.empty()) throw ConfigError("validation set is empty");
  if (train_set.window() != model.spec.patch_size ||
      train_set.n_features() != model.spec.n_features)
    throw ConfigError("patch geometry " + std::to_string(train_set.window()) + "x" +
                      std::to_string(train_set.n_features()) +
                      " does not match the architecture");

  nn::RmsProp<float> optimizer(opt.lr, opt.rho, opt.rms_eps);
  EarlyStopper stopper(opt.patience);
  TrainResult result;
  std::uint64_t step = 0;

  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    BatchStream stream(train_set, opt.batch_size, opt.n_splits,
                       opt.transforms_per_split, opt.augment_p, opt.seed, epoch);
    Batch batch;
    bool stop = false;

    // Accumulators for the chunk currently being consumed.
    std::size_t chunk = 0;
    double loss_sum = 0.0;
    std::size_t seen = 0, correct = 0;
    bool open = false;

    auto flush_chunk = [&]() {
      if (!open) return;
      HistoryRow row;
      row.epoch = epoch;
      row.split_index = chunk;
      row.train_loss = loss_sum / static_cast<double>(seen);
      row.train_oa = static_cast<double>(correct) / static_cast<double>(seen);
      if (!std::isfinite(row.train_loss))
        throw NumericError("training loss diverged at epoch " + std::to_string(epoch) +
                           ", split " + std::to_string(chunk));
      EvalStats val = evaluate_loss(model, val_set, opt.eval_batch);
      row.val_loss = val.loss;
      row.val_oa = val.oa;
      if (!std::isfinite(row.val_loss))
        throw NumericError("validation loss diverged at epoch " + std::to_string(epoch) +
                           ", split " + std::to_string(chunk));
      result.history.push_back(row);
      const bool keep_going = stopper.observe(row.val_loss);
      if (stopper.improved_last()) {
        result.best_row = result.history.size() - 1;
        result.best_val_loss = row.val_loss;
        result.best_params = model::snapshot(model);
      }
      if (on_row) on_row(row, model);
      if (!keep_going) stop = true;
      loss_sum = 0.0;
      seen = correct = 0;
      open = false;
    };

    while (!stop && stream.next(batch)) {
      const std::size_t batch_chunk = batch.visit / opt.transforms_per_split;
      if (open && batch_chunk != chunk) flush_chunk();
      if (stop) break;
      // A lone sample cannot supply batch statistics; drop it rather than
      // normalize against itself.
      if (batch.x.extent(0) < 2) continue;
      chunk = batch_chunk;
      open = true;

      const std::vector<int> ys = to_class_indices(batch.y, model.spec.n_classes);
      model.zero_grad();
      Tensor<float> logits = model.forward(batch.x, Mode::Train, step);
      auto ce = nn::softmax_cross_entropy(logits, ys);
      model.backward(ce.dlogits);
      optimizer.step(model.params());
      ++step;

      loss_sum += ce.loss * static_cast<double>(ys.size());
      seen += ys.size();
      for (std::size_t i = 0; i < ys.size(); ++i) {
        std::size_t arg = 0;
        for (std::size_t k = 1; k < model.spec.n_classes; ++k)
          if (logits(i, k) > logits(i, arg)) arg = k;
        if (static_cast<int>(arg) == ys[i]) ++correct;
      }
    }
    flush_chunk();
    result.epochs_run = epoch;
    if (result.history.empty())
      throw ConfigError("no trainable batches: every batch held a single sample");
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }

  if (!result.best_params.empty()) model::restore_model(model, result.best_params);
  return result;
}

}  // namespace vinehsi::train
