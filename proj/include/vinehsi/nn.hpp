#pragma once

// Dense-tensor layers with reverse-mode gradients, the loss, the optimizer
// and the checkpoint format. Everything is templated on the scalar so the
// gradient checks can run the exact same code at double precision while
// training stores 32-bit.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/rng.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::nn {

enum class Mode { Train, Infer };

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<std::size_t> shape, bool train = true)
      : name(std::move(n)), value(shape), grad(std::move(shape)), trainable(train) {}

  void zero_grad() { grad.zero(); }
};

template <typename T>
using MatrixT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapT = Eigen::Map<MatrixT<T>>;
template <typename T>
using ConstMapT = Eigen::Map<const MatrixT<T>>;

/// Xavier-uniform fill over ±sqrt(6/(fan_in+fan_out)).
template <typename T>
inline void xavier_uniform(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out,
                           rng::Stream& stream) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = static_cast<T>(stream.next_uniform(-bound, bound));
}

template <typename T>
class Layer {
 public:
  explicit Layer(std::string label) : label_(std::move(label)) {}
  virtual ~Layer() = default;

  const std::string& label() const { return label_; }

  /// Run the layer; caches whatever backward needs. `step` keys stochastic
  /// layers so a repeated call with the same step replays exactly.
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t step) = 0;

  /// Gradient w.r.t. the input; accumulates parameter gradients.
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;

  virtual void collect(std::vector<Param<T>*>& out) {}

  virtual std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const = 0;

  virtual void init_params(rng::Stream& stream) {}

 protected:
  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError(label_ + ": " + msg); }

  void require_forward(bool has) const {
    if (!has) throw ConfigError(label_ + ": backward called before forward");
  }

  std::string label_;
};

// ---------------------------------------------------------------------------
// Convolution

enum class Padding { Valid, Same };

struct PadSpec {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   Padding padding) {
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  if (k > in)
    throw ConfigError("kernel extent " + std::to_string(k) +
                      " exceeds input extent " + std::to_string(in));
  return (in - k) / stride + 1;
}

/// Same-padding splits the shortfall with the extra row/column at the
/// bottom/right, which is what makes 23 → 12 → 6 → 3 work under stride 2.
inline PadSpec same_pad(std::size_t in, std::size_t k, std::size_t stride) {
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t span = (out - 1) * stride + k;
  const std::size_t total = span > in ? span - in : 0;
  PadSpec pad;
  pad.top = total / 2;
  pad.bottom = total - pad.top;
  pad.left = pad.top;
  pad.right = pad.bottom;
  return pad;
}

/// Cross-correlation over N×H×W×C with kernels H×W×Cin×Cout.
template <typename T>
class Conv2D : public Layer<T> {
 public:
  Conv2D(std::string label, std::size_t kh, std::size_t kw, std::size_t c_in,
         std::size_t c_out, std::size_t stride, Padding padding)
      : Layer<T>(std::move(label)),
        kh_(kh),
        kw_(kw),
        c_in_(c_in),
        c_out_(c_out),
        stride_(stride),
        padding_(padding),
        weight_(this->label_ + "/W", {kh, kw, c_in, c_out}),
        bias_(this->label_ + "/b", {c_out}) {
    if (kh < 1 || kw < 1 || stride < 1 || c_in < 1 || c_out < 1)
      this->fail("kernel, stride and channel counts must be positive");
  }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  void init_params(rng::Stream& stream) override {
    xavier_uniform(weight_.value, kh_ * kw_ * c_in_, kh_ * kw_ * c_out_, stream);
    bias_.value.zero();
  }

  void collect(std::vector<Param<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    check_input_shape(in);
    return {in[0], conv_out_extent(in[1], kh_, stride_, padding_),
            conv_out_extent(in[2], kw_, stride_, padding_), c_out_};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, std::uint64_t) override {
    check_input_shape(x.shape());
    const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2);
    pad_ = PadSpec{};
    if (padding_ == Padding::Same) {
      const PadSpec ph = same_pad(h, kh_, stride_);
      const PadSpec pw = same_pad(w, kw_, stride_);
      pad_ = {ph.top, ph.bottom, pw.left, pw.right};
    }
    ho_ = conv_out_extent(h, kh_, stride_, padding_);
    wo_ = conv_out_extent(w, kw_, stride_, padding_);
    in_shape_ = x.shape();
    const std::size_t rows = n * ho_ * wo_;
    const std::size_t cols = kh_ * kw_ * c_in_;

    Tensor<T> y({n, ho_, wo_, c_out_});
    MapT<T> ym(&y[0], static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(c_out_));
    ConstMapT<T> wm(&weight_.value[0], static_cast<Eigen::Index>(cols),
                    static_cast<Eigen::Index>(c_out_));
    if (pointwise()) {
      // 1×1 stride-1 kernels act per pixel: the input already is the column
      // matrix, so skip the im2col copy.
      ConstMapT<T> xm(&x[0], static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(c_in_));
      ym.noalias() = xm * wm;
      input_ = x;
      col_ = Tensor<T>();
    } else {
      col_ = im2col(x);
      ConstMapT<T> cm(&col_[0], static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
      ym.noalias() = cm * wm;
      input_ = x;
    }
    ConstMapT<T> bm(&bias_.value[0], 1, static_cast<Eigen::Index>(c_out_));
    ym.rowwise() += bm.row(0);
    has_forward_ = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    const std::size_t n = in_shape_[0];
    const std::size_t rows = n * ho_ * wo_;
    const std::size_t cols = kh_ * kw_ * c_in_;
    if (dy.shape() != std::vector<std::size_t>{n, ho_, wo_, c_out_})
      this->fail("gradient shape " + shape_string(dy.shape()) +
                 " does not match output " +
                 shape_string({n, ho_, wo_, c_out_}));

    ConstMapT<T> dym(&dy[0], static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(c_out_));
    MapT<T> dwm(&weight_.grad[0], static_cast<Eigen::Index>(cols),
                static_cast<Eigen::Index>(c_out_));
    ConstMapT<T> wm(&weight_.value[0], static_cast<Eigen::Index>(cols),
                    static_cast<Eigen::Index>(c_out_));

    // Fixed-order accumulation: vectorized reductions pick their split by
    // buffer address, which would break bit-reproducibility across runs.
    for (std::size_t ch = 0; ch < c_out_; ++ch) {
      double acc = 0.0;
      for (std::size_t r = 0; r < rows; ++r) acc += dy[r * c_out_ + ch];
      bias_.grad[ch] += static_cast<T>(acc);
    }
    Tensor<T> dx(in_shape_);
    if (pointwise()) {
      ConstMapT<T> xm(&input_[0], static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(c_in_));
      dwm.noalias() += xm.transpose() * dym;
      MapT<T> dxm(&dx[0], static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(c_in_));
      dxm.noalias() = dym * wm.transpose();
    } else {
      ConstMapT<T> cm(&col_[0], static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(cols));
      dwm.noalias() += cm.transpose() * dym;
      Tensor<T> dcol({rows, cols});
      MapT<T> dcm(&dcol[0], static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
      dcm.noalias() = dym * wm.transpose();
      col2im(dcol, dx);
    }
    return dx;
  }

 private:
  bool pointwise() const {
    return kh_ == 1 && kw_ == 1 && stride_ == 1 && pad_.top == 0 && pad_.bottom == 0 &&
           pad_.left == 0 && pad_.right == 0;
  }

  void check_input_shape(const std::vector<std::size_t>& in) const {
    if (in.size() != 4)
      this->fail("expected a rank-4 N×H×W×C input, got " + shape_string(in));
    if (in[3] != c_in_)
      this->fail("expected " + std::to_string(c_in_) + " input channels, got " +
                 std::to_string(in[3]) + " in " + shape_string(in));
    if (padding_ == Padding::Valid && (kh_ > in[1] || kw_ > in[2]))
      this->fail("kernel " + std::to_string(kh_) + "x" + std::to_string(kw_) +
                 " exceeds input " + shape_string(in));
  }

  Tensor<T> im2col(const Tensor<T>& x) const {
    const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2);
    Tensor<T> col({n * ho_ * wo_, kh_ * kw_ * c_in_});
    std::size_t r = 0;
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t i = 0; i < ho_; ++i)
        for (std::size_t j = 0; j < wo_; ++j, ++r) {
          T* dst = &col(r, 0);
          for (std::size_t a = 0; a < kh_; ++a) {
            const std::ptrdiff_t src_i =
                static_cast<std::ptrdiff_t>(i * stride_ + a) -
                static_cast<std::ptrdiff_t>(pad_.top);
            for (std::size_t b = 0; b < kw_; ++b) {
              const std::ptrdiff_t src_j =
                  static_cast<std::ptrdiff_t>(j * stride_ + b) -
                  static_cast<std::ptrdiff_t>(pad_.left);
              T* cell = dst + (a * kw_ + b) * c_in_;
              if (src_i < 0 || src_i >= static_cast<std::ptrdiff_t>(h) || src_j < 0 ||
                  src_j >= static_cast<std::ptrdiff_t>(w)) {
                std::fill(cell, cell + c_in_, T(0));
              } else {
                std::memcpy(cell,
                            &x(img, static_cast<std::size_t>(src_i),
                               static_cast<std::size_t>(src_j), 0),
                            c_in_ * sizeof(T));
              }
            }
          }
        }
    return col;
  }

  void col2im(const Tensor<T>& dcol, Tensor<T>& dx) const {
    dx.zero();
    const std::size_t n = in_shape_[0], h = in_shape_[1], w = in_shape_[2];
    std::size_t r = 0;
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t i = 0; i < ho_; ++i)
        for (std::size_t j = 0; j < wo_; ++j, ++r) {
          const T* src = &dcol(r, 0);
          for (std::size_t a = 0; a < kh_; ++a) {
            const std::ptrdiff_t dst_i =
                static_cast<std::ptrdiff_t>(i * stride_ + a) -
                static_cast<std::ptrdiff_t>(pad_.top);
            if (dst_i < 0 || dst_i >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t b = 0; b < kw_; ++b) {
              const std::ptrdiff_t dst_j =
                  static_cast<std::ptrdiff_t>(j * stride_ + b) -
                  static_cast<std::ptrdiff_t>(pad_.left);
              if (dst_j < 0 || dst_j >= static_cast<std::ptrdiff_t>(w)) continue;
              T* cell = &dx(img, static_cast<std::size_t>(dst_i),
                            static_cast<std::size_t>(dst_j), 0);
              const T* g = src + (a * kw_ + b) * c_in_;
              for (std::size_t ch = 0; ch < c_in_; ++ch) cell[ch] += g[ch];
            }
          }
        }
  }

  std::size_t kh_, kw_, c_in_, c_out_, stride_;
  Padding padding_;
  Param<T> weight_, bias_;
  PadSpec pad_;
  std::size_t ho_ = 0, wo_ = 0;
  std::vector<std::size_t> in_shape_;
  Tensor<T> input_, col_;
  bool has_forward_ = false;
};

// ---------------------------------------------------------------------------
// Activations and regularizers

template <typename T>
class LeakyReLU : public Layer<T> {
 public:
  LeakyReLU(std::string label, double alpha) : Layer<T>(std::move(label)), alpha_(alpha) {}

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, std::uint64_t) override {
    input_ = x;
    Tensor<T> y(x.shape());
    const T a = static_cast<T>(alpha_);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : a * x[i];
    has_forward_ = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    if (!dy.same_shape(input_)) this->fail("gradient shape mismatch");
    Tensor<T> dx(dy.shape());
    const T a = static_cast<T>(alpha_);
    for (std::size_t i = 0; i < dy.size(); ++i)
      dx[i] = input_[i] >= T(0) ? dy[i] : a * dy[i];
    return dx;
  }

 private:
  double alpha_;
  Tensor<T> input_;
  bool has_forward_ = false;
};

/// Channel-wise batch normalization over N×H×W×C or N×D inputs. Running
/// statistics follow running ← m·running + (1−m)·batch with biased batch
/// variance; inference normalizes by the running pair.
template <typename T>
class BatchNorm : public Layer<T> {
 public:
  BatchNorm(std::string label, std::size_t channels, double momentum = 0.99,
            double eps = 1e-3)
      : Layer<T>(std::move(label)),
        channels_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(this->label_ + "/gamma", {channels}),
        beta_(this->label_ + "/beta", {channels}),
        running_mean_(this->label_ + "/moving_mean", {channels}, false),
        running_var_(this->label_ + "/moving_variance", {channels}, false) {
    if (momentum < 0.0 || momentum > 1.0) this->fail("momentum must lie in [0, 1]");
    gamma_.value.fill(T(1));
    running_var_.value.fill(T(1));
  }

  void collect(std::vector<Param<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    check_shape(in);
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t) override {
    check_shape(x.shape());
    const std::size_t c = channels_;
    const std::size_t rows = x.size() / c;
    mode_ = mode;
    mean_.assign(c, 0.0);
    var_.assign(c, 0.0);
    if (mode == Mode::Train) {
      if (x.extent(0) < 2) this->fail("train mode needs a batch of at least 2");
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) mean_[ch] += x[r * c + ch];
      for (std::size_t ch = 0; ch < c; ++ch) mean_[ch] /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double d = x[r * c + ch] - mean_[ch];
          var_[ch] += d * d;
        }
      for (std::size_t ch = 0; ch < c; ++ch) var_[ch] /= static_cast<double>(rows);
      for (std::size_t ch = 0; ch < c; ++ch) {
        running_mean_.value[ch] = static_cast<T>(momentum_ * running_mean_.value[ch] +
                                                 (1.0 - momentum_) * mean_[ch]);
        running_var_.value[ch] = static_cast<T>(momentum_ * running_var_.value[ch] +
                                                (1.0 - momentum_) * var_[ch]);
      }
    } else {
      for (std::size_t ch = 0; ch < c; ++ch) {
        mean_[ch] = running_mean_.value[ch];
        var_[ch] = running_var_.value[ch];
      }
    }
    input_ = x;
    Tensor<T> y(x.shape());
    inv_std_.assign(c, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) inv_std_[ch] = 1.0 / std::sqrt(var_[ch] + eps_);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double xhat = (x[r * c + ch] - mean_[ch]) * inv_std_[ch];
        y[r * c + ch] = static_cast<T>(xhat * gamma_.value[ch] + beta_.value[ch]);
      }
    has_forward_ = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    if (!dy.same_shape(input_)) this->fail("gradient shape mismatch");
    const std::size_t c = channels_;
    const std::size_t rows = dy.size() / c;
    Tensor<T> dx(dy.shape());

    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double xhat = (input_[r * c + ch] - mean_[ch]) * inv_std_[ch];
        const double g = dy[r * c + ch];
        sum_dy[ch] += g;
        sum_dy_xhat[ch] += g * xhat;
      }
    for (std::size_t ch = 0; ch < c; ++ch) {
      gamma_.grad[ch] += static_cast<T>(sum_dy_xhat[ch]);
      beta_.grad[ch] += static_cast<T>(sum_dy[ch]);
    }
    if (mode_ == Mode::Infer) {
      // Running statistics are constants here.
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t ch = 0; ch < c; ++ch)
          dx[r * c + ch] =
              static_cast<T>(dy[r * c + ch] * gamma_.value[ch] * inv_std_[ch]);
      return dx;
    }
    const double m = static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double xhat = (input_[r * c + ch] - mean_[ch]) * inv_std_[ch];
        const double g = dy[r * c + ch];
        const double t = m * g - sum_dy[ch] - xhat * sum_dy_xhat[ch];
        dx[r * c + ch] =
            static_cast<T>(gamma_.value[ch] * inv_std_[ch] * t / m);
      }
    return dx;
  }

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  Param<T>& running_mean() { return running_mean_; }
  Param<T>& running_var() { return running_var_; }

 private:
  void check_shape(const std::vector<std::size_t>& in) const {
    if (in.size() != 2 && in.size() != 4)
      this->fail("expected N×D or N×H×W×C input, got " + shape_string(in));
    if (in.back() != channels_)
      this->fail("expected " + std::to_string(channels_) + " channels, got " +
                 std::to_string(in.back()));
  }

  std::size_t channels_;
  double momentum_, eps_;
  Param<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> input_;
  std::vector<double> mean_, var_, inv_std_;
  Mode mode_ = Mode::Infer;
  bool has_forward_ = false;
};

/// Inverted dropout with counter-keyed masks: the mask is a pure function of
/// (seed, lane, step, unit), so replaying a step replays the mask.
template <typename T>
class Dropout : public Layer<T> {
 public:
  Dropout(std::string label, double rate, std::uint64_t seed, std::uint64_t lane)
      : Layer<T>(std::move(label)), rate_(rate), seed_(seed), lane_(lane) {
    if (rate < 0.0 || rate >= 1.0) this->fail("rate must lie in [0, 1)");
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t step) override {
    has_forward_ = true;
    if (mode == Mode::Infer || rate_ == 0.0) {
      scale_.clear();
      identity_shape_ = x.shape();
      return x;
    }
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    scale_.resize(x.size());
    Tensor<T> y(x.shape());
    identity_shape_ = x.shape();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = rng::to_unit(rng::mix(seed_, lane_, step, i));
      scale_[i] = u >= rate_ ? keep_scale : T(0);
      y[i] = x[i] * scale_[i];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    if (dy.shape() != identity_shape_) this->fail("gradient shape mismatch");
    if (scale_.empty()) return dy;
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * scale_[i];
    return dx;
  }

 private:
  double rate_;
  std::uint64_t seed_, lane_;
  std::vector<T> scale_;
  std::vector<std::size_t> identity_shape_;
  bool has_forward_ = false;
};

// ---------------------------------------------------------------------------
// Pooling, flatten, dense

template <typename T>
class MaxPool : public Layer<T> {
 public:
  MaxPool(std::string label, std::size_t kh, std::size_t kw, std::size_t stride,
          Padding padding)
      : Layer<T>(std::move(label)), kh_(kh), kw_(kw), stride_(stride), padding_(padding) {
    if (kh < 1 || kw < 1 || stride < 1) this->fail("kernel and stride must be positive");
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    if (in.size() != 4) this->fail("expected N×H×W×C input, got " + shape_string(in));
    if (padding_ == Padding::Valid && (kh_ > in[1] || kw_ > in[2]))
      this->fail("kernel exceeds input " + shape_string(in));
    return {in[0], conv_out_extent(in[1], kh_, stride_, padding_),
            conv_out_extent(in[2], kw_, stride_, padding_), in[3]};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, std::uint64_t) override {
    const auto out_shape = output_shape(x.shape());
    const std::size_t n = x.extent(0), h = x.extent(1), w = x.extent(2), c = x.extent(3);
    const std::size_t ho = out_shape[1], wo = out_shape[2];
    PadSpec pad;
    if (padding_ == Padding::Same) {
      const PadSpec ph = same_pad(h, kh_, stride_);
      const PadSpec pw = same_pad(w, kw_, stride_);
      pad = {ph.top, ph.bottom, pw.left, pw.right};
    }
    in_shape_ = x.shape();
    Tensor<T> y(out_shape);
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t img = 0; img < n; ++img)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j)
          for (std::size_t ch = 0; ch < c; ++ch, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_idx = 0;
            bool found = false;
            for (std::size_t a = 0; a < kh_; ++a) {
              const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i * stride_ + a) -
                                        static_cast<std::ptrdiff_t>(pad.top);
              if (si < 0 || si >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t b = 0; b < kw_; ++b) {
                const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j * stride_ + b) -
                                          static_cast<std::ptrdiff_t>(pad.left);
                if (sj < 0 || sj >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t idx =
                    ((img * h + static_cast<std::size_t>(si)) * w +
                     static_cast<std::size_t>(sj)) * c + ch;
                if (!found || x[idx] > best) {
                  best = x[idx];
                  best_idx = idx;
                  found = true;
                }
              }
            }
            y[o] = best;
            argmax_[o] = best_idx;
          }
    has_forward_ = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    if (dy.size() != argmax_.size()) this->fail("gradient shape mismatch");
    Tensor<T> dx(in_shape_);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[argmax_[o]] += dy[o];
    return dx;
  }

 private:
  std::size_t kh_, kw_, stride_;
  Padding padding_;
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> in_shape_;
  bool has_forward_ = false;
};

template <typename T>
class Flatten : public Layer<T> {
 public:
  explicit Flatten(std::string label) : Layer<T>(std::move(label)) {}

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    if (in.size() < 2) this->fail("expected a batched input, got " + shape_string(in));
    std::size_t width = 1;
    for (std::size_t d = 1; d < in.size(); ++d) width *= in[d];
    return {in[0], width};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, std::uint64_t) override {
    in_shape_ = x.shape();
    has_forward_ = true;
    return x.reshaped(output_shape(x.shape()));
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    return dy.reshaped(in_shape_);
  }

 private:
  std::vector<std::size_t> in_shape_;
  bool has_forward_ = false;
};

template <typename T>
class Dense : public Layer<T> {
 public:
  Dense(std::string label, std::size_t d_in, std::size_t d_out)
      : Layer<T>(std::move(label)),
        d_in_(d_in),
        d_out_(d_out),
        weight_(this->label_ + "/W", {d_in, d_out}),
        bias_(this->label_ + "/b", {d_out}) {}

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

  void init_params(rng::Stream& stream) override {
    xavier_uniform(weight_.value, d_in_, d_out_, stream);
    bias_.value.zero();
  }

  void collect(std::vector<Param<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    if (in.size() != 2 || in[1] != d_in_)
      this->fail("expected N×" + std::to_string(d_in_) + " input, got " +
                 shape_string(in));
    return {in[0], d_out_};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, std::uint64_t) override {
    const auto out_shape = output_shape(x.shape());
    input_ = x;
    Tensor<T> y(out_shape);
    const Eigen::Index n = static_cast<Eigen::Index>(x.extent(0));
    ConstMapT<T> xm(&x[0], n, static_cast<Eigen::Index>(d_in_));
    ConstMapT<T> wm(&weight_.value[0], static_cast<Eigen::Index>(d_in_),
                    static_cast<Eigen::Index>(d_out_));
    MapT<T> ym(&y[0], n, static_cast<Eigen::Index>(d_out_));
    ym.noalias() = xm * wm;
    ConstMapT<T> bm(&bias_.value[0], 1, static_cast<Eigen::Index>(d_out_));
    ym.rowwise() += bm.row(0);
    has_forward_ = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    const Eigen::Index n = static_cast<Eigen::Index>(input_.extent(0));
    if (dy.shape() != std::vector<std::size_t>{input_.extent(0), d_out_})
      this->fail("gradient shape mismatch");
    ConstMapT<T> dym(&dy[0], n, static_cast<Eigen::Index>(d_out_));
    ConstMapT<T> xm(&input_[0], n, static_cast<Eigen::Index>(d_in_));
    MapT<T> dwm(&weight_.grad[0], static_cast<Eigen::Index>(d_in_),
                static_cast<Eigen::Index>(d_out_));
    dwm.noalias() += xm.transpose() * dym;
    for (std::size_t k = 0; k < d_out_; ++k) {
      double acc = 0.0;
      for (std::size_t r = 0; r < input_.extent(0); ++r) acc += dy[r * d_out_ + k];
      bias_.grad[k] += static_cast<T>(acc);
    }
    Tensor<T> dx({input_.extent(0), d_in_});
    ConstMapT<T> wm(&weight_.value[0], static_cast<Eigen::Index>(d_in_),
                    static_cast<Eigen::Index>(d_out_));
    MapT<T> dxm(&dx[0], n, static_cast<Eigen::Index>(d_in_));
    dxm.noalias() = dym * wm.transpose();
    return dx;
  }

 private:
  std::size_t d_in_, d_out_;
  Param<T> weight_, bias_;
  Tensor<T> input_;
  bool has_forward_ = false;
};

// ---------------------------------------------------------------------------
// Loss

/// Row-wise softmax computed in double regardless of storage scalar.
template <typename T>
inline Tensor<double> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ConfigError("softmax expects an N×c matrix");
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  Tensor<double> probs({n, c});
  for (std::size_t r = 0; r < n; ++r) {
    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) hi = std::max(hi, static_cast<double>(logits(r, k)));
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double e = std::exp(static_cast<double>(logits(r, k)) - hi);
      probs(r, k) = e;
      z += e;
    }
    for (std::size_t k = 0; k < c; ++k) probs(r, k) /= z;
  }
  return probs;
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> dlogits;
  Tensor<double> probs;
};

/// Mean over the batch of −ln(softmax(logits)[label]); gradient is
/// (softmax − onehot)/N.
template <typename T>
inline LossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                           const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ConfigError("cross entropy expects N×c logits");
  const std::size_t n = logits.extent(0), c = logits.extent(1);
  if (labels.size() != n)
    throw ConfigError("got " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(n) + " rows");
  LossResult<T> result;
  result.probs = softmax_rows(logits);
  result.dlogits = Tensor<T>({n, c});
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(c) + ")");
    total -= std::log(std::max(result.probs(r, static_cast<std::size_t>(y)),
                               std::numeric_limits<double>::min()));
    for (std::size_t k = 0; k < c; ++k) {
      const double onehot = static_cast<std::size_t>(y) == k ? 1.0 : 0.0;
      result.dlogits(r, k) =
          static_cast<T>((result.probs(r, k) - onehot) / static_cast<double>(n));
    }
  }
  result.loss = total / static_cast<double>(n);
  return result;
}

// ---------------------------------------------------------------------------
// Optimizer

/// v ← ρv + (1−ρ)g²;  θ ← θ − lr·g/(√v + eps). Non-trainable params skipped.
template <typename T>
class RmsProp {
 public:
  RmsProp(double lr, double rho = 0.9, double eps = 1e-7)
      : lr_(lr), rho_(rho), eps_(eps) {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (rho < 0.0 || rho >= 1.0) throw ConfigError("rho must lie in [0, 1)");
  }

  void step(const std::vector<Param<T>*>& params) {
    for (Param<T>* p : params) {
      if (!p->trainable) continue;
      Tensor<T>& v = state_slot(*p);
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        const double vi = rho_ * v[i] + (1.0 - rho_) * g * g;
        v[i] = static_cast<T>(vi);
        p->value[i] =
            static_cast<T>(p->value[i] - lr_ * g / (std::sqrt(vi) + eps_));
      }
    }
  }

  std::map<std::string, Tensor<T>>& state() { return state_; }
  const std::map<std::string, Tensor<T>>& state() const { return state_; }

  double learning_rate() const { return lr_; }

 private:
  Tensor<T>& state_slot(const Param<T>& p) {
    auto it = state_.find(p.name);
    if (it == state_.end())
      it = state_.emplace(p.name, Tensor<T>(p.value.shape())).first;
    else if (!it->second.same_shape(p.value))
      throw ConfigError("optimizer state shape mismatch for " + p.name);
    return it->second;
  }

  double lr_, rho_, eps_;
  std::map<std::string, Tensor<T>> state_;
};

// ---------------------------------------------------------------------------
// Checkpoint records

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

namespace detail {
inline constexpr char kCheckpointMagic[4] = {'V', 'H', 'S', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename V>
inline void append_raw(std::vector<char>& out, const V& v) {
  const std::size_t at = out.size();
  out.resize(at + sizeof(V));
  std::memcpy(out.data() + at, &v, sizeof(V));
}

template <typename V>
inline V take_raw(const std::vector<char>& in, std::size_t& at, const std::string& what) {
  if (at + sizeof(V) > in.size()) throw IoError("checkpoint truncated in " + what);
  V v;
  std::memcpy(&v, in.data() + at, sizeof(V));
  at += sizeof(V);
  return v;
}
}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<NamedTensor>& records) {
  std::vector<char> out;
  out.insert(out.end(), detail::kCheckpointMagic, detail::kCheckpointMagic + 4);
  detail::append_raw(out, detail::kCheckpointVersion);
  detail::append_raw(out, static_cast<std::uint32_t>(records.size()));
  for (const NamedTensor& rec : records) {
    if (rec.name.size() > 0xFFFF) throw ConfigError("record name too long: " + rec.name);
    if (rec.value.rank() > 0xFF) throw ConfigError("record rank too large: " + rec.name);
    detail::append_raw(out, static_cast<std::uint16_t>(rec.name.size()));
    out.insert(out.end(), rec.name.begin(), rec.name.end());
    detail::append_raw(out, static_cast<std::uint8_t>(rec.value.rank()));
    for (std::size_t d = 0; d < rec.value.rank(); ++d)
      detail::append_raw(out, static_cast<std::uint32_t>(rec.value.extent(d)));
    const std::size_t at = out.size();
    out.resize(at + rec.value.size() * sizeof(float));
    std::memcpy(out.data() + at, &rec.value[0], rec.value.size() * sizeof(float));
  }
  write_binary_file(path, out.data(), out.size());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  const std::vector<char> in = read_binary_file(path);
  std::size_t at = 0;
  if (in.size() < 4 || std::memcmp(in.data(), detail::kCheckpointMagic, 4) != 0)
    throw IoError(path.string() + " is not a model checkpoint (bad magic)");
  at = 4;
  const auto version = detail::take_raw<std::uint32_t>(in, at, "version");
  if (version != detail::kCheckpointVersion)
    throw IoError(path.string() + ": unsupported checkpoint version " +
                  std::to_string(version));
  const auto count = detail::take_raw<std::uint32_t>(in, at, "record count");
  std::vector<NamedTensor> records;
  records.reserve(count);
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto name_len = detail::take_raw<std::uint16_t>(in, at, "record name length");
    if (at + name_len > in.size()) throw IoError("checkpoint truncated in record name");
    std::string name(in.data() + at, name_len);
    at += name_len;
    const auto rank = detail::take_raw<std::uint8_t>(in, at, name);
    std::vector<std::size_t> shape(rank);
    std::size_t volume = rank ? 1 : 0;
    for (std::uint8_t d = 0; d < rank; ++d) {
      shape[d] = detail::take_raw<std::uint32_t>(in, at, name);
      volume *= shape[d];
    }
    if (at + volume * sizeof(float) > in.size())
      throw IoError("checkpoint truncated in data of " + name);
    std::vector<float> data(volume);
    std::memcpy(data.data(), in.data() + at, volume * sizeof(float));
    at += volume * sizeof(float);
    records.push_back({std::move(name), Tensor<float>::from_data(shape, std::move(data))});
  }
  if (at != in.size())
    throw IoError(path.string() + ": " + std::to_string(in.size() - at) +
                  " trailing bytes after the last record");
  return records;
}

}  // namespace vinehsi::nn
