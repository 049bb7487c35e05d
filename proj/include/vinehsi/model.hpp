#pragma once

// The network itself: spatial attention with input concatenation, the two
// inception stages, the five-part assembly with its ablation variants, and
// the parameter/shape audits.

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/nn.hpp"
#include "vinehsi/rng.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::model {

using nn::Layer;
using nn::Mode;
using nn::Padding;
using nn::Param;

// ---------------------------------------------------------------------------
// Channel concatenation plumbing (rank-4, last axis)

template <typename T>
inline Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ConfigError("concat of zero tensors");
  const auto& lead = parts.front()->shape();
  if (lead.size() != 4) throw ConfigError("concat expects rank-4 tensors");
  std::size_t channels = 0;
  for (const Tensor<T>* p : parts) {
    const auto& s = p->shape();
    if (s.size() != 4 || s[0] != lead[0] || s[1] != lead[1] || s[2] != lead[2])
      throw ConfigError("concat shape mismatch: " + shape_string(lead) + " vs " +
                        shape_string(s));
    channels += s[3];
  }
  Tensor<T> out({lead[0], lead[1], lead[2], channels});
  const std::size_t pixels = lead[0] * lead[1] * lead[2];
  for (std::size_t px = 0; px < pixels; ++px) {
    T* dst = &out[px * channels];
    for (const Tensor<T>* p : parts) {
      const std::size_t c = p->extent(3);
      std::memcpy(dst, &(*p)[px * c], c * sizeof(T));
      dst += c;
    }
  }
  return out;
}

template <typename T>
inline std::vector<Tensor<T>> split_channels(const Tensor<T>& x,
                                             const std::vector<std::size_t>& widths) {
  if (x.rank() != 4) throw ConfigError("split expects a rank-4 tensor");
  std::size_t total = 0;
  for (std::size_t w : widths) total += w;
  if (total != x.extent(3))
    throw ConfigError("split widths sum to " + std::to_string(total) + " but input has " +
                      std::to_string(x.extent(3)) + " channels");
  std::vector<Tensor<T>> parts;
  parts.reserve(widths.size());
  const std::size_t pixels = x.extent(0) * x.extent(1) * x.extent(2);
  const std::size_t channels = x.extent(3);
  std::size_t offset = 0;
  for (std::size_t w : widths) {
    Tensor<T> part({x.extent(0), x.extent(1), x.extent(2), w});
    for (std::size_t px = 0; px < pixels; ++px)
      std::memcpy(&part[px * w], &x[px * channels + offset], w * sizeof(T));
    offset += w;
    parts.push_back(std::move(part));
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Spatial attention

/// Per sample: rows of the M²×F patch matrix are L2-normalized, scored
/// against every other pixel through the similarity matrix, reduced by the
/// learned kernel 𝒦 and bias ℬ, softmax-normalized into one weight per pixel
/// and multiplied back onto the original rows. The M²×M² similarity matrix is
/// never materialized: 𝒮𝒦 = 𝒫n(𝒫nᵀ𝒦).
template <typename T>
class SpatialAttention : public Layer<T> {
 public:
  SpatialAttention(std::string label, std::size_t window, std::size_t n_features,
                   bool compute_central = false)
      : Layer<T>(std::move(label)),
        m_(window),
        f_(n_features),
        compute_central_(compute_central),
        kernel_(this->label_ + "/K", {window * window}),
        bias_(this->label_ + "/B", {window * window}) {
    if (window < 1 || window % 2 == 0) this->fail("window must be odd and positive");
  }

  Param<T>& kernel() { return kernel_; }
  Param<T>& bias() { return bias_; }

  void init_params(rng::Stream&) override {
    kernel_.value.fill(T(1));
    bias_.value.zero();
  }

  void collect(std::vector<Param<T>*>& out) override {
    out.push_back(&kernel_);
    out.push_back(&bias_);
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    check_shape(in);
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, std::uint64_t) override {
    check_shape(x.shape());
    const std::size_t n = x.extent(0);
    const std::size_t p = m_ * m_;
    input_ = x;
    pn_ = Tensor<T>({n, p, f_});
    norms_.assign(n * p, 0.0);
    t_.assign(n * f_, 0.0);
    weights_.assign(n * p, 0.0);
    if (compute_central_) central_ = Tensor<T>({n, p});

    Tensor<T> y(x.shape());
    for (std::size_t s = 0; s < n; ++s) {
      const T* px = &x[s * p * f_];
      T* pn = &pn_[s * p * f_];
      double* norm = &norms_[s * p];
      for (std::size_t i = 0; i < p; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < f_; ++k) {
          const double v = px[i * f_ + k];
          sq += v * v;
        }
        norm[i] = std::sqrt(sq);
        if (norm[i] > 0.0) {
          for (std::size_t k = 0; k < f_; ++k)
            pn[i * f_ + k] = static_cast<T>(px[i * f_ + k] / norm[i]);
        } else {
          for (std::size_t k = 0; k < f_; ++k) pn[i * f_ + k] = T(0);
        }
      }
      // t = 𝒫nᵀ𝒦, then 𝒮𝒦 = 𝒫n t.
      double* t = &t_[s * f_];
      for (std::size_t k = 0; k < f_; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i)
          acc += static_cast<double>(pn[i * f_ + k]) * kernel_.value[i];
        t[k] = acc;
      }
      double hi = -std::numeric_limits<double>::infinity();
      std::vector<double> sa(p);
      for (std::size_t i = 0; i < p; ++i) {
        double acc = bias_.value[i];
        for (std::size_t k = 0; k < f_; ++k) acc += static_cast<double>(pn[i * f_ + k]) * t[k];
        sa[i] = acc;
        hi = std::max(hi, acc);
      }
      double z = 0.0;
      double* w = &weights_[s * p];
      for (std::size_t i = 0; i < p; ++i) {
        w[i] = std::exp(sa[i] - hi);
        z += w[i];
      }
      for (std::size_t i = 0; i < p; ++i) w[i] /= z;
      T* out = &y[s * p * f_];
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < f_; ++k)
          out[i * f_ + k] = static_cast<T>(w[i] * px[i * f_ + k]);
      if (compute_central_) {
        // 𝒮_central: the similarity column of the window's center pixel.
        const std::size_t center = (m_ / 2) * m_ + m_ / 2;
        for (std::size_t i = 0; i < p; ++i) {
          double acc = 0.0;
          for (std::size_t k = 0; k < f_; ++k)
            acc += static_cast<double>(pn[i * f_ + k]) * pn[center * f_ + k];
          central_(s, i) = static_cast<T>(acc);
        }
      }
    }
    has_forward_ = true;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    if (!dy.same_shape(input_)) this->fail("gradient shape mismatch");
    const std::size_t n = input_.extent(0);
    const std::size_t p = m_ * m_;
    Tensor<T> dx(input_.shape());
    std::vector<double> dw(p), dsa(p), dt(f_), dpn(p * f_);
    for (std::size_t s = 0; s < n; ++s) {
      const T* px = &input_[s * p * f_];
      const T* pn = &pn_[s * p * f_];
      const double* norm = &norms_[s * p];
      const double* t = &t_[s * f_];
      const double* w = &weights_[s * p];
      const T* g = &dy[s * p * f_];
      T* dxp = &dx[s * p * f_];

      // Output product: O_i = w_i · p_i.
      double wdw = 0.0;
      for (std::size_t i = 0; i < p; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < f_; ++k)
          acc += static_cast<double>(g[i * f_ + k]) * px[i * f_ + k];
        dw[i] = acc;
        wdw += w[i] * acc;
        for (std::size_t k = 0; k < f_; ++k)
          dxp[i * f_ + k] = static_cast<T>(w[i] * g[i * f_ + k]);
      }
      // Softmax, then 𝒮𝒜 = 𝒮𝒦 + ℬ.
      for (std::size_t i = 0; i < p; ++i) {
        dsa[i] = w[i] * (dw[i] - wdw);
        bias_.grad[i] += static_cast<T>(dsa[i]);
      }
      // s = 𝒫n t with t = 𝒫nᵀ𝒦: dt = 𝒫nᵀ ds, d𝒫n = ds·tᵀ + 𝒦·dtᵀ, d𝒦 = 𝒫n dt.
      for (std::size_t k = 0; k < f_; ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < p; ++i) acc += static_cast<double>(pn[i * f_ + k]) * dsa[i];
        dt[k] = acc;
      }
      for (std::size_t i = 0; i < p; ++i)
        for (std::size_t k = 0; k < f_; ++k)
          dpn[i * f_ + k] = dsa[i] * t[k] + static_cast<double>(kernel_.value[i]) * dt[k];
      for (std::size_t i = 0; i < p; ++i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < f_; ++k) acc += static_cast<double>(pn[i * f_ + k]) * dt[k];
        kernel_.grad[i] += static_cast<T>(acc);
      }
      // Row normalization: dp = (dpn − pn⟨pn, dpn⟩)/‖p‖; zero rows stay zero.
      for (std::size_t i = 0; i < p; ++i) {
        if (norm[i] <= 0.0) continue;
        double dot = 0.0;
        for (std::size_t k = 0; k < f_; ++k)
          dot += static_cast<double>(pn[i * f_ + k]) * dpn[i * f_ + k];
        for (std::size_t k = 0; k < f_; ++k)
          dxp[i * f_ + k] = static_cast<T>(
              dxp[i * f_ + k] + (dpn[i * f_ + k] - pn[i * f_ + k] * dot) / norm[i]);
      }
    }
    return dx;
  }

  /// Last forward's 𝒮_central rows (only filled when requested at build).
  const Tensor<T>& central() const { return central_; }

 private:
  void check_shape(const std::vector<std::size_t>& in) const {
    if (in.size() != 4 || in[1] != m_ || in[2] != m_ || in[3] != f_)
      this->fail("expected N×" + std::to_string(m_) + "×" + std::to_string(m_) + "×" +
                 std::to_string(f_) + " input, got " + shape_string(in));
  }

  std::size_t m_, f_;
  bool compute_central_;
  Param<T> kernel_, bias_;
  Tensor<T> input_, pn_, central_;
  std::vector<double> norms_, t_, weights_;
  bool has_forward_ = false;
};

/// Part I: the attended patch concatenated onto the original, channels
/// doubling from F to 2F.
template <typename T>
class AttentionConcat : public Layer<T> {
 public:
  AttentionConcat(std::string label, std::size_t window, std::size_t n_features,
                  bool compute_central = false)
      : Layer<T>(std::move(label)),
        attention_(this->label_, window, n_features, compute_central),
        f_(n_features) {}

  SpatialAttention<T>& attention() { return attention_; }

  void init_params(rng::Stream& stream) override { attention_.init_params(stream); }

  void collect(std::vector<Param<T>*>& out) override { attention_.collect(out); }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    auto out = attention_.output_shape(in);
    out[3] = 2 * f_;
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t step) override {
    Tensor<T> attended = attention_.forward(x, mode, step);
    return concat_channels<T>({&x, &attended});
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    std::vector<Tensor<T>> parts = split_channels(dy, {f_, f_});
    Tensor<T> dx = attention_.backward(parts[1]);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += parts[0][i];
    return dx;
  }

 private:
  SpatialAttention<T> attention_;
  std::size_t f_;
};

// ---------------------------------------------------------------------------
// Inception stages

struct InceptionWidths {
  std::size_t b1x1 = 0;
  std::size_t b3x3 = 0;
  std::size_t b5x5 = 0;
  std::size_t pool_proj = 0;
  std::size_t reduce3 = 0;  // leading 1×1 widths, v2 only
  std::size_t reduce5 = 0;

  std::size_t sum() const { return b1x1 + b3x3 + b5x5 + pool_proj; }
};

/// Four parallel branches concatenated on the channel axis. The v2 form puts
/// stride-1 1×1 convolutions in front of the 3×3 and 5×5 branches and behind
/// the pool; the naive form runs the spatial kernels directly on the input
/// and passes the pooled channels through unchanged. Spatial kernels, the
/// branch 1×1 and the pool all carry the stage stride.
template <typename T>
class Inception : public Layer<T> {
 public:
  Inception(std::string label, bool naive, std::size_t c_in, InceptionWidths widths,
            std::size_t stride)
      : Layer<T>(std::move(label)), naive_(naive), c_in_(c_in), widths_(widths) {
    if (widths.b1x1 < 1 || widths.b3x3 < 1 || widths.b5x5 < 1 ||
        (!naive && (widths.pool_proj < 1 || widths.reduce3 < 1 || widths.reduce5 < 1)))
      this->fail("branch widths must be positive");
    auto conv = [&](const std::string& name, std::size_t kh, std::size_t c0,
                    std::size_t c1, std::size_t s) {
      return std::make_unique<nn::Conv2D<T>>(this->label_ + "/" + name, kh, kh, c0, c1,
                                             s, Padding::Same);
    };
    branches_[0].push_back(conv("b1x1", 1, c_in, widths.b1x1, stride));
    if (naive) {
      branches_[1].push_back(conv("b3x3", 3, c_in, widths.b3x3, stride));
      branches_[2].push_back(conv("b5x5", 5, c_in, widths.b5x5, stride));
      branches_[3].push_back(std::make_unique<nn::MaxPool<T>>(this->label_ + "/pool", 3,
                                                              3, stride, Padding::Same));
      out_channels_ = widths.b1x1 + widths.b3x3 + widths.b5x5 + c_in;
    } else {
      branches_[1].push_back(conv("b3x3_reduce", 1, c_in, widths.reduce3, 1));
      branches_[1].push_back(conv("b3x3", 3, widths.reduce3, widths.b3x3, stride));
      branches_[2].push_back(conv("b5x5_reduce", 1, c_in, widths.reduce5, 1));
      branches_[2].push_back(conv("b5x5", 5, widths.reduce5, widths.b5x5, stride));
      branches_[3].push_back(std::make_unique<nn::MaxPool<T>>(this->label_ + "/pool", 3,
                                                              3, stride, Padding::Same));
      branches_[3].push_back(conv("pool_proj", 1, c_in, widths.pool_proj, 1));
      out_channels_ = widths.sum();
    }
  }

  std::size_t out_channels() const { return out_channels_; }

  void init_params(rng::Stream& stream) override {
    for (auto& branch : branches_)
      for (auto& layer : branch) layer->init_params(stream);
  }

  void collect(std::vector<Param<T>*>& out) override {
    for (auto& branch : branches_)
      for (auto& layer : branch) layer->collect(out);
  }

  std::vector<std::size_t> output_shape(std::vector<std::size_t> in) const override {
    std::vector<std::size_t> out;
    for (const auto& branch : branches_) {
      std::vector<std::size_t> shape = in;
      for (const auto& layer : branch) shape = layer->output_shape(shape);
      if (out.empty()) {
        out = shape;
      } else if (shape[1] != out[1] || shape[2] != out[2]) {
        this->fail("branch spatial extents disagree: " + shape_string(out) + " vs " +
                   shape_string(shape));
      }
    }
    out[3] = out_channels_;
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t step) override {
    std::vector<const Tensor<T>*> views;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      Tensor<T> h = x;
      for (auto& layer : branches_[b]) h = layer->forward(h, mode, step);
      outputs_[b] = std::move(h);
      views.push_back(&outputs_[b]);
    }
    has_forward_ = true;
    return concat_channels<T>(views);
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    this->require_forward(has_forward_);
    std::vector<std::size_t> widths;
    for (const auto& out : outputs_) widths.push_back(out.extent(3));
    std::vector<Tensor<T>> parts = split_channels(dy, widths);
    Tensor<T> dx;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      Tensor<T> g = std::move(parts[b]);
      for (std::size_t l = branches_[b].size(); l > 0; --l)
        g = branches_[b][l - 1]->backward(g);
      if (b == 0) {
        dx = std::move(g);
      } else {
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i];
      }
    }
    return dx;
  }

 private:
  bool naive_;
  std::size_t c_in_, out_channels_ = 0;
  InceptionWidths widths_;
  std::array<std::vector<std::unique_ptr<Layer<T>>>, 4> branches_;
  std::array<Tensor<T>, 4> outputs_;
  bool has_forward_ = false;
};

// ---------------------------------------------------------------------------
// Architecture

enum class Variant {
  Proposed,
  WithInitialConvs,
  NaiveInceptionBoth,
  NaiveFirstInception,
  NoSpatialAttention
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Proposed: return "proposed";
    case Variant::WithInitialConvs: return "with-initial-convs";
    case Variant::NaiveInceptionBoth: return "naive-inception-both";
    case Variant::NaiveFirstInception: return "naive-first-inception";
    default: return "no-spatial-attention";
  }
}

inline Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::Proposed, Variant::WithInitialConvs,
                    Variant::NaiveInceptionBoth, Variant::NaiveFirstInception,
                    Variant::NoSpatialAttention})
    if (name == variant_name(v)) return v;
  throw ConfigError("unknown variant '" + name + "'");
}

struct ArchitectureSpec {
  std::size_t patch_size = 23;
  std::size_t n_features = 40;
  std::size_t n_classes = 17;
  Variant variant = Variant::Proposed;
  InceptionWidths stage1{24, 24, 24, 24, 32, 32};
  InceptionWidths stage2{72, 72, 72, 72, 176, 176};
  std::array<double, 3> dropout_rates{0.2, 0.4, 0.2};
  double leaky_alpha = 0.1;
  double bn_momentum = 0.99;
  double bn_eps = 1e-3;
  bool compute_central = false;

  void validate() const {
    if (patch_size < 1 || patch_size % 2 == 0)
      throw ConfigError("patch size must be odd and positive");
    if (n_features < 1) throw ConfigError("feature count must be positive");
    if (n_classes < 2) throw ConfigError("need at least two classes");
    for (double rate : dropout_rates)
      if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rates must lie in [0, 1)");
    if (leaky_alpha < 0.0) throw ConfigError("leaky alpha must be non-negative");
    if (bn_momentum < 0.0 || bn_momentum > 1.0)
      throw ConfigError("batch-norm momentum must lie in [0, 1]");
  }
};

template <typename T>
struct Model {
  ArchitectureSpec spec;
  std::vector<std::unique_ptr<Layer<T>>> layers;

  Tensor<T> forward(const Tensor<T>& x, Mode mode, std::uint64_t step) {
    Tensor<T> h = x;
    for (auto& layer : layers) h = layer->forward(h, mode, step);
    return h;
  }

  Tensor<T> backward(const Tensor<T>& dlogits) {
    Tensor<T> g = dlogits;
    for (std::size_t l = layers.size(); l > 0; --l) g = layers[l - 1]->backward(g);
    return g;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& layer : layers) layer->collect(out);
    return out;
  }

  void zero_grad() {
    for (Param<T>* p : params()) p->zero_grad();
  }

  /// Shapes after each layer for a batch of n, starting from the input shape.
  std::vector<std::vector<std::size_t>> shape_chain(std::size_t n) const {
    std::vector<std::vector<std::size_t>> chain;
    std::vector<std::size_t> shape{n, spec.patch_size, spec.patch_size, spec.n_features};
    chain.push_back(shape);
    for (const auto& layer : layers) {
      shape = layer->output_shape(shape);
      chain.push_back(shape);
    }
    return chain;
  }

  std::size_t flatten_width() const {
    for (const auto& shape : shape_chain(1))
      if (shape.size() == 2 && shape[1] != spec.n_classes) return shape[1];
    return 0;
  }
};

/// Assemble the five parts for a variant, initialize every parameter from the
/// seed, and validate the whole shape chain.
template <typename T>
inline Model<T> build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> model;
  model.spec = spec;
  const std::size_t m = spec.patch_size;
  const std::size_t f = spec.n_features;
  auto& layers = model.layers;
  const std::uint64_t dropout_seed = rng::mix(seed, 0x64726f70u);  // lane tag: drop

  std::size_t channels = f;
  if (spec.variant == Variant::WithInitialConvs) {
    layers.push_back(std::make_unique<nn::Conv2D<T>>("part0/conv1", 1, 1, f, 2 * f, 1,
                                                     Padding::Same));
    layers.push_back(std::make_unique<nn::Conv2D<T>>("part0/conv2", 3, 3, 2 * f, 2 * f,
                                                     1, Padding::Same));
    channels = 2 * f;
  }
  if (spec.variant != Variant::NoSpatialAttention) {
    layers.push_back(std::make_unique<AttentionConcat<T>>("part1/attention", m, channels,
                                                          spec.compute_central));
    channels *= 2;
  }

  layers.push_back(std::make_unique<nn::Conv2D<T>>("part2/conv1", 1, 1, channels, 16, 1,
                                                   Padding::Same));
  layers.push_back(
      std::make_unique<nn::Conv2D<T>>("part2/conv2", 3, 3, 16, 16, 2, Padding::Same));
  layers.push_back(std::make_unique<nn::LeakyReLU<T>>("part2/leaky", spec.leaky_alpha));
  layers.push_back(std::make_unique<nn::BatchNorm<T>>("part2/bn", 16, spec.bn_momentum,
                                                      spec.bn_eps));
  layers.push_back(std::make_unique<nn::Dropout<T>>("part2/dropout", spec.dropout_rates[0],
                                                    dropout_seed, 0));

  const bool naive1 = spec.variant == Variant::NaiveInceptionBoth ||
                      spec.variant == Variant::NaiveFirstInception;
  const bool naive2 = spec.variant == Variant::NaiveInceptionBoth;
  auto stage1 = std::make_unique<Inception<T>>("part3/inception", naive1, 16, spec.stage1, 2);
  const std::size_t c1 = stage1->out_channels();
  layers.push_back(std::move(stage1));
  layers.push_back(
      std::make_unique<nn::BatchNorm<T>>("part3/bn", c1, spec.bn_momentum, spec.bn_eps));
  layers.push_back(std::make_unique<nn::LeakyReLU<T>>("part3/leaky", spec.leaky_alpha));
  layers.push_back(std::make_unique<nn::Dropout<T>>("part3/dropout", spec.dropout_rates[1],
                                                    dropout_seed, 1));

  auto stage2 = std::make_unique<Inception<T>>("part4/inception", naive2, c1, spec.stage2, 2);
  const std::size_t c2 = stage2->out_channels();
  layers.push_back(std::move(stage2));
  layers.push_back(
      std::make_unique<nn::BatchNorm<T>>("part4/bn", c2, spec.bn_momentum, spec.bn_eps));
  layers.push_back(std::make_unique<nn::LeakyReLU<T>>("part4/leaky", spec.leaky_alpha));
  layers.push_back(std::make_unique<nn::Flatten<T>>("part4/flatten"));
  layers.push_back(std::make_unique<nn::Dropout<T>>("part4/dropout", spec.dropout_rates[2],
                                                    dropout_seed, 2));

  // The flatten width falls out of the stride arithmetic above.
  std::vector<std::size_t> shape{2, m, m, f};
  for (const auto& layer : layers) shape = layer->output_shape(shape);
  layers.push_back(
      std::make_unique<nn::Dense<T>>("part5/dense", shape[1], spec.n_classes));

  for (std::size_t l = 0; l < layers.size(); ++l) {
    rng::Stream stream(rng::mix(seed, 0x696e6974u, l));  // lane tag: init
    layers[l]->init_params(stream);
  }
  model.shape_chain(2);  // surfaces any inconsistency with the layer named
  return model;
}

// ---------------------------------------------------------------------------
// Audits

struct ParamAudit {
  struct Entry {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t count = 0;
    bool trainable = true;
  };
  std::vector<Entry> entries;
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;

  std::size_t total() const { return trainable + non_trainable; }
};

template <typename T>
inline ParamAudit audit_params(Model<T>& model) {
  ParamAudit audit;
  for (Param<T>* p : model.params()) {
    audit.entries.push_back({p->name, p->value.shape(), p->value.size(), p->trainable});
    (p->trainable ? audit.trainable : audit.non_trainable) += p->value.size();
  }
  return audit;
}

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
inline std::vector<nn::NamedTensor> snapshot(Model<T>& model,
                                             const nn::RmsProp<T>* optimizer = nullptr) {
  std::vector<nn::NamedTensor> records;
  for (Param<T>* p : model.params())
    records.push_back({p->name, p->value.template cast<float>()});
  if (optimizer)
    for (const auto& [name, v] : optimizer->state())
      records.push_back({"opt/" + name, v.template cast<float>()});
  return records;
}

template <typename T>
inline void save_model(Model<T>& model, const std::filesystem::path& path,
                       const nn::RmsProp<T>* optimizer = nullptr) {
  nn::save_checkpoint(path, snapshot(model, optimizer));
}

/// Restore parameters (and optimizer slots when present and wanted) from a
/// checkpoint written by the same architecture.
template <typename T>
inline void restore_model(Model<T>& model, const std::vector<nn::NamedTensor>& records,
                          nn::RmsProp<T>* optimizer = nullptr) {
  std::map<std::string, const nn::NamedTensor*> by_name;
  for (const auto& rec : records) by_name[rec.name] = &rec;
  for (Param<T>* p : model.params()) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw IoError("checkpoint is missing tensor " + p->name);
    const Tensor<float>& v = it->second->value;
    if (v.shape() != p->value.shape())
      throw IoError("checkpoint tensor " + p->name + " has shape " +
                    shape_string(v.shape()) + ", model expects " +
                    shape_string(p->value.shape()));
    p->value = v.template cast<T>();
  }
  if (optimizer) {
    optimizer->state().clear();
    for (const auto& rec : records)
      if (rec.name.rfind("opt/", 0) == 0)
        optimizer->state()[rec.name.substr(4)] = rec.value.template cast<T>();
  }
}

template <typename T>
inline void load_model(Model<T>& model, const std::filesystem::path& path,
                       nn::RmsProp<T>* optimizer = nullptr) {
  restore_model(model, nn::load_checkpoint(path), optimizer);
}

/// §-style weight reuse: copy every matching tensor; when the classifier head
/// differs in shape and reinit_head is set, keep the freshly initialized head
/// instead of failing.
template <typename T>
inline void load_pretrained(Model<T>& model, const std::filesystem::path& path,
                            bool reinit_head) {
  const auto records = nn::load_checkpoint(path);
  std::map<std::string, const nn::NamedTensor*> by_name;
  for (const auto& rec : records)
    if (rec.name.rfind("opt/", 0) != 0) by_name[rec.name] = &rec;
  for (Param<T>* p : model.params()) {
    const bool head = p->name.rfind("part5/", 0) == 0;
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      if (head && reinit_head) continue;
      throw IoError("checkpoint is missing tensor " + p->name);
    }
    const Tensor<float>& v = it->second->value;
    if (v.shape() != p->value.shape()) {
      if (head && reinit_head) continue;
      throw IoError("checkpoint tensor " + p->name + " has shape " +
                    shape_string(v.shape()) + ", model expects " +
                    shape_string(p->value.shape()));
    }
    p->value = v.template cast<T>();
  }
}

// ---------------------------------------------------------------------------
// Spec file

inline void save_spec(const ArchitectureSpec& spec, const std::filesystem::path& path) {
  KeyValueFile kv;
  kv.set("variant", variant_name(spec.variant));
  kv.set("patch_size", std::to_string(spec.patch_size));
  kv.set("n_features", std::to_string(spec.n_features));
  kv.set("n_classes", std::to_string(spec.n_classes));
  auto widths = [&](const char* prefix, const InceptionWidths& w) {
    kv.set(std::string(prefix) + "_b1x1", std::to_string(w.b1x1));
    kv.set(std::string(prefix) + "_b3x3", std::to_string(w.b3x3));
    kv.set(std::string(prefix) + "_b5x5", std::to_string(w.b5x5));
    kv.set(std::string(prefix) + "_pool_proj", std::to_string(w.pool_proj));
    kv.set(std::string(prefix) + "_reduce3", std::to_string(w.reduce3));
    kv.set(std::string(prefix) + "_reduce5", std::to_string(w.reduce5));
  };
  widths("stage1", spec.stage1);
  widths("stage2", spec.stage2);
  kv.set("dropout1", format_double(spec.dropout_rates[0]));
  kv.set("dropout2", format_double(spec.dropout_rates[1]));
  kv.set("dropout3", format_double(spec.dropout_rates[2]));
  kv.set("leaky_alpha", format_double(spec.leaky_alpha));
  kv.set("bn_momentum", format_double(spec.bn_momentum));
  kv.set("bn_eps", format_double(spec.bn_eps));
  kv.set("compute_central", spec.compute_central ? "1" : "0");
  kv.save(path);
}

inline ArchitectureSpec load_spec(const std::filesystem::path& path) {
  KeyValueFile kv = KeyValueFile::load(path);
  ArchitectureSpec spec;
  spec.variant = parse_variant(kv.get("variant"));
  spec.patch_size = static_cast<std::size_t>(kv.get_int("patch_size"));
  spec.n_features = static_cast<std::size_t>(kv.get_int("n_features"));
  spec.n_classes = static_cast<std::size_t>(kv.get_int("n_classes"));
  auto widths = [&](const char* prefix, InceptionWidths& w) {
    w.b1x1 = static_cast<std::size_t>(kv.get_int(std::string(prefix) + "_b1x1"));
    w.b3x3 = static_cast<std::size_t>(kv.get_int(std::string(prefix) + "_b3x3"));
    w.b5x5 = static_cast<std::size_t>(kv.get_int(std::string(prefix) + "_b5x5"));
    w.pool_proj = static_cast<std::size_t>(kv.get_int(std::string(prefix) + "_pool_proj"));
    w.reduce3 = static_cast<std::size_t>(kv.get_int(std::string(prefix) + "_reduce3"));
    w.reduce5 = static_cast<std::size_t>(kv.get_int(std::string(prefix) + "_reduce5"));
  };
  widths("stage1", spec.stage1);
  widths("stage2", spec.stage2);
  spec.dropout_rates = {kv.get_double("dropout1"), kv.get_double("dropout2"),
                        kv.get_double("dropout3")};
  spec.leaky_alpha = kv.get_double("leaky_alpha");
  spec.bn_momentum = kv.get_double("bn_momentum");
  spec.bn_eps = kv.get_double("bn_eps");
  spec.compute_central = kv.get_or("compute_central", "0") == "1";
  spec.validate();
  return spec;
}

}  // namespace vinehsi::model
