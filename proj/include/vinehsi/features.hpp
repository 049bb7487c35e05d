#ifndef VINEHSI_FEATURES_HPP
#define VINEHSI_FEATURES_HPP

/// Spectral feature extraction: per-band standardization, factor analysis
/// fitted by expectation-maximization, posterior-mean factor scoring, and
/// the distance-based separability index (DSI).
///
/// All fitting happens on double-precision covariance accumulators; the
/// factor model checkpoint (magic `VHFA`) stores doubles.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "vinehsi/common.hpp"
#include "vinehsi/rng.hpp"
#include "vinehsi/tensor.hpp"

namespace vinehsi::features {

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;  // population standard deviation per band
};

/// Fitted standardization + factor decomposition (B bands -> F features).
struct FactorModel {
  std::size_t n_bands = 0;
  std::size_t n_features = 0;
  std::vector<double> mean;
  std::vector<double> scale;
  Tensor<double> loadings;        // (F, B)
  std::vector<double> noise_var;  // per-band uniqueness
  bool converged = false;
  int iterations = 0;
  double loglik = 0.0;  // mean per-sample log-likelihood at the last iteration
};

/// Population mean/std per band; throws naming the first constant band.
inline Standardizer fit_standardizer(const Tensor<float>& pixels) {
  if (pixels.rank() != 2) throw ConfigError("pixels must be N x B");
  const std::size_t n = pixels.extent(0), b = pixels.extent(1);
  if (n < 2) throw ConfigError("standardizer needs at least 2 pixels");
  Standardizer s;
  s.mean.assign(b, 0.0);
  s.scale.assign(b, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < b; ++j) s.mean[j] += pixels(i, j);
  for (std::size_t j = 0; j < b; ++j) s.mean[j] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      double d = pixels(i, j) - s.mean[j];
      s.scale[j] += d * d;
    }
  for (std::size_t j = 0; j < b; ++j) {
    double var = s.scale[j] / static_cast<double>(n);
    if (var < 1e-15)
      throw NumericError("zero-variance band " + std::to_string(j) +
                         " cannot be standardized");
    s.scale[j] = std::sqrt(var);
  }
  return s;
}

inline Tensor<float> apply_standardizer(const Standardizer& s, const Tensor<float>& pixels) {
  if (pixels.rank() != 2 || pixels.extent(1) != s.mean.size())
    throw ConfigError("band count mismatch in standardizer");
  Tensor<float> out({pixels.extent(0), pixels.extent(1)});
  for (std::size_t i = 0; i < pixels.extent(0); ++i)
    for (std::size_t j = 0; j < pixels.extent(1); ++j)
      out(i, j) = static_cast<float>((pixels(i, j) - s.mean[j]) / s.scale[j]);
  return out;
}

namespace detail {

/// Covariance (population) of an N x B float matrix, accumulated in double
/// via chunked GEMM.
inline Eigen::MatrixXd covariance(const Tensor<float>& x) {
  const std::size_t n = x.extent(0), b = x.extent(1);
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(b),
                                            static_cast<Eigen::Index>(b));
  const std::size_t chunk = 2048;
  Eigen::MatrixXd block(static_cast<Eigen::Index>(chunk), static_cast<Eigen::Index>(b));
  for (std::size_t at = 0; at < n; at += chunk) {
    const std::size_t rows = std::min(chunk, n - at);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < b; ++j)
        block(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = x(at + i, j);
    auto top = block.topRows(static_cast<Eigen::Index>(rows));
    s.noalias() += top.transpose() * top;
  }
  return s / static_cast<double>(n);
}

constexpr double kPsiFloor = 1e-6;

}  // namespace detail

/// Maximum-likelihood factor analysis on standardized pixels.
///
/// EM with principal-axis initialization. The per-iteration log-likelihood is
/// asserted non-decreasing; convergence when its mean-per-sample improvement
/// drops below `tol`.
inline FactorModel fit_factor_analysis(const Tensor<float>& pixels_std, std::size_t n_features,
                                       int max_iter = 1000, double tol = 1e-4) {
  if (pixels_std.rank() != 2) throw ConfigError("pixels must be N x B");
  const std::size_t n = pixels_std.extent(0), b = pixels_std.extent(1);
  if (n_features == 0) throw ConfigError("n_features must be positive");
  if (n_features >= b)
    throw ConfigError("n_features " + std::to_string(n_features) +
                      " must be smaller than band count " + std::to_string(b));
  if (n < b) throw ConfigError("need at least as many pixels as bands");

  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto B = static_cast<Eigen::Index>(b);
  const auto F = static_cast<Eigen::Index>(n_features);

  const MatrixXd S = detail::covariance(pixels_std);

  // Principal-axis start: top-F eigenvectors scaled by sqrt(eigenvalue).
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(S);
  if (eig.info() != Eigen::Success) throw NumericError("covariance eigendecomposition failed");
  MatrixXd lambda(B, F);
  for (Eigen::Index j = 0; j < F; ++j) {
    const Eigen::Index src = B - 1 - j;  // eigenvalues ascend in Eigen
    double ev = std::max(eig.eigenvalues()(src), 0.0);
    lambda.col(j) = eig.eigenvectors().col(src) * std::sqrt(ev);
  }
  // Uniqueness starts at the full band variance; starting from the
  // principal-axis residual stalls EM in a degenerate corner when the data
  // carry no factor structure.
  VectorXd psi = S.diagonal().cwiseMax(detail::kPsiFloor);

  auto loglik = [&](const MatrixXd& L, const VectorXd& p) {
    const VectorXd pinv = p.cwiseInverse();
    const MatrixXd t = L.transpose() * pinv.asDiagonal();  // F x B
    MatrixXd m = MatrixXd::Identity(F, F) + t * L;
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw NumericError("FA likelihood: non-SPD system");
    double logdet = p.array().log().sum();
    for (Eigen::Index i = 0; i < F; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    const MatrixXd u = t * S * t.transpose();  // F x F
    double trace = (S.diagonal().array() * pinv.array()).sum() -
                   llt.solve(u).trace();
    constexpr double ln2pi = 1.8378770664093454836;
    return -0.5 * (static_cast<double>(b) * ln2pi + logdet + trace);
  };

  FactorModel model;
  model.n_bands = b;
  model.n_features = n_features;
  model.mean.assign(b, 0.0);
  model.scale.assign(b, 1.0);

  double prev = loglik(lambda, psi);
  int iter = 0;
  for (; iter < max_iter; ++iter) {
    const VectorXd pinv = psi.cwiseInverse();
    const MatrixXd t = lambda.transpose() * pinv.asDiagonal();  // F x B
    MatrixXd m = MatrixXd::Identity(F, F) + t * lambda;
    Eigen::LLT<MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw NumericError("FA EM: non-SPD system");
    const MatrixXd delta = llt.solve(t);        // F x B, posterior map
    const MatrixXd ds = delta * S;              // F x B
    const MatrixXd second = llt.solve(MatrixXd::Identity(F, F)) + ds * delta.transpose();
    Eigen::LLT<MatrixXd> llt2(second);
    if (llt2.info() != Eigen::Success) throw NumericError("FA EM: singular second moment");
    lambda = llt2.solve(ds).transpose();        // B x F
    psi = (S.diagonal() - (lambda * ds).diagonal()).cwiseMax(detail::kPsiFloor);

    double cur = loglik(lambda, psi);
    if (cur < prev - 1e-8 * (1.0 + std::abs(prev)))
      throw NumericError("FA EM log-likelihood decreased: " + std::to_string(prev) +
                         " -> " + std::to_string(cur));
    const double gain = cur - prev;
    prev = cur;
    if (gain < tol) {
      model.converged = true;
      ++iter;
      break;
    }
  }
  model.iterations = iter;
  model.loglik = prev;
  model.loadings = Tensor<double>({n_features, b});
  for (Eigen::Index j = 0; j < F; ++j)
    for (Eigen::Index i = 0; i < B; ++i)
      model.loadings(static_cast<std::size_t>(j), static_cast<std::size_t>(i)) = lambda(i, j);
  model.noise_var.assign(b, 0.0);
  for (Eigen::Index i = 0; i < B; ++i) model.noise_var[static_cast<std::size_t>(i)] = psi(i);
  return model;
}

/// Convenience: fit standardizer + FA in one go on raw pixels.
inline FactorModel fit_factor_model(const Tensor<float>& pixels, std::size_t n_features,
                                    int max_iter = 1000, double tol = 1e-4) {
  Standardizer s = fit_standardizer(pixels);
  Tensor<float> std_pixels = apply_standardizer(s, pixels);
  FactorModel model = fit_factor_analysis(std_pixels, n_features, max_iter, tol);
  model.mean = s.mean;
  model.scale = s.scale;
  return model;
}

/// Posterior-mean scoring map delta = (I + L' Psi^-1 L)^-1 L' Psi^-1, F x B.
inline Eigen::MatrixXd scoring_matrix(const FactorModel& model) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto B = static_cast<Eigen::Index>(model.n_bands);
  const auto F = static_cast<Eigen::Index>(model.n_features);
  MatrixXd lambda(B, F);
  for (Eigen::Index j = 0; j < F; ++j)
    for (Eigen::Index i = 0; i < B; ++i)
      lambda(i, j) = model.loadings(static_cast<std::size_t>(j), static_cast<std::size_t>(i));
  VectorXd pinv(B);
  for (Eigen::Index i = 0; i < B; ++i)
    pinv(i) = 1.0 / std::max(model.noise_var[static_cast<std::size_t>(i)], detail::kPsiFloor);
  const MatrixXd t = lambda.transpose() * pinv.asDiagonal();
  MatrixXd m = MatrixXd::Identity(F, F) + t * lambda;
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw NumericError("factor scoring: non-SPD system");
  return llt.solve(t);
}

/// Standardize then project to factor scores; returns N x F.
inline Tensor<float> transform(const FactorModel& model, const Tensor<float>& pixels) {
  if (pixels.rank() != 2) throw ConfigError("pixels must be N x B");
  if (pixels.extent(1) != model.n_bands)
    throw ConfigError("band count " + std::to_string(pixels.extent(1)) +
                      " does not match model bands " + std::to_string(model.n_bands));
  const std::size_t n = pixels.extent(0), b = model.n_bands, f = model.n_features;
  const Eigen::MatrixXd delta = scoring_matrix(model);
  Tensor<float> out({n, f});
  std::vector<double> x(b);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < b; ++j)
      x[j] = (pixels(i, j) - model.mean[j]) / model.scale[j];
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(b));
    Eigen::VectorXd z = delta * xv;
    for (std::size_t j = 0; j < f; ++j) out(i, j) = static_cast<float>(z(static_cast<Eigen::Index>(j)));
  }
  return out;
}

/// Variance of standardized bands captured per factor: column norms of the
/// loading matrix, squared.
inline std::vector<double> explained_variance(const FactorModel& model) {
  std::vector<double> ev(model.n_features, 0.0);
  for (std::size_t j = 0; j < model.n_features; ++j)
    for (std::size_t i = 0; i < model.n_bands; ++i)
      ev[j] += model.loadings(j, i) * model.loadings(j, i);
  return ev;
}

struct DsiResult {
  double value = 0.0;
  std::vector<std::uint16_t> excluded;  // classes with < 2 samples
};

namespace detail {

/// Two-sample Kolmogorov-Smirnov statistic; both inputs sorted ascending.
inline double ks_statistic(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double sup = 0.0;
  while (i < a.size() && j < b.size()) {
    double v = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= v) ++i;
    while (j < b.size() && b[j] <= v) ++j;
    sup = std::max(sup, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  return sup;
}

}  // namespace detail

/// Mean over classes of the KS contrast between intra-class pairwise
/// distances and class-to-others distances. Higher means more separable.
inline DsiResult dsi(const Tensor<float>& feats, const std::vector<std::uint16_t>& labels) {
  if (feats.rank() != 2) throw ConfigError("features must be N x F");
  const std::size_t n = feats.extent(0), f = feats.extent(1);
  if (labels.size() != n) throw ConfigError("label count mismatch");

  std::vector<std::uint16_t> classes;
  for (auto c : labels)
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
  std::sort(classes.begin(), classes.end());
  if (classes.size() < 2) throw ConfigError("dsi needs at least 2 classes");

  auto dist = [&](std::size_t i, std::size_t j) {
    double acc = 0.0;
    const float* a = feats.data() + i * f;
    const float* b = feats.data() + j * f;
    for (std::size_t k = 0; k < f; ++k) {
      double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
      acc += d * d;
    }
    return std::sqrt(acc);
  };

  DsiResult result;
  double sum = 0.0;
  std::size_t used = 0;
  for (auto c : classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i] == c) members.push_back(i);
    if (members.size() < 2) {
      result.excluded.push_back(c);
      continue;
    }
    std::vector<double> intra;
    intra.reserve(members.size() * (members.size() - 1) / 2);
    for (std::size_t a = 0; a < members.size(); ++a)
      for (std::size_t b2 = a + 1; b2 < members.size(); ++b2)
        intra.push_back(dist(members[a], members[b2]));
    std::vector<double> inter;
    inter.reserve(members.size() * (n - members.size()));
    for (std::size_t m : members)
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] != c) inter.push_back(dist(m, i));
    if (inter.empty()) {
      result.excluded.push_back(c);
      continue;
    }
    std::sort(intra.begin(), intra.end());
    std::sort(inter.begin(), inter.end());
    sum += detail::ks_statistic(intra, inter);
    ++used;
  }
  if (used == 0) throw ConfigError("dsi: every class was excluded");
  result.value = sum / static_cast<double>(used);
  return result;
}

/// Seeded uniform row subsample without replacement (used to cap FA fitting
/// cost); returns the input when it is already small enough.
inline Tensor<float> subsample_rows(const Tensor<float>& x, std::size_t cap, std::uint64_t seed) {
  if (x.rank() != 2) throw ConfigError("subsample expects a matrix");
  const std::size_t n = x.extent(0);
  if (n <= cap) return x;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  rng::Stream s(rng::mix(seed, 0x5ab5a17ull));
  s.shuffle(idx);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  Tensor<float> out({cap, x.extent(1)});
  for (std::size_t i = 0; i < cap; ++i)
    std::copy_n(x.data() + idx[i] * x.extent(1), x.extent(1), out.data() + i * x.extent(1));
  return out;
}

// ---------------------------------------------------------------------------
// VHFA checkpoint
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

inline void put_f64s(std::vector<char>& out, const double* v, std::size_t n) {
  const char* p = reinterpret_cast<const char*>(v);
  out.insert(out.end(), p, p + n * sizeof(double));
}

struct Reader {
  const char* p;
  const char* end;
  std::string origin;
  void need(std::size_t n) const {
    if (static_cast<std::size_t>(end - p) < n) throw IoError(origin + ": truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    p += 4;
    return v;
  }
  void f64s(double* v, std::size_t n) {
    need(n * sizeof(double));
    std::memcpy(v, p, n * sizeof(double));
    p += n * sizeof(double);
  }
};

}  // namespace detail

inline void save_factor_model(const FactorModel& model, const std::filesystem::path& path) {
  std::vector<char> out;
  out.insert(out.end(), {'V', 'H', 'F', 'A'});
  detail::put_u32(out, 1u);
  detail::put_u32(out, static_cast<std::uint32_t>(model.n_bands));
  detail::put_u32(out, static_cast<std::uint32_t>(model.n_features));
  detail::put_f64s(out, model.mean.data(), model.n_bands);
  detail::put_f64s(out, model.scale.data(), model.n_bands);
  detail::put_f64s(out, model.loadings.data(), model.loadings.size());
  detail::put_f64s(out, model.noise_var.data(), model.n_bands);
  write_binary_file(path, out.data(), out.size());
}

inline FactorModel load_factor_model(const std::filesystem::path& path) {
  std::vector<char> bytes = read_binary_file(path);
  detail::Reader r{bytes.data(), bytes.data() + bytes.size(), path.string()};
  r.need(4);
  if (std::memcmp(r.p, "VHFA", 4) != 0) throw IoError(path.string() + ": bad magic");
  r.p += 4;
  std::uint32_t version = r.u32();
  if (version != 1u) throw IoError(path.string() + ": unsupported version");
  FactorModel model;
  model.n_bands = r.u32();
  model.n_features = r.u32();
  if (model.n_bands == 0 || model.n_features == 0)
    throw IoError(path.string() + ": zero dimensions");
  model.mean.resize(model.n_bands);
  model.scale.resize(model.n_bands);
  model.loadings = Tensor<double>({model.n_features, model.n_bands});
  model.noise_var.resize(model.n_bands);
  r.f64s(model.mean.data(), model.n_bands);
  r.f64s(model.scale.data(), model.n_bands);
  r.f64s(model.loadings.data(), model.loadings.size());
  r.f64s(model.noise_var.data(), model.n_bands);
  if (r.p != r.end) throw IoError(path.string() + ": trailing bytes");
  model.converged = true;
  return model;
}

}  // namespace vinehsi::features

#endif
