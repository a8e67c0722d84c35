// Copyright 2026 The LPSFed Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lpsfed/graph.hpp"
#include "lpsfed/random.hpp"

namespace lpsfed {

/// First-Phi eigenpairs of a normalized Laplacian, ascending. Columns of
/// `eigenvectors` are orthonormal and sign-fixed (first nonzero component
/// positive) so results are reproducible.
struct PartialSpectrum {
  Eigen::VectorXd eigenvalues;   // length Phi, ascending
  Eigen::MatrixXd eigenvectors;  // dim x Phi

  int cutoff() const { return static_cast<int>(eigenvalues.size()); }
  int dim() const { return static_cast<int>(eigenvectors.rows()); }
};

/// Normalized low-pass eigenvalue distribution; the structural fingerprint
/// compared across graphs. Entries are floored at `epsilon` times the total
/// mass before renormalization so KL stays finite.
struct SpectralKernel {
  Eigen::VectorXd probs;  // non-negative, sums to 1
  double epsilon = 0.0;

  int size() const { return static_cast<int>(probs.size()); }
};

struct LanczosOptions {
  double tol = 1e-8;           // Ritz residual threshold
  int max_iterations = 0;      // 0 means 10*phi + 50
  double breakdown_tol = 1e-12;
};

namespace detail {

inline void fix_column_signs(Eigen::MatrixXd& v) {
  for (int c = 0; c < v.cols(); ++c) {
    const double scale = v.col(c).cwiseAbs().maxCoeff();
    if (scale == 0.0) continue;
    for (int r = 0; r < v.rows(); ++r) {
      if (std::abs(v(r, c)) > 1e-9 * scale) {
        if (v(r, c) < 0) v.col(c) = -v.col(c);
        break;
      }
    }
  }
}

// Twice-is-enough Gram-Schmidt of w against the first m columns of V.
inline void reorthogonalize(const Eigen::MatrixXd& v, int m,
                            Eigen::VectorXd& w) {
  for (int pass = 0; pass < 2; ++pass) {
    Eigen::VectorXd coeffs = v.leftCols(m).transpose() * w;
    w.noalias() -= v.leftCols(m) * coeffs;
  }
}

}  // namespace detail

/// Lanczos iteration with full reorthogonalization for the lowest `phi`
/// eigenpairs of a sparse symmetric matrix. Deterministic given `seed`.
/// Breakdowns (invariant subspaces, e.g. disconnected graphs) restart with a
/// fresh random direction, so degenerate eigenvalues are recovered too.
inline PartialSpectrum lanczos_partial_eigs(const SparseSymmetricMatrix& mat,
                                            int phi, std::uint64_t seed,
                                            const LanczosOptions& opts = {}) {
  const int n = mat.dim();
  if (phi < 1) throw std::invalid_argument("phi must be >= 1");
  if (phi > n) throw std::invalid_argument("phi exceeds matrix dimension");

  const int cap = opts.max_iterations > 0 ? opts.max_iterations : 10 * phi + 50;
  const int max_m = std::min(n, std::max(cap, phi));

  auto rng = make_rng(derive_seed(seed, 0x4c414e43ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random_unit = [&](int dim) {
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v[i] = gauss(rng);
    return v;
  };

  Eigen::MatrixXd basis(n, max_m);
  std::vector<double> alpha, beta;  // beta[j] couples v_j and v_{j+1}
  alpha.reserve(max_m);
  beta.reserve(max_m);

  {
    Eigen::VectorXd v0 = random_unit(n);
    v0.normalize();
    basis.col(0) = v0;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> small_solver;
  Eigen::VectorXd ritz_values;
  Eigen::MatrixXd ritz_coeffs;
  int m = 0;
  bool exhausted = false;
  double worst_residual = std::numeric_limits<double>::infinity();

  auto solve_tridiagonal = [&](int k) {
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(k, k);
    for (int j = 0; j < k; ++j) {
      t(j, j) = alpha[j];
      if (j + 1 < k) t(j, j + 1) = t(j + 1, j) = beta[j];
    }
    small_solver.compute(t);
    ritz_values = small_solver.eigenvalues();
    ritz_coeffs = small_solver.eigenvectors();
  };

  while (m < max_m) {
    Eigen::VectorXd w = mat.apply(basis.col(m));
    const double a = basis.col(m).dot(w);
    alpha.push_back(a);
    w.noalias() -= a * basis.col(m);
    if (m > 0 && beta[m - 1] != 0.0) w.noalias() -= beta[m - 1] * basis.col(m - 1);
    detail::reorthogonalize(basis, m + 1, w);

    const int k = m + 1;
    double b = w.norm();
    if (b < opts.breakdown_tol) {
      // Invariant subspace found. If the basis spans everything we are done;
      // otherwise continue in a fresh random direction (beta stays 0, the
      // tridiagonal matrix becomes block diagonal).
      if (k >= n) {
        exhausted = true;
        m = k;
        break;
      }
      Eigen::VectorXd r = random_unit(n);
      detail::reorthogonalize(basis, k, r);
      const double rn = r.norm();
      if (rn < opts.breakdown_tol) {
        exhausted = true;
        m = k;
        break;
      }
      beta.push_back(0.0);
      basis.col(k) = r / rn;
      m = k;
      continue;
    }

    if (k >= phi && (k == max_m || k == n || (k - phi) % 10 == 0)) {
      solve_tridiagonal(k);
      worst_residual = 0.0;
      for (int i = 0; i < phi; ++i)
        worst_residual =
            std::max(worst_residual, std::abs(b * ritz_coeffs(k - 1, i)));
      if (worst_residual < opts.tol || k == n) {
        exhausted = (k == n);
        m = k;
        break;
      }
    }

    if (k == max_m) {
      m = k;
      break;
    }
    beta.push_back(b);
    basis.col(k) = w / b;
    m = k;
  }

  solve_tridiagonal(m);
  if (m == n) exhausted = true;

  PartialSpectrum spec;
  spec.eigenvalues = ritz_values.head(phi);
  spec.eigenvectors.noalias() = basis.leftCols(m) * ritz_coeffs.leftCols(phi);
  for (int c = 0; c < phi; ++c) spec.eigenvectors.col(c).normalize();
  detail::fix_column_signs(spec.eigenvectors);

  // Explicit residual; the Ritz estimate can be optimistic after restarts.
  double resid = 0.0;
  for (int c = 0; c < phi; ++c) {
    Eigen::VectorXd r = mat.apply(spec.eigenvectors.col(c)) -
                        spec.eigenvalues[c] * spec.eigenvectors.col(c);
    resid = std::max(resid, r.norm());
  }
  if (!exhausted && resid > std::max(opts.tol * 100, 1e-6)) {
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "lanczos failed to converge: residual %.3e after %d steps",
                  resid, m);
    throw std::runtime_error(buf);
  }
  return spec;
}

/// Graph Fourier transform restricted to the kept eigenvectors: P^T Z.
inline Eigen::MatrixXd gft(const PartialSpectrum& spec,
                           const Eigen::MatrixXd& z) {
  if (z.rows() != spec.dim())
    throw std::invalid_argument("signal rows do not match spectrum dimension");
  return spec.eigenvectors.transpose() * z;
}

/// Inverse transform: P Z~.
inline Eigen::MatrixXd inverse_gft(const PartialSpectrum& spec,
                                   const Eigen::MatrixXd& coeffs) {
  if (coeffs.rows() != spec.cutoff())
    throw std::invalid_argument("coefficient rows do not match cutoff");
  return spec.eigenvectors * coeffs;
}

/// Low-pass collaborative filter: projection onto span of the kept
/// eigenvectors, P P^T Z.
inline Eigen::MatrixXd lcf(const PartialSpectrum& spec,
                           const Eigen::MatrixXd& z) {
  return inverse_gft(spec, gft(spec, z));
}

/// Low-pass graph convolution P diag(kernel) P^T Z.
inline Eigen::MatrixXd low_pass_convolution(const PartialSpectrum& spec,
                                            const Eigen::VectorXd& kernel,
                                            const Eigen::MatrixXd& z) {
  if (kernel.size() != spec.cutoff())
    throw std::invalid_argument("kernel length does not match cutoff");
  Eigen::MatrixXd coeffs = gft(spec, z);
  coeffs.array().colwise() *= kernel.array();
  return spec.eigenvectors * coeffs;
}

/// Normalized eigenvalue distribution with an epsilon floor: entries
/// max(lambda_i, eps * sum(lambda)) renormalized to sum 1.
inline SpectralKernel extract_kernel(const PartialSpectrum& spec,
                                     double epsilon = 1e-10) {
  const int phi = spec.cutoff();
  if (phi < 2) throw std::invalid_argument("kernel needs at least 2 entries");
  const double total = spec.eigenvalues.sum();
  if (spec.eigenvalues.maxCoeff() < 1e-12)
    throw std::runtime_error("degenerate spectrum");
  SpectralKernel k;
  k.epsilon = epsilon;
  const double floor = epsilon * total;
  k.probs = spec.eigenvalues.cwiseMax(floor);
  k.probs /= k.probs.sum();
  return k;
}

/// D_KL(reference || client) with natural log. Both kernels must be the same
/// length and epsilon-smoothed.
inline double kl_divergence(const SpectralKernel& reference,
                            const SpectralKernel& client) {
  if (reference.size() != client.size())
    throw std::invalid_argument("kernel length mismatch");
  double d = 0.0;
  for (int i = 0; i < reference.size(); ++i) {
    const double p = reference.probs[i];
    const double q = client.probs[i];
    if (p <= 0.0) continue;
    if (q <= 0.0) throw std::invalid_argument("client kernel has zero mass");
    d += p * std::log(p / q);
  }
  return d;
}

/// Eigengap delta = lambda_{k+1} - lambda_k (1-indexed, per the usual
/// community-count convention).
inline double eigengap(const PartialSpectrum& spec, int k) {
  if (k < 1 || k + 1 > spec.cutoff())
    throw std::invalid_argument("eigengap index out of range");
  return spec.eigenvalues[k] - spec.eigenvalues[k - 1];
}

/// Truncates a kernel to `len` entries and renormalizes. Used when a tiny
/// client cannot support the configured cutoff.
inline SpectralKernel truncate_kernel(const SpectralKernel& k, int len) {
  if (len > k.size() || len < 2)
    throw std::invalid_argument("bad truncation length");
  SpectralKernel out;
  out.epsilon = k.epsilon;
  out.probs = k.probs.head(len);
  out.probs /= out.probs.sum();
  return out;
}

/// Effective cutoff for a graph with `n` nodes when `requested` was asked
/// for: graphs smaller than the request are clamped to n - 1 (never below 2).
inline int clamp_cutoff(int requested, int n) {
  if (n <= 2) return 2;
  if (requested <= n) return std::max(2, requested);
  return std::max(2, n - 1);
}

// --- Spectrum cache ---------------------------------------------------------
//
// Eigendecomposition happens once per (graph, Phi, seed) during preprocessing;
// the result is memoized in a little-endian binary file.

namespace detail {

constexpr std::uint32_t kSpectrumMagic = 0x4c505343;  // "LPSC"
constexpr std::uint32_t kSpectrumVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("truncated spectrum file");
  return v;
}

}  // namespace detail

inline void save_spectrum(const std::string& path,
                          const PartialSpectrum& spec) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  detail::write_pod(os, detail::kSpectrumMagic);
  detail::write_pod(os, detail::kSpectrumVersion);
  detail::write_pod(os, static_cast<std::int64_t>(spec.dim()));
  detail::write_pod(os, static_cast<std::int64_t>(spec.cutoff()));
  os.write(reinterpret_cast<const char*>(spec.eigenvalues.data()),
           sizeof(double) * spec.cutoff());
  os.write(reinterpret_cast<const char*>(spec.eigenvectors.data()),
           sizeof(double) * spec.dim() * spec.cutoff());
  if (!os) throw std::runtime_error("failed writing " + path);
}

inline PartialSpectrum load_spectrum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  if (detail::read_pod<std::uint32_t>(is) != detail::kSpectrumMagic)
    throw std::runtime_error(path + " is not a spectrum cache file");
  if (detail::read_pod<std::uint32_t>(is) != detail::kSpectrumVersion)
    throw std::runtime_error(path + " has an unsupported version");
  const auto n = detail::read_pod<std::int64_t>(is);
  const auto phi = detail::read_pod<std::int64_t>(is);
  PartialSpectrum spec;
  spec.eigenvalues.resize(phi);
  spec.eigenvectors.resize(n, phi);
  is.read(reinterpret_cast<char*>(spec.eigenvalues.data()),
          sizeof(double) * phi);
  is.read(reinterpret_cast<char*>(spec.eigenvectors.data()),
          sizeof(double) * n * phi);
  if (!is) throw std::runtime_error("truncated spectrum file " + path);
  return spec;
}

inline std::string spectrum_cache_path(const std::string& dir,
                                       std::uint64_t graph_hash, int phi,
                                       std::uint64_t seed) {
  char name[96];
  std::snprintf(name, sizeof(name), "spectrum_%016llx_phi%d_seed%llu.bin",
                static_cast<unsigned long long>(graph_hash), phi,
                static_cast<unsigned long long>(seed));
  return (std::filesystem::path(dir) / name).string();
}

/// Cache-aware eigendecomposition: loads a previous result if one matches
/// (graph hash, phi, seed), otherwise computes and stores it.
inline PartialSpectrum cached_partial_eigs(const std::string& cache_dir,
                                           const BipartiteGraph& g,
                                           const SparseSymmetricMatrix& lap,
                                           int phi, std::uint64_t seed) {
  if (cache_dir.empty()) return lanczos_partial_eigs(lap, phi, seed);
  std::filesystem::create_directories(cache_dir);
  const std::string path =
      spectrum_cache_path(cache_dir, g.content_hash(), phi, seed);
  if (std::filesystem::exists(path)) return load_spectrum(path);
  PartialSpectrum spec = lanczos_partial_eigs(lap, phi, seed);
  save_spectrum(path, spec);
  return spec;
}

}  // namespace lpsfed
