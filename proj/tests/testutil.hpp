#pragma once

// Shared fixtures and independent oracles. Everything here is deliberately
// written without touching the library's own computation paths it checks:
// finite differences for gradients, exhaustive scans for retrieval, a
// closed-form solver for the local surrogate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "twinsys/dataset.hpp"
#include "twinsys/network.hpp"
#include "twinsys/rng.hpp"

namespace tu {

using namespace twinsys;

// Scratch directory, removed eagerly on construction so reruns start clean.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    dir_ = std::filesystem::temp_directory_path() / ("twinsys_test_" + tag);
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

 private:
  std::filesystem::path dir_;
};

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// --- gradient oracle: central finite differences over the full loss ---

inline double loss_of(const NetworkModel& m, const Tensor& x, std::size_t cls,
                      const Tensor& target) {
  Tensor y = forward(m, x);
  if (m.task == LabelKind::classification) return -std::log(std::max(y[cls], 1e-300));
  double loss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double d = y[i] - target[i];
    loss += d * d;
  }
  return loss;
}

struct FdResult {
  double max_rel_err = 0.0;
  std::size_t n_checked = 0;
};

// Perturbs every parameter (and every input entry) by +-h and compares the
// centered difference against the analytic gradient. Relative error uses
// max(1, |a|, |b|) as denominator.
inline FdResult finite_difference_check(NetworkModel m, const Tensor& x, std::size_t cls,
                                        const Tensor& target, double h = 1e-4) {
  Gradients g = m.task == LabelKind::classification ? gradients(m, x, cls)
                                                    : gradients(m, x, target);
  FdResult res;
  auto update = [&](double analytic, double fd) {
    double rel = std::abs(analytic - fd) /
                 std::max({1.0, std::abs(analytic), std::abs(fd)});
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.n_checked;
  };

  for (std::size_t li = 0; li < m.params.size(); ++li) {
    for (int which = 0; which < 2; ++which) {
      Tensor& t = which == 0 ? m.params[li].weights : m.params[li].bias;
      const Tensor& gt = which == 0 ? g.params[li].weights : g.params[li].bias;
      for (std::size_t j = 0; j < t.size(); ++j) {
        const double save = t[j];
        t[j] = save + h;
        double lp = loss_of(m, x, cls, target);
        t[j] = save - h;
        double lm = loss_of(m, x, cls, target);
        t[j] = save;
        update(gt[j], (lp - lm) / (2.0 * h));
      }
    }
  }
  Tensor xp = x;
  for (std::size_t j = 0; j < xp.size(); ++j) {
    const double save = xp[j];
    xp[j] = save + h;
    double lp = loss_of(m, xp, cls, target);
    xp[j] = save - h;
    double lm = loss_of(m, xp, cls, target);
    xp[j] = save;
    update(g.input[j], (lp - lm) / (2.0 * h));
  }
  return res;
}

// --- retrieval oracle: exhaustive weighted scan, ties by ascending id ---

struct OracleNeighbor {
  std::size_t id;
  double dist;
};

inline std::vector<OracleNeighbor> brute_force_knn(
    const std::vector<std::vector<double>>& base, const std::vector<double>& query,
    const std::vector<double>* weights, std::size_t k) {
  std::vector<OracleNeighbor> all;
  all.reserve(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < query.size(); ++j) {
      double d = query[j] - base[i][j];
      acc += (weights ? (*weights)[j] : 1.0) * d * d;
    }
    all.push_back({i, std::sqrt(acc)});
  }
  std::sort(all.begin(), all.end(), [](const OracleNeighbor& a, const OracleNeighbor& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.id < b.id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

// --- surrogate oracle: ridge-weighted least squares via Gauss-Jordan ---
// Solves min_b sum_s pi_s (y_s - b0 - b . z_s)^2 + ridge * |b|^2 (intercept
// unpenalized) by explicitly inverting the normal-equation matrix.

inline std::vector<double> wls_ridge_oracle(const std::vector<std::vector<double>>& z,
                                            const std::vector<double>& y,
                                            const std::vector<double>& pi, double ridge) {
  const std::size_t n = z.size();
  const std::size_t d = z[0].size();
  const std::size_t m = d + 1;
  std::vector<std::vector<double>> a(m, std::vector<double>(m, 0.0));
  std::vector<double> rhs(m, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<double> row(m);
    row[0] = 1.0;
    for (std::size_t j = 0; j < d; ++j) row[j + 1] = z[s][j];
    for (std::size_t p = 0; p < m; ++p) {
      rhs[p] += pi[s] * row[p] * y[s];
      for (std::size_t q = 0; q < m; ++q) a[p][q] += pi[s] * row[p] * row[q];
    }
  }
  for (std::size_t j = 1; j < m; ++j) a[j][j] += ridge;

  // Gauss-Jordan with partial pivoting, inverse-free solve on [A | rhs].
  for (std::size_t col = 0; col < m; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(rhs[col], rhs[piv]);
    const double scale = a[col][col];
    for (std::size_t q = 0; q < m; ++q) a[col][q] /= scale;
    rhs[col] /= scale;
    for (std::size_t r = 0; r < m; ++r) {
      if (r == col || a[r][col] == 0.0) continue;
      const double f = a[r][col];
      for (std::size_t q = 0; q < m; ++q) a[r][q] -= f * a[col][q];
      rhs[r] -= f * rhs[col];
    }
  }
  return std::vector<double>(rhs.begin() + 1, rhs.end());  // drop intercept
}

// --- synthetic data ---

// Two Gaussian blobs; the first `informative` features carry the class
// separation, the rest are identically distributed noise in both classes.
inline Dataset make_blobs(std::size_t n, std::size_t informative, std::size_t noise,
                          double separation, double noise_std, std::uint64_t seed) {
  Dataset ds;
  const std::size_t d = informative + noise;
  ds.schema.label_kind = LabelKind::classification;
  ds.schema.num_classes = 2;
  ds.schema.feature_count = d;
  ds.schema.input_shape = InputShape::flat(d);
  for (std::size_t i = 0; i < d; ++i)
    ds.schema.feature_names.push_back((i < informative ? "inf" : "noise") +
                                      std::to_string(i));
  ds.schema.label_names = {"a", "b"};
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    Case c;
    c.id = c.provenance = i;
    const std::size_t cls = i % 2;
    const double mu = cls == 0 ? -separation / 2.0 : separation / 2.0;
    for (std::size_t f = 0; f < informative; ++f) c.features.push_back(rng.normal(mu, 1.0));
    for (std::size_t f = 0; f < noise; ++f) c.features.push_back(rng.normal(0.0, noise_std));
    c.label = static_cast<double>(cls);
    ds.cases.push_back(std::move(c));
  }
  ds.origin = fnv1a64("blobs:" + std::to_string(seed) + ":" + std::to_string(n));
  return ds;
}

inline std::string be32(std::uint32_t v) {
  std::string s(4, '\0');
  s[0] = static_cast<char>((v >> 24) & 0xff);
  s[1] = static_cast<char>((v >> 16) & 0xff);
  s[2] = static_cast<char>((v >> 8) & 0xff);
  s[3] = static_cast<char>(v & 0xff);
  return s;
}

inline std::string idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols,
                              const std::vector<std::uint8_t>& pixels) {
  std::string s = be32(2051) + be32(count) + be32(rows) + be32(cols);
  for (std::uint8_t p : pixels) s += static_cast<char>(p);
  return s;
}

inline std::string idx_labels(const std::vector<std::uint8_t>& labels) {
  std::string s = be32(2049) + be32(static_cast<std::uint32_t>(labels.size()));
  for (std::uint8_t l : labels) s += static_cast<char>(l);
  return s;
}

}  // namespace tu
