#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinsys/common.hpp"
#include "twinsys/dataset.hpp"
#include "twinsys/network.hpp"
#include "twinsys/rng.hpp"
#include "twinsys/tensor.hpp"

namespace twinsys {

enum class Scheme {
  sensitivity,
  activity,
  relevance,
  saliency,
  surrogate,
  contribution,
  uniform,
};

inline std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::sensitivity: return "sensitivity";
    case Scheme::activity: return "activity";
    case Scheme::relevance: return "relevance";
    case Scheme::saliency: return "saliency";
    case Scheme::surrogate: return "surrogate";
    case Scheme::contribution: return "contribution";
    case Scheme::uniform: return "uniform";
  }
  throw Error("bad scheme");
}

inline Scheme scheme_from(const std::string& s) {
  if (s == "sensitivity") return Scheme::sensitivity;
  if (s == "activity") return Scheme::activity;
  if (s == "relevance") return Scheme::relevance;
  if (s == "saliency") return Scheme::saliency;
  if (s == "surrogate") return Scheme::surrogate;
  if (s == "contribution") return Scheme::contribution;
  if (s == "uniform") return Scheme::uniform;
  throw Error("unknown scheme: " + s);
}

// A normalized weight vector over a feature space. `space` is "input" or
// "layer:<name>"; global weights describe the model as a whole, local weights
// describe it around one query.
struct FeatureWeights {
  Scheme scheme = Scheme::uniform;
  bool local = false;
  std::optional<std::size_t> query_id;
  std::string space = "input";
  std::vector<double> weights;
  std::vector<double> signed_contributions;  // contribution scheme only
  bool uniform_fallback = false;

  std::string scope_str() const {
    if (!local) return "global";
    return query_id ? "local:" + std::to_string(*query_id) : "local";
  }

  // Checks the weight-vector contract: non-negative, finite, sum 1 +- 1e-9.
  void validate() const {
    if (weights.empty()) throw Error("weights: empty vector");
    double sum = 0.0;
    for (double w : weights) {
      if (!std::isfinite(w)) throw Error("weights: non-finite entry");
      if (w < 0.0) throw Error("weights: negative entry");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw Error("weights: sum is " + std::to_string(sum) + ", expected 1");
  }
};

// Resolves a space string against a model: -1 for the input space, else the
// index of the named layer.
inline int space_layer_index(const NetworkModel& m, const std::string& space) {
  if (space == "input") return -1;
  if (space.rfind("layer:", 0) == 0) {
    const std::string name = space.substr(6);
    int idx = m.layer_index(name);
    if (idx < 0) throw Error("unknown layer name: " + name);
    return idx;
  }
  throw Error("bad space '" + space + "': expected 'input' or 'layer:NAME'");
}

inline std::size_t space_dimension(const NetworkModel& m, const std::string& space) {
  int idx = space_layer_index(m, space);
  return shape_count(m.acts_shape[static_cast<std::size_t>(idx + 1)]);
}

namespace detail {

// Divides raw scores by their sum; a vanishing sum falls back to uniform
// weights so downstream retrieval stays total.
inline void finalize_weights(FeatureWeights& fw) {
  double sum = 0.0;
  for (double v : fw.weights) {
    if (!std::isfinite(v)) throw Error(scheme_name(fw.scheme) + ": non-finite raw score");
    sum += v;
  }
  if (sum <= 0.0) {
    fw.weights.assign(fw.weights.size(), 1.0 / static_cast<double>(fw.weights.size()));
    fw.uniform_fallback = true;
  } else {
    for (double& v : fw.weights) v /= sum;
  }
}

// Index of the first-hidden activation: the first dense layer's output, after
// the immediately-following elementwise nonlinearity when there is one.
inline std::size_t first_hidden_layer(const NetworkModel& m, Scheme scheme) {
  if (m.layers[0].kind != LayerKind::dense)
    throw Error(scheme_name(scheme) + " weights require a dense first layer (model starts with " +
                layer_kind_name(m.layers[0].kind) + ")");
  if (m.layers.size() > 1 &&
      (m.layers[1].kind == LayerKind::relu || m.layers[1].kind == LayerKind::sigmoid))
    return 1;
  return 0;
}

// Mean over the dataset of the Jacobian of the pre-softmax outputs with
// respect to the activation of layer `h_idx`, flattened row-major (k, j).
// For a plain two-layer MLP this is exactly the second weight matrix.
inline std::vector<double> mean_output_jacobian(const NetworkModel& m, const Dataset& data,
                                                std::size_t h_idx) {
  const std::size_t L = m.logits_layer();
  const std::size_t K = shape_count(m.acts_shape[L + 1]);
  const std::size_t H = shape_count(m.acts_shape[h_idx + 1]);
  const std::size_t n = data.size();

  std::vector<std::vector<double>> slots(n);
  parallel_for(n, [&](std::size_t c) {
    ForwardCache cache = forward_cached(m, case_input(m, data.cases[c]));
    std::vector<double> jac(K * H, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
      Tensor seed(m.acts_shape[L + 1]);
      seed[k] = 1.0;
      Tensor g = backward_to(m, cache, static_cast<int>(L), std::move(seed),
                             static_cast<int>(h_idx), nullptr);
      for (std::size_t j = 0; j < H; ++j) jac[k * H + j] = g[j];
    }
    slots[c] = std::move(jac);
  });

  std::vector<double> mean(K * H, 0.0);
  for (std::size_t c = 0; c < n; ++c)
    for (std::size_t e = 0; e < mean.size(); ++e) mean[e] += slots[c][e];
  for (double& v : mean) v /= static_cast<double>(n);
  return mean;
}

}  // namespace detail

// Global feature weights over the input space. Raw scores per scheme:
//   sensitivity  mean over the data of the L1 output change when one feature
//                is clamped to its train mean
//   activity     sum_j (W1_ij)^2 Var[h_j], h the first-hidden activation
//   saliency     sum_j sum_k (W1_ij)^2 (W2_kj)^2
//   relevance    sum_j |W1_ij| max_k |W2_kj|
// where W2 is the data-mean Jacobian of the pre-softmax outputs with respect
// to the first-hidden activation (the literal second weight matrix for a
// two-layer MLP). Scores are normalized to sum 1, with a uniform fallback
// when they vanish.
inline FeatureWeights global_weights(const NetworkModel& m, const Dataset& train,
                                     Scheme scheme) {
  if (train.cases.empty()) throw Error("global_weights: empty dataset");
  const std::size_t d = shape_count(m.input_shape);
  if (train.schema.feature_count != d)
    throw Error("global_weights: dataset features (" +
                std::to_string(train.schema.feature_count) + ") do not match model input " +
                shape_str(m.input_shape));

  FeatureWeights fw;
  fw.scheme = scheme;
  fw.local = false;
  fw.space = "input";
  fw.weights.assign(d, 0.0);
  const std::size_t n = train.size();

  switch (scheme) {
    case Scheme::sensitivity: {
      const std::vector<double> mu = train.feature_means();
      std::vector<std::vector<double>> slots(n);
      parallel_for(n, [&](std::size_t c) {
        std::vector<double> x = train.cases[c].features;
        const Tensor y0 = forward(m, Tensor(m.input_shape, x));
        std::vector<double> score(d, 0.0);
        for (std::size_t i = 0; i < d; ++i) {
          const double keep = x[i];
          x[i] = mu[i];
          const Tensor y1 = forward(m, Tensor(m.input_shape, x));
          x[i] = keep;
          double l1 = 0.0;
          for (std::size_t k = 0; k < y0.size(); ++k) l1 += std::abs(y0[k] - y1[k]);
          score[i] = l1;
        }
        slots[c] = std::move(score);
      });
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t i = 0; i < d; ++i) fw.weights[i] += slots[c][i];
      for (double& v : fw.weights) v /= static_cast<double>(n);
      break;
    }
    case Scheme::activity: {
      const std::size_t h_idx = detail::first_hidden_layer(m, scheme);
      const std::size_t H = shape_count(m.acts_shape[h_idx + 1]);
      std::vector<std::vector<double>> hs(n);
      parallel_for(n, [&](std::size_t c) {
        Tensor a = case_input(m, train.cases[c]);
        for (std::size_t li = 0; li <= h_idx; ++li)
          a = detail::layer_forward(m, li, a, nullptr);
        hs[c] = a.data();
      });
      std::vector<double> mean(H, 0.0), var(H, 0.0);
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t j = 0; j < H; ++j) mean[j] += hs[c][j];
      for (double& v : mean) v /= static_cast<double>(n);
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t j = 0; j < H; ++j) {
          const double dlt = hs[c][j] - mean[j];
          var[j] += dlt * dlt;
        }
      for (double& v : var) v /= static_cast<double>(n);

      const Tensor& w1 = m.params[0].weights;  // (H0, d); H0 == H
      for (std::size_t i = 0; i < d; ++i) {
        double r = 0.0;
        for (std::size_t j = 0; j < H; ++j) {
          const double w = w1[j * d + i];
          r += w * w * var[j];
        }
        fw.weights[i] = r;
      }
      break;
    }
    case Scheme::saliency:
    case Scheme::relevance: {
      const std::size_t h_idx = detail::first_hidden_layer(m, scheme);
      const std::size_t H = shape_count(m.acts_shape[h_idx + 1]);
      const std::size_t L = m.logits_layer();
      const std::size_t K = shape_count(m.acts_shape[L + 1]);
      const std::vector<double> w2 = detail::mean_output_jacobian(m, train, h_idx);
      const Tensor& w1 = m.params[0].weights;

      if (scheme == Scheme::saliency) {
        std::vector<double> col(H, 0.0);  // sum_k (W2_kj)^2
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < H; ++j) col[j] += w2[k * H + j] * w2[k * H + j];
        for (std::size_t i = 0; i < d; ++i) {
          double r = 0.0;
          for (std::size_t j = 0; j < H; ++j) {
            const double w = w1[j * d + i];
            r += w * w * col[j];
          }
          fw.weights[i] = r;
        }
      } else {
        std::vector<double> col(H, 0.0);  // max_k |W2_kj|
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < H; ++j)
            col[j] = std::max(col[j], std::abs(w2[k * H + j]));
        for (std::size_t i = 0; i < d; ++i) {
          double r = 0.0;
          for (std::size_t j = 0; j < H; ++j) r += std::abs(w1[j * d + i]) * col[j];
          fw.weights[i] = r;
        }
      }
      break;
    }
    default:
      throw Error("global_weights: scheme " + scheme_name(scheme) +
                  " is not a global weighting scheme");
  }

  detail::finalize_weights(fw);
  return fw;
}

// Local linear surrogate around one query.
struct SurrogateConfig {
  std::size_t n_samples = 1000;
  double perturb_scale = 0.3;
  double kernel_width = 0.0;  // 0 resolves to 0.75 * sqrt(d)
  double ridge = 1e-6;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_samples == 0) throw Error("surrogate: n_samples must be positive");
    if (!(perturb_scale > 0.0)) throw Error("surrogate: perturb_scale must be positive");
    if (kernel_width < 0.0) throw Error("surrogate: kernel_width must be positive");
    if (ridge < 0.0) throw Error("surrogate: ridge must be non-negative");
  }

  double resolved_kernel_width(std::size_t d) const {
    return kernel_width > 0.0 ? kernel_width
                              : 0.75 * std::sqrt(static_cast<double>(d));
  }
};

// The perturbation set the surrogate fits on, exposed so an external check
// can fit the same samples. Row s is query + eps, eps_i ~ N(0, (scale*sigma_i)^2),
// drawn feature-minor under cfg.seed.
inline std::vector<std::vector<double>> surrogate_perturbations(
    const std::vector<double>& query, const std::vector<double>& sigmas,
    const SurrogateConfig& cfg) {
  if (sigmas.size() != query.size()) throw Error("surrogate: sigma count mismatch");
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> rows(cfg.n_samples);
  for (auto& row : rows) {
    row.resize(query.size());
    for (std::size_t i = 0; i < query.size(); ++i) {
      const double sd = cfg.perturb_scale * (sigmas[i] == 0.0 ? 1.0 : sigmas[i]);
      row[i] = query[i] + rng.normal(0.0, sd);
    }
  }
  return rows;
}

struct SurrogateFit {
  std::vector<double> coefficients;
  double intercept = 0.0;
};

namespace detail {

// Solves A x = b by Gaussian elimination with partial pivoting; A is the
// (d+1)x(d+1) normal-equation matrix, row-major, destroyed in place.
inline std::vector<double> solve_dense(std::vector<double>& a, std::vector<double>& b,
                                       std::size_t n) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (std::abs(a[piv * n + col]) < 1e-300) throw Error("surrogate: singular system");
    if (piv != col) {
      for (std::size_t cc = 0; cc < n; ++cc) std::swap(a[col * n + cc], a[piv * n + cc]);
      std::swap(b[col], b[piv]);
    }
    const double inv = 1.0 / a[col * n + col];
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] * inv;
      if (f == 0.0) continue;
      for (std::size_t cc = col; cc < n; ++cc) a[r * n + cc] -= f * a[col * n + cc];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n, 0.0);
  for (std::size_t ri = n; ri-- > 0;) {
    double acc = b[ri];
    for (std::size_t cc = ri + 1; cc < n; ++cc) acc -= a[ri * n + cc] * x[cc];
    x[ri] = acc / a[ri * n + ri];
  }
  return x;
}

}  // namespace detail

// Fits the ridge-regularized weighted least squares y ~ b0 + beta . (x - q)
// on the seeded perturbation set, proximity-weighted by
// exp(-|x'-q|^2 / kw^2). The intercept is unpenalized.
inline SurrogateFit surrogate_fit(const NetworkModel& m, const std::vector<double>& query,
                                  const Dataset& train, const SurrogateConfig& cfg) {
  cfg.validate();
  const std::size_t d = shape_count(m.input_shape);
  if (query.size() != d)
    throw Error("surrogate: query has " + std::to_string(query.size()) +
                " features, model expects " + std::to_string(d));
  if (cfg.n_samples < d + 1)
    throw Error("surrogate: n_samples (" + std::to_string(cfg.n_samples) +
                ") must be at least d+1 (" + std::to_string(d + 1) +
                "); the system is underdetermined");
  if (train.cases.empty()) throw Error("surrogate: empty dataset");

  const std::vector<double> sigmas = train.feature_stds();
  const std::vector<std::vector<double>> xs = surrogate_perturbations(query, sigmas, cfg);

  // Target: predicted-class probability (classification) or first output.
  std::size_t target = 0;
  if (m.task == LabelKind::classification) {
    const Tensor yq = forward(m, Tensor(m.input_shape, query));
    for (std::size_t k = 1; k < yq.size(); ++k)
      if (yq[k] > yq[target]) target = k;
  }

  const double kw = cfg.resolved_kernel_width(d);
  const std::size_t n = cfg.n_samples;
  std::vector<double> ys(n), pis(n);
  parallel_for(n, [&](std::size_t s) {
    const Tensor out = forward(m, Tensor(m.input_shape, xs[s]));
    ys[s] = out[target];
    double d2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dv = xs[s][i] - query[i];
      d2 += dv * dv;
    }
    pis[s] = std::exp(-d2 / (kw * kw));
  });
  if (!all_finite(ys)) throw Error("surrogate: non-finite model output");

  // Normal equations over [1, z] with z = x' - q; ridge hits slopes only.
  const std::size_t p = d + 1;
  std::vector<double> a(p * p, 0.0), rhs(p, 0.0), row(p);
  for (std::size_t s = 0; s < n; ++s) {
    row[0] = 1.0;
    for (std::size_t i = 0; i < d; ++i) row[i + 1] = xs[s][i] - query[i];
    const double pi = pis[s];
    for (std::size_t r = 0; r < p; ++r) {
      const double pr = pi * row[r];
      for (std::size_t c = r; c < p; ++c) a[r * p + c] += pr * row[c];
      rhs[r] += pr * ys[s];
    }
  }
  for (std::size_t r = 1; r < p; ++r) {
    for (std::size_t c = 0; c < r; ++c) a[r * p + c] = a[c * p + r];
    a[r * p + r] += cfg.ridge;
  }

  std::vector<double> beta = detail::solve_dense(a, rhs, p);
  SurrogateFit fit;
  fit.intercept = beta[0];
  fit.coefficients.assign(beta.begin() + 1, beta.end());
  if (!all_finite(fit.coefficients)) throw Error("surrogate: non-finite coefficients");
  return fit;
}

inline FeatureWeights surrogate_weights(const NetworkModel& m, const std::vector<double>& query,
                                        const Dataset& train, const SurrogateConfig& cfg) {
  const SurrogateFit fit = surrogate_fit(m, query, train, cfg);
  FeatureWeights fw;
  fw.scheme = Scheme::surrogate;
  fw.local = true;
  fw.space = "input";
  fw.weights.resize(fit.coefficients.size());
  // Solver round-off leaves ~1e-16 residue on a constant model; coefficients
  // below this scale-aware floor count as zero so the fallback can trigger.
  const double tol = 1e-9 * std::max(1.0, std::abs(fit.intercept));
  for (std::size_t i = 0; i < fw.weights.size(); ++i) {
    const double a = std::abs(fit.coefficients[i]);
    fw.weights[i] = a < tol ? 0.0 : a;
  }
  detail::finalize_weights(fw);
  return fw;
}

// Default reference point for contributions: the train feature mean for flat
// inputs, the all-zeros image for image inputs.
inline Tensor default_baseline(const NetworkModel& m, const Dataset& train) {
  if (m.input_shape.size() == 3) return Tensor(m.input_shape);
  if (train.cases.empty()) throw Error("baseline: empty dataset");
  return Tensor(m.input_shape, train.feature_means());
}

// DeepLIFT-style contributions via the Rescale rule, propagated from the
// target pre-softmax output back to `space`. Linear layers carry multipliers
// through their weights; an elementwise nonlinearity scales by dout/din
// (analytic derivative at the baseline when |din| < 1e-7); maxpool applies
// the same rule at the query's selected cell. Contributions satisfy
// sum C = logit(query) - logit(baseline) for the target.
inline FeatureWeights contribution_weights(const NetworkModel& m, const Tensor& query,
                                           const Tensor& baseline, std::size_t target,
                                           const std::string& space = "input") {
  if (baseline.shape() != query.shape())
    throw Error("contribution: baseline shape " + shape_str(baseline.shape()) +
                " does not match query shape " + shape_str(query.shape()));
  const int stop = space_layer_index(m, space);
  const std::size_t L = m.logits_layer();
  if (stop > static_cast<int>(L))
    throw Error("contribution: space '" + space + "' does not precede the model output");

  const detail::ForwardCache fq = detail::forward_cached(m, query);
  const detail::ForwardCache fb = detail::forward_cached(m, baseline);
  if (target >= fq.acts[L + 1].size())
    throw Error("contribution: invalid target index " + std::to_string(target) + " (model has " +
                std::to_string(fq.acts[L + 1].size()) + " outputs)");

  Tensor mult(m.acts_shape[L + 1]);
  mult[target] = 1.0;

  for (int li = static_cast<int>(L); li > stop; --li) {
    const std::size_t i = static_cast<std::size_t>(li);
    const LayerSpec& l = m.layers[i];
    const Tensor& inq = fq.acts[i];
    const Tensor& inb = fb.acts[i];
    const Tensor& outq = fq.acts[i + 1];
    const Tensor& outb = fb.acts[i + 1];
    switch (l.kind) {
      case LayerKind::dense: {
        const Tensor& w = m.params[i].weights;
        Tensor gin({l.in});
        for (std::size_t o = 0; o < l.out; ++o) {
          const double* wrow = w.data().data() + o * l.in;
          for (std::size_t j = 0; j < l.in; ++j) gin[j] += mult[o] * wrow[j];
        }
        mult = std::move(gin);
        break;
      }
      case LayerKind::conv2d: {
        const Tensor& w = m.params[i].weights;
        const std::size_t K = l.kernel;
        const std::size_t OH = outq.shape()[1], OW = outq.shape()[2];
        Tensor gin(inq.shape());
        for (std::size_t oc = 0; oc < l.out_ch; ++oc)
          for (std::size_t y = 0; y < OH; ++y)
            for (std::size_t x = 0; x < OW; ++x) {
              const double g = mult.at(oc, y, x);
              if (g == 0.0) continue;
              for (std::size_t ic = 0; ic < l.in_ch; ++ic)
                for (std::size_t ky = 0; ky < K; ++ky)
                  for (std::size_t kx = 0; kx < K; ++kx)
                    gin.at(ic, y + ky, x + kx) +=
                        g * w[((oc * l.in_ch + ic) * K + ky) * K + kx];
            }
        mult = std::move(gin);
        break;
      }
      case LayerKind::maxpool: {
        Tensor gin(inq.shape());
        const std::vector<std::size_t>& arg = fq.pool_argmax[i];
        for (std::size_t o = 0; o < mult.size(); ++o) {
          const std::size_t sel = arg[o];
          const double din = inq[sel] - inb[sel];
          const double dout = outq[o] - outb[o];
          const double scale = std::abs(din) < 1e-7 ? 1.0 : dout / din;
          gin[sel] += mult[o] * scale;
        }
        mult = std::move(gin);
        break;
      }
      case LayerKind::flatten: {
        mult = mult.reshaped(inq.shape());
        break;
      }
      case LayerKind::relu:
      case LayerKind::sigmoid: {
        Tensor gin = mult;
        for (std::size_t j = 0; j < gin.size(); ++j) {
          const double din = inq[j] - inb[j];
          if (std::abs(din) < 1e-7) {
            const double deriv = l.kind == LayerKind::relu
                                     ? (inb[j] > 0.0 ? 1.0 : 0.0)
                                     : outb[j] * (1.0 - outb[j]);
            gin[j] *= deriv;
          } else {
            gin[j] *= (outq[j] - outb[j]) / din;
          }
        }
        mult = std::move(gin);
        break;
      }
      case LayerKind::softmax:
        throw Error("contribution: unexpected softmax before the output layer");
    }
  }

  const Tensor& aq = fq.acts[static_cast<std::size_t>(stop + 1)];
  const Tensor& ab = fb.acts[static_cast<std::size_t>(stop + 1)];
  FeatureWeights fw;
  fw.scheme = Scheme::contribution;
  fw.local = true;
  fw.space = space;
  fw.signed_contributions.resize(mult.size());
  fw.weights.resize(mult.size());
  for (std::size_t j = 0; j < mult.size(); ++j) {
    const double c = mult[j] * (aq[j] - ab[j]);
    fw.signed_contributions[j] = c;
    fw.weights[j] = std::max(c, 0.0);
  }
  if (!all_finite(fw.signed_contributions))
    throw Error("contribution: non-finite contribution");
  detail::finalize_weights(fw);
  return fw;
}

inline FeatureWeights uniform_weights(std::size_t d) {
  if (d == 0) throw Error("uniform weights need d >= 1");
  FeatureWeights fw;
  fw.scheme = Scheme::uniform;
  fw.local = false;
  fw.space = "input";
  fw.weights.assign(d, 1.0 / static_cast<double>(d));
  return fw;
}

inline nlohmann::json weights_to_json(const FeatureWeights& fw) {
  nlohmann::json j;
  j["scheme"] = scheme_name(fw.scheme);
  j["scope"] = fw.scope_str();
  j["space"] = fw.space;
  j["weights"] = fw.weights;
  if (!fw.signed_contributions.empty())
    j["signed_contributions"] = fw.signed_contributions;
  if (fw.uniform_fallback) j["provenance"] = "uniform-fallback";
  return j;
}

inline FeatureWeights weights_from_json(const nlohmann::json& j) {
  FeatureWeights fw;
  try {
    fw.scheme = scheme_from(j.at("scheme").get<std::string>());
    const std::string scope = j.at("scope").get<std::string>();
    if (scope == "global") {
      fw.local = false;
    } else if (scope == "local") {
      fw.local = true;
    } else if (scope.rfind("local:", 0) == 0) {
      fw.local = true;
      fw.query_id = static_cast<std::size_t>(std::stoull(scope.substr(6)));
    } else {
      throw Error("weights: unknown scope '" + scope + "'");
    }
    fw.space = j.at("space").get<std::string>();
    fw.weights = j.at("weights").get<std::vector<double>>();
    if (j.contains("signed_contributions"))
      fw.signed_contributions = j["signed_contributions"].get<std::vector<double>>();
    fw.uniform_fallback = j.value("provenance", std::string()) == "uniform-fallback";
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed weights: ") + e.what());
  }
  fw.validate();
  return fw;
}

}  // namespace twinsys
