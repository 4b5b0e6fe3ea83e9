#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinsys/common.hpp"
#include "twinsys/dataset.hpp"
#include "twinsys/io.hpp"
#include "twinsys/rng.hpp"
#include "twinsys/tensor.hpp"

namespace twinsys {

enum class LayerKind { dense, conv2d, maxpool, flatten, relu, sigmoid, softmax };

inline std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softmax: return "softmax";
  }
  throw Error("bad layer kind");
}

inline LayerKind layer_kind_from(const std::string& s) {
  if (s == "dense") return LayerKind::dense;
  if (s == "conv2d") return LayerKind::conv2d;
  if (s == "maxpool") return LayerKind::maxpool;
  if (s == "flatten") return LayerKind::flatten;
  if (s == "relu") return LayerKind::relu;
  if (s == "sigmoid") return LayerKind::sigmoid;
  if (s == "softmax") return LayerKind::softmax;
  throw Error("unknown layer kind: " + s);
}

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::string name;  // unique; assigned as kind+index when left empty
  std::size_t in = 0, out = 0;                  // dense
  std::size_t in_ch = 0, out_ch = 0, kernel = 0;  // conv2d
  std::size_t stride = 1, padding = 0;            // conv2d; only (1, 0) supported

  static LayerSpec dense(std::size_t in, std::size_t out) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in = in;
    s.out = out;
    return s;
  }
  static LayerSpec conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.kernel = kernel;
    return s;
  }
  static LayerSpec plain(LayerKind k) {
    LayerSpec s;
    s.kind = k;
    return s;
  }
};

struct LayerParams {
  Tensor weights;  // dense: (out, in); conv2d: (out_ch, in_ch, k, k)
  Tensor bias;     // dense: (out); conv2d: (out_ch)

  bool empty() const { return weights.size() == 0 && bias.size() == 0; }
};

// Ties a trained model to the preprocessing of the data it was trained on,
// so later invocations can reproduce the exact feature space.
struct DataProfile {
  std::string normalize = "none";
  std::vector<std::string> label_names;
  std::vector<std::string> feature_names;

  bool empty() const {
    return normalize == "none" && label_names.empty() && feature_names.empty();
  }
};

inline constexpr const char* kModelVersion = "v1";

struct NetworkModel {
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;  // parallel to layers
  LabelKind task = LabelKind::classification;
  std::uint64_t seed = 0;
  std::string version = kModelVersion;
  std::vector<std::size_t> input_shape;  // {d} or {c, h, w}
  DataProfile profile;

  // Derived: acts_shape[0] is the input shape, acts_shape[i + 1] the output
  // shape of layer i. Rebuilt by validate_shapes(); not serialized.
  std::vector<std::vector<std::size_t>> acts_shape;

  std::size_t output_size() const { return shape_count(acts_shape.back()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const LayerParams& p : params) n += p.weights.size() + p.bias.size();
    return n;
  }

  int layer_index(const std::string& name) const {
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].name == name) return static_cast<int>(i);
    return -1;
  }

  // Index of the layer producing the pre-softmax output (classification) or
  // the final output (regression).
  std::size_t logits_layer() const {
    std::size_t last = layers.size() - 1;
    return layers[last].kind == LayerKind::softmax ? last - 1 : last;
  }

  bool has_conv() const {
    return std::any_of(layers.begin(), layers.end(), [](const LayerSpec& l) {
      return l.kind == LayerKind::conv2d;
    });
  }

  // Last layer before the final dense stage: the default space for latent
  // twinning of convolutional models. Skips the softmax (if any) and the
  // final dense layer; returns the layer whose output feeds that dense.
  int penultimate_layer() const {
    int i = static_cast<int>(layers.size()) - 1;
    if (i >= 0 && layers[static_cast<std::size_t>(i)].kind == LayerKind::softmax) --i;
    if (i >= 0 && layers[static_cast<std::size_t>(i)].kind == LayerKind::dense) --i;
    return i;
  }

  void validate_shapes() {
    if (layers.empty()) throw Error("model: no layers");
    if (shape_count(input_shape) == 0 ||
        (input_shape.size() != 1 && input_shape.size() != 3))
      throw Error("model: input shape must be (d) or (c,h,w)");

    acts_shape.assign(1, input_shape);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const std::vector<std::size_t>& s = acts_shape.back();
      const std::string where = l.name.empty() ? layer_kind_name(l.kind) + std::to_string(i)
                                               : l.name;
      switch (l.kind) {
        case LayerKind::dense: {
          if (l.in == 0 || l.out == 0) throw Error(where + ": zero dimension");
          if (s.size() != 1)
            throw Error(where + ": dense expects a flat input, got " + shape_str(s) +
                        " (insert flatten)");
          if (s[0] != l.in)
            throw Error("shape mismatch at " + where + ": expects " +
                        std::to_string(l.in) + " inputs, got " + std::to_string(s[0]));
          acts_shape.push_back({l.out});
          break;
        }
        case LayerKind::conv2d: {
          if (l.stride != 1 || l.padding != 0)
            throw Error(where + ": only stride 1, padding 0 supported");
          if (l.in_ch == 0 || l.out_ch == 0 || l.kernel == 0)
            throw Error(where + ": zero dimension");
          if (s.size() != 3)
            throw Error(where + ": conv2d expects (c,h,w) input, got " + shape_str(s));
          if (s[0] != l.in_ch)
            throw Error("shape mismatch at " + where + ": expects " +
                        std::to_string(l.in_ch) + " channels, got " + std::to_string(s[0]));
          if (s[1] < l.kernel || s[2] < l.kernel)
            throw Error(where + ": kernel " + std::to_string(l.kernel) +
                        " larger than input " + shape_str(s));
          acts_shape.push_back({l.out_ch, s[1] - l.kernel + 1, s[2] - l.kernel + 1});
          break;
        }
        case LayerKind::maxpool: {
          if (s.size() != 3)
            throw Error(where + ": maxpool expects (c,h,w) input, got " + shape_str(s));
          if (s[1] < 2 || s[2] < 2)
            throw Error(where + ": input too small for 2x2 pooling");
          acts_shape.push_back({s[0], s[1] / 2, s[2] / 2});
          break;
        }
        case LayerKind::flatten: {
          acts_shape.push_back({shape_count(s)});
          break;
        }
        case LayerKind::relu:
        case LayerKind::sigmoid: {
          acts_shape.push_back(s);
          break;
        }
        case LayerKind::softmax: {
          if (s.size() != 1)
            throw Error(where + ": softmax expects a flat input, got " + shape_str(s));
          if (i + 1 != layers.size())
            throw Error(where + ": softmax only allowed as the final layer");
          if (task != LabelKind::classification)
            throw Error(where + ": softmax only allowed for classification");
          acts_shape.push_back(s);
          break;
        }
      }
    }
    if (task == LabelKind::classification &&
        layers.back().kind != LayerKind::softmax)
      throw Error("model: classification requires a final softmax layer");

    // Unique names.
    for (std::size_t i = 0; i < layers.size(); ++i)
      for (std::size_t j = i + 1; j < layers.size(); ++j)
        if (layers[i].name == layers[j].name)
          throw Error("duplicate layer name: " + layers[i].name);
  }
};

// Builds a model from a spec chain. Weights are initialized uniformly in
// [-a, a] with a = sqrt(6 / (fan_in + fan_out)); biases start at zero.
// Identical (specs, seed) give bitwise-identical parameters.
inline NetworkModel build(std::vector<LayerSpec> specs, LabelKind task,
                          std::uint64_t seed, InputShape input_shape) {
  NetworkModel m;
  m.layers = std::move(specs);
  m.task = task;
  m.seed = seed;
  m.input_shape = input_shape.dims;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].name.empty())
      m.layers[i].name = layer_kind_name(m.layers[i].kind) + std::to_string(i);
  m.validate_shapes();

  Rng rng(seed);
  m.params.resize(m.layers.size());
  std::size_t n_params = 0;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const LayerSpec& l = m.layers[i];
    if (l.kind == LayerKind::dense) {
      double a = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
      m.params[i].weights = Tensor({l.out, l.in});
      for (std::size_t j = 0; j < m.params[i].weights.size(); ++j)
        m.params[i].weights[j] = rng.uniform(-a, a);
      m.params[i].bias = Tensor({l.out});
    } else if (l.kind == LayerKind::conv2d) {
      std::size_t fan_in = l.in_ch * l.kernel * l.kernel;
      std::size_t fan_out = l.out_ch * l.kernel * l.kernel;
      double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      m.params[i].weights = Tensor({l.out_ch, l.in_ch, l.kernel, l.kernel});
      for (std::size_t j = 0; j < m.params[i].weights.size(); ++j)
        m.params[i].weights[j] = rng.uniform(-a, a);
      m.params[i].bias = Tensor({l.out_ch});
    }
    n_params += m.params[i].weights.size() + m.params[i].bias.size();
  }
  if (n_params == 0) throw Error("model: no trainable parameters");
  return m;
}

// Post-activation tensors for one forward pass, keyed by layer name.
struct ActivationTrace {
  std::vector<std::pair<std::string, Tensor>> acts;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : acts)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

// Full record of one forward pass: acts[0] is the input, acts[i + 1] the
// output of layer i. Maxpool layers also record the chosen input index per
// output cell (flat, into the layer's input tensor).
struct ForwardCache {
  std::vector<Tensor> acts;
  std::vector<std::vector<std::size_t>> pool_argmax;  // parallel to layers
};

inline Tensor layer_forward(const NetworkModel& m, std::size_t li, const Tensor& in,
                            std::vector<std::size_t>* argmax) {
  const LayerSpec& l = m.layers[li];
  switch (l.kind) {
    case LayerKind::dense: {
      const Tensor& w = m.params[li].weights;
      const Tensor& b = m.params[li].bias;
      Tensor out({l.out});
      for (std::size_t o = 0; o < l.out; ++o) {
        double acc = b[o];
        const double* wrow = w.data().data() + o * l.in;
        for (std::size_t i = 0; i < l.in; ++i) acc += wrow[i] * in[i];
        out[o] = acc;
      }
      return out;
    }
    case LayerKind::conv2d: {
      const Tensor& w = m.params[li].weights;
      const Tensor& b = m.params[li].bias;
      const auto& s = in.shape();
      const std::size_t H = s[1], W = s[2], K = l.kernel;
      const std::size_t OH = H - K + 1, OW = W - K + 1;
      Tensor out({l.out_ch, OH, OW});
      for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
        for (std::size_t y = 0; y < OH; ++y) {
          for (std::size_t x = 0; x < OW; ++x) {
            double acc = b[oc];
            for (std::size_t ic = 0; ic < l.in_ch; ++ic)
              for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx)
                  acc += w[((oc * l.in_ch + ic) * K + ky) * K + kx] *
                         in.at(ic, y + ky, x + kx);
            out.at(oc, y, x) = acc;
          }
        }
      }
      return out;
    }
    case LayerKind::maxpool: {
      const auto& s = in.shape();
      const std::size_t C = s[0], H = s[1], W = s[2];
      const std::size_t OH = H / 2, OW = W / 2;
      Tensor out({C, OH, OW});
      if (argmax) argmax->assign(C * OH * OW, 0);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < OH; ++y) {
          for (std::size_t x = 0; x < OW; ++x) {
            std::size_t best = (c * H + 2 * y) * W + 2 * x;
            double bv = in[best];
            for (std::size_t dy = 0; dy < 2; ++dy)
              for (std::size_t dx = 0; dx < 2; ++dx) {
                std::size_t idx = (c * H + 2 * y + dy) * W + 2 * x + dx;
                if (in[idx] > bv) {
                  bv = in[idx];
                  best = idx;
                }
              }
            out.at(c, y, x) = bv;
            if (argmax) (*argmax)[(c * OH + y) * OW + x] = best;
          }
        }
      }
      return out;
    }
    case LayerKind::flatten:
      return in.reshaped({in.size()});
    case LayerKind::relu: {
      Tensor out = in;
      for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] < 0.0) out[i] = 0.0;
      return out;
    }
    case LayerKind::sigmoid: {
      Tensor out = in;
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-out[i]));
      return out;
    }
    case LayerKind::softmax: {
      Tensor out = in;
      double mx = out[0];
      for (std::size_t i = 1; i < out.size(); ++i) mx = std::max(mx, out[i]);
      double sum = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::exp(out[i] - mx);
        sum += out[i];
      }
      for (std::size_t i = 0; i < out.size(); ++i) out[i] /= sum;
      return out;
    }
  }
  throw Error("bad layer kind");
}

inline ForwardCache forward_cached(const NetworkModel& m, const Tensor& input) {
  if (input.shape() != m.input_shape)
    throw Error("forward: input shape " + shape_str(input.shape()) +
                " does not match model input " + shape_str(m.input_shape));
  ForwardCache cache;
  cache.acts.reserve(m.layers.size() + 1);
  cache.acts.push_back(input);
  cache.pool_argmax.resize(m.layers.size());
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    cache.acts.push_back(
        layer_forward(m, i, cache.acts.back(),
                      m.layers[i].kind == LayerKind::maxpool ? &cache.pool_argmax[i] : nullptr));
  return cache;
}

// Backpropagates grad at the output of layer `from` down to the output of
// layer `to` (to == -1 means all the way to the input). When param_grads is
// given, accumulates parameter gradients for the traversed layers.
inline Tensor backward_to(const NetworkModel& m, const ForwardCache& cache, int from,
                          Tensor grad, int to, std::vector<LayerParams>* param_grads) {
  for (int li = from; li > to; --li) {
    const std::size_t i = static_cast<std::size_t>(li);
    const LayerSpec& l = m.layers[i];
    const Tensor& in = cache.acts[i];
    const Tensor& out = cache.acts[i + 1];
    switch (l.kind) {
      case LayerKind::dense: {
        const Tensor& w = m.params[i].weights;
        if (param_grads) {
          Tensor& gw = (*param_grads)[i].weights;
          Tensor& gb = (*param_grads)[i].bias;
          for (std::size_t o = 0; o < l.out; ++o) {
            gb[o] += grad[o];
            for (std::size_t j = 0; j < l.in; ++j)
              gw[o * l.in + j] += grad[o] * in[j];
          }
        }
        Tensor gin({l.in});
        for (std::size_t o = 0; o < l.out; ++o) {
          const double* wrow = w.data().data() + o * l.in;
          for (std::size_t j = 0; j < l.in; ++j) gin[j] += grad[o] * wrow[j];
        }
        grad = std::move(gin);
        break;
      }
      case LayerKind::conv2d: {
        const Tensor& w = m.params[i].weights;
        const auto& si = in.shape();
        const std::size_t K = l.kernel;
        const std::size_t OH = out.shape()[1], OW = out.shape()[2];
        Tensor gin(si);
        for (std::size_t oc = 0; oc < l.out_ch; ++oc) {
          for (std::size_t y = 0; y < OH; ++y) {
            for (std::size_t x = 0; x < OW; ++x) {
              const double g = grad.at(oc, y, x);
              if (param_grads) (*param_grads)[i].bias[oc] += g;
              for (std::size_t ic = 0; ic < l.in_ch; ++ic)
                for (std::size_t ky = 0; ky < K; ++ky)
                  for (std::size_t kx = 0; kx < K; ++kx) {
                    const std::size_t wi = ((oc * l.in_ch + ic) * K + ky) * K + kx;
                    if (param_grads)
                      (*param_grads)[i].weights[wi] += g * in.at(ic, y + ky, x + kx);
                    gin.at(ic, y + ky, x + kx) += g * w[wi];
                  }
            }
          }
        }
        grad = std::move(gin);
        break;
      }
      case LayerKind::maxpool: {
        Tensor gin(in.shape());
        const std::vector<std::size_t>& arg = cache.pool_argmax[i];
        for (std::size_t o = 0; o < grad.size(); ++o) gin[arg[o]] += grad[o];
        grad = std::move(gin);
        break;
      }
      case LayerKind::flatten: {
        grad = grad.reshaped(in.shape());
        break;
      }
      case LayerKind::relu: {
        Tensor gin = grad;
        for (std::size_t j = 0; j < gin.size(); ++j)
          if (in[j] <= 0.0) gin[j] = 0.0;
        grad = std::move(gin);
        break;
      }
      case LayerKind::sigmoid: {
        Tensor gin = grad;
        for (std::size_t j = 0; j < gin.size(); ++j)
          gin[j] *= out[j] * (1.0 - out[j]);
        grad = std::move(gin);
        break;
      }
      case LayerKind::softmax: {
        // d y_i / d z_j = y_i (delta_ij - y_j)
        double dot = 0.0;
        for (std::size_t j = 0; j < grad.size(); ++j) dot += grad[j] * out[j];
        Tensor gin = grad;
        for (std::size_t j = 0; j < gin.size(); ++j)
          gin[j] = out[j] * (grad[j] - dot);
        grad = std::move(gin);
        break;
      }
    }
  }
  return grad;
}

inline std::vector<LayerParams> zero_like_params(const NetworkModel& m) {
  std::vector<LayerParams> g(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    if (m.params[i].weights.size())
      g[i].weights = Tensor(m.params[i].weights.shape());
    if (m.params[i].bias.size()) g[i].bias = Tensor(m.params[i].bias.shape());
  }
  return g;
}

}  // namespace detail

inline Tensor forward(const NetworkModel& m, const Tensor& input) {
  detail::ForwardCache cache = detail::forward_cached(m, input);
  return cache.acts.back();
}

inline Tensor forward(const NetworkModel& m, const Tensor& input, ActivationTrace& trace) {
  detail::ForwardCache cache = detail::forward_cached(m, input);
  trace.acts.clear();
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    trace.acts.emplace_back(m.layers[i].name, cache.acts[i + 1]);
  return cache.acts.back();
}

// Resumes the forward pass after layer `layer_idx`, whose output is replaced
// by `act`. Used to measure the effect of intervening on an intermediate
// representation.
inline Tensor forward_from(const NetworkModel& m, std::size_t layer_idx, const Tensor& act) {
  if (layer_idx >= m.layers.size()) throw Error("forward_from: layer index out of range");
  if (act.shape() != m.acts_shape[layer_idx + 1])
    throw Error("forward_from: activation shape " + shape_str(act.shape()) +
                " does not match layer output " + shape_str(m.acts_shape[layer_idx + 1]));
  Tensor cur = act;
  for (std::size_t i = layer_idx + 1; i < m.layers.size(); ++i)
    cur = detail::layer_forward(m, i, cur, nullptr);
  return cur;
}

struct Gradients {
  double loss = 0.0;
  std::vector<LayerParams> params;
  Tensor input;
};

// Exact backprop gradients of the cross-entropy loss for one example.
inline Gradients gradients(const NetworkModel& m, const Tensor& input,
                           std::size_t target_class) {
  if (m.task != LabelKind::classification)
    throw Error("gradients: class target on a regression model");
  detail::ForwardCache cache = detail::forward_cached(m, input);
  const Tensor& y = cache.acts.back();
  if (target_class >= y.size()) throw Error("gradients: target class out of range");

  Gradients g;
  g.loss = -std::log(std::max(y[target_class], 1e-300));
  // Seed at the pre-softmax output: d CE / d logit = y - onehot.
  Tensor seed = y;
  seed[target_class] -= 1.0;
  g.params = detail::zero_like_params(m);
  const int logits = static_cast<int>(m.logits_layer());
  g.input = detail::backward_to(m, cache, logits, std::move(seed), -1, &g.params);
  return g;
}

// Exact backprop gradients of the squared-error loss sum_k (y_k - t_k)^2.
inline Gradients gradients(const NetworkModel& m, const Tensor& input, const Tensor& target) {
  if (m.task != LabelKind::regression)
    throw Error("gradients: value target on a classification model");
  detail::ForwardCache cache = detail::forward_cached(m, input);
  const Tensor& y = cache.acts.back();
  if (target.size() != y.size()) throw Error("gradients: target size mismatch");

  Gradients g;
  Tensor seed = y;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - target[i];
    g.loss += d * d;
    seed[i] = 2.0 * d;
  }
  g.params = detail::zero_like_params(m);
  g.input = detail::backward_to(m, cache, static_cast<int>(m.layers.size()) - 1,
                                std::move(seed), -1, &g.params);
  return g;
}

struct Hyper {
  double lr = 0.1;
  double momentum = 0.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-example loss, one entry per epoch
  double final_metric = 0.0;       // training accuracy (classification) or MSE
  std::size_t epochs = 0;
};

inline Tensor case_input(const NetworkModel& m, const Case& c) {
  return Tensor(m.input_shape, c.features);
}

// Mini-batch SGD with classical momentum: v <- mu v + g, p <- p - lr v.
// Batches come from a seeded shuffle per epoch; identical (data, hyper)
// reproduce identical parameters within one build.
inline TrainReport train(NetworkModel& m, const Dataset& data, const Hyper& hyper) {
  if (data.cases.empty()) throw Error("train: empty dataset");
  if (data.schema.feature_count != shape_count(m.input_shape))
    throw Error("train: dataset features (" + std::to_string(data.schema.feature_count) +
                ") do not match model input " + shape_str(m.input_shape));
  if (data.schema.label_kind != m.task)
    throw Error("train: dataset task does not match model task");
  if (m.task == LabelKind::classification && data.schema.num_classes != m.output_size())
    throw Error("train: model outputs " + std::to_string(m.output_size()) +
                " classes, dataset has " + std::to_string(data.schema.num_classes));
  if (hyper.lr < 0.0) throw Error("train: negative learning rate");
  if (hyper.epochs < 1) throw Error("train: epochs must be >= 1");
  if (hyper.batch_size < 1) throw Error("train: batch size must be >= 1");

  Rng rng(hyper.seed);
  std::vector<LayerParams> velocity = detail::zero_like_params(m);

  TrainReport report;
  report.epochs = hyper.epochs;
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::vector<std::size_t> order = rng.permutation(n);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += hyper.batch_size) {
      const std::size_t end = std::min(n, start + hyper.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      std::vector<LayerParams> acc = detail::zero_like_params(m);
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const Case& c = data.cases[order[bi]];
        Tensor x = case_input(m, c);
        Gradients g = m.task == LabelKind::classification
                          ? gradients(m, x, c.cls())
                          : gradients(m, x, Tensor::vec({c.label}));
        batch_loss += g.loss;
        for (std::size_t li = 0; li < acc.size(); ++li) {
          for (std::size_t j = 0; j < acc[li].weights.size(); ++j)
            acc[li].weights[j] += g.params[li].weights[j];
          for (std::size_t j = 0; j < acc[li].bias.size(); ++j)
            acc[li].bias[j] += g.params[li].bias[j];
        }
      }
      if (!std::isfinite(batch_loss))
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                    ", batch " + std::to_string(start / hyper.batch_size + 1));
      epoch_loss += batch_loss;
      for (std::size_t li = 0; li < m.params.size(); ++li) {
        for (std::size_t j = 0; j < m.params[li].weights.size(); ++j) {
          double& v = velocity[li].weights[j];
          v = hyper.momentum * v + acc[li].weights[j] * inv;
          m.params[li].weights[j] -= hyper.lr * v;
        }
        for (std::size_t j = 0; j < m.params[li].bias.size(); ++j) {
          double& v = velocity[li].bias[j];
          v = hyper.momentum * v + acc[li].bias[j] * inv;
          m.params[li].bias[j] -= hyper.lr * v;
        }
      }
      for (const LayerParams& p : m.params)
        if (!p.weights.finite() || !p.bias.finite())
          throw Error("train: non-finite parameter at epoch " + std::to_string(epoch + 1) +
                      ", batch " + std::to_string(start / hyper.batch_size + 1));
    }
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(n));
  }

  // Final training metric: accuracy or MSE on the training data.
  if (m.task == LabelKind::classification) {
    std::size_t hits = 0;
    for (const Case& c : data.cases) {
      Tensor y = forward(m, case_input(m, c));
      std::size_t arg = 0;
      for (std::size_t i = 1; i < y.size(); ++i)
        if (y[i] > y[arg]) arg = i;
      if (arg == c.cls()) ++hits;
    }
    report.final_metric = static_cast<double>(hits) / static_cast<double>(n);
  } else {
    double se = 0.0;
    for (const Case& c : data.cases) {
      Tensor y = forward(m, case_input(m, c));
      for (std::size_t i = 0; i < y.size(); ++i) {
        double d = y[i] - c.label;
        se += d * d;
      }
    }
    report.final_metric = se / static_cast<double>(n);
  }
  return report;
}

// --- serialization ---

namespace detail {

inline nlohmann::json tensor_nested(const Tensor& t, std::size_t dim, std::size_t off,
                                    std::size_t stride) {
  nlohmann::json arr = nlohmann::json::array();
  const auto& shape = t.shape();
  if (dim + 1 == shape.size()) {
    for (std::size_t i = 0; i < shape[dim]; ++i) arr.push_back(t[off + i]);
    return arr;
  }
  const std::size_t inner = stride / shape[dim];
  for (std::size_t i = 0; i < shape[dim]; ++i)
    arr.push_back(tensor_nested(t, dim + 1, off + i * inner, inner));
  return arr;
}

inline nlohmann::json tensor_to_json(const Tensor& t) {
  return tensor_nested(t, 0, 0, t.size());
}

inline void flatten_json_numbers(const nlohmann::json& j, std::vector<double>& out) {
  if (j.is_array()) {
    for (const auto& e : j) flatten_json_numbers(e, out);
  } else if (j.is_number()) {
    out.push_back(j.get<double>());
  } else {
    throw Error("malformed model file: non-numeric parameter entry");
  }
}

inline Tensor tensor_from_json(const nlohmann::json& j, const std::vector<std::size_t>& shape) {
  std::vector<double> flat;
  flatten_json_numbers(j, flat);
  if (flat.size() != shape_count(shape))
    throw Error("malformed model file: parameter tensor has " +
                std::to_string(flat.size()) + " values, expected shape " + shape_str(shape));
  if (!all_finite(flat)) throw Error("malformed model file: non-finite parameter");
  return Tensor(shape, std::move(flat));
}

}  // namespace detail

inline nlohmann::json layer_spec_to_json(const LayerSpec& l) {
  nlohmann::json j;
  j["kind"] = layer_kind_name(l.kind);
  j["name"] = l.name;
  if (l.kind == LayerKind::dense) {
    j["in"] = l.in;
    j["out"] = l.out;
  } else if (l.kind == LayerKind::conv2d) {
    j["in_ch"] = l.in_ch;
    j["out_ch"] = l.out_ch;
    j["kernel"] = l.kernel;
    j["stride"] = l.stride;
    j["padding"] = l.padding;
  }
  return j;
}

inline LayerSpec layer_spec_from_json(const nlohmann::json& j) {
  LayerSpec l;
  l.kind = layer_kind_from(j.at("kind").get<std::string>());
  l.name = j.value("name", std::string());
  if (l.kind == LayerKind::dense) {
    l.in = j.at("in").get<std::size_t>();
    l.out = j.at("out").get<std::size_t>();
  } else if (l.kind == LayerKind::conv2d) {
    l.in_ch = j.at("in_ch").get<std::size_t>();
    l.out_ch = j.at("out_ch").get<std::size_t>();
    l.kernel = j.at("kernel").get<std::size_t>();
    l.stride = j.value("stride", std::size_t{1});
    l.padding = j.value("padding", std::size_t{0});
  }
  return l;
}

inline nlohmann::json model_to_json(const NetworkModel& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["task"] = label_kind_name(m.task);
  j["seed"] = m.seed;
  j["input_shape"] = m.input_shape;
  j["layers"] = nlohmann::json::array();
  for (const LayerSpec& l : m.layers) j["layers"].push_back(layer_spec_to_json(l));
  j["params"] = nlohmann::json::array();
  for (const LayerParams& p : m.params) {
    if (p.empty()) {
      j["params"].push_back(nullptr);
    } else {
      nlohmann::json pj;
      pj["weights"] = detail::tensor_to_json(p.weights);
      pj["bias"] = detail::tensor_to_json(p.bias);
      j["params"].push_back(pj);
    }
  }
  if (!m.profile.empty()) {
    j["data"] = {{"normalize", m.profile.normalize},
                 {"label_names", m.profile.label_names},
                 {"feature_names", m.profile.feature_names}};
  }
  return j;
}

inline NetworkModel model_from_json(const nlohmann::json& j) {
  if (!j.contains("version") || !j["version"].is_string())
    throw Error("malformed model file: missing version");
  const std::string version = j["version"].get<std::string>();
  if (version != kModelVersion)
    throw Error("model version mismatch: file has '" + version + "', expected '" +
                kModelVersion + "'");

  NetworkModel m;
  try {
    const std::string task = j.at("task").get<std::string>();
    if (task == "classification")
      m.task = LabelKind::classification;
    else if (task == "regression")
      m.task = LabelKind::regression;
    else
      throw Error("malformed model file: unknown task '" + task + "'");
    m.seed = j.value("seed", std::uint64_t{0});
    m.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
    for (const auto& lj : j.at("layers")) m.layers.push_back(layer_spec_from_json(lj));
    for (std::size_t i = 0; i < m.layers.size(); ++i)
      if (m.layers[i].name.empty())
        m.layers[i].name = layer_kind_name(m.layers[i].kind) + std::to_string(i);
    m.validate_shapes();

    const auto& pj = j.at("params");
    if (!pj.is_array() || pj.size() != m.layers.size())
      throw Error("malformed model file: params count does not match layers");
    m.params.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      const LayerSpec& l = m.layers[i];
      const bool wants = l.kind == LayerKind::dense || l.kind == LayerKind::conv2d;
      if (!wants) {
        if (!pj[i].is_null())
          throw Error("malformed model file: unexpected params for layer " + l.name);
        continue;
      }
      if (pj[i].is_null())
        throw Error("malformed model file: missing params for layer " + l.name);
      std::vector<std::size_t> wshape =
          l.kind == LayerKind::dense
              ? std::vector<std::size_t>{l.out, l.in}
              : std::vector<std::size_t>{l.out_ch, l.in_ch, l.kernel, l.kernel};
      std::vector<std::size_t> bshape =
          l.kind == LayerKind::dense ? std::vector<std::size_t>{l.out}
                                     : std::vector<std::size_t>{l.out_ch};
      m.params[i].weights = detail::tensor_from_json(pj[i].at("weights"), wshape);
      m.params[i].bias = detail::tensor_from_json(pj[i].at("bias"), bshape);
    }
    if (j.contains("data")) {
      const auto& dj = j["data"];
      m.profile.normalize = dj.value("normalize", std::string("none"));
      m.profile.label_names = dj.value("label_names", std::vector<std::string>{});
      m.profile.feature_names = dj.value("feature_names", std::vector<std::string>{});
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed model file: ") + e.what());
  }
  return m;
}

inline void save_model(const NetworkModel& m, const std::string& path) {
  atomic_write_file(path, model_to_json(m).dump(2) + "\n");
}

inline NetworkModel load_model(const std::string& path) {
  std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed model file " + path + ": " + e.what());
  }
  return model_from_json(j);
}

// Hash binding derived artifacts (latent case vectors) to the exact model
// that produced them.
inline std::uint64_t model_fingerprint(const NetworkModel& m) {
  return fnv1a64(model_to_json(m).dump());
}

}  // namespace twinsys
