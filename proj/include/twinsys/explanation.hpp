#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "twinsys/common.hpp"
#include "twinsys/dataset.hpp"
#include "twinsys/network.hpp"
#include "twinsys/retrieval.hpp"
#include "twinsys/weighting.hpp"

namespace twinsys {

struct Prediction {
  LabelKind task = LabelKind::classification;
  std::size_t cls = 0;          // classification: argmax class
  std::vector<double> output;   // probabilities, or raw regression outputs
  double value = 0.0;           // regression: first output
};

struct TopFeature {
  std::string name;
  double weight = 0.0;
  std::optional<double> signed_contribution;
};

// One selected feature map rendered over the input's spatial grid.
struct FeatureActivationMap {
  std::string layer;
  std::size_t map_index = 0;
  std::vector<std::vector<double>> mask;  // (input H, input W), values in [0,1]
  double threshold_quantile = 0.95;
  double contribution_of_unit = 0.0;  // positive-contribution total of the map
  bool degenerate = false;            // all-zero mask
};

// The full explanation-by-example package for one query.
struct Explanation {
  Case query;
  Prediction prediction;
  FeatureWeights scheme;  // the weights actually used, with provenance
  std::vector<std::pair<Neighbor, Case>> neighbors;
  std::vector<TopFeature> top_features;
  std::optional<FeatureActivationMap> fam;
  double twin_prediction = 0.0;
  bool agreement = false;  // classification: twin label == network label
  double abs_error = 0.0;  // regression: |twin - network|
};

inline Prediction predict(const NetworkModel& m, const Tensor& input) {
  Prediction p;
  p.task = m.task;
  const Tensor y = forward(m, input);
  p.output = y.data();
  if (m.task == LabelKind::classification) {
    for (std::size_t i = 1; i < p.output.size(); ++i)
      if (p.output[i] > p.output[p.cls]) p.cls = i;
  } else {
    p.value = p.output[0];
  }
  return p;
}

// Display name for position i of the weight space.
inline std::string space_feature_name(const FeatureSchema& schema, const std::string& space,
                                      std::size_t i) {
  if (space == "input") {
    if (i < schema.feature_names.size()) return schema.feature_names[i];
    return "f" + std::to_string(i);
  }
  return space.substr(6) + ":" + std::to_string(i);
}

inline Explanation explain(const NetworkModel& m, const CaseIndex& index,
                           const FeatureWeights& weights, const Case& query, std::size_t k,
                           std::optional<std::size_t> top_m = std::nullopt) {
  Explanation e;
  e.query = query;
  e.scheme = weights;

  const Tensor input = case_input(m, query);
  e.prediction = predict(m, input);

  const std::vector<double> qvec = space_vector(m, index.space, input);
  std::vector<Neighbor> got = retrieve(index, qvec, weights, k);
  e.neighbors.reserve(got.size());
  for (const Neighbor& nb : got) e.neighbors.emplace_back(nb, index.by_id(nb.case_id));

  e.twin_prediction = twin_predict(got, index, m.task);
  if (m.task == LabelKind::classification) {
    e.agreement = static_cast<std::size_t>(e.twin_prediction) == e.prediction.cls;
  } else {
    e.abs_error = std::abs(e.twin_prediction - e.prediction.value);
  }

  if (top_m) {
    const std::size_t d = weights.weights.size();
    std::vector<std::size_t> order(d);
    for (std::size_t i = 0; i < d; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (weights.weights[a] != weights.weights[b])
        return weights.weights[a] > weights.weights[b];
      return a < b;
    });
    const std::size_t take = std::min(*top_m, d);
    for (std::size_t r = 0; r < take; ++r) {
      TopFeature tf;
      tf.name = space_feature_name(index.schema, weights.space, order[r]);
      tf.weight = weights.weights[order[r]];
      if (!weights.signed_contributions.empty())
        tf.signed_contribution = weights.signed_contributions[order[r]];
      e.top_features.push_back(std::move(tf));
    }
  }
  return e;
}

// Builds the feature-activation map: contributions of the last conv layer's
// maps to the predicted output, the winning map's activation clamped to
// positive, min-max normalized, replicated by the cumulative pool factor,
// and centered on the input grid.
inline FeatureActivationMap compute_fam(const NetworkModel& m, const Tensor& query,
                                        double threshold_quantile = 0.95) {
  int last_conv = -1;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (m.layers[i].kind == LayerKind::conv2d) last_conv = static_cast<int>(i);
  if (last_conv < 0) throw Error("fam: model has no conv layer");
  if (m.input_shape.size() != 3 || query.shape().size() != 3)
    throw Error("fam: query is not an image");
  if (!(threshold_quantile > 0.0) || threshold_quantile > 1.0)
    throw Error("fam: threshold_quantile must be in (0, 1]");

  const Prediction pred = predict(m, query);
  const std::size_t target = m.task == LabelKind::classification ? pred.cls : 0;
  const std::string space = "layer:" + m.layers[static_cast<std::size_t>(last_conv)].name;
  const Tensor baseline(m.input_shape);
  const FeatureWeights contrib = contribution_weights(m, query, baseline, target, space);

  const auto& map_shape = m.acts_shape[static_cast<std::size_t>(last_conv) + 1];
  const std::size_t C = map_shape[0], MH = map_shape[1], MW = map_shape[2];

  FeatureActivationMap fam;
  fam.layer = m.layers[static_cast<std::size_t>(last_conv)].name;
  fam.threshold_quantile = threshold_quantile;

  std::vector<double> per_map(C, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t u = 0; u < MH * MW; ++u)
      per_map[c] += std::max(contrib.signed_contributions[c * MH * MW + u], 0.0);
  for (std::size_t c = 1; c < C; ++c)
    if (per_map[c] > per_map[fam.map_index]) fam.map_index = c;  // ties keep lowest
  fam.contribution_of_unit = per_map[fam.map_index];

  // The query's activation of the winning map, clamped and normalized.
  detail::ForwardCache cache = detail::forward_cached(m, query);
  const Tensor& act = cache.acts[static_cast<std::size_t>(last_conv) + 1];
  std::vector<double> small(MH * MW);
  for (std::size_t u = 0; u < MH * MW; ++u)
    small[u] = std::max(act[fam.map_index * MH * MW + u], 0.0);
  const double mx = *std::max_element(small.begin(), small.end());
  const double mn = *std::min_element(small.begin(), small.end());
  if (mx <= 0.0) {
    fam.degenerate = true;
    small.assign(MH * MW, 0.0);
  } else if (mx == mn) {
    small.assign(MH * MW, 1.0);
  } else {
    for (double& v : small) v = (v - mn) / (mx - mn);
  }

  // Upsample by the cumulative pool factor and center on the input grid.
  std::size_t factor = 1;
  for (int i = 0; i < last_conv; ++i)
    if (m.layers[static_cast<std::size_t>(i)].kind == LayerKind::maxpool) factor *= 2;
  const std::size_t H = m.input_shape[1], W = m.input_shape[2];
  const std::size_t RH = MH * factor, RW = MW * factor;
  if (RH > H || RW > W) throw Error("fam: upsampled map exceeds input size");
  const std::size_t oy = (H - RH) / 2, ox = (W - RW) / 2;
  fam.mask.assign(H, std::vector<double>(W, 0.0));
  for (std::size_t y = 0; y < RH; ++y)
    for (std::size_t x = 0; x < RW; ++x)
      fam.mask[oy + y][ox + x] = small[(y / factor) * MW + (x / factor)];
  return fam;
}

// Nearest-rank quantile threshold over all mask entries.
inline double fam_threshold(const FeatureActivationMap& fam) {
  std::vector<double> flat;
  for (const auto& row : fam.mask) flat.insert(flat.end(), row.begin(), row.end());
  std::sort(flat.begin(), flat.end());
  const std::size_t n = flat.size();
  std::size_t idx = static_cast<std::size_t>(
      std::ceil(fam.threshold_quantile * static_cast<double>(n)));
  if (idx == 0) idx = 1;
  return flat[idx - 1];
}

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline std::string label_display(const FeatureSchema& schema, double label) {
  if (schema.label_kind == LabelKind::classification) {
    const std::size_t cls = static_cast<std::size_t>(label);
    if (cls < schema.label_names.size()) return schema.label_names[cls];
    return std::to_string(cls);
  }
  return format_double(label);
}

}  // namespace detail

inline std::string render_text(const Explanation& e, const FeatureSchema& schema) {
  std::ostringstream os;
  if (e.prediction.task == LabelKind::classification) {
    os << "prediction: " << detail::label_display(schema, static_cast<double>(e.prediction.cls))
       << " (class " << e.prediction.cls << ", p="
       << detail::format_double(e.prediction.output[e.prediction.cls]) << ")\n";
  } else {
    os << "prediction: " << detail::format_double(e.prediction.value) << "\n";
  }
  os << "scheme: " << scheme_name(e.scheme.scheme) << " (" << e.scheme.scope_str()
     << ", space=" << e.scheme.space << ")";
  if (e.scheme.uniform_fallback) os << " [uniform-fallback]";
  os << "\n";
  if (e.prediction.task == LabelKind::classification) {
    os << "twin: " << detail::label_display(schema, e.twin_prediction) << " ("
       << (e.agreement ? "agrees" : "disagrees") << ")\n";
  } else {
    os << "twin: " << detail::format_double(e.twin_prediction)
       << " (abs error " << detail::format_double(e.abs_error) << ")\n";
  }
  os << "neighbors:\n";
  for (const auto& [nb, c] : e.neighbors) {
    os << "  rank " << nb.rank << "  case " << nb.case_id << "  label="
       << detail::label_display(schema, c.label)
       << "  distance=" << detail::format_double(nb.distance) << "\n";
  }
  if (!e.top_features.empty()) {
    os << "top features:\n";
    for (const TopFeature& tf : e.top_features) {
      os << "  " << tf.name << "  " << detail::format_double(tf.weight);
      if (tf.signed_contribution)
        os << "  [" << (*tf.signed_contribution >= 0 ? "+" : "")
           << detail::format_double(*tf.signed_contribution) << "]";
      os << "\n";
    }
  }
  if (e.fam) {
    os << "fam: layer " << e.fam->layer << " map " << e.fam->map_index << ", contribution "
       << detail::format_double(e.fam->contribution_of_unit) << ", threshold q="
       << detail::format_double(e.fam->threshold_quantile)
       << (e.fam->degenerate ? " (degenerate)" : "") << "\n";
  }
  return os.str();
}

inline constexpr const char* kExplanationVersion = "v1";

// Single serialization for a feature-activation map, shared by the embedded
// explanation field and the standalone report.
inline nlohmann::json fam_to_json(const FeatureActivationMap& fam) {
  nlohmann::json j;
  j["layer"] = fam.layer;
  j["map_index"] = fam.map_index;
  j["contribution_of_unit"] = fam.contribution_of_unit;
  j["threshold_quantile"] = fam.threshold_quantile;
  j["degenerate"] = fam.degenerate;
  j["mask"] = fam.mask;
  return j;
}

inline nlohmann::json explanation_to_json(const Explanation& e, const FeatureSchema& schema) {
  nlohmann::json j;
  j["version"] = kExplanationVersion;

  nlohmann::json pj;
  if (e.prediction.task == LabelKind::classification) {
    pj["task"] = "classification";
    pj["class"] = e.prediction.cls;
    pj["label"] = detail::label_display(schema, static_cast<double>(e.prediction.cls));
    pj["probabilities"] = e.prediction.output;
  } else {
    pj["task"] = "regression";
    pj["value"] = e.prediction.value;
    pj["output"] = e.prediction.output;
  }
  j["prediction"] = pj;

  j["scheme"] = weights_to_json(e.scheme);

  nlohmann::json qj;
  qj["id"] = e.query.id;
  qj["provenance"] = e.query.provenance;
  qj["features"] = e.query.features;
  j["query"] = qj;

  nlohmann::json ns = nlohmann::json::array();
  for (const auto& [nb, c] : e.neighbors) {
    nlohmann::json nj;
    nj["rank"] = nb.rank;
    nj["case_id"] = nb.case_id;
    nj["distance"] = nb.distance;
    nj["label"] = c.label;
    nj["label_name"] = detail::label_display(schema, c.label);
    nj["features"] = c.features;
    ns.push_back(nj);
  }
  j["neighbors"] = ns;

  if (!e.top_features.empty()) {
    nlohmann::json ts = nlohmann::json::array();
    for (const TopFeature& tf : e.top_features) {
      nlohmann::json tj;
      tj["name"] = tf.name;
      tj["weight"] = tf.weight;
      if (tf.signed_contribution) tj["signed_contribution"] = *tf.signed_contribution;
      ts.push_back(tj);
    }
    j["top_features"] = ts;
  }

  j["twin_prediction"] = e.twin_prediction;
  if (e.prediction.task == LabelKind::classification)
    j["agreement"] = e.agreement;
  else
    j["abs_error"] = e.abs_error;

  if (e.fam) j["fam"] = fam_to_json(*e.fam);
  return j;
}

inline std::string render_json(const Explanation& e, const FeatureSchema& schema) {
  return explanation_to_json(e, schema).dump(2) + "\n";
}

// One P2 grayscale document.
struct PgmPanel {
  std::string name;  // "query", "neighbor1", ..., "fam"
  std::string bytes;
};

namespace detail {

inline std::string pgm_document(const std::vector<int>& pixels, std::size_t w, std::size_t h) {
  std::ostringstream os;
  os << "P2\n" << w << " " << h << "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (x) os << " ";
      os << pixels[y * w + x];
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace detail

// Renders the query panel, one panel per neighbor, and (when a FAM is
// present) the overlay mask: pixels at or above the quantile threshold are
// 255, the rest scale the mask onto 0..254.
inline std::vector<PgmPanel> render_pgm(const Explanation& e, const FeatureSchema& schema) {
  if (schema.input_shape.dims.size() != 3)
    throw Error("pgm rendering needs image data (tabular explanation)");
  const std::size_t C = schema.input_shape.dims[0];
  const std::size_t H = schema.input_shape.dims[1];
  const std::size_t W = schema.input_shape.dims[2];
  if (C != 1) throw Error("pgm rendering supports single-channel images only");

  auto raw_panel = [&](const Case& c, const std::string& name) {
    if (c.raw.size() != H * W)
      throw Error("pgm rendering needs raw image payloads (case " + std::to_string(c.id) +
                  " has none)");
    std::vector<int> px(H * W);
    for (std::size_t i = 0; i < H * W; ++i) px[i] = c.raw[i];
    return PgmPanel{name, detail::pgm_document(px, W, H)};
  };

  std::vector<PgmPanel> panels;
  panels.push_back(raw_panel(e.query, "query"));
  for (const auto& [nb, c] : e.neighbors)
    panels.push_back(raw_panel(c, "neighbor" + std::to_string(nb.rank)));

  if (e.fam) {
    std::vector<int> px(H * W, 0);
    if (!e.fam->degenerate) {
      const double thr = fam_threshold(*e.fam);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double v = e.fam->mask[y][x];
          px[y * W + x] = v >= thr ? 255 : static_cast<int>(std::floor(v * 254.0 + 0.5));
        }
    }
    panels.push_back({"fam", detail::pgm_document(px, W, H)});
  }
  return panels;
}

// Single-buffer rendering; pgm panels are concatenated with "#panel <name>"
// separator lines (split them to obtain valid standalone files).
inline std::string render(const Explanation& e, const FeatureSchema& schema,
                          const std::string& format) {
  if (format == "text") return render_text(e, schema);
  if (format == "json") return render_json(e, schema);
  if (format == "pgm") {
    std::ostringstream os;
    for (const PgmPanel& p : render_pgm(e, schema)) os << "#panel " << p.name << "\n" << p.bytes;
    return os.str();
  }
  throw Error("unknown render format: " + format);
}

}  // namespace twinsys
