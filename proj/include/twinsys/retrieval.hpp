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
#include "twinsys/network.hpp"
#include "twinsys/weighting.hpp"

namespace twinsys {

struct Neighbor {
  std::size_t case_id = 0;
  double distance = 0.0;
  std::size_t rank = 0;  // 1-based
};

// The white-box twin: the training cases plus one vector per case in the
// retrieval space. Latent vectors are bound to the producing model by its
// fingerprint; a mismatch means they must be recomputed, not trusted.
struct CaseIndex {
  std::vector<Case> casebase;
  std::string space = "input";
  std::vector<std::vector<double>> vectors;  // parallel to casebase
  FeatureSchema schema;
  std::uint64_t model_fingerprint = 0;  // 0 when no model was involved
  std::uint64_t origin = 0;             // source dataset hash

  std::size_t size() const { return casebase.size(); }
  std::size_t dim() const { return vectors.empty() ? 0 : vectors[0].size(); }

  const Case& by_id(std::size_t id) const {
    if (id < casebase.size() && casebase[id].id == id) return casebase[id];
    for (const Case& c : casebase)
      if (c.id == id) return c;
    throw Error("index: no case with id " + std::to_string(id));
  }
};

// Maps one input into the retrieval space: the flattened input itself, or
// the flattened post-activation of the named layer.
inline std::vector<double> space_vector(const NetworkModel& m, const std::string& space,
                                        const Tensor& input) {
  const int idx = space_layer_index(m, space);
  if (idx < 0) return input.data();
  detail::ForwardCache cache = detail::forward_cached(m, input);
  return cache.acts[static_cast<std::size_t>(idx) + 1].data();
}

inline CaseIndex build_index(const Dataset& train, const std::string& space = "input",
                             const NetworkModel* model = nullptr) {
  if (train.cases.empty()) throw Error("index: empty dataset");
  CaseIndex index;
  index.casebase = train.cases;
  index.space = space;
  index.schema = train.schema;
  index.origin = train.origin;
  index.vectors.reserve(train.cases.size());

  if (space == "input") {
    for (const Case& c : train.cases) index.vectors.push_back(c.features);
    if (model) index.model_fingerprint = model_fingerprint(*model);
  } else {
    if (!model) throw Error("index: model missing for latent space '" + space + "'");
    if (train.schema.feature_count != shape_count(model->input_shape))
      throw Error("index: dataset features (" + std::to_string(train.schema.feature_count) +
                  ") do not match model input " + shape_str(model->input_shape));
    space_layer_index(*model, space);  // rejects unknown layers up front
    index.model_fingerprint = model_fingerprint(*model);
    const std::size_t n = train.cases.size();
    index.vectors.resize(n);
    parallel_for(n, [&](std::size_t i) {
      index.vectors[i] = space_vector(*model, space, case_input(*model, train.cases[i]));
    });
  }

  for (const auto& v : index.vectors) {
    if (v.size() != index.vectors[0].size()) throw Error("index: ragged vectors");
    if (!all_finite(v)) throw Error("index: non-finite vector entry");
  }
  return index;
}

// Exact weighted k-NN: an exhaustive scan under the distance
// d(q, c) = sqrt(sum_i w_i (q_i - c_i)^2), ties broken by ascending case id.
inline std::vector<Neighbor> retrieve(const CaseIndex& index, const std::vector<double>& query,
                                      const FeatureWeights& weights, std::size_t k) {
  if (weights.space != index.space)
    throw Error("retrieve: space mismatch (weights are for '" + weights.space +
                "', index is '" + index.space + "')");
  if (query.size() != index.dim())
    throw Error("retrieve: query has " + std::to_string(query.size()) +
                " entries, index space has " + std::to_string(index.dim()));
  if (weights.weights.size() != index.dim())
    throw Error("retrieve: weights have " + std::to_string(weights.weights.size()) +
                " entries, index space has " + std::to_string(index.dim()));
  if (k < 1 || k > index.size())
    throw Error("retrieve: k = " + std::to_string(k) + " out of range [1, " +
                std::to_string(index.size()) + "]");
  if (!all_finite(query)) throw Error("retrieve: non-finite query");

  // When every weight is identical the ordering must reproduce unweighted
  // Euclidean k-NN exactly, ties included; accumulating plain squared
  // differences and applying the common factor once keeps the two scans'
  // tie structure identical under floating point.
  bool flat = true;
  for (double w : weights.weights)
    if (w != weights.weights[0]) {
      flat = false;
      break;
    }

  std::vector<Neighbor> all(index.size());
  const std::size_t d = index.dim();
  for (std::size_t i = 0; i < index.size(); ++i) {
    double acc = 0.0;
    const std::vector<double>& v = index.vectors[i];
    if (flat) {
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = query[j] - v[j];
        acc += diff * diff;
      }
      acc *= weights.weights[0];
    } else {
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = query[j] - v[j];
        acc += weights.weights[j] * diff * diff;
      }
    }
    all[i] = {index.casebase[i].id, std::sqrt(acc), 0};
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.case_id < b.case_id;
  });
  all.resize(k);
  for (std::size_t r = 0; r < k; ++r) all[r].rank = r + 1;
  return all;
}

// The twin's own answer: majority vote over neighbor labels (ties resolved
// by the rank-1 neighbor's label) or inverse-distance-weighted mean.
inline double twin_predict(const std::vector<Neighbor>& neighbors, const CaseIndex& index,
                           LabelKind task) {
  if (neighbors.empty()) throw Error("twin_predict: empty neighbor list");
  if (task == LabelKind::classification) {
    std::vector<std::size_t> votes(index.schema.num_classes, 0);
    for (const Neighbor& nb : neighbors) {
      const std::size_t cls = index.by_id(nb.case_id).cls();
      if (cls >= votes.size()) throw Error("twin_predict: label out of range");
      ++votes[cls];
    }
    std::size_t best = 0, ties = 0;
    for (std::size_t c = 0; c < votes.size(); ++c)
      if (votes[c] > votes[best]) best = c;
    for (std::size_t c = 0; c < votes.size(); ++c)
      if (votes[c] == votes[best]) ++ties;
    if (ties > 1) return static_cast<double>(index.by_id(neighbors[0].case_id).cls());
    return static_cast<double>(best);
  }
  double num = 0.0, den = 0.0;
  for (const Neighbor& nb : neighbors) {
    const double w = 1.0 / (nb.distance + 1e-9);
    num += w * index.by_id(nb.case_id).label;
    den += w;
  }
  return num / den;
}

inline constexpr const char* kIndexVersion = "v1";

inline nlohmann::json index_to_json(const CaseIndex& index) {
  nlohmann::json j;
  j["version"] = kIndexVersion;
  j["space"] = index.space;
  j["fingerprint"] = index.model_fingerprint;
  j["origin"] = index.origin;
  nlohmann::json ids = nlohmann::json::array();
  for (const Case& c : index.casebase) ids.push_back(c.id);
  j["case_ids"] = ids;
  j["vectors"] = index.vectors;
  return j;
}

inline void save_index(const CaseIndex& index, const std::string& path) {
  atomic_write_file(path, index_to_json(index).dump() + "\n");
}

// Loads a persisted index for `train`. Stored vectors are only trusted when
// the fingerprint matches the given model and the case ids line up;
// otherwise the index is rebuilt from scratch.
inline CaseIndex load_index(const std::string& path, const Dataset& train,
                            const NetworkModel* model = nullptr) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed index file " + path + ": " + e.what());
  }
  std::string space;
  try {
    if (j.value("version", std::string()) != kIndexVersion)
      throw Error("index version mismatch in " + path);
    space = j.at("space").get<std::string>();
    const std::uint64_t stored_fp = j.at("fingerprint").get<std::uint64_t>();
    const auto ids = j.at("case_ids").get<std::vector<std::size_t>>();

    const std::uint64_t want_fp = model ? model_fingerprint(*model) : 0;
    bool trust = stored_fp == want_fp && ids.size() == train.cases.size();
    if (trust)
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] != train.cases[i].id) {
          trust = false;
          break;
        }
    if (trust) {
      CaseIndex index;
      index.casebase = train.cases;
      index.space = space;
      index.schema = train.schema;
      index.origin = train.origin;
      index.model_fingerprint = stored_fp;
      index.vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
      if (index.vectors.size() != index.casebase.size())
        throw Error("malformed index file " + path + ": vector count mismatch");
      for (const auto& v : index.vectors)
        if (v.size() != index.vectors[0].size() || !all_finite(v))
          throw Error("malformed index file " + path + ": bad vector");
      return index;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed index file " + path + ": " + e.what());
  }
  return build_index(train, space, model);
}

}  // namespace twinsys
