#pragma once

// Twin-fidelity evaluation: how often the weighted k-NN twin reproduces the
// network's own predictions on held-out queries.  Fidelity is always measured
// against the network's outputs, never against ground-truth labels — the twin
// explains the model, including the model's mistakes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "twinsys/common.hpp"
#include "twinsys/dataset.hpp"
#include "twinsys/explanation.hpp"
#include "twinsys/network.hpp"
#include "twinsys/retrieval.hpp"
#include "twinsys/weighting.hpp"

namespace twinsys {

// How to compute weights for one evaluated scheme.  `space` names the space
// the weights live in and must match the index the twin retrieves from.
struct SchemeSpec {
  Scheme scheme = Scheme::uniform;
  std::string space = "input";
  SurrogateConfig surrogate{};  // surrogate scheme only; seed is derived per query
};

struct FidelityReport {
  std::string scheme;
  bool local = false;
  std::string space = "input";
  LabelKind task = LabelKind::classification;
  std::size_t k = 0;
  std::size_t n_queries = 0;
  std::size_t matches = 0;      // classification only
  double agreement_rate = 0.0;  // matches / n_queries
  double mae = 0.0;             // regression only
  std::uint64_t seed = 0;
  double runtime_ms = 0.0;  // diagnostic; excluded from serialized outputs
};

namespace detail {

inline bool scheme_is_local(Scheme s) {
  return s == Scheme::surrogate || s == Scheme::contribution;
}

// Global schemes and the surrogate are defined over raw input features, so
// they can only drive retrieval in the input space.
inline void check_scheme_space(const SchemeSpec& spec, const CaseIndex& index) {
  if (spec.space != index.space)
    throw Error("fidelity: scheme space '" + spec.space + "' does not match index space '" +
                index.space + "'");
  if (spec.scheme != Scheme::contribution && spec.scheme != Scheme::uniform &&
      index.space != "input")
    throw Error("fidelity: scheme " + scheme_name(spec.scheme) +
                " produces input-space weights and cannot drive retrieval in space '" +
                index.space + "'");
}

// Two cases are the same case only if they come from the same load (origin)
// and carry the same provenance id — e.g. both splits of one file.  Distinct
// source files cannot overlap, however their row numbers line up.
inline void check_disjoint(const CaseIndex& index, const Dataset& test) {
  if (index.origin != test.origin) return;
  std::unordered_set<std::uint64_t> train_ids;
  for (const Case& c : index.casebase) train_ids.insert(c.provenance);
  for (const Case& c : test.cases)
    if (train_ids.count(c.provenance))
      throw Error("fidelity: test case with provenance id " + std::to_string(c.provenance) +
                  " also appears in the training index");
}

// The index carries the training cases; rebuild a Dataset view of them for
// the weighting operations that need training statistics.
inline Dataset train_view(const CaseIndex& index) {
  Dataset ds;
  ds.schema = index.schema;
  ds.cases = index.casebase;
  ds.origin = index.origin;
  return ds;
}

}  // namespace detail

inline FidelityReport fidelity(const NetworkModel& m, const CaseIndex& index,
                               const SchemeSpec& spec, const Dataset& test, std::size_t k,
                               std::uint64_t seed) {
  if (test.cases.empty()) throw Error("fidelity: empty test set");
  if (k == 0) throw Error("fidelity: k must be positive");
  if (index.size() == 0) throw Error("fidelity: empty index");
  detail::check_scheme_space(spec, index);
  detail::check_disjoint(index, test);

  const auto t0 = std::chrono::steady_clock::now();
  const Dataset train = detail::train_view(index);
  const bool local = detail::scheme_is_local(spec.scheme);

  FeatureWeights global;
  if (!local) {
    global = spec.scheme == Scheme::uniform ? uniform_weights(index.dim())
                                            : global_weights(m, train, spec.scheme);
  }
  Tensor baseline;
  if (spec.scheme == Scheme::contribution) baseline = default_baseline(m, train);

  FidelityReport rep;
  rep.scheme = scheme_name(spec.scheme);
  rep.local = local;
  rep.space = spec.space;
  rep.task = m.task;
  rep.k = k;
  rep.n_queries = test.cases.size();
  rep.seed = seed;

  double abs_sum = 0.0;
  for (std::size_t qi = 0; qi < test.cases.size(); ++qi) {
    const Case& c = test.cases[qi];
    const Tensor input = case_input(m, c);
    const Prediction pred = predict(m, input);

    FeatureWeights w;
    if (!local) {
      w = global;
    } else if (spec.scheme == Scheme::surrogate) {
      SurrogateConfig cfg = spec.surrogate;
      cfg.seed = seed * 1000003ull + qi;  // one reproducible stream per query
      w = surrogate_weights(m, c.features, train, cfg);
    } else {
      w = contribution_weights(m, input, baseline, pred.cls, spec.space);
    }

    const std::vector<double> qvec = space_vector(m, index.space, input);
    const auto neighbors = retrieve(index, qvec, w, k);
    const double twin = twin_predict(neighbors, index, m.task);

    if (m.task == LabelKind::classification) {
      if (static_cast<std::size_t>(std::llround(twin)) == pred.cls) ++rep.matches;
    } else {
      abs_sum += std::abs(twin - pred.value);
    }
  }

  if (m.task == LabelKind::classification)
    rep.agreement_rate = static_cast<double>(rep.matches) / static_cast<double>(rep.n_queries);
  else
    rep.mae = abs_sum / static_cast<double>(rep.n_queries);

  rep.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                       .count();
  return rep;
}

// One report per scheme over identical queries and seed, ranked best-first:
// descending agreement for classification, ascending MAE for regression.
// Ties keep the caller's scheme order.
inline std::vector<FidelityReport> compare_schemes(const NetworkModel& m, const CaseIndex& index,
                                                   const std::vector<SchemeSpec>& schemes,
                                                   const Dataset& test, std::size_t k,
                                                   std::uint64_t seed) {
  if (schemes.empty()) throw Error("compare_schemes: no schemes given");
  std::vector<FidelityReport> reports;
  reports.reserve(schemes.size());
  for (const SchemeSpec& s : schemes) reports.push_back(fidelity(m, index, s, test, k, seed));
  std::stable_sort(reports.begin(), reports.end(),
                   [&](const FidelityReport& a, const FidelityReport& b) {
                     if (m.task == LabelKind::classification)
                       return a.agreement_rate > b.agreement_rate;
                     return a.mae < b.mae;
                   });
  return reports;
}

inline nlohmann::json report_to_json(const FidelityReport& r) {
  nlohmann::json j;
  j["scheme"] = r.scheme;
  j["local"] = r.local;
  j["space"] = r.space;
  j["k"] = r.k;
  j["n_queries"] = r.n_queries;
  if (r.task == LabelKind::classification) {
    j["matches"] = r.matches;
    j["agreement_rate"] = r.agreement_rate;
  } else {
    j["mae"] = r.mae;
  }
  j["seed"] = r.seed;
  return j;
}

inline std::string reports_json(const std::vector<FidelityReport>& reports) {
  nlohmann::json j;
  j["version"] = "v1";
  j["task"] = reports.empty() || reports[0].task == LabelKind::classification ? "classification"
                                                                              : "regression";
  j["reports"] = nlohmann::json::array();
  for (const FidelityReport& r : reports) j["reports"].push_back(report_to_json(r));
  return j.dump(2) + "\n";
}

// Aligned-column text table.  Runtime is intentionally not part of the table
// so repeated runs with one seed stay byte-identical.
inline std::string reports_table(const std::vector<FidelityReport>& reports) {
  if (reports.empty()) return "";
  const bool cls = reports[0].task == LabelKind::classification;
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"scheme", "space", "scope", "k", "n_queries",
                  cls ? std::string("matches") : std::string(""), cls ? "agreement" : "mae"});
  if (!cls) rows[0].erase(rows[0].begin() + 5);
  for (const FidelityReport& r : reports) {
    std::ostringstream metric;
    metric << std::fixed << std::setprecision(6) << (cls ? r.agreement_rate : r.mae);
    std::vector<std::string> row = {r.scheme,
                                    r.space,
                                    r.local ? "local" : "global",
                                    std::to_string(r.k),
                                    std::to_string(r.n_queries)};
    if (cls) row.push_back(std::to_string(r.matches));
    row.push_back(metric.str());
    rows.push_back(row);
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i + 1 == row.size())
        out << row[i];  // no padding after the final column
      else
        out << std::left << std::setw(static_cast<int>(width[i])) << row[i] << "  ";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace twinsys
