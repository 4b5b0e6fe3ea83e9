#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twinsys/common.hpp"
#include "twinsys/io.hpp"
#include "twinsys/rng.hpp"
#include "twinsys/tensor.hpp"

namespace twinsys {

enum class LabelKind { classification, regression };

inline std::string label_kind_name(LabelKind k) {
  return k == LabelKind::classification ? "classification" : "regression";
}

inline LabelKind label_kind_from(const std::string& s) {
  if (s == "classification") return LabelKind::classification;
  if (s == "regression") return LabelKind::regression;
  throw Error("unknown task: " + s);
}

// Input layout: {d} for flat feature vectors, {channels, height, width} for
// images. Image features are stored flattened in the same row-major order.
struct InputShape {
  std::vector<std::size_t> dims;

  bool is_image() const { return dims.size() == 3; }
  std::size_t count() const { return shape_count(dims); }

  static InputShape flat(std::size_t d) { return {{d}}; }
  static InputShape image(std::size_t c, std::size_t h, std::size_t w) {
    return {{c, h, w}};
  }
  bool operator==(const InputShape& o) const { return dims == o.dims; }
};

struct FeatureSchema {
  std::vector<std::string> feature_names;
  std::size_t feature_count = 0;
  LabelKind label_kind = LabelKind::classification;
  std::size_t num_classes = 0;  // meaningful for classification only
  InputShape input_shape;
  // Class index -> original label text, in first-appearance order.
  std::vector<std::string> label_names;

  void validate() const {
    if (feature_count != feature_names.size())
      throw Error("schema: feature_count does not match feature_names");
    if (feature_count != input_shape.count())
      throw Error("schema: feature_count does not match input_shape");
    if (label_kind == LabelKind::classification && num_classes < 2)
      throw Error("schema: classification needs at least 2 classes");
  }
};

// One labeled instance. `label` holds the class index for classification
// (exact small integers) or the real target for regression. `provenance`
// tracks the case's id in the dataset it was originally loaded from.
struct Case {
  std::size_t id = 0;
  std::vector<double> features;
  double label = 0.0;
  std::size_t provenance = 0;
  std::vector<std::uint8_t> raw;  // original image bytes, for rendering

  std::size_t cls() const { return static_cast<std::size_t>(label); }
};

struct NormStats {
  enum class Method { none, zscore, minmax };
  Method method = Method::none;
  // zscore: center = mean, scale = std (1 where std is 0).
  // minmax: center = min, scale = max - min (0 for constant features).
  std::vector<double> center;
  std::vector<double> scale;
};

inline std::string norm_method_name(NormStats::Method m) {
  switch (m) {
    case NormStats::Method::zscore: return "zscore";
    case NormStats::Method::minmax: return "minmax";
    default: return "none";
  }
}

inline NormStats::Method norm_method_from(const std::string& s) {
  if (s == "zscore") return NormStats::Method::zscore;
  if (s == "minmax") return NormStats::Method::minmax;
  if (s == "none") return NormStats::Method::none;
  throw Error("unknown normalization method: " + s);
}

struct Dataset {
  FeatureSchema schema;
  std::vector<Case> cases;
  std::optional<NormStats> norm_stats;
  // Identity of the load that produced this data; preserved by normalize()
  // and split() so sibling splits can be checked for provenance overlap.
  std::uint64_t origin = 0;

  std::size_t size() const { return cases.size(); }

  void validate() const {
    schema.validate();
    for (std::size_t i = 0; i < cases.size(); ++i) {
      const Case& c = cases[i];
      if (c.id != i) throw Error("dataset: case ids not dense at " + std::to_string(i));
      if (c.features.size() != schema.feature_count)
        throw Error("dataset: case " + std::to_string(i) + " has wrong feature count");
      if (!all_finite(c.features))
        throw Error("dataset: case " + std::to_string(i) + " has non-finite feature");
      if (schema.label_kind == LabelKind::classification &&
          c.cls() >= schema.num_classes)
        throw Error("dataset: case " + std::to_string(i) + " label out of range");
    }
  }

  // Per-feature mean over all cases.
  std::vector<double> feature_means() const {
    std::vector<double> mu(schema.feature_count, 0.0);
    for (const Case& c : cases)
      for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += c.features[i];
    for (double& m : mu) m /= static_cast<double>(cases.size());
    return mu;
  }

  // Per-feature population standard deviation.
  std::vector<double> feature_stds() const {
    std::vector<double> mu = feature_means();
    std::vector<double> var(schema.feature_count, 0.0);
    for (const Case& c : cases)
      for (std::size_t i = 0; i < var.size(); ++i) {
        double d = c.features[i] - mu[i];
        var[i] += d * d;
      }
    std::vector<double> sd(var.size());
    for (std::size_t i = 0; i < var.size(); ++i)
      sd[i] = std::sqrt(var[i] / static_cast<double>(cases.size()));
    return sd;
  }
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = b + s.size();
  while (b < e && (*b == ' ' || *b == '\t')) ++b;
  while (e > b && (e[-1] == ' ' || e[-1] == '\t')) --e;
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e && e != b && std::isfinite(out);
}

inline std::uint32_t read_be32(const std::string& bytes, std::size_t off) {
  return (std::uint32_t(std::uint8_t(bytes[off])) << 24) |
         (std::uint32_t(std::uint8_t(bytes[off + 1])) << 16) |
         (std::uint32_t(std::uint8_t(bytes[off + 2])) << 8) |
         std::uint32_t(std::uint8_t(bytes[off + 3]));
}

}  // namespace detail

// Loads a comma-separated file with a mandatory header row. `label_column`
// names a header field or is a 0-based column index. Classification labels
// get class indices in first-appearance order.
inline Dataset load_csv(const std::string& path, const std::string& label_column,
                        LabelKind task) {
  std::string text = read_file(path);

  std::vector<std::string> lines;
  std::string cur;
  for (char ch : text) {
    if (ch == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();

  if (lines.empty()) throw Error(path + ": empty file");
  std::vector<std::string> header = detail::split_fields(lines[0]);

  // Resolve the label column: exact header match first, then numeric index.
  std::size_t label_idx = header.size();
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == label_column) label_idx = i;
  if (label_idx == header.size()) {
    double idx;
    if (detail::parse_double(label_column, idx) && idx >= 0 &&
        idx < static_cast<double>(header.size()) && idx == std::floor(idx))
      label_idx = static_cast<std::size_t>(idx);
    else
      throw Error(path + ": unknown label column '" + label_column + "'");
  }

  if (lines.size() < 3) throw Error(path + ": fewer than 2 rows");

  Dataset ds;
  ds.schema.label_kind = task;
  for (std::size_t i = 0; i < header.size(); ++i)
    if (i != label_idx) ds.schema.feature_names.push_back(header[i]);
  ds.schema.feature_count = ds.schema.feature_names.size();
  ds.schema.input_shape = InputShape::flat(ds.schema.feature_count);
  if (ds.schema.feature_count == 0) throw Error(path + ": no feature columns");

  for (std::size_t r = 1; r < lines.size(); ++r) {
    std::vector<std::string> fields = detail::split_fields(lines[r]);
    if (fields.size() != header.size())
      throw Error(path + ": row " + std::to_string(r + 1) + " has " +
                  std::to_string(fields.size()) + " fields, expected " +
                  std::to_string(header.size()));
    Case c;
    c.id = c.provenance = ds.cases.size();
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i == label_idx) continue;
      double v;
      if (!detail::parse_double(fields[i], v))
        throw Error(path + ": non-numeric feature at row " + std::to_string(r + 1) +
                    ", column '" + header[i] + "'");
      c.features.push_back(v);
    }
    if (task == LabelKind::regression) {
      double v;
      if (!detail::parse_double(fields[label_idx], v))
        throw Error(path + ": non-numeric regression target at row " +
                    std::to_string(r + 1));
      c.label = v;
    } else {
      const std::string& name = fields[label_idx];
      auto it = std::find(ds.schema.label_names.begin(), ds.schema.label_names.end(), name);
      std::size_t cls;
      if (it == ds.schema.label_names.end()) {
        cls = ds.schema.label_names.size();
        ds.schema.label_names.push_back(name);
      } else {
        cls = static_cast<std::size_t>(it - ds.schema.label_names.begin());
      }
      c.label = static_cast<double>(cls);
    }
    ds.cases.push_back(std::move(c));
  }

  if (task == LabelKind::classification) {
    ds.schema.num_classes = ds.schema.label_names.size();
    if (ds.schema.num_classes < 2)
      throw Error(path + ": classification needs at least 2 distinct labels");
  }
  ds.origin = fnv1a64("csv:" + path + ":" + std::to_string(ds.cases.size()));
  ds.validate();
  return ds;
}

// Loads an image/label file pair in the big-endian IDX format (magics 2051
// and 2049). Pixels are scaled to [0,1] by /255; the raw bytes are kept per
// case for rendering.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::string img = read_file(images_path);
  std::string lab = read_file(labels_path);

  if (img.size() < 16) throw Error(images_path + ": truncated file");
  if (lab.size() < 8) throw Error(labels_path + ": truncated file");
  if (detail::read_be32(img, 0) != 2051)
    throw Error(images_path + ": magic mismatch (expected 2051)");
  if (detail::read_be32(lab, 0) != 2049)
    throw Error(labels_path + ": magic mismatch (expected 2049)");

  const std::size_t n_img = detail::read_be32(img, 4);
  const std::size_t rows = detail::read_be32(img, 8);
  const std::size_t cols = detail::read_be32(img, 12);
  const std::size_t n_lab = detail::read_be32(lab, 4);
  if (n_img != n_lab)
    throw Error("count mismatch: " + std::to_string(n_img) + " images vs " +
                std::to_string(n_lab) + " labels");
  if (rows == 0 || cols == 0) throw Error(images_path + ": zero image dimensions");
  if (img.size() < 16 + n_img * rows * cols)
    throw Error(images_path + ": truncated file");
  if (lab.size() < 8 + n_lab) throw Error(labels_path + ": truncated file");

  Dataset ds;
  ds.schema.label_kind = LabelKind::classification;
  ds.schema.input_shape = InputShape::image(1, rows, cols);
  ds.schema.feature_count = rows * cols;
  ds.schema.feature_names.reserve(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      ds.schema.feature_names.push_back("p" + std::to_string(r) + "_" + std::to_string(c));

  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n_img; ++i) {
    Case c;
    c.id = c.provenance = i;
    c.raw.resize(rows * cols);
    c.features.resize(rows * cols);
    for (std::size_t p = 0; p < rows * cols; ++p) {
      std::uint8_t byte = static_cast<std::uint8_t>(img[16 + i * rows * cols + p]);
      c.raw[p] = byte;
      c.features[p] = static_cast<double>(byte) / 255.0;
    }
    std::uint8_t y = static_cast<std::uint8_t>(lab[8 + i]);
    max_label = std::max<std::size_t>(max_label, y);
    c.label = static_cast<double>(y);
    ds.cases.push_back(std::move(c));
  }

  ds.schema.num_classes = max_label + 1;
  if (ds.schema.num_classes < 2) ds.schema.num_classes = 2;
  for (std::size_t c = 0; c < ds.schema.num_classes; ++c)
    ds.schema.label_names.push_back(std::to_string(c));
  ds.origin = fnv1a64("idx:" + images_path + ":" + std::to_string(n_img));
  ds.validate();
  return ds;
}

// Applies previously computed statistics, e.g. train-split stats to a test
// split so the test set never leaks into the normalization.
inline Dataset apply_normalization(const Dataset& ds, const NormStats& stats) {
  if (stats.method == NormStats::Method::none) {
    Dataset out = ds;
    out.norm_stats = stats;
    return out;
  }
  if (stats.center.size() != ds.schema.feature_count)
    throw Error("normalization stats do not match feature count");
  Dataset out = ds;
  for (Case& c : out.cases) {
    for (std::size_t i = 0; i < c.features.size(); ++i) {
      if (stats.method == NormStats::Method::zscore) {
        c.features[i] = (c.features[i] - stats.center[i]) / stats.scale[i];
      } else {
        c.features[i] = stats.scale[i] == 0.0
                            ? 0.0
                            : (c.features[i] - stats.center[i]) / stats.scale[i];
      }
    }
  }
  out.norm_stats = stats;
  return out;
}

// Computes per-feature statistics on this dataset and rescales features.
// zscore maps to (x - mean) / std with std := 1 for constant features;
// minmax maps to [0,1] with constant features mapped to 0.
inline Dataset normalize(const Dataset& ds, NormStats::Method method) {
  if (ds.cases.empty()) throw Error("normalize: empty dataset");
  NormStats stats;
  stats.method = method;
  if (method == NormStats::Method::zscore) {
    stats.center = ds.feature_means();
    stats.scale = ds.feature_stds();
    for (double& s : stats.scale)
      if (s == 0.0) s = 1.0;
  } else if (method == NormStats::Method::minmax) {
    stats.center.assign(ds.schema.feature_count, 0.0);
    stats.scale.assign(ds.schema.feature_count, 0.0);
    for (std::size_t i = 0; i < ds.schema.feature_count; ++i) {
      double lo = ds.cases[0].features[i], hi = lo;
      for (const Case& c : ds.cases) {
        lo = std::min(lo, c.features[i]);
        hi = std::max(hi, c.features[i]);
      }
      stats.center[i] = lo;
      stats.scale[i] = hi - lo;
    }
  }
  return apply_normalization(ds, stats);
}

// Deterministic shuffled split. Train gets ceil(n * (1 - f)) cases; ids are
// re-densified per split and the pre-split id is kept in `provenance`.
inline std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction,
                                         std::uint64_t seed) {
  if (ds.size() < 2) throw Error("split: dataset needs at least 2 cases");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw Error("split: test fraction must be in (0,1)");

  Rng rng(seed);
  std::vector<std::size_t> order = rng.permutation(ds.size());
  const std::size_t n = ds.size();
  const std::size_t n_train =
      static_cast<std::size_t>(std::ceil(static_cast<double>(n) * (1.0 - test_fraction)));

  Dataset train, test;
  train.schema = test.schema = ds.schema;
  train.norm_stats = test.norm_stats = ds.norm_stats;
  train.origin = test.origin = ds.origin;
  for (std::size_t i = 0; i < n; ++i) {
    Case c = ds.cases[order[i]];
    c.provenance = ds.cases[order[i]].provenance;
    Dataset& dst = i < n_train ? train : test;
    c.id = dst.cases.size();
    dst.cases.push_back(std::move(c));
  }
  return {std::move(train), std::move(test)};
}

}  // namespace twinsys
