#include "twinsys/retrieval.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "testutil.hpp"

using namespace twinsys;

namespace {

Dataset three_cases() {
  Dataset ds;
  ds.schema.label_kind = LabelKind::classification;
  ds.schema.num_classes = 2;
  ds.schema.feature_count = 2;
  ds.schema.feature_names = {"x", "y"};
  ds.schema.input_shape = InputShape::flat(2);
  ds.schema.label_names = {"a", "b"};
  const double feats[3][2] = {{0, 0}, {1, 0}, {0, 2}};
  const double labels[3] = {0, 1, 1};
  for (std::size_t i = 0; i < 3; ++i) {
    Case c;
    c.id = c.provenance = i;
    c.features = {feats[i][0], feats[i][1]};
    c.label = labels[i];
    ds.cases.push_back(c);
  }
  ds.origin = fnv1a64("three");
  return ds;
}

FeatureWeights raw_weights(std::vector<double> w) {
  FeatureWeights fw;
  fw.scheme = Scheme::uniform;
  fw.weights = std::move(w);
  return fw;
}

TEST(BuildIndex, InputSpaceCopiesFeatures) {
  Dataset ds = three_cases();
  CaseIndex index = build_index(ds);
  ASSERT_EQ(index.vectors.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(index.vectors[i], ds.cases[i].features);
  EXPECT_EQ(index.space, "input");
  EXPECT_EQ(index.model_fingerprint, 0u);
  EXPECT_EQ(index.origin, ds.origin);
}

TEST(BuildIndex, LatentSpaceUsesLayerActivations) {
  Dataset ds = tu::make_blobs(12, 2, 0, 2.0, 1.0, 3);
  auto m = build({LayerSpec::dense(2, 5), LayerSpec::plain(LayerKind::relu),
                  LayerSpec::dense(5, 2), LayerSpec::plain(LayerKind::softmax)},
                 LabelKind::classification, 7, InputShape::flat(2));
  CaseIndex index = build_index(ds, "layer:" + m.layers[1].name, &m);
  EXPECT_EQ(index.dim(), 5u);
  EXPECT_EQ(index.model_fingerprint, model_fingerprint(m));
  for (const auto& v : index.vectors)
    for (double e : v) EXPECT_GE(e, 0.0);  // relu range

  // vectors agree with a direct forward trace
  ActivationTrace trace;
  forward(m, Tensor::vec(ds.cases[4].features), trace);
  EXPECT_EQ(index.vectors[4], trace.acts[1].second.data());
}

TEST(BuildIndex, Errors) {
  Dataset ds = three_cases();
  EXPECT_THROW(build_index(ds, "layer:relu1"), Error);  // no model

  auto m = build({LayerSpec::dense(2, 3), LayerSpec::plain(LayerKind::relu),
                  LayerSpec::dense(3, 2), LayerSpec::plain(LayerKind::softmax)},
                 LabelKind::classification, 1, InputShape::flat(2));
  EXPECT_THROW(build_index(ds, "layer:nope", &m), Error);

  Dataset wide = tu::make_blobs(6, 3, 0, 1.0, 1.0, 2);  // 3 features vs model's 2
  EXPECT_THROW(build_index(wide, "layer:relu1", &m), Error);

  Dataset empty = ds;
  empty.cases.clear();
  EXPECT_THROW(build_index(empty), Error);
}

TEST(Retrieve, UniformWeightsNearestCase) {
  CaseIndex index = build_index(three_cases());
  auto got = retrieve(index, {0.9, 0.0}, uniform_weights(2), 1);
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].case_id, 1u);
  EXPECT_EQ(got[0].rank, 1u);
  EXPECT_NEAR(got[0].distance, std::sqrt(0.5 * 0.01), 1e-12);
}

TEST(Retrieve, ZeroWeightTieBrokenById) {
  CaseIndex index = build_index(three_cases());
  auto got = retrieve(index, {0.9, 0.0}, raw_weights({0.0, 1.0}), 3);
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[0].case_id, 0u);  // ties (c0, c1) at distance 0 -> lower id
  EXPECT_EQ(got[1].case_id, 1u);
  EXPECT_EQ(got[2].case_id, 2u);
  EXPECT_DOUBLE_EQ(got[0].distance, 0.0);
  EXPECT_DOUBLE_EQ(got[1].distance, 0.0);
  EXPECT_DOUBLE_EQ(got[2].distance, 2.0);
}

TEST(Retrieve, FullKReturnsTotalOrdering) {
  CaseIndex index = build_index(three_cases());
  auto got = retrieve(index, {0.0, 0.5}, uniform_weights(2), 3);
  ASSERT_EQ(got.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(got[r].rank, r + 1);
  for (std::size_t r = 1; r < 3; ++r) EXPECT_GE(got[r].distance, got[r - 1].distance);
}

TEST(Retrieve, Errors) {
  CaseIndex index = build_index(three_cases());
  EXPECT_THROW(retrieve(index, {0, 0}, uniform_weights(2), 0), Error);
  EXPECT_THROW(retrieve(index, {0, 0}, uniform_weights(2), 4), Error);
  EXPECT_THROW(retrieve(index, {0, 0, 0}, uniform_weights(2), 1), Error);
  EXPECT_THROW(retrieve(index, {0, 0}, uniform_weights(3), 1), Error);
  FeatureWeights latent = uniform_weights(2);
  latent.space = "layer:relu1";
  EXPECT_THROW(retrieve(index, {0, 0}, latent, 1), Error);
}

TEST(Retrieve, MatchesBruteForceOracle) {
  Rng rng(404);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 5 + rng.index(40);
    const std::size_t d = 1 + rng.index(6);
    Dataset ds;
    ds.schema.label_kind = LabelKind::regression;
    ds.schema.feature_count = d;
    ds.schema.input_shape = InputShape::flat(d);
    for (std::size_t i = 0; i < d; ++i) ds.schema.feature_names.push_back("f");
    std::vector<std::vector<double>> base(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i) {
      Case c;
      c.id = c.provenance = i;
      for (std::size_t j = 0; j < d; ++j) {
        // coarse grid so exact ties happen
        c.features.push_back(std::floor(rng.uniform(-2.0, 2.0) * 2.0) / 2.0);
      }
      base[i] = c.features;
      ds.cases.push_back(c);
    }
    std::vector<double> w(d), q(d);
    double wsum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      w[j] = rng.uniform();
      wsum += w[j];
      q[j] = std::floor(rng.uniform(-2.0, 2.0) * 2.0) / 2.0;
    }
    for (double& v : w) v /= wsum;
    const std::size_t k = 1 + rng.index(n);

    CaseIndex index = build_index(ds);
    auto got = retrieve(index, q, raw_weights(w), k);
    auto want = tu::brute_force_knn(base, q, &w, k);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t r = 0; r < k; ++r) {
      EXPECT_EQ(got[r].case_id, want[r].id) << "trial " << trial << " rank " << r;
      EXPECT_NEAR(got[r].distance, want[r].dist, 1e-12);
    }
  }
}

TEST(Retrieve, ScaleCoherence) {
  Dataset ds = tu::make_blobs(25, 3, 0, 2.0, 1.0, 9);
  CaseIndex index = build_index(ds);
  std::vector<double> w = {0.2, 0.5, 0.3};
  std::vector<double> scaled = {0.2 * 7, 0.5 * 7, 0.3 * 7};
  std::vector<double> q = ds.cases[7].features;
  q[0] += 0.1;
  auto a = retrieve(index, q, raw_weights(w), 10);
  auto b = retrieve(index, q, raw_weights(scaled), 10);
  for (std::size_t r = 0; r < a.size(); ++r) {
    EXPECT_EQ(a[r].case_id, b[r].case_id);
    EXPECT_NEAR(b[r].distance, a[r].distance * std::sqrt(7.0), 1e-9);
  }
}

TEST(Retrieve, ZeroWeightFeatureIsInvisible) {
  Dataset ds = tu::make_blobs(20, 2, 1, 2.0, 1.0, 14);
  CaseIndex index = build_index(ds);
  FeatureWeights w = raw_weights({0.6, 0.4, 0.0});
  std::vector<double> q = ds.cases[3].features;
  auto a = retrieve(index, q, w, 5);
  q[2] += 1000.0;
  auto b = retrieve(index, q, w, 5);
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_EQ(a[r].case_id, b[r].case_id);
    EXPECT_DOUBLE_EQ(a[r].distance, b[r].distance);
  }
}

TEST(Retrieve, StoredCaseIsItsOwnNearestNeighbor) {
  Dataset ds = tu::make_blobs(30, 4, 0, 2.0, 1.0, 21);
  CaseIndex index = build_index(ds);
  Rng rng(5);
  std::vector<double> w(4);
  double s = 0.0;
  for (double& v : w) {
    v = rng.uniform();
    s += v;
  }
  for (double& v : w) v /= s;
  auto got = retrieve(index, ds.cases[13].features, raw_weights(w), 3);
  EXPECT_EQ(got[0].case_id, 13u);
  EXPECT_DOUBLE_EQ(got[0].distance, 0.0);
}

TEST(TwinPredict, ClassificationRules) {
  Dataset ds = three_cases();  // labels 0, 1, 1
  CaseIndex index = build_index(ds);

  // k = 1: the single neighbor's label
  std::vector<Neighbor> one = {{0, 0.5, 1}};
  EXPECT_DOUBLE_EQ(twin_predict(one, index, LabelKind::classification), 0.0);

  // labels (1, 0, 1) -> majority 1
  std::vector<Neighbor> maj = {{1, 0.1, 1}, {0, 0.2, 2}, {2, 0.3, 3}};
  EXPECT_DOUBLE_EQ(twin_predict(maj, index, LabelKind::classification), 1.0);

  // tie (one 0, one 1) -> rank-1 neighbor's label
  std::vector<Neighbor> tie = {{0, 0.1, 1}, {1, 0.2, 2}};
  EXPECT_DOUBLE_EQ(twin_predict(tie, index, LabelKind::classification), 0.0);
  std::vector<Neighbor> tie2 = {{2, 0.1, 1}, {0, 0.2, 2}};
  EXPECT_DOUBLE_EQ(twin_predict(tie2, index, LabelKind::classification), 1.0);

  EXPECT_THROW(twin_predict({}, index, LabelKind::classification), Error);
}

TEST(TwinPredict, RegressionInverseDistance) {
  Dataset ds;
  ds.schema.label_kind = LabelKind::regression;
  ds.schema.feature_count = 1;
  ds.schema.feature_names = {"f"};
  ds.schema.input_shape = InputShape::flat(1);
  for (std::size_t i = 0; i < 2; ++i) {
    Case c;
    c.id = c.provenance = i;
    c.features = {static_cast<double>(i)};
    c.label = 10.0 * static_cast<double>(i + 1);  // 10, 20
    ds.cases.push_back(c);
  }
  CaseIndex index = build_index(ds);
  std::vector<Neighbor> nb = {{0, 0.0, 1}, {1, 1.0, 2}};
  EXPECT_NEAR(twin_predict(nb, index, LabelKind::regression), 10.0, 1e-6);

  std::vector<Neighbor> even = {{0, 1.0, 1}, {1, 1.0, 2}};
  EXPECT_NEAR(twin_predict(even, index, LabelKind::regression), 15.0, 1e-9);
}

TEST(IndexJson, RoundTripTrustsMatchingFingerprint) {
  tu::TempDir tmp("index_rt");
  Dataset ds = tu::make_blobs(10, 2, 0, 2.0, 1.0, 31);
  auto m = build({LayerSpec::dense(2, 4), LayerSpec::plain(LayerKind::relu),
                  LayerSpec::dense(4, 2), LayerSpec::plain(LayerKind::softmax)},
                 LabelKind::classification, 2, InputShape::flat(2));
  CaseIndex index = build_index(ds, "layer:" + m.layers[1].name, &m);
  save_index(index, tmp.path("idx.json"));

  CaseIndex back = load_index(tmp.path("idx.json"), ds, &m);
  EXPECT_EQ(back.vectors, index.vectors);
  EXPECT_EQ(back.space, index.space);
  EXPECT_EQ(back.model_fingerprint, index.model_fingerprint);
}

TEST(IndexJson, FingerprintMismatchRecomputes) {
  tu::TempDir tmp("index_fp");
  Dataset ds = tu::make_blobs(10, 2, 0, 2.0, 1.0, 31);
  auto m1 = build({LayerSpec::dense(2, 4), LayerSpec::plain(LayerKind::relu),
                   LayerSpec::dense(4, 2), LayerSpec::plain(LayerKind::softmax)},
                  LabelKind::classification, 2, InputShape::flat(2));
  auto m2 = m1;
  m2.params[0].weights[0] += 1.0;

  CaseIndex index = build_index(ds, "layer:" + m1.layers[1].name, &m1);
  save_index(index, tmp.path("idx.json"));

  CaseIndex back = load_index(tmp.path("idx.json"), ds, &m2);
  CaseIndex fresh = build_index(ds, "layer:" + m2.layers[1].name, &m2);
  EXPECT_EQ(back.vectors, fresh.vectors);
  EXPECT_NE(back.vectors, index.vectors);
  EXPECT_EQ(back.model_fingerprint, model_fingerprint(m2));
}

TEST(IndexJson, MalformedRejected) {
  tu::TempDir tmp("index_bad");
  Dataset ds = three_cases();
  tu::write_file(tmp.path("bad.json"), "{not json");
  EXPECT_THROW(load_index(tmp.path("bad.json"), ds), Error);
  EXPECT_THROW(load_index(tmp.path("missing.json"), ds), Error);
}

}  // namespace
