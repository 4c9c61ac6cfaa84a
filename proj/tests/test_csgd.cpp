#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "csgd/constraints.hpp"
#include "csgd/csgd.hpp"
#include "csgd/data.hpp"
#include "csgd/train.hpp"

using namespace csgd;

namespace {

constexpr float kEta = 1e-4f;
constexpr float kEps = 3e-3f;

MatrixRM random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, float scale = 1.0f) {
  MatrixRM m(rows, cols);
  std::normal_distribution<float> n(0.0f, scale);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

LayerClusters random_layout(std::size_t c, std::mt19937_64& rng, int scheme) {
  const std::size_t r = std::uniform_int_distribution<std::size_t>(1, c)(rng);
  if (scheme == 1) return even_clusters(c, r);
  if (scheme == 2) return imbalanced_clusters(c, r);
  const Tensor k = uniform_tensor({1, 1, 2, c}, -1, 1, rng);
  return kmeans_clusters(k, r, rng(), 10);
}

/// Per-cluster deviations of the columns of W from their cluster mean.
std::vector<double> deviations(const MatrixRM& w, const LayerClusters& lc) {
  std::vector<double> out;
  for (const auto& h : lc.clusters) {
    if (h.size() < 2) continue;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(w.rows());
    for (std::size_t k : h) mean += w.col(static_cast<Eigen::Index>(k)).cast<double>();
    mean /= static_cast<double>(h.size());
    for (std::size_t k : h) out.push_back((w.col(static_cast<Eigen::Index>(k)).cast<double>() - mean).norm());
  }
  return out;
}

Tensor pointwise_kernel(const std::vector<float>& values) { return Tensor({1, 1, 1, values.size()}, values); }

void fill_random_grads(Model& m, std::mt19937_64& rng) {
  for (auto& nt : m.named_tensors())
    if (nt.trainable)
      for (float& g : nt.tensor.grad()) g = std::normal_distribution<float>(0.0f, 0.1f)(rng);
}

bool models_bit_equal(const Model& a, const Model& b) {
  const auto ta = a.named_tensors(), tb = b.named_tensors();
  if (ta.size() != tb.size()) return false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!ta[i].tensor.bit_equal(tb[i].tensor)) return false;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Gamma and Lambda

TEST(Gamma, PairAndSingletons) {
  const MatrixRM g = build_gamma(make_clusters(4, {{0, 1}, {2}, {3}}));
  MatrixRM expect(4, 4);
  expect << .5f, .5f, 0, 0, .5f, .5f, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_EQ(g, expect);
}

TEST(Gamma, SingletonsGiveIdentity) { EXPECT_EQ(build_gamma(singleton_clusters(5)), MatrixRM::Identity(5, 5)); }

TEST(Gamma, SingleClusterIsQuarter) {
  EXPECT_EQ(build_gamma(make_clusters(4, {{0, 1, 2, 3}})), MatrixRM::Constant(4, 4, 0.25f));
}

TEST(Gamma, RowStochasticAndIdempotent) {
  std::mt19937_64 rng(1);
  for (int s = 0; s < 30; ++s) {
    const LayerClusters lc = random_layout(1 + s, rng, s % 3);
    const MatrixRM g = build_gamma(lc);
    for (Eigen::Index i = 0; i < g.rows(); ++i) EXPECT_NEAR(g.row(i).sum(), 1.0f, 1e-6);
    EXPECT_LE((g * g - g).cwiseAbs().maxCoeff(), 1e-6f);
  }
}

TEST(Lambda, WorkedPairValues) {
  const MatrixRM l = build_lambda(make_clusters(2, {{0, 1}}), kEta, kEps);
  EXPECT_NEAR(l(0, 0), 1.6e-3, 1e-9);
  EXPECT_NEAR(l(1, 1), 1.6e-3, 1e-9);
  EXPECT_NEAR(l(0, 1), -1.5e-3, 1e-9);
  EXPECT_NEAR(l(1, 0), -1.5e-3, 1e-9);
}

TEST(Lambda, SingletonsGiveDiagEta) {
  EXPECT_EQ(build_lambda(singleton_clusters(4), kEta, kEps), MatrixRM(MatrixRM::Identity(4, 4) * kEta));
}

TEST(Lambda, EqualsShiftedGamma) {
  std::mt19937_64 rng(2);
  for (int s = 0; s < 30; ++s) {
    const LayerClusters lc = random_layout(1 + s, rng, s % 3);
    const auto c = static_cast<Eigen::Index>(lc.width);
    const MatrixRM expect = (kEta + kEps) * MatrixRM::Identity(c, c) - kEps * build_gamma(lc);
    EXPECT_LE((build_lambda(lc, kEta, kEps) - expect).cwiseAbs().maxCoeff(), 1e-9f);
  }
}

// ---------------------------------------------------------------------------
// Steps

TEST(MatrixStep, SingletonsBitwisePlainSgd) {
  std::mt19937_64 rng(3);
  for (int s = 0; s < 20; ++s) {
    const std::size_t c = 1 + s;
    const LayerClusters lc = singleton_clusters(c);
    MatrixRM w = random_matrix(27, static_cast<Eigen::Index>(c), rng);
    MatrixRM ref = w;
    const MatrixRM g = random_matrix(27, static_cast<Eigen::Index>(c), rng);
    csgd_step_matrix(w, g, build_gamma(lc), build_lambda(lc, kEta, kEps), 0.03f);
    sgd_step(ref, g, 0.03f, kEta);
    EXPECT_EQ(std::memcmp(w.data(), ref.data(), sizeof(float) * static_cast<std::size_t>(w.size())), 0) << "c " << c;
  }
}

TEST(MatrixStep, MatchesNaiveForEveryScheme) {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int scheme = 0; scheme < 3; ++scheme)
    for (int layer = 0; layer < 4; ++layer) {
      const std::size_t c = std::uniform_int_distribution<std::size_t>(1, 32)(rng);
      const LayerClusters lc = random_layout(c, rng, scheme);
      const MatrixRM gamma = build_gamma(lc), lambda = build_lambda(lc, kEta, kEps);
      MatrixRM w = random_matrix(18, static_cast<Eigen::Index>(c), rng, 0.3f);
      for (int step = 0; step < 100; ++step) {
        const MatrixRM g = random_matrix(18, static_cast<Eigen::Index>(c), rng, 0.1f);
        MatrixRM naive = w;
        csgd_step_naive(naive, g, lc, 0.03f, kEta, kEps);
        csgd_step_matrix(w, g, gamma, lambda, 0.03f);
        worst = std::max(worst, static_cast<double>((w - naive).cwiseAbs().maxCoeff()));
        w = naive;
      }
    }
  EXPECT_LE(worst, 1e-6);
}

TEST(MatrixStep, ShapeMismatchRejected) {
  const LayerClusters lc = singleton_clusters(4);
  MatrixRM w = MatrixRM::Zero(3, 4);
  EXPECT_THROW(csgd_step_matrix(w, MatrixRM::Zero(3, 5), build_gamma(lc), build_lambda(lc, kEta, kEps), 0.1f),
               ShapeError);
  EXPECT_THROW(csgd_step_matrix(w, MatrixRM::Zero(3, 4), build_gamma(singleton_clusters(3)),
                                build_lambda(lc, kEta, kEps), 0.1f),
               ShapeError);
  EXPECT_THROW(csgd_step_naive(w, MatrixRM::Zero(3, 4), singleton_clusters(5), 0.1f, kEta, kEps), ShapeError);
}

TEST(MatrixStep, NoGradientDeviationShrinksByTauEps) {
  const LayerClusters lc = make_clusters(6, {{0, 3, 4}, {1, 2}, {5}});
  std::mt19937_64 rng(5);
  MatrixRM w = random_matrix(9, 6, rng);
  const MatrixRM zero = MatrixRM::Zero(9, 6);
  const float tau = 0.05f, eps = 0.2f;
  for (int step = 0; step < 20; ++step) {
    const auto before = deviations(w, lc);
    csgd_step_matrix(w, zero, build_gamma(lc), build_lambda(lc, 0.0f, eps), tau);
    const auto after = deviations(w, lc);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i] / before[i], 1.0 - tau * eps, 1e-5);
  }
}

TEST(MatrixStep, DeviationLawUnderRandomGradients) {
  const LayerClusters lc = even_clusters(10, 4);
  std::mt19937_64 rng(6);
  MatrixRM w = random_matrix(9, 10, rng);
  const float tau = 0.03f;
  const double factor = 1.0 - static_cast<double>(tau) * (kEta + kEps);
  for (int step = 0; step < 50; ++step) {
    const auto before = deviations(w, lc);
    csgd_step_matrix(w, random_matrix(9, 10, rng), build_gamma(lc), build_lambda(lc, kEta, kEps), tau);
    const auto after = deviations(w, lc);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(after[i] / before[i] / factor, 1.0, 1e-4);
  }
}

// ---------------------------------------------------------------------------
// Metrics

TEST(Chi, WorkedPair) {
  Tensor k = pointwise_kernel({1.0f, 3.0f});
  EXPECT_DOUBLE_EQ(chi_layer(k, make_clusters(2, {{0, 1}})), 2.0);
}

TEST(Chi, IdenticalOrSingletonIsZero) {
  EXPECT_DOUBLE_EQ(chi_layer(pointwise_kernel({2.5f, 2.5f, 2.5f}), make_clusters(3, {{0, 1, 2}})), 0.0);
  std::mt19937_64 rng(7);
  EXPECT_DOUBLE_EQ(chi_layer(uniform_tensor({3, 3, 2, 5}, -1, 1, rng), singleton_clusters(5)), 0.0);
}

TEST(Chi, SumsOverConvLayers) {
  Model m = build_model(toy_vgg({4, 6}), 1);
  ClusterAssignment a;
  a.set("conv1", even_clusters(4, 2));
  a.set("conv2", imbalanced_clusters(6, 3));
  EXPECT_NEAR(chi(m, a), chi_layer(m.params("conv1").kernel, a.at("conv1")) +
                             chi_layer(m.params("conv2").kernel, a.at("conv2")), 1e-12);
}

TEST(Phi, WorkedValues) {
  NetworkSpec spec = toy_vgg({1}, {4, 4, 1, 2});
  spec.layers[0].kernel_h = spec.layers[0].kernel_w = 1;
  spec.layers[0].padding = 0;
  Model m = build_model(spec, 1);
  m.params("conv1").kernel.ptr()[0] = 2.0f;
  EXPECT_DOUBLE_EQ(phi(m, {}), 0.0);
  EXPECT_DOUBLE_EQ(phi(m, {{"conv1", {0}}}), 4.0);
}

TEST(Phi, MatchesFlatSum) {
  Model m = build_model(toy_vgg({5, 7}), 2);
  const PruneSets sets = {{"conv1", {1, 4}}, {"conv2", {0, 2, 6}}};
  double expect = 0.0;
  for (const auto& [id, p] : sets) {
    const Tensor& k = m.params(id).kernel;
    for (std::size_t i = 0; i < k.numel(); ++i)
      if (std::find(p.begin(), p.end(), i % k.dim(3)) != p.end()) expect += double(k.ptr()[i]) * k.ptr()[i];
  }
  EXPECT_NEAR(phi(m, sets), expect, 1e-9 * expect);
  EXPECT_THROW(phi(m, {{"conv1", {5}}}), ValidationError);
}

// ---------------------------------------------------------------------------
// Baselines

TEST(GroupLasso, ZeroStrengthIsPlainSgd) {
  std::mt19937_64 rng(8);
  MatrixRM w = random_matrix(9, 5, rng), ref = w;
  const MatrixRM g = random_matrix(9, 5, rng);
  group_lasso_step(w, g, {0, 3}, 0.03f, kEta, 0.0f);
  sgd_step(ref, g, 0.03f, kEta);
  EXPECT_EQ(w, ref);
}

TEST(GroupLasso, NormFallsByTauStrength) {
  MatrixRM w(4, 2);
  w << 0.5f, 1, 0.5f, 1, 0.5f, 1, 0.5f, 1;  // column 0 has unit norm
  const MatrixRM zero = MatrixRM::Zero(4, 2);
  const float tau = 0.01f, strength = 0.5f;
  for (int step = 1; step <= 50; ++step) {
    group_lasso_step(w, zero, {0}, tau, 0.0f, strength);
    EXPECT_NEAR(w.col(0).norm(), 1.0 - step * tau * strength, 1e-6);
    EXPECT_EQ(w(0, 1), 1.0f);
  }
}

TEST(GroupLasso, ZeroFilterHasZeroSubgradient) {
  MatrixRM w = MatrixRM::Zero(3, 2);
  group_lasso_step(w, MatrixRM::Zero(3, 2), {0, 1}, 0.1f, 0.0f, 1.0f);
  EXPECT_EQ(w, MatrixRM::Zero(3, 2));
}

TEST(Magnitude, WorkedRanking) {
  EXPECT_EQ(magnitude_remaining_set(pointwise_kernel({5, 1, 3, 2}), 2), (IndexSet{0, 2}));
  EXPECT_EQ(magnitude_remaining_set(pointwise_kernel({-5, 1, 3, 2}), 1), (IndexSet{0}));
}

TEST(Magnitude, FullWidthAndTies) {
  EXPECT_EQ(magnitude_remaining_set(pointwise_kernel({5, 1, 3, 2}), 4), (IndexSet{0, 1, 2, 3}));
  EXPECT_EQ(magnitude_remaining_set(pointwise_kernel({1, 2, 1, 1}), 2), (IndexSet{0, 1}));
  EXPECT_EQ(magnitude_remaining_set(pointwise_kernel({0, 1, 1, 1}), 2), (IndexSet{1, 2}));
  EXPECT_THROW(magnitude_remaining_set(pointwise_kernel({1, 2}), 3), ValidationError);
}

// ---------------------------------------------------------------------------
// Optimizers on a model

TEST(Optimizer, CentripetalMatrixMatchesNaive) {
  const NetworkSpec spec = resnet({6, 8}, 1, {8, 8, 1, 3});
  Model a = build_model(spec, 1);
  const auto groups = derive_constraint_groups(spec);
  ClusterAssignment assign;
  for (const auto& id : independent_convs(spec, groups)) {
    const std::size_t c = a.params(id).kernel.dim(3);
    assign.set(id, even_clusters(c, (c + 1) / 2));
  }
  assign = propagate_clusters(groups, assign);
  Model b = a.clone();
  CentripetalSgd matrix(assign, kEta, kEps, StepForm::matrix), naive(assign, kEta, kEps, StepForm::naive);
  std::mt19937_64 ra(9), rb(9);
  for (int step = 0; step < 20; ++step) {
    fill_random_grads(a, ra);
    fill_random_grads(b, rb);
    matrix.step(a, 0.03f);
    naive.step(b, 0.03f);
    const auto ta = a.named_tensors(), tb = b.named_tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_LE(max_abs_diff(ta[i].tensor, tb[i].tensor), 1e-6) << ta[i].name;
  }
}

TEST(Optimizer, SingletonZeroEpsTrainingRunEqualsPlainSgd) {
  const DatasetSplit data = synth_split(SynthKind::blobs, 128, 0, 3, 1, {8, 0.2f});
  const NetworkSpec spec = resnet({4, 6}, 1, {8, 8, 1, 3});
  Model a = build_model(spec, 2), b = build_model(spec, 2);
  ClusterAssignment assign;
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::conv) assign.set(l.id, singleton_clusters(l.filters));
  CentripetalSgd c(assign, kEta, 0.0f);
  PlainSgd p(kEta);
  TrainOptions o;
  o.epochs = 2;
  o.batch_size = 16;
  o.schedule = LrSchedule::constant(0.05f);
  o.shuffle_seed = 3;
  std::vector<Model> snapshots;
  o.on_step = [&](const Model& m, const StepInfo&) {
    snapshots.push_back(m.clone());
    return true;
  };
  train(a, c, data.train, o);
  std::vector<Model> csgd_steps = std::move(snapshots);
  snapshots.clear();
  train(b, p, data.train, o);
  ASSERT_EQ(csgd_steps.size(), snapshots.size());
  for (std::size_t i = 0; i < snapshots.size(); ++i) EXPECT_TRUE(models_bit_equal(csgd_steps[i], snapshots[i])) << "step " << i;
}

TEST(Optimizer, UnclusteredLayersTakePlainSgdStep) {
  const NetworkSpec spec = toy_vgg({4, 6});
  Model a = build_model(spec, 3), b = build_model(spec, 3);
  ClusterAssignment assign;
  assign.set("conv1", even_clusters(4, 2));
  CentripetalSgd c(assign, kEta, kEps);
  PlainSgd p(kEta);
  std::mt19937_64 ra(10), rb(10);
  fill_random_grads(a, ra);
  fill_random_grads(b, rb);
  c.step(a, 0.03f);
  p.step(b, 0.03f);
  for (const char* name : {"conv2.kernel", "conv2.gamma", "fc.kernel", "fc.beta"}) {
    const auto ta = a.named_tensors(), tb = b.named_tensors();
    for (std::size_t i = 0; i < ta.size(); ++i)
      if (ta[i].name == name) EXPECT_TRUE(ta[i].tensor.bit_equal(tb[i].tensor)) << name;
  }
  EXPECT_FALSE(a.params("conv1").kernel.bit_equal(b.params("conv1").kernel));
}

TEST(Optimizer, RunningStatisticsUntouched) {
  Model m = build_model(toy_vgg({4}), 4);
  ClusterAssignment assign;
  assign.set("conv1", even_clusters(4, 1));
  CentripetalSgd c(assign, kEta, 0.5f);
  const Tensor mu = m.params("conv1").mu.clone(), sigma = m.params("conv1").sigma.clone();
  std::mt19937_64 rng(11);
  fill_random_grads(m, rng);
  c.step(m, 0.1f);
  EXPECT_TRUE(m.params("conv1").mu.bit_equal(mu));
  EXPECT_TRUE(m.params("conv1").sigma.bit_equal(sigma));
}

TEST(Optimizer, ChiContractionWithLiveGradients) {
  const DatasetSplit data = synth_split(SynthKind::blobs, 256, 0, 4, 5, {8, 0.2f});
  const NetworkSpec spec = resnet({8, 12}, 1, {8, 8, 1, 4});
  Model m = build_model(spec, 6);
  const auto groups = derive_constraint_groups(spec);
  ClusterAssignment assign;
  for (const auto& id : independent_convs(spec, groups)) {
    const std::size_t c = m.params(id).kernel.dim(3);
    assign.set(id, kmeans_clusters(m.params(id).kernel, c * 5 / 8, 7));
  }
  assign = propagate_clusters(groups, assign);
  for (float eps : {kEps, 0.3f}) {
    Model run = m.clone();
    CentripetalSgd opt(assign, kEta, eps);
    const float tau = 0.03f;
    const double expect = std::pow(1.0 - double(tau) * (kEta + eps), 2);
    TrainOptions o;
    o.epochs = 4;
    o.batch_size = 16;
    o.max_steps = 50;
    o.schedule = LrSchedule::constant(tau);
    std::map<std::string, double> prev;
    double prev_total = chi(run, assign);
    for (const auto& [id, lc] : assign.layers)
      if (spec.layer(id).kind == LayerKind::conv) prev[id] = chi_layer(run.params(id).kernel, lc);
    std::size_t checked = 0;
    o.on_step = [&](const Model& cur, const StepInfo&) {
      const double total = chi(cur, assign);
      EXPECT_NEAR(total / prev_total / expect, 1.0, 1e-4);
      prev_total = total;
      for (auto& [id, before] : prev) {
        const double now = chi_layer(cur.params(id).kernel, assign.at(id));
        EXPECT_NEAR(now / before / expect, 1.0, 1e-4) << id;
        before = now;
      }
      ++checked;
      return true;
    };
    train(run, opt, data.train, o);
    EXPECT_EQ(checked, 50u);
  }
}

TEST(Optimizer, CentripetalRejectsNegativeHyperparameters) {
  EXPECT_THROW(CentripetalSgd({}, -1e-4f, kEps), ValidationError);
  EXPECT_THROW(CentripetalSgd({}, kEta, -1.0f), ValidationError);
}

TEST(Optimizer, GroupLassoOnlyPenalisesPruneSet) {
  const NetworkSpec spec = toy_vgg({4, 6});
  Model a = build_model(spec, 5), b = build_model(spec, 5);
  GroupLassoSgd lasso({{"conv1", {1, 2}}}, kEta, 0.5f);
  PlainSgd plain(kEta);
  std::mt19937_64 ra(12), rb(12);
  fill_random_grads(a, ra);
  fill_random_grads(b, rb);
  lasso.step(a, 0.03f);
  plain.step(b, 0.03f);
  const Tensor& ka = a.params("conv1").kernel;
  const Tensor& kb = b.params("conv1").kernel;
  for (std::size_t i = 0; i < ka.numel(); ++i) {
    const std::size_t j = i % 4;
    if (j == 1 || j == 2) EXPECT_NE(ka.ptr()[i], kb.ptr()[i]);
    else EXPECT_EQ(ka.ptr()[i], kb.ptr()[i]);
  }
  EXPECT_TRUE(a.params("conv2").kernel.bit_equal(b.params("conv2").kernel));
  EXPECT_TRUE(a.params("conv1").gamma.bit_equal(b.params("conv1").gamma));
}
