#include <gtest/gtest.h>

#include <random>

#include "csgd/constraints.hpp"
#include "csgd/trim.hpp"

using namespace csgd;

namespace {

void randomize_bn(Model& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f), pos(0.5f, 1.5f);
  for (auto& nt : m.named_tensors()) {
    const std::string slot = nt.name.substr(nt.name.rfind('.') + 1);
    if (slot == "kernel") continue;
    for (float& v : nt.tensor.data()) v = (slot == "sigma" || slot == "gamma") ? pos(rng) : u(rng);
  }
}

/// Clusters every independent conv to ceil(ratio * c) with k-means and
/// propagates the result to followers.
ClusterAssignment cluster_all(const Model& m, double ratio, std::uint64_t seed) {
  const auto groups = derive_constraint_groups(m.spec());
  ClusterAssignment a;
  for (const auto& id : independent_convs(m.spec(), groups)) {
    const Tensor& k = m.params(id).kernel;
    const auto r = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(k.dim(3))));
    a.set(id, kmeans_clusters(k, std::max<std::size_t>(r, 1), seed));
  }
  return propagate_clusters(groups, a);
}

std::vector<NetworkSpec> fixtures() {
  return {toy_vgg({6, 8, 10}, {12, 12, 1, 5}), resnet({8, 12, 16}, 2, {12, 12, 1, 5}), densenet(6, 4, 3, {10, 10, 1, 5})};
}

Tensor pointwise_kernel(const std::vector<float>& values) { return Tensor({1, 1, 1, values.size()}, values); }

}  // namespace

// ---------------------------------------------------------------------------
// Snap

TEST(Snap, IdenticalClusterUnchanged) {
  Model m = build_model(toy_vgg({4}), 1);
  LayerParams& p = m.params("conv1");
  for (std::size_t i = 0; i < p.kernel.numel(); i += 4) p.kernel.ptr()[i + 1] = p.kernel.ptr()[i];
  const Model before = m.clone();
  ClusterAssignment a;
  a.set("conv1", make_clusters(4, {{0, 1}, {2}, {3}}));
  const SnapReport rep = snap_clusters(m, a);
  EXPECT_EQ(rep.max_deviation, 0.0f);
  EXPECT_TRUE(rep.within_tolerance());
  EXPECT_TRUE(m.params("conv1").kernel.bit_equal(before.params("conv1").kernel));
}

TEST(Snap, WorkedPairBecomesMean) {
  NetworkSpec spec = toy_vgg({2}, {3, 3, 1, 2});
  spec.layers[0].kernel_h = spec.layers[0].kernel_w = 1;
  spec.layers[0].padding = 0;
  Model m = build_model(spec, 1);
  m.params("conv1").kernel = pointwise_kernel({1.0f, 1.000002f});
  ClusterAssignment a;
  a.set("conv1", make_clusters(2, {{0, 1}}));
  const SnapReport rep = snap_clusters(m, a);
  EXPECT_NEAR(m.params("conv1").kernel.ptr()[0], 1.000001, 1e-7);
  EXPECT_EQ(m.params("conv1").kernel.ptr()[0], m.params("conv1").kernel.ptr()[1]);
  EXPECT_NEAR(rep.max_deviation, 1e-6, 5e-8);
}

TEST(Snap, AllFiveSlotsAndToleranceReport) {
  Model m = build_model(toy_vgg({4}), 2);
  randomize_bn(m, 3);
  ClusterAssignment a;
  a.set("conv1", make_clusters(4, {{0, 3}, {1, 2}}));
  const SnapReport rep = snap_clusters(m, a, 1e-3f);
  EXPECT_FALSE(rep.within_tolerance());
  const LayerParams& p = m.params("conv1");
  for (const Tensor* t : {&p.mu, &p.sigma, &p.gamma, &p.beta}) {
    EXPECT_EQ(t->ptr()[0], t->ptr()[3]);
    EXPECT_EQ(t->ptr()[1], t->ptr()[2]);
  }
  for (std::size_t r = 0; r < 9; ++r) EXPECT_EQ(p.kernel.ptr()[r * 4 + 0], p.kernel.ptr()[r * 4 + 3]);
  EXPECT_EQ(max_cluster_deviation(m, a), 0.0f);
}

// ---------------------------------------------------------------------------
// Plans and slicing

TEST(SelectRemaining, FirstOfEachCluster) {
  ClusterAssignment a;
  a.set("x", make_clusters(6, {{0, 1}, {2, 3}, {4}, {5}}));
  a.set("s", singleton_clusters(3));
  a.set("one", make_clusters(4, {{2, 1, 3, 0}}));
  const TrimPlan plan = select_remaining(a);
  EXPECT_EQ(plan.layers.at("x").remaining(), (IndexSet{0, 2, 4, 5}));
  EXPECT_EQ(plan.layers.at("x").leader, (std::vector<long>{0, 0, 2, 2, 4, 5}));
  EXPECT_EQ(plan.layers.at("s").remaining(), (IndexSet{0, 1, 2}));
  EXPECT_EQ(plan.layers.at("one").remaining(), (IndexSet{0}));
  const nlohmann::json j = plan;
  EXPECT_EQ(j.at("x").at("remaining"), nlohmann::json::parse("[0,2,4,5]"));
  EXPECT_EQ(j.at("x").at("merge"), nlohmann::json::parse(R"({"1":0,"3":2})"));
}

TEST(TrimLayer, IdentityAndShapes) {
  Model m = build_model(toy_vgg({4}), 3);
  const LayerParams& p = m.params("conv1");
  const LayerParams same = trim_layer(p, {0, 1, 2, 3});
  EXPECT_TRUE(same.kernel.bit_equal(p.kernel));
  EXPECT_TRUE(same.beta.bit_equal(p.beta));
  const LayerParams two = trim_layer(p, {0, 2});
  EXPECT_EQ(two.kernel.shape(), (Shape{3, 3, 1, 2}));
  EXPECT_EQ(two.gamma.shape(), (Shape{2}));
  EXPECT_THROW(trim_layer(p, {0, 4}), ValidationError);
}

TEST(TrimLayer, SlicedForwardSelectsChannels) {
  std::mt19937_64 rng(4);
  Model m = build_model(toy_vgg({5}, {7, 7, 2, 3}), 4);
  randomize_bn(m, 5);
  const LayerParams& p = m.params("conv1");
  const Tensor x = uniform_tensor({3, 7, 7, 2}, 0, 1, rng);
  const IndexSet keep = {1, 3, 4};
  const LayerParams q = trim_layer(p, keep);
  const Tensor full = batchnorm(conv2d(x, p.kernel, 1, 1), p.mu, p.sigma, p.gamma, p.beta, Mode::eval);
  const Tensor cut = batchnorm(conv2d(x, q.kernel, 1, 1), q.mu, q.sigma, q.gamma, q.beta, Mode::eval);
  for (std::size_t r = 0; r < 3 * 7 * 7; ++r)
    for (std::size_t n = 0; n < keep.size(); ++n) EXPECT_NEAR(cut.ptr()[r * 3 + n], full.ptr()[r * 5 + keep[n]], 1e-6);
}

TEST(FollowingInputs, SingletonsArePureSlice) {
  std::mt19937_64 rng(6);
  const Tensor k = uniform_tensor({3, 3, 4, 2}, -1, 1, rng);
  const Tensor t = trim_following_inputs(k, discard_plan(4, {0, 3}));
  ASSERT_EQ(t.shape(), (Shape{3, 3, 2, 2}));
  for (std::size_t s = 0; s < 9; ++s)
    for (std::size_t o = 0; o < 2; ++o) {
      EXPECT_EQ(t.ptr()[(s * 2 + 0) * 2 + o], k.ptr()[(s * 4 + 0) * 2 + o]);
      EXPECT_EQ(t.ptr()[(s * 2 + 1) * 2 + o], k.ptr()[(s * 4 + 3) * 2 + o]);
    }
  EXPECT_TRUE(trim_following_inputs(k, ChannelPlan::identity(4)).bit_equal(k));
}

TEST(FollowingInputs, MergedChannelHoldsSum) {
  const float a = 0.25f, b = -1.5f;
  const Tensor k({1, 1, 3, 1}, std::vector<float>{a, b, 7.0f});
  ClusterAssignment c;
  c.set("x", make_clusters(3, {{0, 1}, {2}}));
  const Tensor t = trim_following_inputs(k, select_remaining(c).layers.at("x"));
  ASSERT_EQ(t.shape(), (Shape{1, 1, 2, 1}));
  EXPECT_EQ(t.ptr()[0], a + b);
  EXPECT_EQ(t.ptr()[1], 7.0f);
  EXPECT_THROW(trim_following_inputs(Tensor({1, 1, 4, 1}), select_remaining(c).layers.at("x")), ShapeError);
}

TEST(FollowingInputs, NextPreActivationUnchanged) {
  std::mt19937_64 rng(7);
  Model m = build_model(toy_vgg({6, 5}, {8, 8, 1, 3}), 7);
  randomize_bn(m, 8);
  ClusterAssignment a;
  a.set("conv1", make_clusters(6, {{0, 4}, {1, 2, 5}, {3}}));
  snap_clusters(m, a);
  const auto act = forward_all(m, uniform_tensor({4, 8, 8, 1}, 0, 1, rng), {});
  const ChannelPlan plan = select_remaining(a).layers.at("conv1");
  const LayerParams& p2 = m.params("conv2");
  const Tensor before = conv2d(act.at("pool1"), p2.kernel, 1, 1);
  const Tensor merged_in = detail::slice_last(act.at("pool1"), plan.remaining());
  const Tensor after = conv2d(merged_in, trim_following_inputs(p2.kernel, plan), 1, 1);
  EXPECT_LE(max_abs_diff(before, after), 1e-5f);
}

TEST(LinearInputs, SpatialPositionsMergeIndependently) {
  Tensor w({2 * 3, 1}, std::vector<float>{1, 2, 3, 10, 20, 30});
  ChannelPlan plan;
  plan.leader = {0, 0, 2};
  const Tensor t = trim_linear_inputs(w, plan, 2);
  EXPECT_EQ(t.shape(), (Shape{4, 1}));
  EXPECT_EQ(std::vector<float>(t.data().begin(), t.data().end()), (std::vector<float>{3, 3, 30, 30}));
  EXPECT_THROW(trim_linear_inputs(w, plan, 3), ShapeError);
}

// ---------------------------------------------------------------------------
// Whole networks

TEST(TrimNetwork, SingletonsGiveIdenticalModel) {
  for (const NetworkSpec& spec : fixtures()) {
    Model m = build_model(spec, 9);
    randomize_bn(m, 10);
    const Model t = trim_network(m, cluster_all(m, 1.0, 1));
    EXPECT_EQ(nlohmann::json(t.spec()), nlohmann::json(m.spec()));
    EXPECT_EQ(verify_equivalence(m, t, 20, 2), 0.0f) << spec.name;
  }
}

TEST(TrimNetwork, LosslessOnAllFixtures) {
  for (const NetworkSpec& spec : fixtures())
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      Model m = build_model(spec, 11 + seed);
      randomize_bn(m, 12 + seed);
      const ClusterAssignment a = cluster_all(m, 0.5, seed);
      snap_clusters(m, a);
      const Model t = trim_network(m, a);
      EXPECT_LE(verify_equivalence(m, t, 100, seed), 1e-4f) << spec.name << " seed " << seed;
      EXPECT_LT(parameter_count(t.spec()), parameter_count(m.spec()));
    }
}

TEST(TrimNetwork, UnsnappedModelIsDetected) {
  Model m = build_model(toy_vgg({6, 8}, {10, 10, 1, 4}), 13);
  randomize_bn(m, 14);
  ClusterAssignment a = cluster_all(m, 0.5, 1);
  snap_clusters(m, a);
  std::mt19937_64 rng(15);
  for (float& v : m.params("conv1").kernel.data()) v += std::uniform_real_distribution<float>(-0.1f, 0.1f)(rng);
  EXPECT_GT(max_cluster_deviation(m, a), 0.05f);
  const Model t = trim_network(m, a);
  EXPECT_GT(verify_equivalence(m, t, 100, 3), 1e-2f);
}

TEST(TrimNetwork, ResNetFiveEighthsWidths) {
  const NetworkSpec spec = resnet({16, 32, 64}, 2);
  Model m = build_model(spec, 16);
  const ClusterAssignment a = cluster_all(m, 5.0 / 8.0, 2);
  snap_clusters(m, a);
  const Model t = trim_network(m, a);
  for (const auto& l : t.spec().layers) {
    if (l.kind != LayerKind::conv) continue;
    const std::size_t expect = l.id[1] == '1' || l.id == "stem" ? 10 : l.id[1] == '2' ? 20 : 40;
    EXPECT_EQ(l.filters, expect) << l.id;
  }
  const SpecAnalysis an = validate(t.spec());
  for (const auto& l : t.spec().layers)
    if (l.kind == LayerKind::add) EXPECT_EQ(an.dims.at(l.inputs[0]).c, an.dims.at(l.inputs[1]).c) << l.id;
}

TEST(TrimNetwork, DenseGrowthFourToTwo) {
  const NetworkSpec spec = densenet(8, 4, 3, {10, 10, 1, 5});
  Model m = build_model(spec, 17);
  randomize_bn(m, 18);
  const ClusterAssignment a = cluster_all(m, 0.5, 3);
  snap_clusters(m, a);
  const Model t = trim_network(m, a);
  for (const char* id : {"d1", "d2", "d3"}) EXPECT_EQ(t.spec().layer(id).filters, 2u);
  EXPECT_EQ(t.params("bn_final").gamma.numel(), 4u + 3 * 2);
  EXPECT_LE(verify_equivalence(m, t, 100, 4), 1e-4f);
}

TEST(TrimNetwork, FlattenedClassifierInput) {
  NetworkSpec s;
  s.name = "flat-head";
  s.input_h = s.input_w = 5;
  s.input_c = 1;
  s.classes = 3;
  s.layers.push_back(detail::conv_layer("c1", kInputId, 6, 3, 2, true));
  LayerSpec fc;
  fc.id = "fc";
  fc.kind = LayerKind::linear;
  fc.filters = 3;
  fc.inputs = {"c1"};
  s.layers.push_back(fc);
  Model m = build_model(s, 19);
  randomize_bn(m, 20);
  ClusterAssignment a;
  a.set("c1", make_clusters(6, {{0, 5}, {1, 2}, {3}, {4}}));
  snap_clusters(m, a);
  const Model t = trim_network(m, a);
  EXPECT_EQ(t.params("fc").kernel.shape(), (Shape{9 * 4, 3}));
  EXPECT_LE(verify_equivalence(m, t, 100, 5), 1e-4f);
}

TEST(TrimNetwork, ParameterCountFromClusterCounts) {
  Model m = build_model(toy_vgg({6, 8}), 21);
  ClusterAssignment a;
  a.set("conv1", even_clusters(6, 3));
  a.set("conv2", imbalanced_clusters(8, 5));
  snap_clusters(m, a);
  const Model t = trim_network(m, a);
  const std::size_t expect = (9 * 1 * 3 + 4 * 3) + (9 * 3 * 5 + 4 * 5) + (5 * 10 + 10);
  std::size_t stored = 0;
  for (const auto& nt : t.named_tensors()) stored += nt.tensor.numel();
  EXPECT_EQ(stored, expect);
  EXPECT_EQ(parameter_count(t.spec()), expect);
}

TEST(TrimNetwork, Idempotent) {
  for (const NetworkSpec& spec : fixtures()) {
    Model m = build_model(spec, 22);
    randomize_bn(m, 23);
    const ClusterAssignment a = cluster_all(m, 0.5, 4);
    snap_clusters(m, a);
    const Model once = trim_network(m, a);
    ClusterAssignment singles;
    for (const auto& l : once.spec().layers)
      if (l.kind == LayerKind::conv) singles.set(l.id, singleton_clusters(l.filters));
    const Model twice = trim_network(once, singles);
    EXPECT_EQ(nlohmann::json(twice.spec()), nlohmann::json(once.spec()));
    const auto ta = once.named_tensors(), tb = twice.named_tensors();
    ASSERT_EQ(ta.size(), tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_TRUE(ta[i].tensor.bit_equal(tb[i].tensor)) << ta[i].name;
  }
}

TEST(TrimNetwork, UnpropagatedFollowerRejected) {
  Model m = build_model(resnet({8}, 1), 24);
  ClusterAssignment a;
  a.set("stem", even_clusters(8, 4));
  EXPECT_THROW(trim_network(m, a), ConstraintError);
}

TEST(TrimNetwork, DenseBnPlanMismatchRejected) {
  Model m = build_model(densenet(4, 3, 2), 25);
  ClusterAssignment a;
  a.set("d1", even_clusters(3, 2));
  a.set("bn2", singleton_clusters(7));
  EXPECT_THROW(trim_network(m, a), ConstraintError);
}

TEST(TrimNetwork, PlanOnNonPrunableLayerRejected) {
  Model m = build_model(toy_vgg({4}), 26);
  TrimPlan plan;
  plan.layers["fc"] = ChannelPlan::identity(10);
  EXPECT_THROW(trim_network(m, plan), ValidationError);
}

TEST(Verify, IdentityIsZero) {
  Model m = build_model(resnet({4, 8}, 1), 27);
  EXPECT_EQ(verify_equivalence(m, m.clone(), 100, 6), 0.0f);
  EXPECT_THROW(verify_equivalence(m, build_model(toy_vgg({4}, {20, 20, 1, 10}), 1), 10, 1), ShapeError);
}
