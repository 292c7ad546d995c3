#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "depthg/lhp3d.hpp"
#include "test_util.hpp"

using namespace depthg;

namespace {

PointCloud cloud_of(std::vector<Point3> pts, std::size_t h, std::size_t w) {
  return PointCloud{std::move(pts), h, w};
}

Tensor2 random_depth(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<float> d(h * w);
  for (float& v : d) v = static_cast<float>(rng.uniform01());
  return Tensor2(h, w, std::move(d));
}

bool near_kink(const Mat& a, const Mat& b) {
  const Mat S = cosine_correlation(a, b);
  for (double v : S.data)
    if (std::abs(v) < 1e-3) return true;
  return false;
}

}  // namespace

TEST_CASE("equidistant neighbors get uniform weights") {
  // Centre of a 3x3 flat grid: its four edge neighbours are equally close.
  const PointCloud c = depth_to_pointcloud(Tensor2(3, 3, std::vector<float>(9, 0.2f)));
  for (auto w : {NeighborWeighting::kInverseDistance, NeighborWeighting::kSoftmax}) {
    const NeighborSet n = knn3d(c, {1, 1}, 4, w);
    REQUIRE(n.neighbors.size() == 4);
    for (const auto& nb : n.neighbors) CHECK(nb.weight == doctest::Approx(0.25).epsilon(1e-14));
  }
  const NeighborSet n = knn3d(c, {1, 1}, 4);
  CHECK(linear_index(n.neighbors[0].index, 3) == 1);
  CHECK(linear_index(n.neighbors[3].index, 3) == 7);
}

TEST_CASE("a very close neighbor dominates") {
  const PointCloud c =
      cloud_of({{0, 0, 0}, {1e-9, 0, 0}, {5, 0, 0}, {0, 6, 0}}, 1, 4);
  const NeighborSet n = knn3d(c, {0, 0}, 3);
  CHECK(n.neighbors[0].index.col == 1);
  CHECK(n.neighbors[0].weight > 0.999);
  double s = 0;
  for (const auto& nb : n.neighbors) s += nb.weight;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("knn3d matches a brute-force neighbor search") {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    const std::size_t h = 3 + rng.uniform(5), w = 3 + rng.uniform(5);
    const PointCloud c = depth_to_pointcloud(random_depth(h, w, rng), 1.0 + rng.uniform01());
    const std::size_t a = rng.uniform(h * w);
    const std::size_t k = 1 + rng.uniform(8);
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < h * w; ++i)
      if (i != a) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return distance(c.points[a], c.points[x]) < distance(c.points[a], c.points[y]);
    });
    const NeighborSet n = knn3d(c, {a / w, a % w}, k);
    REQUIRE(n.neighbors.size() == k);
    for (std::size_t j = 0; j < k; ++j) CHECK(linear_index(n.neighbors[j].index, w) == order[j]);
  }
}

TEST_CASE("propagation mixing worked examples") {
  Mat codes(3, 2);
  codes.data = {0, 0, 2, 0, 0, 2};
  NeighborSet two{{0, 0}, {{{0, 1}, 1.0, 0.5}, {{0, 2}, 1.0, 0.5}}};
  CHECK(propagate_mix(codes, 3, two, 0.5) == std::vector<double>{0.5, 0.5});
  CHECK(propagate_mix(codes, 3, two, 1.0) == std::vector<double>{0.0, 0.0});
  NeighborSet one{{0, 0}, {{{0, 1}, 1.0, 1.0}}};
  CHECK(propagate_mix(codes, 3, one, 0.0) == std::vector<double>{2.0, 0.0});
  CHECK_THROWS_AS(propagate_mix(codes, 3, one, 1.5), ContractError);
}

TEST_CASE("propagation map agrees with per-anchor mixing") {
  Rng rng(9);
  const PointCloud c = depth_to_pointcloud(random_depth(5, 5, rng));
  const Mat codes = testutil::random_mat(25, 3, rng);
  const SampleSet anchors = farthest_point_sample(c, 6, 0);
  LhpConfig cfg;
  cfg.neighbors = 4;
  cfg.anchor_keep = 0.3;
  const Mat mixed = apply(propagation_map(c, anchors, cfg), codes);
  for (std::size_t r = 0; r < anchors.size(); ++r) {
    const auto ref = propagate_mix(codes, 5, knn3d(c, anchors.indices[r], 4), 0.3);
    for (std::size_t k = 0; k < 3; ++k) CHECK(mixed(r, k) == doctest::Approx(ref[k]).epsilon(1e-14));
  }
  const Mat gathered = apply(gather_map(anchors), codes);
  CHECK(gathered.row(2)[1] == codes(anchors.linear()[2], 1));
}

TEST_CASE("projection head degenerate cases") {
  const ProjectionHeadParams id = ProjectionHeadParams::identity(3);
  const std::vector<double> x{1.0, -2.0, 0.5};
  CHECK(project(id, x) == x);
  ProjectionHeadParams zero{Mat(3, 3), Mat(1, 3)};
  zero.bias.data = {0.1, 0.2, 0.3};
  CHECK(project(zero, x) == std::vector<double>{0.1, 0.2, 0.3});
}

TEST_CASE("projection backward matches central differences") {
  Rng rng(10);
  for (int t = 0; t < 20; ++t) {
    ProjectionHeadParams p = ProjectionHeadParams::init(5, rng);
    p.bias = testutil::random_mat(1, 5, rng);
    const Mat x = testutil::random_mat(7, 5, rng), upstream = testutil::random_mat(7, 5, rng);
    const ProjectionGrad g = project_rows_backward(p, x, upstream);
    const auto value = [&](const ProjectionHeadParams& pp, const Mat& xx) {
      const Mat y = project_rows(pp, xx);
      double s = 0;
      for (std::size_t k = 0; k < y.data.size(); ++k) s += y.data[k] * upstream.data[k];
      return s;
    };
    CHECK(finite_diff_check([&](std::span<const double> v) {
            Mat xx(7, 5);
            std::copy(v.begin(), v.end(), xx.data.begin());
            return value(p, xx);
          }, x.data, g.grad_input.data, 1e-5) <= 1e-6);
    CHECK(finite_diff_check([&](std::span<const double> v) {
            ProjectionHeadParams pp = p;
            std::copy(v.begin(), v.end(), pp.weight.data.begin());
            return value(pp, x);
          }, p.weight.data, g.grad_params.weight.data, 1e-5) <= 1e-6);
  }
}

namespace {

struct LhpProblem {
  TripleTargets targets;
  ObjectiveConfig cfg{{0.58, 0.07}, {0.36, 0.02}, {0.70, 0.76}, {0.19, 0.03, Centering::kNone}, true};
  std::array<Mat, kTripleSlots> codes;
  std::array<PropagationMap, kTripleSlots> gather, mix;
  ProjectionHeadParams projection;
};

LhpProblem make_problem(Rng& rng, double anchor_keep, std::size_t n = 4) {
  LhpProblem p;
  const std::size_t k = 5, q = 5;
  LhpConfig lc;
  lc.neighbors = 3;
  lc.anchor_keep = anchor_keep;
  for (std::size_t s = 0; s < kTripleSlots; ++s) {
    const PointCloud c = depth_to_pointcloud(random_depth(n, n, rng));
    const SampleSet ss = farthest_point_sample(c, k, rng.uniform(n * n));
    p.gather[s] = gather_map(ss);
    p.mix[s] = propagation_map(c, ss, lc);
    p.codes[s] = testutil::random_mat(n * n, q, rng);
  }
  p.targets = {testutil::random_mat(k, k, rng), testutil::random_mat(k, k, rng),
               testutil::random_mat(k, k, rng), Mat(k, k)};
  for (double& v : p.targets.self_D.data) v = rng.uniform01();
  p.projection = ProjectionHeadParams::init(q, rng);
  return p;
}

LhpValue eval(const LhpProblem& p, double beta) {
  return lhp_loss(p.targets, p.cfg, {&p.codes[0], &p.codes[1], &p.codes[2], &p.codes[3]},
                  p.gather, p.mix, p.projection, beta);
}

}  // namespace

TEST_CASE("zero beta reduces to the plain objective") {
  Rng rng(11);
  const LhpProblem p = make_problem(rng, 0.5);
  const LhpValue v = eval(p, 0.0);
  std::array<Mat, kTripleSlots> s;
  for (std::size_t k = 0; k < kTripleSlots; ++k) s[k] = apply(p.gather[k], p.codes[k]);
  const ObjectiveValue ref = triple_objective(p.targets, p.cfg, s[0], s[1], s[2], s[3]);
  CHECK(v.value == ref.value);
  for (double g : v.grad_projection.weight.data) CHECK(g == 0.0);
}

TEST_CASE("identity projection with full anchor weight repeats the head term") {
  Rng rng(12);
  LhpProblem p = make_problem(rng, 1.0);
  p.projection = ProjectionHeadParams::identity(5);
  const LhpValue v = eval(p, 1.0);
  CHECK(v.projected.value == doctest::Approx(v.head.value).epsilon(1e-14));
  CHECK(v.value == doctest::Approx(2.0 * v.head.value).epsilon(1e-14));
}

TEST_CASE("lhp loss gradient matches central differences") {
  Rng rng(13);
  int checked = 0;
  while (checked < 20) {
    LhpProblem p = make_problem(rng, 0.5);
    std::array<Mat, kTripleSlots> s, m;
    for (std::size_t k = 0; k < kTripleSlots; ++k) {
      s[k] = apply(p.gather[k], p.codes[k]);
      m[k] = project_rows(p.projection, apply(p.mix[k], p.codes[k]));
    }
    bool kink = false;
    for (std::size_t k = 1; k < kTripleSlots; ++k) kink = kink || near_kink(s[0], s[k]) || near_kink(m[0], m[k]);
    if (kink) continue;
    ++checked;
    const LhpValue v = eval(p, 0.8);
    std::vector<double> x, g;
    for (std::size_t k = 0; k < kTripleSlots; ++k) {
      x.insert(x.end(), p.codes[k].data.begin(), p.codes[k].data.end());
      g.insert(g.end(), v.grad_codes[k].data.begin(), v.grad_codes[k].data.end());
    }
    x.insert(x.end(), p.projection.weight.data.begin(), p.projection.weight.data.end());
    g.insert(g.end(), v.grad_projection.weight.data.begin(), v.grad_projection.weight.data.end());
    x.insert(x.end(), p.projection.bias.data.begin(), p.projection.bias.data.end());
    g.insert(g.end(), v.grad_projection.bias.data.begin(), v.grad_projection.bias.data.end());
    const double err = finite_diff_check(
        [&](std::span<const double> y) {
          LhpProblem pp = p;
          std::size_t o = 0;
          for (auto& c : pp.codes) {
            std::copy(y.begin() + o, y.begin() + o + c.data.size(), c.data.begin());
            o += c.data.size();
          }
          for (Mat* t : pp.projection.tensors()) {
            std::copy(y.begin() + o, y.begin() + o + t->data.size(), t->data.begin());
            o += t->data.size();
          }
          return eval(pp, 0.8).value;
        },
        x, g, 1e-5);
    CHECK(err <= 1e-6);
  }
}
