#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "depthg/evaluation.hpp"
#include "depthg/losses.hpp"
#include "test_util.hpp"

using namespace depthg;

namespace {

double brute_best(const Mat& m, bool maximize) {
  std::vector<std::size_t> perm(m.rows);
  std::iota(perm.begin(), perm.end(), 0);
  double best = maximize ? -1e300 : 1e300;
  do {
    double s = 0;
    for (std::size_t r = 0; r < m.rows; ++r) s += m(r, perm[r]);
    best = maximize ? std::max(best, s) : std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

ConfusionMatrix conf_of(const std::vector<std::vector<std::uint64_t>>& rows) {
  ConfusionMatrix c(rows.size(), rows[0].size());
  for (std::size_t p = 0; p < rows.size(); ++p)
    for (std::size_t g = 0; g < rows[0].size(); ++g) c.at(p, g) = rows[p][g];
  return c;
}

}  // namespace

TEST_CASE("single cluster centroid is the mean direction") {
  Mat pts(3, 2);
  pts.data = {1, 0, 0, 2, 3, 3};
  Rng rng(0);
  const KMeansResult r = kmeans(pts, 1, 20, rng);
  // Mean of the unit vectors (1,0), (0,1), (1,1)/sqrt2.
  const double x = 1 + 1 / std::sqrt(2.0), n = std::sqrt(2 * x * x);
  CHECK(r.centroids(0, 0) == doctest::Approx(x / n).epsilon(1e-12));
  CHECK(r.centroids(0, 1) == doctest::Approx(x / n).epsilon(1e-12));
}

TEST_CASE("antipodal blobs are separated") {
  Rng rng(1);
  Mat pts(200, 3);
  std::vector<std::size_t> truth(200);
  for (std::size_t i = 0; i < 200; ++i) {
    truth[i] = i % 2;
    const double sign = truth[i] ? -1.0 : 1.0;
    pts(i, 0) = sign * 5 + 0.3 * rng.normal();
    pts(i, 1) = 0.3 * rng.normal();
    pts(i, 2) = 0.3 * rng.normal();
  }
  const KMeansResult r = kmeans(pts, 2, 50, rng);
  CHECK(r.converged);
  const bool same = r.labels[0] == truth[0];
  for (std::size_t i = 0; i < 200; ++i) CHECK((r.labels[i] == truth[i]) == same);
}

TEST_CASE("k-means objective never increases") {
  Rng rng(2);
  for (auto metric : {KMeansMetric::kCosine, KMeansMetric::kEuclidean}) {
    const Mat pts = testutil::random_mat(300, 4, rng);
    const KMeansResult r = kmeans(pts, 5, 100, rng, metric);
    for (std::size_t i = 1; i < r.objective.size(); ++i)
      CHECK(r.objective[i] <= r.objective[i - 1] + 1e-9);
  }
}

TEST_CASE("k-means is thread independent") {
  Rng a(3), b(3), data(9);
  const Mat pts = testutil::random_mat(500, 5, data);
  const KMeansResult r1 = kmeans(pts, 4, 100, a, KMeansMetric::kCosine, 1);
  const KMeansResult r4 = kmeans(pts, 4, 100, b, KMeansMetric::kCosine, 4);
  CHECK(r1.labels == r4.labels);
  CHECK(r1.centroids.data == r4.centroids.data);
}

TEST_CASE("hungarian agrees with brute force") {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 1 + rng.uniform(6);
    Mat m(k, k);
    for (double& v : m.data) v = static_cast<double>(rng.uniform(20));
    for (bool maximize : {false, true}) {
      const Assignment a = hungarian(m, maximize);
      CHECK(assignment_objective(m, a) == brute_best(m, maximize));
      std::vector<long> cols(a.mapping);
      std::sort(cols.begin(), cols.end());
      for (std::size_t i = 0; i < k; ++i) CHECK(cols[i] == static_cast<long>(i));
    }
  }
}

TEST_CASE("hungarian picks the identity for a dominant diagonal and ignores shifts") {
  Mat m(4, 4);
  Rng rng(5);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) m(r, c) = r == c ? 10.0 + r : rng.uniform01();
  CHECK(hungarian(m, true).mapping == std::vector<long>{0, 1, 2, 3});
  for (int t = 0; t < 20; ++t) {
    Mat x(5, 5);
    for (double& v : x.data) v = rng.uniform01();
    Mat y = x;
    for (double& v : y.data) v += 3.5;
    CHECK(hungarian(x, true).mapping == hungarian(y, true).mapping);
  }
  // All-equal matrix: the lexicographically first optimum is the identity.
  CHECK(hungarian(Mat(3, 3), false).mapping == std::vector<long>{0, 1, 2});
}

TEST_CASE("metric worked examples") {
  const ConfusionMatrix c = conf_of({{40, 10}, {10, 40}});
  const Metrics m = metrics(c, align_clusters(c));
  CHECK(m.accuracy == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(m.iou[0] == doctest::Approx(40.0 / 60.0).epsilon(1e-15));
  CHECK(m.miou == doctest::Approx(40.0 / 60.0).epsilon(1e-15));

  const ConfusionMatrix k = conf_of({{50, 50}, {0, 0}});
  const Metrics mk = metrics(k, Assignment{{0, 1}});
  CHECK(mk.accuracy == 0.5);
  CHECK(mk.miou == 0.25);

  const ConfusionMatrix perfect = conf_of({{0, 12, 0}, {0, 0, 3}, {7, 0, 0}});
  const Metrics mp = metrics(perfect, align_clusters(perfect));
  CHECK(mp.accuracy == 1.0);
  CHECK(mp.miou == 1.0);
}

TEST_CASE("metrics match precomputed fixtures") {
  std::ifstream in(testutil::fixture("metric_fixtures.json"));
  const auto cases = nlohmann::json::parse(in);
  REQUIRE(cases.size() >= 8);
  for (const auto& cs : cases) {
    const ConfusionMatrix c = conf_of(cs["confusion"].get<std::vector<std::vector<std::uint64_t>>>());
    const Assignment a = align_clusters(c);
    CHECK(a.mapping == cs["mapping"].get<std::vector<long>>());
    const Metrics m = metrics(c, a);
    CHECK(std::abs(m.accuracy - cs["accuracy"].get<double>()) <= 1e-12);
    CHECK(std::abs(m.miou - cs["miou"].get<double>()) <= 1e-12);
    for (std::size_t g = 0; g < c.gt_classes; ++g) {
      if (cs["iou"][g].is_null()) {
        CHECK_FALSE(m.present[g]);
      } else {
        CHECK(std::abs(m.iou[g] - cs["iou"][g].get<double>()) <= 1e-12);
      }
    }
  }
}

TEST_CASE("confusion skips ignored pixels") {
  const ConfusionMatrix c = confusion({0, 1, 1, 0}, {0, 255, 1, 1}, 2, 2);
  CHECK(c.total() == 3);
  CHECK(c.at(1, 1) == 1);
  CHECK(c.at(0, 1) == 1);
  CHECK_THROWS_AS(confusion({0, 2}, {0, 1}, 2, 2), ContractError);
}

TEST_CASE("cluster probe recovers well separated classes") {
  Rng rng(6);
  Mat codes(300, 4);
  std::vector<std::uint8_t> labels(300);
  for (std::size_t i = 0; i < 300; ++i) {
    labels[i] = static_cast<std::uint8_t>(i % 3);
    for (std::size_t c = 0; c < 4; ++c) codes(i, c) = (c == labels[i] ? 4.0 : 0.0) + 0.2 * rng.normal();
  }
  labels[5] = 255;
  const ClusterProbeResult r = cluster_probe(codes, labels, 3, 3, 50, rng, KMeansMetric::kCosine, 1, 3);
  CHECK(r.metrics.accuracy == 1.0);
  CHECK(r.confusion.total() == 299);
}

TEST_CASE("cross entropy gradient matches central differences") {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const Mat x = testutil::random_mat(12, 5, rng);
    const Mat w = testutil::random_mat(5, 4, rng), b = testutil::random_mat(1, 4, rng);
    std::vector<std::uint8_t> y(12);
    for (auto& v : y) v = static_cast<std::uint8_t>(rng.uniform(4));
    y[3] = 255;
    const CrossEntropy ce = softmax_cross_entropy(w, b, x, y);
    std::vector<double> flat(w.data), grad(ce.grad_weight.data);
    flat.insert(flat.end(), b.data.begin(), b.data.end());
    grad.insert(grad.end(), ce.grad_bias.data.begin(), ce.grad_bias.data.end());
    const double err = finite_diff_check(
        [&](std::span<const double> v) {
          Mat ww(5, 4), bb(1, 4);
          std::copy(v.begin(), v.begin() + 20, ww.data.begin());
          std::copy(v.begin() + 20, v.end(), bb.data.begin());
          return softmax_cross_entropy(ww, bb, x, y).value;
        },
        flat, grad, 1e-5);
    CHECK(err <= 1e-6);
  }
  // Uniform logits give log K.
  const Mat x(4, 2);
  CHECK(softmax_cross_entropy(Mat(2, 3), Mat(1, 3), x, {0, 1, 2, 0}).value ==
        doctest::Approx(std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("linear probe") {
  Rng rng(8);
  Mat codes(200, 2);
  std::vector<std::uint8_t> labels(200);
  for (std::size_t i = 0; i < 200; ++i) {
    labels[i] = static_cast<std::uint8_t>(i % 2);
    codes(i, 0) = (labels[i] ? 2.0 : -2.0) + 0.3 * rng.normal();
    codes(i, 1) = rng.normal();
  }
  LinearProbeConfig cfg{0.05, 300, 1};
  CHECK(linear_probe(codes, labels, codes, labels, 2, cfg).metrics.accuracy == 1.0);

  cfg.steps = 0;
  const LinearProbeResult a = linear_probe(codes, labels, codes, labels, 2, cfg);
  const LinearProbeResult b = linear_probe(codes, labels, codes, labels, 2, cfg);
  CHECK(a.weight.data == b.weight.data);
  CHECK(a.metrics.accuracy == b.metrics.accuracy);
}

TEST_CASE("report formats") {
  Rng rng(9);
  const Mat codes = testutil::random_mat(60, 3, rng);
  std::vector<std::uint8_t> labels(60);
  for (std::size_t i = 0; i < 60; ++i) labels[i] = static_cast<std::uint8_t>(i % 3);
  EvalReport rep;
  rep.cluster = cluster_probe(codes, labels, 3, 3, 20, rng);
  const std::string text = format_report_text(rep);
  CHECK(text.find("[cluster_probe]") != std::string::npos);
  CHECK(text.find("[linear_probe]") == std::string::npos);
  const auto j = nlohmann::json::parse(format_report_json(rep));
  CHECK(j["cluster_probe"]["accuracy"].get<double>() == rep.cluster.metrics.accuracy);
}
