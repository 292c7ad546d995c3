#include <doctest.h>

#include <cmath>

#include "depthg/correlation.hpp"
#include "test_util.hpp"

using namespace depthg;

namespace {

Tensor3 random_features(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<float> d(c * h * w);
  for (float& v : d) v = static_cast<float>(rng.normal());
  return Tensor3(c, h, w, std::move(d));
}

}  // namespace

TEST_CASE("feature correlation equals pairwise cosine similarity") {
  Rng rng(1);
  const Tensor3 a = random_features(5, 3, 4, rng), b = random_features(5, 3, 4, rng);
  const CorrelationTensor F = feature_correlation(a, b);
  REQUIRE(F.rows == 12);
  REQUIRE(F.cols == 12);
  for (std::size_t p = 0; p < 12; ++p) {
    for (std::size_t q = 0; q < 12; ++q) {
      const auto va = a.vector_at(p), vb = b.vector_at(q);
      double d = 0, na = 0, nb = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        d += va[c] * vb[c];
        na += va[c] * va[c];
        nb += vb[c] * vb[c];
      }
      CHECK(F(p, q) == doctest::Approx(d / std::sqrt(na * nb)).epsilon(1e-12));
      CHECK(std::abs(F(p, q)) <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("self correlation has a unit diagonal") {
  Rng rng(2);
  const Tensor3 a = random_features(4, 3, 3, rng);
  const CorrelationTensor F = feature_correlation(a, a);
  for (std::size_t p = 0; p < 9; ++p) CHECK(F(p, p) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("sampled correlation picks rows and columns of the full tensor") {
  Rng rng(3);
  const Tensor3 a = random_features(4, 4, 4, rng), b = random_features(4, 4, 4, rng);
  const CorrelationTensor full = feature_correlation(a, b);
  const SampleSet si{{{0, 1}, {3, 3}}, 4, 4};
  const SampleSet sj{{{2, 0}, {1, 1}, {0, 0}}, 4, 4};
  const CorrelationTensor F = feature_correlation(a, b, si, sj);
  const auto li = si.linear(), lj = sj.linear();
  for (std::size_t p = 0; p < li.size(); ++p) {
    for (std::size_t q = 0; q < lj.size(); ++q) CHECK(F(p, q) == full(li[p], lj[q]));
  }
  const SampleSet bad{{{4, 0}}, 4, 4};
  CHECK_THROWS_AS(feature_correlation(a, b, bad, sj), ContractError);
}

TEST_CASE("zero feature vectors correlate to zero") {
  Tensor3 a(2, 1, 2), b(2, 1, 2);
  a.set(0, 0, 0, 1.0f);
  b.set(1, 0, 1, 1.0f);
  const CorrelationTensor F = feature_correlation(a, b);
  CHECK(F(1, 0) == 0.0);
  CHECK(F(1, 1) == 0.0);
}

TEST_CASE("depth correlation is the outer product of depths") {
  const Tensor2 di(1, 3, {0.0f, 0.5f, 1.0f});
  const Tensor2 dj(1, 2, {0.25f, 1.0f});
  const CorrelationTensor D = depth_correlation(di, dj);
  CHECK(D(0, 0) == 0.0);
  CHECK(D(1, 0) == 0.125);
  CHECK(D(2, 1) == 1.0);
  for (double v : D.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  const Tensor2 bad(1, 1, {1.5f});
  CHECK_THROWS_AS(depth_correlation(bad, dj), ContractError);
}

TEST_CASE("centering modes") {
  Mat F(2, 3);
  F.data = {1, 2, 3, 4, 6, 8};
  const Mat none = spatial_center(F, Centering::kNone);
  CHECK(none.data == F.data);
  const Mat row = spatial_center(F, Centering::kRow);
  CHECK(row.data == std::vector<double>{-1, 0, 1, -2, 0, 2});
  const Mat both = spatial_center(F, Centering::kRowCol);
  for (std::size_t p = 0; p < 2; ++p) {
    double s = 0;
    for (double v : both.row(p)) s += v;
    CHECK(std::abs(s) < 1e-12);
  }
  for (std::size_t q = 0; q < 3; ++q) CHECK(std::abs(both(0, q) + both(1, q)) < 1e-12);
  CHECK(parse_centering(to_string(Centering::kRowCol)) == Centering::kRowCol);
  CHECK_THROWS_AS(parse_centering("col"), ContractError);
}
