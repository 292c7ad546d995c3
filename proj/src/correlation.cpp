#include "depthg/correlation.hpp"

#include <cmath>

namespace depthg {

std::string to_string(Centering c) {
  switch (c) {
    case Centering::kNone: return "none";
    case Centering::kRow: return "row";
    case Centering::kRowCol: return "row+col";
  }
  return "none";
}

Centering parse_centering(const std::string& text) {
  if (text == "none") return Centering::kNone;
  if (text == "row") return Centering::kRow;
  if (text == "row+col") return Centering::kRowCol;
  throw ContractError("unknown centering mode '" + text + "' (expected none, row, row+col)");
}

Mat gather_rows(const Mat& m, const std::vector<std::size_t>& rows) {
  Mat out(rows.size(), m.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < m.rows, "gather_rows: index out of bounds");
    auto src = m.row(rows[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

CorrelationTensor cosine_correlation(const Mat& a, const Mat& b) {
  require(a.cols == b.cols, "cosine_correlation: channel count mismatch");
  std::vector<double> na(a.rows), nb(b.rows);
  for (std::size_t p = 0; p < a.rows; ++p) na[p] = norm(a.row(p));
  for (std::size_t q = 0; q < b.rows; ++q) nb[q] = norm(b.row(q));
  CorrelationTensor out(a.rows, b.rows);
  for (std::size_t p = 0; p < a.rows; ++p) {
    for (std::size_t q = 0; q < b.rows; ++q) {
      if (na[p] < kNormEpsilon || nb[q] < kNormEpsilon) continue;
      out(p, q) = dot(a.row(p), b.row(q)) / (na[p] * nb[q]);
    }
  }
  return out;
}

namespace {

void check_samples(const SampleSet& s, std::size_t height, std::size_t width) {
  require(s.height == height && s.width == width,
          "sample set grid does not match the map it indexes");
  for (const auto& g : s.indices) {
    require(g.row < height && g.col < width, "sample index out of bounds");
  }
}

void check_unit_range(const Tensor2& d) {
  for (float v : d.data()) {
    require(v >= 0.0f && v <= 1.0f, "depth_correlation: guidance value outside [0,1]");
  }
}

}  // namespace

CorrelationTensor feature_correlation(const Tensor3& f_i, const Tensor3& f_j,
                                      const SampleSet& samples_i,
                                      const SampleSet& samples_j) {
  require(f_i.channels() == f_j.channels(), "feature_correlation: channel count mismatch");
  check_samples(samples_i, f_i.height(), f_i.width());
  check_samples(samples_j, f_j.height(), f_j.width());
  return cosine_correlation(gather_rows(positions_by_channels(f_i), samples_i.linear()),
                            gather_rows(positions_by_channels(f_j), samples_j.linear()));
}

CorrelationTensor feature_correlation(const Tensor3& f_i, const Tensor3& f_j) {
  return feature_correlation(f_i, f_j, all_positions(f_i.height(), f_i.width()),
                             all_positions(f_j.height(), f_j.width()));
}

CorrelationTensor depth_correlation(const Tensor2& d_i, const Tensor2& d_j,
                                    const SampleSet& samples_i,
                                    const SampleSet& samples_j) {
  check_unit_range(d_i);
  check_unit_range(d_j);
  check_samples(samples_i, d_i.height(), d_i.width());
  check_samples(samples_j, d_j.height(), d_j.width());
  const auto li = samples_i.linear();
  const auto lj = samples_j.linear();
  CorrelationTensor out(li.size(), lj.size());
  for (std::size_t p = 0; p < li.size(); ++p) {
    const double dp = d_i[li[p]];
    for (std::size_t q = 0; q < lj.size(); ++q) out(p, q) = dp * static_cast<double>(d_j[lj[q]]);
  }
  return out;
}

CorrelationTensor depth_correlation(const Tensor2& d_i, const Tensor2& d_j) {
  return depth_correlation(d_i, d_j, all_positions(d_i.height(), d_i.width()),
                           all_positions(d_j.height(), d_j.width()));
}

CorrelationTensor spatial_center(const CorrelationTensor& F, Centering mode) {
  for (double v : F.data) require(std::isfinite(v), "spatial_center: non-finite entry");
  CorrelationTensor out = F;
  if (mode == Centering::kNone || F.rows == 0 || F.cols == 0) return out;
  for (std::size_t p = 0; p < out.rows; ++p) {
    double mean = 0.0;
    for (double v : out.row(p)) mean += v;
    mean /= static_cast<double>(out.cols);
    for (double& v : out.row(p)) v -= mean;
  }
  if (mode == Centering::kRowCol) {
    for (std::size_t q = 0; q < out.cols; ++q) {
      double mean = 0.0;
      for (std::size_t p = 0; p < out.rows; ++p) mean += out(p, q);
      mean /= static_cast<double>(out.rows);
      for (std::size_t p = 0; p < out.rows; ++p) out(p, q) -= mean;
    }
  }
  return out;
}

}  // namespace depthg
