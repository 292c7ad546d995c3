#pragma once

#include <string>

#include "depthg/core.hpp"
#include "depthg/sampling.hpp"

namespace depthg {

/// Pairwise correspondence between the positions of two maps. Row p refers to
/// the p-th (sampled) position of map i, column q to the q-th of map j.
using CorrelationTensor = Mat;

enum class Centering { kNone, kRow, kRowCol };

std::string to_string(Centering c);
Centering parse_centering(const std::string& text);

/// Rows of `m` selected by linear position.
Mat gather_rows(const Mat& m, const std::vector<std::size_t>& rows);

/// Entry (p, q) = cosine similarity between row p of `a` and row q of `b`.
CorrelationTensor cosine_correlation(const Mat& a, const Mat& b);

/// Cosine correspondence between sampled positions of two feature maps.
CorrelationTensor feature_correlation(const Tensor3& f_i, const Tensor3& f_j,
                                      const SampleSet& samples_i,
                                      const SampleSet& samples_j);
/// Full-map variant: every position of both maps, in linear order.
CorrelationTensor feature_correlation(const Tensor3& f_i, const Tensor3& f_j);

/// Entry (p, q) = d_i[p] * d_j[q]. Guidance maps must lie in [0, 1].
CorrelationTensor depth_correlation(const Tensor2& d_i, const Tensor2& d_j,
                                    const SampleSet& samples_i,
                                    const SampleSet& samples_j);
CorrelationTensor depth_correlation(const Tensor2& d_i, const Tensor2& d_j);

/// kRow subtracts each row's mean. kRowCol additionally removes column means
/// (double centering), so rows and columns both sum to zero.
CorrelationTensor spatial_center(const CorrelationTensor& F, Centering mode = Centering::kRow);

}  // namespace depthg
