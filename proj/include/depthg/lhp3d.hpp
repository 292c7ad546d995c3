#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "depthg/core.hpp"
#include "depthg/losses.hpp"
#include "depthg/sampling.hpp"

namespace depthg {

enum class NeighborWeighting { kInverseDistance, kMaxMinusDistance, kSoftmax };

std::string to_string(NeighborWeighting w);
NeighborWeighting parse_weighting(const std::string& text);

struct Neighbor {
  GridIndex index;
  double distance = 0.0;
  double weight = 0.0;
};

/// The k nearest patches of an anchor in 3D with normalized weights.
struct NeighborSet {
  GridIndex anchor;
  std::vector<Neighbor> neighbors;
};

// Distance floor for inverse-distance weights (coincident points).
inline constexpr double kDistanceFloor = 1e-6;

struct LhpConfig {
  std::size_t neighbors = 8;
  double anchor_keep = 0.5;
  double beta = 1.0;
  NeighborWeighting weighting = NeighborWeighting::kInverseDistance;
  double temperature = 0.1;  // softmax weighting only
};

/// k_nb nearest cells to `anchor` by 3D distance, ties by lowest linear index.
/// Default weights are 1 / max(dist, kDistanceFloor), normalized to sum to 1.
NeighborSet knn3d(const PointCloud& cloud, GridIndex anchor, std::size_t k_nb,
                  NeighborWeighting weighting = NeighborWeighting::kInverseDistance,
                  double temperature = 0.1);

/// anchor_keep * codes[anchor] + (1 - anchor_keep) * sum_j w_j codes[n_j].
/// `codes` holds one row per grid position in linear order.
std::vector<double> propagate_mix(const Mat& codes, std::size_t width, const NeighborSet& nbrs,
                                  double anchor_keep);
std::vector<double> propagate_mix(const Tensor3& codes, const NeighborSet& nbrs,
                                  double anchor_keep);

/// Sparse linear map from a full code map to one mixed row per anchor.
/// Mixing weights are data: gradients flow through them to the codes only.
struct PropagationMap {
  std::size_t positions = 0;
  std::vector<std::vector<std::pair<std::size_t, double>>> rows;
};

/// Plain gather of the sampled rows.
PropagationMap gather_map(const SampleSet& samples);
/// Mixing rows for every sampled anchor of `cloud`.
PropagationMap propagation_map(const PointCloud& cloud, const SampleSet& anchors,
                               const LhpConfig& cfg);

Mat apply(const PropagationMap& map, const Mat& codes);
/// grad_codes += map^T * grad_rows
void accumulate_transpose(const PropagationMap& map, const Mat& grad_rows, Mat& grad_codes);

/// Affine Q -> Q projection head.
struct ProjectionHeadParams {
  Mat weight;  // Q x Q, output = weight * code + bias
  Mat bias;    // 1 x Q

  static ProjectionHeadParams identity(std::size_t q);
  static ProjectionHeadParams init(std::size_t q, Rng& rng);
  std::vector<Mat*> tensors();
  std::vector<const Mat*> tensors() const;
};

std::vector<double> project(const ProjectionHeadParams& params, std::span<const double> code);
/// Row-wise projection of a code matrix.
Mat project_rows(const ProjectionHeadParams& params, const Mat& codes);

struct ProjectionGrad {
  Mat grad_input;
  ProjectionHeadParams grad_params;
};
ProjectionGrad project_rows_backward(const ProjectionHeadParams& params, const Mat& codes,
                                     const Mat& grad_output);

struct LhpValue {
  double value = 0.0;
  ObjectiveValue head;
  ObjectiveValue projected;  // zero when beta == 0
  std::array<Mat, kTripleSlots> grad_codes;  // full-map code gradients per slot
  ProjectionHeadParams grad_projection;
};

/// total = L_head + beta * L_projected, where L_projected is the triple
/// objective on projected, 3D-mixed codes at the same sampled anchors.
/// `codes` are full code maps (positions x Q) per slot; `gather` and `mix`
/// are the per-slot gather and propagation maps.
LhpValue lhp_loss(const TripleTargets& targets, const ObjectiveConfig& cfg,
                  const std::array<const Mat*, kTripleSlots>& codes,
                  const std::array<PropagationMap, kTripleSlots>& gather,
                  const std::array<PropagationMap, kTripleSlots>& mix,
                  const ProjectionHeadParams& projection, double beta);

}  // namespace depthg
