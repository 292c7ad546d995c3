#include "depthg/lhp3d.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace depthg {

std::string to_string(NeighborWeighting w) {
  switch (w) {
    case NeighborWeighting::kInverseDistance: return "inverse";
    case NeighborWeighting::kMaxMinusDistance: return "max-minus";
    case NeighborWeighting::kSoftmax: return "softmax";
  }
  return "inverse";
}

NeighborWeighting parse_weighting(const std::string& text) {
  if (text == "inverse") return NeighborWeighting::kInverseDistance;
  if (text == "max-minus") return NeighborWeighting::kMaxMinusDistance;
  if (text == "softmax") return NeighborWeighting::kSoftmax;
  throw ContractError("unknown neighbor weighting '" + text +
                      "' (expected inverse, max-minus, softmax)");
}

NeighborSet knn3d(const PointCloud& cloud, GridIndex anchor, std::size_t k_nb,
                  NeighborWeighting weighting, double temperature) {
  const std::size_t n = cloud.size();
  require(k_nb >= 1, "knn3d: need at least one neighbor");
  require(k_nb < n, "knn3d: k_nb must be smaller than the number of points");
  require(anchor.row < cloud.height && anchor.col < cloud.width, "knn3d: anchor out of bounds");
  const std::size_t a = linear_index(anchor, cloud.width);

  std::vector<std::pair<double, std::size_t>> cand;
  cand.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (i == a) continue;
    cand.emplace_back(distance(cloud.points[a], cloud.points[i]), i);
  }
  // Pair ordering breaks distance ties by the lower linear index.
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k_nb), cand.end());

  NeighborSet out{anchor, {}};
  out.neighbors.reserve(k_nb);
  std::vector<double> raw(k_nb);
  const double d_max = cand[k_nb - 1].first;
  for (std::size_t j = 0; j < k_nb; ++j) {
    const double d = cand[j].first;
    switch (weighting) {
      case NeighborWeighting::kInverseDistance:
        raw[j] = 1.0 / std::max(d, kDistanceFloor);
        break;
      case NeighborWeighting::kMaxMinusDistance:
        raw[j] = d_max - d + kDistanceFloor;
        break;
      case NeighborWeighting::kSoftmax:
        require(temperature > 0.0, "knn3d: softmax temperature must be positive");
        raw[j] = std::exp(-(d - cand[0].first) / temperature);
        break;
    }
  }
  const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
  for (std::size_t j = 0; j < k_nb; ++j) {
    const std::size_t i = cand[j].second;
    out.neighbors.push_back({{i / cloud.width, i % cloud.width}, cand[j].first, raw[j] / total});
  }
  return out;
}

std::vector<double> propagate_mix(const Mat& codes, std::size_t width, const NeighborSet& nbrs,
                                  double anchor_keep) {
  require(anchor_keep >= 0.0 && anchor_keep <= 1.0, "propagate_mix: anchor_keep outside [0,1]");
  const std::size_t a = linear_index(nbrs.anchor, width);
  require(a < codes.rows, "propagate_mix: anchor out of bounds");
  std::vector<double> out(codes.cols);
  auto anchor_row = codes.row(a);
  for (std::size_t c = 0; c < codes.cols; ++c) out[c] = anchor_keep * anchor_row[c];
  const double spread = 1.0 - anchor_keep;
  for (const auto& nb : nbrs.neighbors) {
    const std::size_t i = linear_index(nb.index, width);
    require(i < codes.rows, "propagate_mix: neighbor out of bounds");
    auto r = codes.row(i);
    for (std::size_t c = 0; c < codes.cols; ++c) out[c] += spread * nb.weight * r[c];
  }
  return out;
}

std::vector<double> propagate_mix(const Tensor3& codes, const NeighborSet& nbrs,
                                  double anchor_keep) {
  return propagate_mix(positions_by_channels(codes), codes.width(), nbrs, anchor_keep);
}

PropagationMap gather_map(const SampleSet& samples) {
  PropagationMap map{samples.height * samples.width, {}};
  map.rows.reserve(samples.size());
  for (std::size_t p : samples.linear()) map.rows.push_back({{p, 1.0}});
  return map;
}

PropagationMap propagation_map(const PointCloud& cloud, const SampleSet& anchors,
                               const LhpConfig& cfg) {
  require(cfg.anchor_keep >= 0.0 && cfg.anchor_keep <= 1.0,
          "propagation_map: anchor_keep outside [0,1]");
  PropagationMap map{cloud.size(), {}};
  map.rows.reserve(anchors.size());
  for (const GridIndex& g : anchors.indices) {
    const NeighborSet nbrs = knn3d(cloud, g, cfg.neighbors, cfg.weighting, cfg.temperature);
    std::vector<std::pair<std::size_t, double>> row;
    row.reserve(nbrs.neighbors.size() + 1);
    row.emplace_back(linear_index(g, cloud.width), cfg.anchor_keep);
    for (const auto& nb : nbrs.neighbors) {
      row.emplace_back(linear_index(nb.index, cloud.width), (1.0 - cfg.anchor_keep) * nb.weight);
    }
    map.rows.push_back(std::move(row));
  }
  return map;
}

Mat apply(const PropagationMap& map, const Mat& codes) {
  require(codes.rows == map.positions, "apply: code map size does not match propagation map");
  Mat out(map.rows.size(), codes.cols);
  for (std::size_t r = 0; r < map.rows.size(); ++r) {
    auto dst = out.row(r);
    for (const auto& [pos, coeff] : map.rows[r]) {
      auto src = codes.row(pos);
      for (std::size_t c = 0; c < codes.cols; ++c) dst[c] += coeff * src[c];
    }
  }
  return out;
}

void accumulate_transpose(const PropagationMap& map, const Mat& grad_rows, Mat& grad_codes) {
  require(grad_rows.rows == map.rows.size() && grad_codes.rows == map.positions &&
              grad_rows.cols == grad_codes.cols,
          "accumulate_transpose: shape mismatch");
  for (std::size_t r = 0; r < map.rows.size(); ++r) {
    auto src = grad_rows.row(r);
    for (const auto& [pos, coeff] : map.rows[r]) {
      auto dst = grad_codes.row(pos);
      for (std::size_t c = 0; c < grad_codes.cols; ++c) dst[c] += coeff * src[c];
    }
  }
}

ProjectionHeadParams ProjectionHeadParams::identity(std::size_t q) {
  ProjectionHeadParams p{Mat(q, q), Mat(1, q)};
  for (std::size_t i = 0; i < q; ++i) p.weight(i, i) = 1.0;
  return p;
}

ProjectionHeadParams ProjectionHeadParams::init(std::size_t q, Rng& rng) {
  // Identity plus a small perturbation so the projected codes start close
  // to the head's codes.
  ProjectionHeadParams p = identity(q);
  const double scale = 0.1 / std::sqrt(static_cast<double>(q));
  for (double& w : p.weight.data) w += scale * (2.0 * rng.uniform01() - 1.0);
  return p;
}

std::vector<Mat*> ProjectionHeadParams::tensors() { return {&weight, &bias}; }
std::vector<const Mat*> ProjectionHeadParams::tensors() const { return {&weight, &bias}; }

std::vector<double> project(const ProjectionHeadParams& params, std::span<const double> code) {
  require(params.weight.cols == code.size() && params.weight.rows == params.bias.cols,
          "project: dimension mismatch");
  std::vector<double> out(params.weight.rows);
  for (std::size_t r = 0; r < params.weight.rows; ++r) {
    out[r] = dot(params.weight.row(r), code) + params.bias(0, r);
  }
  return out;
}

Mat project_rows(const ProjectionHeadParams& params, const Mat& codes) {
  require(params.weight.cols == codes.cols && params.weight.rows == params.bias.cols,
          "project_rows: dimension mismatch");
  Mat out(codes.rows, params.weight.rows);
  for (std::size_t n = 0; n < codes.rows; ++n) {
    auto x = codes.row(n);
    auto y = out.row(n);
    for (std::size_t r = 0; r < params.weight.rows; ++r) {
      y[r] = dot(params.weight.row(r), x) + params.bias(0, r);
    }
  }
  return out;
}

ProjectionGrad project_rows_backward(const ProjectionHeadParams& params, const Mat& codes,
                                     const Mat& grad_output) {
  require(grad_output.rows == codes.rows && grad_output.cols == params.weight.rows,
          "project_rows_backward: shape mismatch");
  ProjectionGrad g{Mat(codes.rows, codes.cols),
                   {Mat(params.weight.rows, params.weight.cols), Mat(1, params.weight.rows)}};
  for (std::size_t n = 0; n < codes.rows; ++n) {
    auto x = codes.row(n);
    auto dy = grad_output.row(n);
    auto dx = g.grad_input.row(n);
    for (std::size_t r = 0; r < params.weight.rows; ++r) {
      const double d = dy[r];
      if (d == 0.0) continue;
      g.grad_params.bias(0, r) += d;
      auto w = params.weight.row(r);
      auto gw = g.grad_params.weight.row(r);
      for (std::size_t c = 0; c < codes.cols; ++c) {
        gw[c] += d * x[c];
        dx[c] += d * w[c];
      }
    }
  }
  return g;
}

LhpValue lhp_loss(const TripleTargets& targets, const ObjectiveConfig& cfg,
                  const std::array<const Mat*, kTripleSlots>& codes,
                  const std::array<PropagationMap, kTripleSlots>& gather,
                  const std::array<PropagationMap, kTripleSlots>& mix,
                  const ProjectionHeadParams& projection, double beta) {
  require(beta >= 0.0 && std::isfinite(beta), "lhp_loss: beta must be finite and non-negative");
  LhpValue out;
  const std::size_t q = codes[0]->cols;
  out.grad_projection = {Mat(projection.weight.rows, projection.weight.cols),
                         Mat(1, projection.bias.cols)};

  std::array<Mat, kTripleSlots> sampled;
  for (std::size_t s = 0; s < kTripleSlots; ++s) {
    sampled[s] = apply(gather[s], *codes[s]);
    out.grad_codes[s] = Mat(codes[s]->rows, q);
  }
  out.head = triple_objective(targets, cfg, sampled[0], sampled[1], sampled[2], sampled[3]);
  out.value = out.head.value;
  auto head_grads = slot_gradients(out.head);
  for (std::size_t s = 0; s < kTripleSlots; ++s) {
    accumulate_transpose(gather[s], head_grads[s], out.grad_codes[s]);
  }
  if (beta == 0.0) return out;

  std::array<Mat, kTripleSlots> mixed, projected;
  for (std::size_t s = 0; s < kTripleSlots; ++s) {
    mixed[s] = apply(mix[s], *codes[s]);
    projected[s] = project_rows(projection, mixed[s]);
  }
  out.projected =
      triple_objective(targets, cfg, projected[0], projected[1], projected[2], projected[3]);
  out.value += beta * out.projected.value;
  auto proj_grads = slot_gradients(out.projected);
  for (std::size_t s = 0; s < kTripleSlots; ++s) {
    for (double& g : proj_grads[s].data) g *= beta;
    ProjectionGrad pg = project_rows_backward(projection, mixed[s], proj_grads[s]);
    accumulate_transpose(mix[s], pg.grad_input, out.grad_codes[s]);
    for (std::size_t k = 0; k < pg.grad_params.weight.data.size(); ++k) {
      out.grad_projection.weight.data[k] += pg.grad_params.weight.data[k];
    }
    for (std::size_t k = 0; k < pg.grad_params.bias.data.size(); ++k) {
      out.grad_projection.bias.data[k] += pg.grad_params.bias.data[k];
    }
  }
  return out;
}

}  // namespace depthg
