#pragma once

#include <cstddef>
#include <vector>

#include "depthg/core.hpp"

namespace depthg {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

double distance(const Point3& a, const Point3& b);

/// Depth map lifted to 3D: one point per grid cell, in linear order.
struct PointCloud {
  std::vector<Point3> points;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return points.size(); }
};

/// Ordered grid positions selected from an H x W map.
struct SampleSet {
  std::vector<GridIndex> indices;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return indices.size(); }
  std::vector<std::size_t> linear() const;
};

/// Every cell of an H x W grid in linear order (the full-map sampler).
SampleSet all_positions(std::size_t height, std::size_t width);

/// Point for cell (h, w) is (w/(W-1), h/(H-1), depth_scale * d[h, w]); a
/// degenerate axis maps to 0.
PointCloud depth_to_pointcloud(const Tensor2& depth, double depth_scale = 1.0);

/// Greedy max-min farthest point sampling starting at linear index `init`.
/// Ties go to the lowest linear index.
SampleSet farthest_point_sample(const PointCloud& cloud, std::size_t k, std::size_t init);

/// k distinct cells, uniform without replacement (partial Fisher-Yates).
SampleSet random_sample(std::size_t height, std::size_t width, std::size_t k, Rng& rng);

}  // namespace depthg
