#include "depthg/sampling.hpp"

#include <cmath>
#include <limits>
#include <numeric>

namespace depthg {

double distance(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  const double dz = a.z - b.z;
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

std::vector<std::size_t> SampleSet::linear() const {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (const auto& g : indices) out.push_back(linear_index(g, width));
  return out;
}

SampleSet all_positions(std::size_t height, std::size_t width) {
  SampleSet s{{}, height, width};
  s.indices.reserve(height * width);
  for (std::size_t h = 0; h < height; ++h) {
    for (std::size_t w = 0; w < width; ++w) s.indices.push_back({h, w});
  }
  return s;
}

PointCloud depth_to_pointcloud(const Tensor2& depth, double depth_scale) {
  require(depth.size() > 0, "depth_to_pointcloud: empty depth map");
  require(depth_scale > 0.0, "depth_to_pointcloud: depth_scale must be positive");
  const std::size_t H = depth.height();
  const std::size_t W = depth.width();
  PointCloud cloud;
  cloud.height = H;
  cloud.width = W;
  cloud.points.reserve(H * W);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t w = 0; w < W; ++w) {
      const double d = depth.at(h, w);
      require(d >= 0.0 && d <= 1.0, "depth_to_pointcloud: depth outside [0,1]");
      const double x = W > 1 ? static_cast<double>(w) / static_cast<double>(W - 1) : 0.0;
      const double y = H > 1 ? static_cast<double>(h) / static_cast<double>(H - 1) : 0.0;
      cloud.points.push_back({x, y, depth_scale * d});
    }
  }
  return cloud;
}

SampleSet farthest_point_sample(const PointCloud& cloud, std::size_t k, std::size_t init) {
  const std::size_t n = cloud.size();
  require(k >= 1, "farthest_point_sample: k must be at least 1");
  require(k <= n, "farthest_point_sample: k exceeds the number of points");
  require(init < n, "farthest_point_sample: init out of bounds");

  SampleSet out{{}, cloud.height, cloud.width};
  out.indices.reserve(k);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);

  std::size_t current = init;
  for (std::size_t t = 0; t < k; ++t) {
    taken[current] = 1;
    out.indices.push_back({current / cloud.width, current % cloud.width});
    if (t + 1 == k) break;
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = distance(cloud.points[i], cloud.points[current]);
      if (d < min_dist[i]) min_dist[i] = d;
      // Strict comparison keeps the lowest index on ties.
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    current = best;
  }
  return out;
}

SampleSet random_sample(std::size_t height, std::size_t width, std::size_t k, Rng& rng) {
  const std::size_t n = height * width;
  require(k <= n, "random_sample: k exceeds the number of cells");
  std::vector<std::size_t> cells(n);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  SampleSet out{{}, height, width};
  out.indices.reserve(k);
  for (std::size_t t = 0; t < k; ++t) {
    const std::size_t j = t + rng.uniform(n - t);
    std::swap(cells[t], cells[j]);
    out.indices.push_back({cells[t] / width, cells[t] % width});
  }
  return out;
}

}  // namespace depthg
