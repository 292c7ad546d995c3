#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "depthg/core.hpp"

namespace depthg {

enum class KMeansMetric { kCosine, kEuclidean };

std::string to_string(KMeansMetric m);
KMeansMetric parse_kmeans_metric(const std::string& text);

struct KMeansResult {
  Mat centroids;                    // K x Q
  std::vector<std::size_t> labels;  // one per point
  std::vector<double> objective;    // after each assignment step
  std::size_t iterations = 0;
  bool converged = false;
};

/// Lloyd iterations with k-means++ seeding. kCosine clusters unit-normalized
/// points with unit centroids (objective: sum of 1 - cos); kEuclidean uses
/// squared distances. Empty clusters are re-seeded from the point farthest
/// from its centroid.
KMeansResult kmeans(const Mat& points, std::size_t k, std::size_t iters, Rng& rng,
                    KMeansMetric metric = KMeansMetric::kCosine, std::size_t threads = 1);

/// Counts, rows = predicted cluster, cols = ground-truth class.
struct ConfusionMatrix {
  std::size_t pred_classes = 0;
  std::size_t gt_classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  ConfusionMatrix(std::size_t k_pred, std::size_t k_gt)
      : pred_classes(k_pred), gt_classes(k_gt), counts(k_pred * k_gt, 0) {}

  std::uint64_t& at(std::size_t p, std::size_t g) { return counts[p * gt_classes + g]; }
  std::uint64_t at(std::size_t p, std::size_t g) const { return counts[p * gt_classes + g]; }
  std::uint64_t total() const;
};

/// Labels equal to 255 are skipped.
ConfusionMatrix confusion(const std::vector<std::size_t>& pred, const std::vector<std::uint8_t>& gt,
                          std::size_t k_pred, std::size_t k_gt);

/// mapping[p] = ground-truth class for predicted cluster p, or -1.
struct Assignment {
  std::vector<long> mapping;
};

/// Optimal assignment on a square matrix. Among optimal assignments the
/// lexicographically smallest (row 0's column first) is returned.
Assignment hungarian(const Mat& cost, bool maximize);

/// Sum of cost(r, mapping[r]) over assigned rows, in row order.
double assignment_objective(const Mat& cost, const Assignment& a);

/// Maximizes matched pixel counts; rectangular matrices are zero-padded.
/// Clusters left without a class count as errors.
Assignment align_clusters(const ConfusionMatrix& conf);

struct Metrics {
  double accuracy = 0.0;
  double miou = 0.0;
  std::vector<double> iou;       // per ground-truth class
  std::vector<bool> present;     // class occurs in the ground truth
};

Metrics metrics(const ConfusionMatrix& conf, const Assignment& assign);

struct ClusterProbeResult {
  ConfusionMatrix confusion;
  Assignment assignment;
  Metrics metrics;
  std::size_t kmeans_iterations = 0;
};

/// Runs k-means `restarts` times and keeps the lowest final objective.
ClusterProbeResult cluster_probe(const Mat& codes, const std::vector<std::uint8_t>& labels,
                                 std::size_t k_gt, std::size_t k_pred, std::size_t iters,
                                 Rng& rng, KMeansMetric metric = KMeansMetric::kCosine,
                                 std::size_t threads = 1, std::size_t restarts = 1);

struct CrossEntropy {
  double value = 0.0;
  Mat grad_weight;  // Q x K
  Mat grad_bias;    // 1 x K
};

/// Mean softmax cross-entropy of logits x W + b over rows whose label is not
/// 255.
CrossEntropy softmax_cross_entropy(const Mat& weight, const Mat& bias, const Mat& x,
                                   const std::vector<std::uint8_t>& labels);

struct LinearProbeConfig {
  double learning_rate = 0.05;
  std::size_t steps = 300;
  std::uint64_t seed = 0;
};

struct LinearProbeResult {
  ConfusionMatrix confusion;
  Metrics metrics;
  Mat weight;
  Mat bias;
};

/// Multinomial logistic regression on frozen codes, full-batch Adam.
LinearProbeResult linear_probe(const Mat& train_codes, const std::vector<std::uint8_t>& train_labels,
                               const Mat& eval_codes, const std::vector<std::uint8_t>& eval_labels,
                               std::size_t classes, const LinearProbeConfig& cfg);

struct EvalReport {
  ClusterProbeResult cluster;
  LinearProbeResult linear;
  bool has_linear = false;
};

std::string format_report_text(const EvalReport& report);
std::string format_report_json(const EvalReport& report);

}  // namespace depthg
