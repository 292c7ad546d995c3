#include "depthg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "depthg/training.hpp"

namespace depthg {

std::string to_string(KMeansMetric m) { return m == KMeansMetric::kCosine ? "cosine" : "euclidean"; }

KMeansMetric parse_kmeans_metric(const std::string& text) {
  if (text == "cosine") return KMeansMetric::kCosine;
  if (text == "euclidean") return KMeansMetric::kEuclidean;
  throw ContractError("unknown k-means metric '" + text + "' (expected cosine or euclidean)");
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

// Distance used for the objective: 1 - cos on unit vectors, squared
// Euclidean otherwise.
double point_cost(std::span<const double> x, std::span<const double> c, KMeansMetric m) {
  return m == KMeansMetric::kCosine ? 1.0 - dot(x, c) : sq_dist(x, c);
}

void normalize_in_place(std::span<double> v) {
  const double n = norm(v);
  if (n < kNormEpsilon) return;
  for (double& x : v) x /= n;
}

template <typename Fn>
void parallel_chunks(std::size_t n, std::size_t threads, Fn fn) {
  if (threads <= 1 || n < 2 * threads) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t lo = t * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([=] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

KMeansResult kmeans(const Mat& points, std::size_t k, std::size_t iters, Rng& rng,
                    KMeansMetric metric, std::size_t threads) {
  require(k >= 1, "kmeans: K must be at least 1");
  require(k <= points.rows, "kmeans: K exceeds the number of points");
  require(iters >= 1, "kmeans: need at least one iteration");
  const std::size_t n = points.rows;
  const std::size_t q = points.cols;

  Mat x = points;
  if (metric == KMeansMetric::kCosine) {
    for (std::size_t i = 0; i < n; ++i) normalize_in_place(x.row(i));
  }

  // k-means++ seeding on squared Euclidean distance of the (normalized) points.
  KMeansResult out;
  out.centroids = Mat(k, q);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t first = rng.uniform(n);
  std::copy(x.row(first).begin(), x.row(first).end(), out.centroids.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], sq_dist(x.row(i), out.centroids.row(c - 1)));
      total += nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = rng.uniform01() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= nearest[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform(n);
    }
    std::copy(x.row(pick).begin(), x.row(pick).end(), out.centroids.row(c).begin());
  }

  out.labels.assign(n, 0);
  std::vector<double> cost(n, 0.0);
  std::vector<std::size_t> previous;
  for (std::size_t it = 0; it < iters; ++it) {
    parallel_chunks(n, threads, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        std::size_t best = 0;
        double best_cost = point_cost(x.row(i), out.centroids.row(0), metric);
        for (std::size_t c = 1; c < k; ++c) {
          const double d = point_cost(x.row(i), out.centroids.row(c), metric);
          if (d < best_cost) {
            best_cost = d;
            best = c;
          }
        }
        out.labels[i] = best;
        cost[i] = best_cost;
      }
    });

    // Re-seed empty clusters from the worst-served points.
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t l : out.labels) ++sizes[l];
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] != 0) continue;
      std::size_t far = 0;
      for (std::size_t i = 1; i < n; ++i) {
        if (cost[i] > cost[far] && sizes[out.labels[i]] > 1) far = i;
      }
      if (sizes[out.labels[far]] <= 1) continue;
      --sizes[out.labels[far]];
      out.labels[far] = c;
      sizes[c] = 1;
      cost[far] = 0.0;
      std::copy(x.row(far).begin(), x.row(far).end(), out.centroids.row(c).begin());
    }
    out.objective.push_back(std::accumulate(cost.begin(), cost.end(), 0.0));
    out.iterations = it + 1;
    if (out.labels == previous) {
      out.converged = true;
      break;
    }
    previous = out.labels;

    Mat sums(k, q);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(out.labels[i]);
      auto r = x.row(i);
      for (std::size_t j = 0; j < q; ++j) s[j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] == 0) continue;
      auto dst = out.centroids.row(c);
      auto s = sums.row(c);
      if (metric == KMeansMetric::kCosine) {
        if (norm(s) < kNormEpsilon) continue;
        std::copy(s.begin(), s.end(), dst.begin());
        normalize_in_place(dst);
      } else {
        for (std::size_t j = 0; j < q; ++j) dst[j] = s[j] / static_cast<double>(sizes[c]);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confusion, assignment, metrics

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0});
}

ConfusionMatrix confusion(const std::vector<std::size_t>& pred, const std::vector<std::uint8_t>& gt,
                          std::size_t k_pred, std::size_t k_gt) {
  require(pred.size() == gt.size(), "confusion: prediction and label counts differ");
  ConfusionMatrix m(k_pred, k_gt);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (gt[i] == 255) continue;
    require(pred[i] < k_pred, "confusion: predicted cluster out of range");
    require(gt[i] < k_gt, "confusion: label out of range");
    ++m.at(pred[i], gt[i]);
  }
  return m;
}

namespace {

// Minimum-cost perfect matching (Hungarian method with potentials).
// Returns col assigned to each row.
std::vector<std::size_t> min_cost_matching(const std::vector<std::vector<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0) return {};
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_of(n);
  for (std::size_t j = 1; j <= n; ++j) col_of[p[j] - 1] = j - 1;
  return col_of;
}

double matching_cost(const std::vector<std::vector<double>>& a, const std::vector<std::size_t>& cols) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r) s += a[r][cols[r]];
  return s;
}

}  // namespace

Assignment hungarian(const Mat& cost, bool maximize) {
  require(cost.rows == cost.cols, "hungarian: cost matrix must be square (pad first)");
  for (double v : cost.data) require(std::isfinite(v), "hungarian: non-finite cost");
  const std::size_t n = cost.rows;
  std::vector<std::vector<double>> a(n, std::vector<double>(n));
  double scale = 1.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      a[r][c] = maximize ? -cost(r, c) : cost(r, c);
      scale = std::max(scale, std::abs(cost(r, c)));
    }
  }
  const double optimum = matching_cost(a, min_cost_matching(a));
  const double tol = 1e-9 * scale * static_cast<double>(std::max<std::size_t>(n, 1));

  // Fix rows one at a time to the smallest column that still admits an
  // optimal completion.
  Assignment out{std::vector<long>(n, -1)};
  std::vector<char> col_used(n, 0);
  double prefix = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      if (col_used[c]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t j = 0; j < n; ++j) {
        if (!col_used[j] && j != c) rest_cols.push_back(j);
      }
      std::vector<std::vector<double>> sub(n - r - 1, std::vector<double>(rest_cols.size()));
      for (std::size_t i = r + 1; i < n; ++i) {
        for (std::size_t j = 0; j < rest_cols.size(); ++j) sub[i - r - 1][j] = a[i][rest_cols[j]];
      }
      const double rest = sub.empty() ? 0.0 : matching_cost(sub, min_cost_matching(sub));
      if (prefix + a[r][c] + rest <= optimum + tol) {
        out.mapping[r] = static_cast<long>(c);
        col_used[c] = 1;
        prefix += a[r][c];
        break;
      }
    }
  }
  return out;
}

double assignment_objective(const Mat& cost, const Assignment& a) {
  double s = 0.0;
  for (std::size_t r = 0; r < a.mapping.size() && r < cost.rows; ++r) {
    if (a.mapping[r] >= 0) s += cost(r, static_cast<std::size_t>(a.mapping[r]));
  }
  return s;
}

Assignment align_clusters(const ConfusionMatrix& conf) {
  require(conf.pred_classes > 0 && conf.gt_classes > 0, "align_clusters: empty confusion matrix");
  const std::size_t n = std::max(conf.pred_classes, conf.gt_classes);
  Mat padded(n, n);
  for (std::size_t p = 0; p < conf.pred_classes; ++p) {
    for (std::size_t g = 0; g < conf.gt_classes; ++g) padded(p, g) = static_cast<double>(conf.at(p, g));
  }
  Assignment full = hungarian(padded, true);
  Assignment out{std::vector<long>(conf.pred_classes, -1)};
  for (std::size_t p = 0; p < conf.pred_classes; ++p) {
    if (full.mapping[p] >= 0 && static_cast<std::size_t>(full.mapping[p]) < conf.gt_classes) {
      out.mapping[p] = full.mapping[p];
    }
  }
  return out;
}

Metrics metrics(const ConfusionMatrix& conf, const Assignment& assign) {
  require(conf.pred_classes > 0 && conf.gt_classes > 0, "metrics: empty confusion matrix");
  require(assign.mapping.size() == conf.pred_classes, "metrics: assignment size mismatch");
  const std::uint64_t total = conf.total();
  require(total > 0, "metrics: confusion matrix has no counts");

  std::vector<long> pred_of_gt(conf.gt_classes, -1);
  for (std::size_t p = 0; p < conf.pred_classes; ++p) {
    const long g = assign.mapping[p];
    if (g < 0) continue;
    require(static_cast<std::size_t>(g) < conf.gt_classes, "metrics: assignment out of range");
    require(pred_of_gt[g] < 0, "metrics: assignment is not injective");
    pred_of_gt[g] = static_cast<long>(p);
  }

  Metrics m;
  m.iou.assign(conf.gt_classes, 0.0);
  m.present.assign(conf.gt_classes, false);
  std::uint64_t correct = 0;
  for (std::size_t p = 0; p < conf.pred_classes; ++p) {
    if (assign.mapping[p] >= 0) correct += conf.at(p, static_cast<std::size_t>(assign.mapping[p]));
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(total);

  double iou_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t g = 0; g < conf.gt_classes; ++g) {
    std::uint64_t gt_total = 0;
    for (std::size_t p = 0; p < conf.pred_classes; ++p) gt_total += conf.at(p, g);
    if (gt_total == 0) continue;
    m.present[g] = true;
    ++present;
    std::uint64_t tp = 0, pred_total = 0;
    if (pred_of_gt[g] >= 0) {
      const auto p = static_cast<std::size_t>(pred_of_gt[g]);
      tp = conf.at(p, g);
      for (std::size_t j = 0; j < conf.gt_classes; ++j) pred_total += conf.at(p, j);
    }
    const std::uint64_t fp = pred_total - tp;
    const std::uint64_t fn = gt_total - tp;
    m.iou[g] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    iou_sum += m.iou[g];
  }
  m.miou = iou_sum / static_cast<double>(present);
  return m;
}

ClusterProbeResult cluster_probe(const Mat& codes, const std::vector<std::uint8_t>& labels,
                                 std::size_t k_gt, std::size_t k_pred, std::size_t iters,
                                 Rng& rng, KMeansMetric metric, std::size_t threads,
                                 std::size_t restarts) {
  require(codes.rows == labels.size(), "cluster_probe: one label per code row required");
  require(restarts >= 1, "cluster_probe: need at least one k-means run");
  KMeansResult km = kmeans(codes, k_pred, iters, rng, metric, threads);
  for (std::size_t r = 1; r < restarts; ++r) {
    KMeansResult next = kmeans(codes, k_pred, iters, rng, metric, threads);
    if (next.objective.back() < km.objective.back()) km = std::move(next);
  }
  ClusterProbeResult out;
  out.confusion = confusion(km.labels, labels, k_pred, k_gt);
  out.assignment = align_clusters(out.confusion);
  out.metrics = metrics(out.confusion, out.assignment);
  out.kmeans_iterations = km.iterations;
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe

CrossEntropy softmax_cross_entropy(const Mat& weight, const Mat& bias, const Mat& x,
                                   const std::vector<std::uint8_t>& labels) {
  require(weight.rows == x.cols && bias.rows == 1 && bias.cols == weight.cols,
          "softmax_cross_entropy: shape mismatch");
  require(labels.size() == x.rows, "softmax_cross_entropy: one label per row required");
  const std::size_t k = weight.cols;
  CrossEntropy out{0.0, Mat(weight.rows, k), Mat(1, k)};
  std::size_t used = 0;
  for (std::uint8_t y : labels) used += y != 255;
  require(used > 0, "softmax_cross_entropy: no labelled rows");
  const double inv = 1.0 / static_cast<double>(used);

  std::vector<double> logits(k);
  for (std::size_t n = 0; n < x.rows; ++n) {
    if (labels[n] == 255) continue;
    require(labels[n] < k, "softmax_cross_entropy: label out of range");
    auto xr = x.row(n);
    for (std::size_t c = 0; c < k; ++c) logits[c] = bias(0, c);
    for (std::size_t i = 0; i < x.cols; ++i) {
      const double xi = xr[i];
      auto wr = weight.row(i);
      for (std::size_t c = 0; c < k; ++c) logits[c] += xi * wr[c];
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    out.value -= inv * std::log(logits[labels[n]] / z);
    for (std::size_t c = 0; c < k; ++c) {
      const double g = inv * (logits[c] / z - (c == labels[n] ? 1.0 : 0.0));
      out.grad_bias(0, c) += g;
      for (std::size_t i = 0; i < x.cols; ++i) out.grad_weight(i, c) += g * xr[i];
    }
  }
  return out;
}

namespace {

std::vector<std::size_t> argmax_rows(const Mat& weight, const Mat& bias, const Mat& x) {
  std::vector<std::size_t> pred(x.rows);
  const std::size_t k = weight.cols;
  std::vector<double> logits(k);
  for (std::size_t n = 0; n < x.rows; ++n) {
    for (std::size_t c = 0; c < k; ++c) logits[c] = bias(0, c);
    for (std::size_t i = 0; i < x.cols; ++i) {
      for (std::size_t c = 0; c < k; ++c) logits[c] += x(n, i) * weight(i, c);
    }
    pred[n] = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  return pred;
}

}  // namespace

LinearProbeResult linear_probe(const Mat& train_codes, const std::vector<std::uint8_t>& train_labels,
                               const Mat& eval_codes, const std::vector<std::uint8_t>& eval_labels,
                               std::size_t classes, const LinearProbeConfig& cfg) {
  require(train_codes.cols == eval_codes.cols, "linear_probe: code dimension mismatch");
  require(classes >= 2, "linear_probe: need at least two classes");
  std::vector<char> seen(classes, 0);
  std::size_t distinct = 0;
  for (std::uint8_t y : train_labels) {
    if (y == 255) continue;
    require(y < classes, "linear_probe: label out of range");
    if (!seen[y]) {
      seen[y] = 1;
      ++distinct;
    }
  }
  require(distinct >= 2, "linear_probe: training labels cover a single class");

  LinearProbeResult out;
  Rng rng(cfg.seed);
  out.weight = Mat(train_codes.cols, classes);
  out.bias = Mat(1, classes);
  for (double& w : out.weight.data) w = 0.01 * rng.normal();

  AdamConfig adam{cfg.learning_rate, 0.9, 0.999, 1e-8};
  std::vector<Mat*> params{&out.weight, &out.bias};
  AdamState state = adam_init(params);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    CrossEntropy ce = softmax_cross_entropy(out.weight, out.bias, train_codes, train_labels);
    adam_step(params, {&ce.grad_weight, &ce.grad_bias}, state, adam);
  }
  out.confusion = confusion(argmax_rows(out.weight, out.bias, eval_codes), eval_labels, classes, classes);
  Assignment identity{std::vector<long>(classes)};
  std::iota(identity.mapping.begin(), identity.mapping.end(), 0L);
  out.metrics = metrics(out.confusion, identity);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void append_section(std::string& out, const std::string& title, const ConfusionMatrix& conf,
                    const Metrics& m, const Assignment* assign) {
  out += "[" + title + "]\n";
  out += "accuracy " + fmt(m.accuracy) + "\n";
  out += "miou " + fmt(m.miou) + "\n";
  for (std::size_t g = 0; g < m.iou.size(); ++g) {
    out += "iou[" + std::to_string(g) + "] " + (m.present[g] ? fmt(m.iou[g]) : std::string("absent")) +
           "\n";
  }
  if (assign) {
    out += "assignment";
    for (long g : assign->mapping) out += " " + std::to_string(g);
    out += "\n";
  }
  out += "confusion (rows predicted, cols ground truth)\n";
  for (std::size_t p = 0; p < conf.pred_classes; ++p) {
    for (std::size_t g = 0; g < conf.gt_classes; ++g) {
      out += (g ? " " : "") + std::to_string(conf.at(p, g));
    }
    out += "\n";
  }
}

nlohmann::ordered_json section_json(const ConfusionMatrix& conf, const Metrics& m,
                                    const Assignment* assign) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["miou"] = m.miou;
  auto iou = nlohmann::ordered_json::array();
  for (std::size_t g = 0; g < m.iou.size(); ++g) {
    iou.push_back(m.present[g] ? nlohmann::ordered_json(m.iou[g]) : nlohmann::ordered_json(nullptr));
  }
  j["per_class_iou"] = iou;
  if (assign) j["assignment"] = assign->mapping;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t p = 0; p < conf.pred_classes; ++p) {
    std::vector<std::uint64_t> row(conf.counts.begin() + static_cast<std::ptrdiff_t>(p * conf.gt_classes),
                                   conf.counts.begin() + static_cast<std::ptrdiff_t>((p + 1) * conf.gt_classes));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

}  // namespace

std::string format_report_text(const EvalReport& report) {
  std::string out;
  append_section(out, "cluster_probe", report.cluster.confusion, report.cluster.metrics,
                 &report.cluster.assignment);
  if (report.has_linear) {
    append_section(out, "linear_probe", report.linear.confusion, report.linear.metrics, nullptr);
  }
  return out;
}

std::string format_report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["cluster_probe"] = section_json(report.cluster.confusion, report.cluster.metrics,
                                    &report.cluster.assignment);
  if (report.has_linear) {
    j["linear_probe"] = section_json(report.linear.confusion, report.linear.metrics, nullptr);
  }
  return j.dump(2) + "\n";
}

}  // namespace depthg
