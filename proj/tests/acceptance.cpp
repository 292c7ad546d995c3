// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthg/cli.hpp"
#include "depthg/evaluation.hpp"
#include "depthg/sampling.hpp"
#include "depthg/training.hpp"

using namespace depthg;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("criterion %2d %-28s %s  %s\n", id, name.c_str(), pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. Gradients

// Central differences written out here, independent of the library checker.
double independent_fd_error(const ScalarFn& fn, std::vector<double> x,
                            const std::vector<double>& g, double h) {
  double worst = 0.0, scale = 0.0;
  for (double v : g) scale = std::max(scale, std::abs(v));
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double x0 = x[k];
    x[k] = x0 + h;
    const double up = fn(x);
    x[k] = x0 - h;
    const double dn = fn(x);
    x[k] = x0;
    worst = std::max(worst, std::abs((up - dn) / (2 * h) - g[k]));
  }
  return worst / std::max(scale, 1e-8);
}

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = cli::gradcheck_suite(20, 0);
  const double secs = seconds_since(t0);
  bool ok = entries.size() == 7 && secs < 30.0;
  double worst = 0.0;
  for (const auto& e : entries) {
    ok = ok && e.instances >= 20 && e.max_rel_error <= 1e-6;
    worst = std::max(worst, e.max_rel_error);
  }

  // The checker itself: it must agree with the independent one and must
  // flag a wrong gradient.
  Rng rng(99);
  Mat F(9, 9), a(9, 5), b(9, 5);
  for (double& v : F.data) v = rng.normal();
  for (double& v : a.data) v = rng.normal();
  for (double& v : b.data) v = rng.normal();
  const LossTermConfig cfg{1.0, 0.07};
  const LossValue lv = corr_loss(F, a, b, cfg);
  const ScalarFn fn = [&](std::span<const double> x) {
    Mat aa(9, 5);
    std::copy(x.begin(), x.end(), aa.data.begin());
    return corr_loss(F, aa, b, cfg).value;
  };
  const double lib = finite_diff_check(fn, a.data, lv.grad_i.data, 1e-5);
  const double ind = independent_fd_error(fn, a.data, lv.grad_i.data, 1e-5);
  std::vector<double> wrong = lv.grad_i.data;
  wrong[3] += 0.01;
  const bool checker_ok = std::abs(lib - ind) <= 1e-9 && ind <= 1e-6 &&
                          finite_diff_check(fn, a.data, wrong, 1e-5) > 1e-4;
  ok = ok && checker_ok;

  std::string detail = "7 ops x 20 instances, max rel err " + fmt("%.2e", worst) + ", " +
                       fmt("%.1f s", secs);
  if (!checker_ok) detail += ", checker disagrees with independent differences";
  report(1, "gradient suite", ok, detail);
}

// ---------------------------------------------------------------------------
// 2, 3. Farthest point sampling

std::vector<std::size_t> brute_fps(const PointCloud& c, std::size_t k, std::size_t init) {
  std::vector<bool> taken(c.size(), false);
  std::vector<std::size_t> out{init};
  taken[init] = true;
  while (out.size() < k) {
    std::size_t best = c.size();
    double best_d = -1.0;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (taken[i]) continue;
      double m = std::numeric_limits<double>::infinity();
      for (std::size_t s : out) {
        const double dx = c.points[i].x - c.points[s].x, dy = c.points[i].y - c.points[s].y,
                     dz = c.points[i].z - c.points[s].z;
        m = std::min(m, std::sqrt(dx * dx + dy * dy + dz * dz));
      }
      if (m > best_d) {
        best_d = m;
        best = i;
      }
    }
    taken[best] = true;
    out.push_back(best);
  }
  return out;
}

Tensor2 random_depth(std::size_t h, std::size_t w, Rng& rng) {
  std::vector<float> d(h * w);
  for (float& v : d) v = static_cast<float>(rng.uniform01());
  return Tensor2(h, w, std::move(d));
}

void criterion_fps_oracle() {
  Rng rng(2);
  int matches = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t h = 1 + rng.uniform(8);
    const std::size_t w = 1 + rng.uniform(64 / h);
    const PointCloud c = depth_to_pointcloud(random_depth(h, w, rng), 0.5 + rng.uniform01());
    const std::size_t k = 1 + rng.uniform(std::min<std::size_t>(16, h * w));
    const std::size_t init = rng.uniform(h * w);
    if (farthest_point_sample(c, k, init).linear() == brute_fps(c, k, init)) ++matches;
  }
  report(2, "fps oracle equivalence", matches == 50, std::to_string(matches) + "/50 exact");
}

double min_pairwise(const PointCloud& c, const std::vector<std::size_t>& s) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j)
      m = std::min(m, distance(c.points[s[i]], c.points[s[j]]));
  return m;
}

void criterion_fps_coverage() {
  Rng rng(3);
  int wins = 0;
  for (int t = 0; t < 100; ++t) {
    const PointCloud c = depth_to_pointcloud(random_depth(14, 14, rng));
    const auto fps = farthest_point_sample(c, 81, rng.uniform(196)).linear();
    const auto rnd = random_sample(14, 14, 81, rng).linear();
    if (min_pairwise(c, fps) > min_pairwise(c, rnd)) ++wins;
  }
  report(3, "fps coverage", wins >= 95, std::to_string(wins) + "/100 trials fps > random");
}

// ---------------------------------------------------------------------------
// 4, 5. Assignment and metrics

void criterion_hungarian() {
  Rng rng(4);
  int matches = 0, total = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 1 + rng.uniform(6);
    Mat m(k, k);
    for (double& v : m.data) v = rng.uniform01() * 100.0;
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    double best_min = std::numeric_limits<double>::infinity(), best_max = -best_min;
    do {
      double s = 0.0;
      for (std::size_t r = 0; r < k; ++r) s += m(r, perm[r]);
      best_min = std::min(best_min, s);
      best_max = std::max(best_max, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    total += 2;
    if (assignment_objective(m, hungarian(m, false)) == best_min) ++matches;
    if (assignment_objective(m, hungarian(m, true)) == best_max) ++matches;
  }
  report(4, "hungarian oracle equivalence", matches == total,
         std::to_string(matches) + "/" + std::to_string(total) + " exact (min and max)");
}

void criterion_metric_fixtures() {
  std::ifstream in(fs::path(DEPTHG_FIXTURES) / "metric_fixtures.json");
  const auto cases = nlohmann::json::parse(in);
  int ok = 0;
  double worst = 0.0;
  for (const auto& cs : cases) {
    const auto rows = cs["confusion"].get<std::vector<std::vector<std::uint64_t>>>();
    ConfusionMatrix c(rows.size(), rows[0].size());
    for (std::size_t p = 0; p < rows.size(); ++p)
      for (std::size_t g = 0; g < rows[p].size(); ++g) c.at(p, g) = rows[p][g];
    const Metrics m = metrics(c, align_clusters(c));
    const double e = std::max(std::abs(m.accuracy - cs["accuracy"].get<double>()),
                              std::abs(m.miou - cs["miou"].get<double>()));
    worst = std::max(worst, e);
    if (e <= 1e-12) ++ok;
  }
  const int n = static_cast<int>(cases.size());
  report(5, "metric fixtures", n >= 5 && ok == n,
         std::to_string(ok) + "/" + std::to_string(n) + " fixtures, max err " + fmt("%.1e", worst));
}

// ---------------------------------------------------------------------------
// 6. Scheduler

void criterion_scheduler() {
  const Schedule s{0.19, 250, 0.6};
  double worst = 0.0;
  for (std::size_t t = 0; t < 750; ++t) {
    const double expected = t < 250 ? 0.19 : t < 500 ? 0.114 : 0.0684;
    worst = std::max(worst, std::abs(schedule_value(s, t) - expected));
  }
  report(6, "guidance scheduler", worst <= 1e-12, "max err " + fmt("%.1e", worst) + " over t < 750");
}

// ---------------------------------------------------------------------------
// 7-9. Training on the synthetic benchmark

struct Bench {
  cli::Config cfg;
  Dataset train;
  Dataset val;
};

Bench make_bench(const fs::path& root) {
  Bench b;
  const SynthPaths p = gen_synthetic(b.cfg.synth, root / "bench_data");
  b.train = load_dataset(p.train_manifest);
  b.val = load_dataset(p.val_manifest);
  return b;
}

void criterion_baseline_identity(const Bench& b) {
  cli::Config cfg = b.cfg;
  propagate_shared(cfg);
  TrainConfig zero = cfg.train;
  zero.steps = 300;
  zero.sampler = Sampler::kRandom;
  zero.lhp = false;
  zero.depthg.weight = 0.0;
  TrainConfig stego = zero;
  stego.depthg_enabled = false;
  const TrainResult a = train(zero, b.train), s = train(stego, b.train);
  bool same = a.log.size() == s.log.size();
  for (std::size_t t = 0; same && t < a.log.size(); ++t) {
    same = a.log[t].self == s.log[t].self && a.log[t].knn == s.log[t].knn &&
           a.log[t].random == s.log[t].random && a.log[t].total == s.log[t].total;
  }
  const auto ta = a.head.tensors(), ts = s.head.tensors();
  bool params = true;
  for (std::size_t k = 0; k < ta.size(); ++k) params = params && ta[k]->data == ts[k]->data;
  report(7, "ablation baseline identity", same && params,
         std::string("300 steps, loss trace ") + (same ? "bit-identical" : "differs") +
             ", parameters " + (params ? "bit-identical" : "differ"));
}

double cluster_accuracy(const Bench& b, TrainConfig t, const EvalConfig& ec) {
  const TrainResult r = train(t, b.train);
  EvalConfig e = ec;
  e.linear = false;
  return evaluate_head(r.head, b.train, b.val, e).cluster.metrics.accuracy;
}

void criteria_synthetic(const Bench& b) {
  const auto t0 = std::chrono::steady_clock::now();
  int ordered = 0, sched_wins = 0;
  double gain_sum = 0.0;
  std::string detail8, detail9;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    cli::Config cfg = b.cfg;
    cfg.seed = seed;
    cfg.train.steps = 2000;
    propagate_shared(cfg);

    TrainConfig base = cfg.train;
    base.depthg_enabled = false;
    base.sampler = Sampler::kRandom;
    TrainConfig depth_only = cfg.train;
    depth_only.sampler = Sampler::kRandom;
    TrainConfig ours = cfg.train;
    ours.sampler = Sampler::kFps;
    TrainConfig unscheduled = ours;
    unscheduled.decay_step = 0;

    const double ab = cluster_accuracy(b, base, cfg.eval);
    const double ad = cluster_accuracy(b, depth_only, cfg.eval);
    const double ao = cluster_accuracy(b, ours, cfg.eval);
    const double au = cluster_accuracy(b, unscheduled, cfg.eval);
    const bool pass8 = ao >= ad && ad >= ab && ao >= ab + 0.02;
    if (pass8) ++ordered;
    if (ao >= au) ++sched_wins;
    gain_sum += au - ao;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%sseed %llu base %.1f depthg %.1f ours %.1f", seed ? "; " : "",
                  static_cast<unsigned long long>(seed), 100 * ab, 100 * ad, 100 * ao);
    detail8 += buf;
    std::snprintf(buf, sizeof buf, "%sseed %llu scheduled %.1f unscheduled %.1f", seed ? "; " : "",
                  static_cast<unsigned long long>(seed), 100 * ao, 100 * au);
    detail9 += buf;
  }
  const double secs = seconds_since(t0);
  report(8, "synthetic ordering", ordered >= 2,
         std::to_string(ordered) + "/3 seeds ordered (" + detail8 + ")");
  const double mean_gain = gain_sum / 3.0;
  report(9, "scheduling ablation", mean_gain <= 0.01 && sched_wins >= 2,
         "unscheduled gain " + fmt("%+.2f", 100 * mean_gain) + " pts, scheduled >= unscheduled on " +
             std::to_string(sched_wins) + "/3 (" + detail9 + "), " + fmt("%.0f s", secs));
}

// ---------------------------------------------------------------------------
// 10. Determinism across runs and thread counts

std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "config.cfg") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string out;
  for (const auto& f : files) {
    const auto rel = fs::relative(f, dir).string();
    if (rel.rfind("data", 0) == 0) continue;
    out += rel + "\n" + read_file(f) + "\n";
  }
  return out;
}

void criterion_determinism(const fs::path& root) {
  std::vector<std::string> trees;
  for (const char* threads : {"1", "1", "4"}) {
    const fs::path out = root / ("det_" + std::to_string(trees.size()));
    fs::remove_all(out);
    const std::vector<std::string> common = {"-o", out.string(), "--threads", threads, "--set",
                                             "train.steps=300", "--set", "train.lhp=true"};
    std::vector<std::string> tr = {"depthg", "train"};
    tr.insert(tr.end(), common.begin(), common.end());
    if (cli::run(tr) != 0) {
      trees.push_back("train failed");
      continue;
    }
    fs::path run_dir;
    for (const auto& e : fs::directory_iterator(out)) run_dir = e.path();
    if (cli::run({"depthg", "eval", "--run", run_dir.string(), "--threads", threads}) != 0) {
      trees.push_back("eval failed");
      continue;
    }
    trees.push_back(tree_bytes(run_dir));
  }
  const bool runs = trees[0] == trees[1];
  const bool threads = trees[0] == trees[2];
  report(10, "determinism", runs && threads && trees[0].size() > 1000,
         std::string("log, checkpoint, reports: repeat ") + (runs ? "identical" : "differ") +
             ", threads 1 vs 4 " + (threads ? "identical" : "differ") + " (" +
             std::to_string(trees[0].size()) + " bytes compared)");
}

}  // namespace

int main() {
  const fs::path root = fs::current_path() / "acceptance_work";
  fs::remove_all(root);
  fs::create_directories(root);

  criterion_gradients();
  criterion_fps_oracle();
  criterion_fps_coverage();
  criterion_hungarian();
  criterion_metric_fixtures();
  criterion_scheduler();
  const Bench bench = make_bench(root);
  criterion_baseline_identity(bench);
  criteria_synthetic(bench);
  criterion_determinism(root);

  std::printf("%d of 10 criteria passed\n", 10 - failures);
  return failures == 0 ? 0 : 1;
}
