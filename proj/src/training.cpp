#include "depthg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "depthg/correlation.hpp"

namespace depthg {

namespace fs = std::filesystem;

namespace {

// Runs fn(0..n-1) on up to `threads` workers. Each index writes only its own
// outputs, so results do not depend on the worker count.
template <typename Fn>
void run_tasks(std::size_t n, std::size_t threads, Fn fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

void add_into(Mat& dst, const Mat& src) {
  for (std::size_t k = 0; k < dst.data.size(); ++k) dst.data[k] += src.data[k];
}

void scale_in_place(Mat& m, double s) {
  for (double& v : m.data) v *= s;
}

// dst (A x B) += x^T (N x A) * g (N x B)
void add_xt_g(Mat& dst, const Mat& x, const Mat& g) {
  for (std::size_t n = 0; n < x.rows; ++n) {
    auto xr = x.row(n);
    auto gr = g.row(n);
    for (std::size_t a = 0; a < x.cols; ++a) {
      const double xa = xr[a];
      if (xa == 0.0) continue;
      auto d = dst.row(a);
      for (std::size_t b = 0; b < g.cols; ++b) d[b] += xa * gr[b];
    }
  }
}

void add_row_sums(Mat& dst, const Mat& g) {
  for (std::size_t n = 0; n < g.rows; ++n) {
    auto gr = g.row(n);
    for (std::size_t b = 0; b < g.cols; ++b) dst(0, b) += gr[b];
  }
}

// y (N x B) = x (N x A) * w (A x B) + bias, accumulated into y.
void add_affine(Mat& y, const Mat& x, const Mat& w, const Mat& bias) {
  for (std::size_t n = 0; n < x.rows; ++n) {
    auto xr = x.row(n);
    auto yr = y.row(n);
    for (std::size_t b = 0; b < w.cols; ++b) yr[b] += bias(0, b);
    for (std::size_t a = 0; a < x.cols; ++a) {
      const double xa = xr[a];
      if (xa == 0.0) continue;
      auto wr = w.row(a);
      for (std::size_t b = 0; b < w.cols; ++b) yr[b] += xa * wr[b];
    }
  }
}

// dst (N x A) += g (N x B) * w^T (B x A), w stored A x B.
void add_g_wt(Mat& dst, const Mat& g, const Mat& w) {
  for (std::size_t n = 0; n < g.rows; ++n) {
    auto gr = g.row(n);
    auto d = dst.row(n);
    for (std::size_t a = 0; a < w.rows; ++a) d[a] += dot(gr, w.row(a));
  }
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Segmentation head

SegHeadParams SegHeadParams::zeros(std::size_t c, std::size_t q, std::size_t hidden) {
  require(c >= 1 && hidden >= 1, "SegHeadParams: dimensions must be positive");
  require(q >= 2, "SegHeadParams: code dimension must be at least 2");
  return {Mat(c, q), Mat(1, q), Mat(c, hidden), Mat(1, hidden), Mat(hidden, q), Mat(1, q)};
}

SegHeadParams SegHeadParams::init(std::size_t c, std::size_t q, std::size_t hidden, Rng& rng) {
  SegHeadParams p = zeros(c, q, hidden);
  auto fill = [&rng](Mat& m, double bound) {
    for (double& v : m.data) v = bound * (2.0 * rng.uniform01() - 1.0);
  };
  fill(p.linear_w, 1.0 / std::sqrt(static_cast<double>(c)));
  fill(p.hidden_w, 1.0 / std::sqrt(static_cast<double>(c)));
  fill(p.out_w, 1.0 / std::sqrt(static_cast<double>(hidden)));
  return p;
}

std::vector<Mat*> SegHeadParams::tensors() {
  return {&linear_w, &linear_b, &hidden_w, &hidden_b, &out_w, &out_b};
}

std::vector<const Mat*> SegHeadParams::tensors() const {
  return {&linear_w, &linear_b, &hidden_w, &hidden_b, &out_w, &out_b};
}

std::vector<std::string> SegHeadParams::tensor_names() {
  return {"linear_w", "linear_b", "hidden_w", "hidden_b", "out_w", "out_b"};
}

Mat seg_head_rows(const SegHeadParams& p, const Mat& x, HeadCache* cache) {
  require(x.cols == p.in_dim(), "seg_head: input has " + std::to_string(x.cols) +
                                    " channels, head expects " + std::to_string(p.in_dim()));
  Mat pre(x.rows, p.hidden_dim());
  add_affine(pre, x, p.hidden_w, p.hidden_b);
  Mat act = pre;
  for (double& v : act.data) v = std::max(v, 0.0);
  Mat out(x.rows, p.code_dim());
  add_affine(out, x, p.linear_w, p.linear_b);
  add_affine(out, act, p.out_w, p.out_b);
  if (cache) {
    cache->input = x;
    cache->hidden_pre = std::move(pre);
  }
  return out;
}

SegHeadGrad seg_head_backward(const SegHeadParams& p, const HeadCache& cache, const Mat& g) {
  require(g.rows == cache.input.rows && g.cols == p.code_dim(),
          "seg_head_backward: gradient shape mismatch");
  SegHeadGrad out{SegHeadParams::zeros(p.in_dim(), p.code_dim(), p.hidden_dim()),
                  Mat(cache.input.rows, p.in_dim())};
  Mat act = cache.hidden_pre;
  for (double& v : act.data) v = std::max(v, 0.0);

  add_xt_g(out.params.linear_w, cache.input, g);
  add_row_sums(out.params.linear_b, g);
  add_xt_g(out.params.out_w, act, g);
  add_row_sums(out.params.out_b, g);

  Mat d_pre(g.rows, p.hidden_dim());
  add_g_wt(d_pre, g, p.out_w);
  for (std::size_t k = 0; k < d_pre.data.size(); ++k) {
    if (cache.hidden_pre.data[k] <= 0.0) d_pre.data[k] = 0.0;
  }
  add_xt_g(out.params.hidden_w, cache.input, d_pre);
  add_row_sums(out.params.hidden_b, d_pre);

  add_g_wt(out.input, g, p.linear_w);
  add_g_wt(out.input, d_pre, p.hidden_w);
  return out;
}

Tensor3 seg_head_forward(const SegHeadParams& params, const Tensor3& f) {
  require(f.channels() == params.in_dim(), "seg_head_forward: channel mismatch");
  const Mat codes = seg_head_rows(params, positions_by_channels(f));
  Tensor3 out(params.code_dim(), f.height(), f.width());
  for (std::size_t pos = 0; pos < f.positions(); ++pos) {
    for (std::size_t q = 0; q < params.code_dim(); ++q) {
      out.set(q, pos / f.width(), pos % f.width(), static_cast<float>(codes(pos, q)));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedules

double schedule_value(const Schedule& s, std::size_t t) {
  if (s.decay_step == 0) return s.base;
  const std::size_t k = t / s.decay_step;
  return s.base * std::pow(s.decay_factor, static_cast<double>(k));
}

AdamState adam_init(const std::vector<Mat*>& params) {
  AdamState s;
  for (const Mat* p : params) {
    s.m.emplace_back(p->rows, p->cols);
    s.v.emplace_back(p->rows, p->cols);
  }
  return s;
}

void adam_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, const AdamConfig& cfg) {
  require(params.size() == grads.size() && params.size() == state.m.size(),
          "adam_step: parameter, gradient and state counts differ");
  for (std::size_t t = 0; t < params.size(); ++t) {
    require(params[t]->data.size() == grads[t]->data.size() &&
                params[t]->data.size() == state.m[t].data.size(),
            "adam_step: shape mismatch in tensor " + std::to_string(t));
    for (std::size_t k = 0; k < grads[t]->data.size(); ++k) {
      if (!std::isfinite(grads[t]->data[k])) {
        throw std::runtime_error("adam_step: non-finite gradient in tensor " + std::to_string(t) +
                                 " entry " + std::to_string(k) + " at optimizer step " +
                                 std::to_string(state.step + 1));
      }
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& p = params[t]->data;
    const auto& g = grads[t]->data;
    auto& m = state.m[t].data;
    auto& v = state.v[t].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      p[k] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Pairs

std::vector<double> mean_pooled(const Tensor3& f) {
  require(f.positions() > 0, "mean_pooled: empty feature map");
  std::vector<double> out(f.channels(), 0.0);
  const auto data = f.data();
  const std::size_t hw = f.positions();
  for (std::size_t c = 0; c < f.channels(); ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += data[c * hw + p];
    out[c] = s / static_cast<double>(hw);
  }
  return out;
}

std::vector<std::vector<std::size_t>> knn_pairs(const std::vector<std::vector<double>>& pooled,
                                                std::size_t k,
                                                const std::vector<std::size_t>& groups) {
  const std::size_t n = pooled.size();
  require(n >= 2, "knn_pairs: need at least two items");
  require(k >= 1, "knn_pairs: k must be at least 1");
  require(k < n, "knn_pairs: k must be smaller than the number of items");
  require(groups.empty() || groups.size() == n, "knn_pairs: one group id per item required");
  std::vector<std::vector<std::size_t>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> cand;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || (!groups.empty() && groups[j] == groups[i])) continue;
      cand.emplace_back(-cosine_similarity(pooled[i], pooled[j]), j);
    }
    require(cand.size() >= k, "knn_pairs: item " + std::to_string(i) + " has fewer than k candidates");
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t r = 0; r < k; ++r) out[i].push_back(cand[r].second);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(Sampler s) {
  switch (s) {
    case Sampler::kFps: return "fps";
    case Sampler::kRandom: return "random";
    case Sampler::kFullMap: return "full-map";
  }
  return "fps";
}

Sampler parse_sampler(const std::string& text) {
  if (text == "fps") return Sampler::kFps;
  if (text == "random") return Sampler::kRandom;
  if (text == "full-map") return Sampler::kFullMap;
  throw ContractError("unknown sampler '" + text + "' (expected fps, random, full-map)");
}

std::string to_string(Guidance g) {
  switch (g) {
    case Guidance::kDepth: return "depth";
    case Guidance::kImagePlane: return "image-plane";
    case Guidance::kPerspectivePlane: return "perspective-plane";
  }
  return "depth";
}

Guidance parse_guidance(const std::string& text) {
  if (text == "depth") return Guidance::kDepth;
  if (text == "image-plane") return Guidance::kImagePlane;
  if (text == "perspective-plane") return Guidance::kPerspectivePlane;
  throw ContractError("unknown guidance '" + text +
                      "' (expected depth, image-plane, perspective-plane)");
}

Tensor2 guidance_map(Guidance g, const Tensor2& depth) {
  if (g == Guidance::kDepth) return depth;
  const std::size_t h = depth.height(), w = depth.width();
  std::vector<float> data(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    const float v = g == Guidance::kImagePlane
                        ? 0.5f
                        : (h > 1 ? static_cast<float>(1.0 - static_cast<double>(r) / (h - 1)) : 0.5f);
    std::fill(data.begin() + static_cast<std::ptrdiff_t>(r * w),
              data.begin() + static_cast<std::ptrdiff_t>((r + 1) * w), v);
  }
  return Tensor2(h, w, std::move(data));
}

void validate(const TrainConfig& cfg, std::size_t height, std::size_t width) {
  auto term_ok = [](const LossTermConfig& t, const char* name) {
    require(std::isfinite(t.weight) && t.weight >= 0.0,
            std::string("train: ") + name + " weight must be finite and non-negative");
    require(std::isfinite(t.bias), std::string("train: ") + name + " bias must be finite");
  };
  term_ok(cfg.self, "self");
  term_ok(cfg.knn, "knn");
  term_ok(cfg.random, "random");
  term_ok(cfg.depthg, "depthg");
  require(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0, "train: decay_factor must lie in (0,1]");
  require(cfg.samples_per_side >= 1, "train: samples_per_side must be at least 1");
  if (cfg.sampler != Sampler::kFullMap) {
    require(cfg.samples_per_side * cfg.samples_per_side <= height * width,
            "train: samples_per_side^2 exceeds the " + std::to_string(height) + "x" +
                std::to_string(width) + " grid");
  }
  require(cfg.depth_scale > 0.0, "train: depth_scale must be positive");
  require(cfg.code_dim >= 2, "train: code_dim must be at least 2");
  require(cfg.steps >= 1, "train: steps must be at least 1");
  require(cfg.batch >= 1, "train: batch must be at least 1");
  require(cfg.knn_k >= 1, "train: knn_k must be at least 1");
  require(cfg.threads >= 1, "train: threads must be at least 1");
  require(cfg.adam.learning_rate > 0.0, "train: learning rate must be positive");
  if (cfg.lhp) {
    require(cfg.lhp_cfg.neighbors >= 1 && cfg.lhp_cfg.neighbors < height * width,
            "train: lhp neighbors must lie in [1, H*W)");
    require(cfg.lhp_cfg.anchor_keep >= 0.0 && cfg.lhp_cfg.anchor_keep <= 1.0,
            "train: lhp anchor_keep must lie in [0,1]");
    require(std::isfinite(cfg.lhp_cfg.beta) && cfg.lhp_cfg.beta >= 0.0,
            "train: lhp beta must be finite and non-negative");
  }
}

Schedule depthg_weight_schedule(const TrainConfig& cfg) {
  return {cfg.depthg.weight, cfg.decay_step, cfg.decay_factor};
}

Schedule depthg_bias_schedule(const TrainConfig& cfg) {
  return {cfg.depthg.bias, cfg.decay_step, cfg.decay_factor};
}

std::size_t samples_per_side_at(const TrainConfig& cfg, std::size_t t) {
  if (cfg.n_decay_step == 0) return cfg.samples_per_side;
  const std::size_t drop = t / cfg.n_decay_step;
  return drop >= cfg.samples_per_side ? 1 : std::max<std::size_t>(1, cfg.samples_per_side - drop);
}

std::string log_header() {
  return "step\tlambda_depthg\tbias_depthg\tself\tknn\trandom\tdepthg\ttotal";
}

std::string format_record(const StepRecord& r) {
  return std::to_string(r.step) + "\t" + fmt17(r.lambda_depthg) + "\t" + fmt17(r.bias_depthg) + "\t" +
         fmt17(r.self) + "\t" + fmt17(r.knn) + "\t" + fmt17(r.random) + "\t" + fmt17(r.depthg) +
         "\t" + fmt17(r.total);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct CropCache {
  Mat features;  // positions x C
  Tensor2 guide;
  PointCloud cloud;
};

// Seeded image order, reshuffled every time it is exhausted.
class ImageCycle {
 public:
  ImageCycle(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle();
  }

  std::size_t next() {
    if (cursor_ == order_.size()) shuffle();
    return order_[cursor_++];
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.uniform(i)]);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  Rng& rng_;
  std::size_t cursor_ = 0;
};

std::vector<std::vector<std::size_t>> crop_neighbors(const Dataset& data, std::size_t k) {
  bool all_given = true;
  for (const auto& c : data.crops) all_given = all_given && !c.knn.empty();
  if (all_given) {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& c : data.crops) out.push_back(c.knn);
    return out;
  }
  std::vector<std::vector<double>> pooled;
  std::vector<std::size_t> groups;
  for (const auto& c : data.crops) {
    pooled.push_back(mean_pooled(c.features));
    groups.push_back(c.image);
  }
  return knn_pairs(pooled, k, groups);
}

struct Triple {
  std::array<std::size_t, kTripleSlots> crops{};
  std::array<SampleSet, kTripleSlots> samples;
};

// Per-step work on one triple; gradients are summed into `grads`.
struct TripleResult {
  StepRecord record;
  std::vector<Mat> head_grads;
  std::vector<Mat> projection_grads;
};

TripleResult run_triple(const TrainConfig& cfg, const ObjectiveConfig& ocfg,
                        const std::vector<CropCache>& cache, const Triple& tr,
                        const SegHeadParams& head, const ProjectionHeadParams* projection) {
  std::array<std::vector<std::size_t>, kTripleSlots> lin;
  for (std::size_t s = 0; s < kTripleSlots; ++s) lin[s] = tr.samples[s].linear();
  auto feat = [&](std::size_t s) -> const Mat& { return cache[tr.crops[s]].features; };

  // Targets come from frozen features and guidance only.
  TripleTargets targets;
  run_tasks(4, cfg.threads, [&](std::size_t k) {
    if (k < 3) {
      const Mat a = gather_rows(feat(0), lin[0]);
      const Mat b = gather_rows(feat(k + 1), lin[k + 1]);
      CorrelationTensor F = cosine_correlation(a, b);
      (k == 0 ? targets.self_F : k == 1 ? targets.knn_F : targets.random_F) = std::move(F);
    } else if (ocfg.depthg_enabled) {
      targets.self_D = depth_correlation(cache[tr.crops[0]].guide, cache[tr.crops[1]].guide,
                                         tr.samples[0], tr.samples[1]);
    }
  });

  std::array<HeadCache, kTripleSlots> hc;
  std::array<Mat, kTripleSlots> codes;
  std::array<Mat, kTripleSlots> code_grads;
  TripleResult out;
  if (!cfg.lhp) {
    run_tasks(kTripleSlots, cfg.threads, [&](std::size_t s) {
      codes[s] = seg_head_rows(head, gather_rows(feat(s), lin[s]), &hc[s]);
    });
    ObjectiveValue v = triple_objective(targets, ocfg, codes[0], codes[1], codes[2], codes[3]);
    out.record = {0, ocfg.depthg.weight, ocfg.depthg.bias, v.self, v.knn, v.random, v.depthg, v.value};
    code_grads = slot_gradients(v);
  } else {
    run_tasks(kTripleSlots, cfg.threads, [&](std::size_t s) {
      codes[s] = seg_head_rows(head, feat(s), &hc[s]);
    });
    std::array<PropagationMap, kTripleSlots> gather, mix;
    run_tasks(kTripleSlots, cfg.threads, [&](std::size_t s) {
      gather[s] = gather_map(tr.samples[s]);
      mix[s] = propagation_map(cache[tr.crops[s]].cloud, tr.samples[s], cfg.lhp_cfg);
    });
    LhpValue v = lhp_loss(targets, ocfg, {&codes[0], &codes[1], &codes[2], &codes[3]}, gather, mix,
                          *projection, cfg.lhp_cfg.beta);
    out.record = {0,          ocfg.depthg.weight, ocfg.depthg.bias, v.head.self, v.head.knn,
                  v.head.random, v.head.depthg,  v.value};
    code_grads = std::move(v.grad_codes);
    for (const Mat* m : v.grad_projection.tensors()) out.projection_grads.push_back(*m);
  }

  std::array<SegHeadGrad, kTripleSlots> g;
  run_tasks(kTripleSlots, cfg.threads,
            [&](std::size_t s) { g[s] = seg_head_backward(head, hc[s], code_grads[s]); });
  for (const Mat* m : g[0].params.tensors()) out.head_grads.push_back(*m);
  for (std::size_t s = 1; s < kTripleSlots; ++s) {
    auto ts = g[s].params.tensors();
    for (std::size_t t = 0; t < ts.size(); ++t) add_into(out.head_grads[t], *ts[t]);
  }
  return out;
}

SampleSet draw_samples(const TrainConfig& cfg, const CropCache& c, std::size_t n_side, Rng& rng) {
  const std::size_t h = c.guide.height(), w = c.guide.width();
  switch (cfg.sampler) {
    case Sampler::kFullMap:
      return all_positions(h, w);
    case Sampler::kRandom:
      return random_sample(h, w, n_side * n_side, rng);
    case Sampler::kFps: {
      const std::size_t init = cfg.fps_fixed_init ? 0 : rng.uniform(h * w);
      return farthest_point_sample(c.cloud, n_side * n_side, init);
    }
  }
  return all_positions(h, w);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const Dataset& data, const StepCallback& on_step) {
  require(!data.crops.empty(), "train: empty dataset");
  require(data.images.size() >= 2, "train: need at least two images for random pairs");
  const std::size_t height = data.crops.front().features.height();
  const std::size_t width = data.crops.front().features.width();
  for (const auto& c : data.crops) {
    require(c.features.height() == height && c.features.width() == width,
            "train: every crop must share one grid size");
  }
  validate(cfg, height, width);

  std::vector<CropCache> cache(data.crops.size());
  for (std::size_t i = 0; i < data.crops.size(); ++i) {
    cache[i].features = positions_by_channels(data.crops[i].features);
    cache[i].guide = guidance_map(cfg.guidance, data.crops[i].depth);
    cache[i].cloud = depth_to_pointcloud(cache[i].guide, cfg.depth_scale);
  }
  const auto neighbors = crop_neighbors(data, cfg.knn_k);

  Rng pair_rng(derive_seed(cfg.seed, 1));
  Rng sample_rng(derive_seed(cfg.seed, 2));
  Rng init_rng(derive_seed(cfg.seed, 3));

  const std::size_t channels = data.channels();
  TrainResult result;
  result.head = SegHeadParams::init(channels, cfg.code_dim,
                                    cfg.hidden_dim == 0 ? channels : cfg.hidden_dim, init_rng);
  if (cfg.lhp) result.projection = ProjectionHeadParams::init(cfg.code_dim, init_rng);

  std::vector<Mat*> params = result.head.tensors();
  const std::size_t n_head = params.size();
  if (result.projection) {
    for (Mat* m : result.projection->tensors()) params.push_back(m);
  }
  AdamState adam = adam_init(params);
  ImageCycle images(data.images.size(), pair_rng);
  const Schedule lambda_s = depthg_weight_schedule(cfg);
  const Schedule bias_s = depthg_bias_schedule(cfg);

  for (std::size_t t = 0; t < cfg.steps; ++t) {
    ObjectiveConfig ocfg{cfg.self, cfg.knn, cfg.random, cfg.depthg, cfg.depthg_enabled};
    ocfg.depthg.weight = schedule_value(lambda_s, t);
    ocfg.depthg.bias = schedule_value(bias_s, t);
    const std::size_t n_side = samples_per_side_at(cfg, t);

    std::vector<Mat> grads;
    for (const Mat* m : params) grads.emplace_back(m->rows, m->cols);
    StepRecord rec{t, ocfg.depthg.weight, ocfg.depthg.bias};
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      Triple tr;
      const std::size_t img = images.next();
      const auto& crops = data.images[img];
      require(crops.size() >= 2, "train: image " + std::to_string(img) + " has a single crop");
      const std::size_t a = pair_rng.uniform(crops.size());
      std::size_t p = pair_rng.uniform(crops.size() - 1);
      if (p >= a) ++p;
      tr.crops[0] = crops[a];
      tr.crops[1] = crops[p];
      const auto& nb = neighbors[tr.crops[0]];
      tr.crops[2] = nb[pair_rng.uniform(nb.size())];
      std::size_t other = pair_rng.uniform(data.images.size() - 1);
      if (other >= img) ++other;
      tr.crops[3] = data.images[other][pair_rng.uniform(data.images[other].size())];
      for (std::size_t s = 0; s < kTripleSlots; ++s) {
        tr.samples[s] = draw_samples(cfg, cache[tr.crops[s]], n_side, sample_rng);
      }

      TripleResult r = run_triple(cfg, ocfg, cache, tr, result.head,
                                  result.projection ? &*result.projection : nullptr);
      if (!std::isfinite(r.record.total)) {
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(t) +
                                 " (self=" + fmt17(r.record.self) + " knn=" + fmt17(r.record.knn) +
                                 " random=" + fmt17(r.record.random) +
                                 " depthg=" + fmt17(r.record.depthg) + ")");
      }
      for (std::size_t k = 0; k < n_head; ++k) add_into(grads[k], r.head_grads[k]);
      for (std::size_t k = 0; k < r.projection_grads.size(); ++k) {
        add_into(grads[n_head + k], r.projection_grads[k]);
      }
      rec.self += r.record.self;
      rec.knn += r.record.knn;
      rec.random += r.record.random;
      rec.depthg += r.record.depthg;
      rec.total += r.record.total;
    }
    if (cfg.batch > 1) {
      const double inv = 1.0 / static_cast<double>(cfg.batch);
      for (Mat& g : grads) scale_in_place(g, inv);
      rec.self *= inv;
      rec.knn *= inv;
      rec.random *= inv;
      rec.depthg *= inv;
      rec.total *= inv;
    }
    std::vector<const Mat*> gp;
    for (const Mat& g : grads) gp.push_back(&g);
    adam_step(params, gp, adam, cfg.adam);
    result.log.push_back(rec);
    if (on_step) on_step(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& dir, const TrainResult& result, const std::string& digest) {
  fs::create_directories(dir);
  const auto names = SegHeadParams::tensor_names();
  const auto tensors = result.head.tensors();
  for (std::size_t k = 0; k < names.size(); ++k) write_matrix(dir / (names[k] + ".npy"), *tensors[k]);
  if (result.projection) {
    write_matrix(dir / "projection_w.npy", result.projection->weight);
    write_matrix(dir / "projection_b.npy", result.projection->bias);
  }
  nlohmann::ordered_json meta;
  meta["config_digest"] = digest;
  meta["tensors"] = names;
  meta["projection"] = result.projection.has_value();
  write_file(dir / "meta.json", meta.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto text = read_file(dir / "meta.json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  Checkpoint ck;
  ck.digest = meta.value("config_digest", std::string());
  const auto names = SegHeadParams::tensor_names();
  auto tensors = ck.head.tensors();
  for (std::size_t k = 0; k < names.size(); ++k) *tensors[k] = read_matrix(dir / (names[k] + ".npy"));
  const auto& h = ck.head;
  if (h.linear_b.cols != h.code_dim() || h.hidden_w.rows != h.in_dim() ||
      h.hidden_b.cols != h.hidden_dim() || h.out_w.rows != h.hidden_dim() ||
      h.out_w.cols != h.code_dim() || h.out_b.cols != h.code_dim()) {
    throw FormatError(dir.string() + ": inconsistent head tensor shapes");
  }
  if (meta.value("projection", false)) {
    ck.projection = ProjectionHeadParams{read_matrix(dir / "projection_w.npy"),
                                         read_matrix(dir / "projection_b.npy")};
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Probing

CodeSet head_codes(const SegHeadParams& head, const Dataset& data) {
  CodeSet out;
  std::vector<Mat> parts;
  std::size_t rows = 0;
  for (const auto& c : data.crops) {
    if (!c.labels) continue;
    parts.push_back(seg_head_rows(head, positions_by_channels(c.features)));
    rows += parts.back().rows;
    out.labels.insert(out.labels.end(), c.labels->data.begin(), c.labels->data.end());
  }
  require(rows > 0, "head_codes: dataset has no labelled crops");
  out.codes = Mat(rows, head.code_dim());
  std::size_t at = 0;
  for (const Mat& m : parts) {
    std::copy(m.data.begin(), m.data.end(), out.codes.data.begin() + static_cast<std::ptrdiff_t>(at));
    at += m.data.size();
  }
  return out;
}

EvalReport evaluate_head(const SegHeadParams& head, const Dataset& train, const Dataset& val,
                         const EvalConfig& cfg) {
  const CodeSet v = head_codes(head, val);
  std::size_t classes = cfg.classes;
  std::optional<CodeSet> t;
  if (cfg.linear) t = head_codes(head, train);
  if (classes == 0) {
    std::uint8_t top = 0;
    for (std::uint8_t y : v.labels) {
      if (y != kIgnoreLabel) top = std::max(top, y);
    }
    if (t) {
      for (std::uint8_t y : t->labels) {
        if (y != kIgnoreLabel) top = std::max(top, y);
      }
    }
    classes = static_cast<std::size_t>(top) + 1;
  }
  const std::size_t clusters = cfg.clusters == 0 ? classes : cfg.clusters;

  EvalReport report;
  Rng rng(derive_seed(cfg.seed, 7));
  report.cluster = cluster_probe(v.codes, v.labels, classes, clusters, cfg.kmeans_iters, rng,
                                 cfg.metric, cfg.threads, cfg.kmeans_restarts);
  if (t) {
    report.linear = linear_probe(t->codes, t->labels, v.codes, v.labels, classes, cfg.linear_cfg);
    report.has_linear = true;
  }
  return report;
}

}  // namespace depthg
