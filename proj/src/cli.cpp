#include "depthg/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "depthg/correlation.hpp"
#include "depthg/lhp3d.hpp"
#include "depthg/losses.hpp"

namespace depthg::cli {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config text

namespace {

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::size_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ContractError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  errno = 0;
  const unsigned long long x = std::strtoull(v.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ContractError(key + ": integer out of range '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_real(const std::string& key, const std::string& v) {
  char* end = nullptr;
  errno = 0;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE || !std::isfinite(x)) {
    throw ContractError(key + ": expected a finite number, got '" + v + "'");
  }
  return x;
}

bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename T>
Field count_field(std::string key, T& ref) {
  return {key, [&ref] { return std::to_string(ref); },
          [&ref, key](const std::string& v) { ref = static_cast<T>(parse_count(key, v)); }};
}

Field real_field(std::string key, double& ref) {
  return {key, [&ref] { return fmt_double(ref); },
          [&ref, key](const std::string& v) { ref = parse_real(key, v); }};
}

Field bool_field(std::string key, bool& ref) {
  return {key, [&ref] { return fmt_bool(ref); },
          [&ref, key](const std::string& v) { ref = parse_flag(key, v); }};
}

Field string_field(std::string key, std::string& ref) {
  return {key, [&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }};
}

template <typename E, typename Parse>
Field enum_field(std::string key, E& ref, Parse parse) {
  return {key, [&ref] { return to_string(ref); },
          [&ref, parse](const std::string& v) { ref = parse(v); }};
}

void term_fields(std::vector<Field>& f, const std::string& prefix, LossTermConfig& t) {
  f.push_back(real_field(prefix + ".weight", t.weight));
  f.push_back(real_field(prefix + ".bias", t.bias));
  f.push_back(enum_field(prefix + ".centering", t.centering, parse_centering));
  f.push_back(bool_field(prefix + ".clamp", t.clamp));
  f.push_back(enum_field(prefix + ".reduction", t.reduction, parse_reduction));
}

// One entry per configurable key, in canonical order.
std::vector<Field> fields(Config& c) {
  std::vector<Field> f;
  f.push_back(count_field("seed", c.seed));
  f.push_back(count_field("threads", c.threads));
  f.push_back(string_field("data.train", c.train_manifest));
  f.push_back(string_field("data.val", c.val_manifest));

  auto& s = c.synth;
  f.push_back(count_field("synth.scenes", s.scenes));
  f.push_back(count_field("synth.val_scenes", s.val_scenes));
  f.push_back(count_field("synth.height", s.height));
  f.push_back(count_field("synth.width", s.width));
  f.push_back(count_field("synth.margin", s.margin));
  f.push_back(count_field("synth.channels", s.channels));
  f.push_back(count_field("synth.classes", s.classes));
  f.push_back(count_field("synth.regions", s.regions));
  f.push_back(count_field("synth.planes", s.planes));
  f.push_back(real_field("synth.noise", s.noise));
  f.push_back(real_field("synth.nuisance", s.nuisance));
  f.push_back(real_field("synth.depth_noise", s.depth_noise));
  f.push_back(count_field("synth.seed", s.seed));

  auto& t = c.train;
  term_fields(f, "train.self", t.self);
  term_fields(f, "train.knn", t.knn);
  term_fields(f, "train.random", t.random);
  term_fields(f, "train.depthg", t.depthg);
  f.push_back(bool_field("train.depthg.enabled", t.depthg_enabled));
  f.push_back(count_field("train.decay_step", t.decay_step));
  f.push_back(real_field("train.decay_factor", t.decay_factor));
  f.push_back(count_field("train.samples_per_side", t.samples_per_side));
  f.push_back(count_field("train.n_decay_step", t.n_decay_step));
  f.push_back(enum_field("train.sampler", t.sampler, parse_sampler));
  f.push_back(bool_field("train.fps_fixed_init", t.fps_fixed_init));
  f.push_back(real_field("train.depth_scale", t.depth_scale));
  f.push_back(enum_field("train.guidance", t.guidance, parse_guidance));
  f.push_back(bool_field("train.lhp", t.lhp));
  f.push_back(count_field("train.lhp.neighbors", t.lhp_cfg.neighbors));
  f.push_back(real_field("train.lhp.anchor_keep", t.lhp_cfg.anchor_keep));
  f.push_back(real_field("train.lhp.beta", t.lhp_cfg.beta));
  f.push_back(enum_field("train.lhp.weighting", t.lhp_cfg.weighting, parse_weighting));
  f.push_back(real_field("train.lhp.temperature", t.lhp_cfg.temperature));
  f.push_back(count_field("train.code_dim", t.code_dim));
  f.push_back(count_field("train.hidden_dim", t.hidden_dim));
  f.push_back(real_field("train.lr", t.adam.learning_rate));
  f.push_back(real_field("train.adam.beta1", t.adam.beta1));
  f.push_back(real_field("train.adam.beta2", t.adam.beta2));
  f.push_back(real_field("train.adam.epsilon", t.adam.epsilon));
  f.push_back(count_field("train.steps", t.steps));
  f.push_back(count_field("train.batch", t.batch));
  f.push_back(count_field("train.knn_k", t.knn_k));

  auto& e = c.eval;
  f.push_back(count_field("eval.classes", e.classes));
  f.push_back(count_field("eval.clusters", e.clusters));
  f.push_back(count_field("eval.kmeans_iters", e.kmeans_iters));
  f.push_back(count_field("eval.kmeans_restarts", e.kmeans_restarts));
  f.push_back(enum_field("eval.metric", e.metric, parse_kmeans_metric));
  f.push_back(bool_field("eval.linear", e.linear));
  f.push_back(real_field("eval.linear.lr", e.linear_cfg.learning_rate));
  f.push_back(count_field("eval.linear.steps", e.linear_cfg.steps));
  return f;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string canonical_text(const Config& cfg, bool with_threads) {
  Config copy = cfg;
  std::string out;
  for (const auto& f : fields(copy)) {
    if (!with_threads && f.key == "threads") continue;
    out += f.key + " = " + f.get() + "\n";
  }
  return out;
}

}  // namespace

std::string format_config(const Config& cfg) { return canonical_text(cfg, true); }

void set_value(Config& cfg, const std::string& key, const std::string& value) {
  for (auto& f : fields(cfg)) {
    if (f.key == key) {
      f.set(value);
      return;
    }
  }
  throw ContractError("unknown config key '" + key + "'");
}

Config parse_config(const std::string& text, Config base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      set_value(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ContractError& e) {
      throw ContractError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

void propagate_shared(Config& cfg) {
  cfg.train.seed = cfg.seed;
  cfg.train.threads = cfg.threads;
  cfg.eval.seed = cfg.seed;
  cfg.eval.threads = cfg.threads;
  cfg.eval.linear_cfg.seed = derive_seed(cfg.seed, 11);
}

std::string config_digest(const Config& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_text(cfg, false)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string run_name(const Config& cfg) {
  return config_digest(cfg) + "-s" + std::to_string(cfg.seed);
}

// ---------------------------------------------------------------------------
// Gradient check suite

namespace {

constexpr std::size_t kGh = 4, kGw = 4, kGc = 6, kGq = 5;
constexpr double kFdStep = 1e-5;
// Instances with a clamp or ReLU input this close to zero are redrawn so the
// central difference never straddles a kink.
constexpr double kKinkMargin = 1e-3;

Mat random_mat(std::size_t r, std::size_t c, Rng& rng) {
  Mat m(r, c);
  for (double& v : m.data) v = rng.normal();
  return m;
}

Tensor2 random_depth(Rng& rng) {
  std::vector<float> d(kGh * kGw);
  for (float& v : d) v = static_cast<float>(rng.uniform01());
  return Tensor2(kGh, kGw, std::move(d));
}

std::vector<double> flatten(const std::vector<const Mat*>& ms) {
  std::vector<double> out;
  for (const Mat* m : ms) out.insert(out.end(), m->data.begin(), m->data.end());
  return out;
}

void unflatten(std::span<const double> x, const std::vector<Mat*>& ms) {
  std::size_t at = 0;
  for (Mat* m : ms) {
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(at),
              x.begin() + static_cast<std::ptrdiff_t>(at + m->data.size()), m->data.begin());
    at += m->data.size();
  }
}

double min_abs_corr(const Mat& a, const Mat& b) {
  const CorrelationTensor s = cosine_correlation(a, b);
  double m = 1.0;
  for (double v : s.data) m = std::min(m, std::abs(v));
  return m;
}

double min_abs(const Mat& m) {
  double out = 1e300;
  for (double v : m.data) out = std::min(out, std::abs(v));
  return out;
}

bool triple_has_kink(const std::array<const Mat*, kTripleSlots>& s) {
  return min_abs_corr(*s[0], *s[1]) < kKinkMargin || min_abs_corr(*s[0], *s[2]) < kKinkMargin ||
         min_abs_corr(*s[0], *s[3]) < kKinkMargin;
}

ObjectiveConfig gradcheck_objective() {
  ObjectiveConfig cfg;
  cfg.self = {0.58, 0.07, Centering::kRow};
  cfg.knn = {0.36, 0.02, Centering::kRowCol};
  cfg.random = {0.70, 0.76, Centering::kRow};
  cfg.depthg = {0.19, 0.03, Centering::kNone};
  cfg.depthg_enabled = true;
  return cfg;
}

TripleTargets random_targets(Rng& rng, std::size_t rows, std::size_t cols) {
  TripleTargets t;
  t.self_F = cosine_correlation(random_mat(rows, kGc, rng), random_mat(cols, kGc, rng));
  t.knn_F = cosine_correlation(random_mat(rows, kGc, rng), random_mat(cols, kGc, rng));
  t.random_F = cosine_correlation(random_mat(rows, kGc, rng), random_mat(cols, kGc, rng));
  const Tensor2 da = random_depth(rng), db = random_depth(rng);
  const SampleSet all = all_positions(kGh, kGw);
  if (rows == all.size() && cols == all.size()) {
    t.self_D = depth_correlation(da, db);
  } else {
    t.self_D = Mat(rows, cols);
    for (double& v : t.self_D.data) v = rng.uniform01() * rng.uniform01();
  }
  return t;
}

GradcheckEntry check_pair_loss(const std::string& name, bool depth, std::size_t n, Rng& rng) {
  GradcheckEntry e{name, 0, 0.0};
  const std::size_t p = kGh * kGw;
  while (e.instances < n) {
    Mat si = random_mat(p, kGq, rng), sj = random_mat(p, kGq, rng);
    if (min_abs_corr(si, sj) < kKinkMargin) continue;
    LossTermConfig cfg{1.0, depth ? 0.03 : 0.07, depth ? Centering::kNone : Centering::kRow};
    CorrelationTensor target =
        depth ? depth_correlation(random_depth(rng), random_depth(rng))
              : cosine_correlation(random_mat(p, kGc, rng), random_mat(p, kGc, rng));
    auto loss = [&](const Mat& a, const Mat& b) {
      return depth ? depthg_loss(target, a, b, cfg) : corr_loss(target, a, b, cfg);
    };
    const LossValue v = loss(si, sj);
    std::vector<double> x = flatten({&si, &sj});
    std::vector<double> g = flatten({&v.grad_i, &v.grad_j});
    Mat a = si, b = sj;
    auto fn = [&](std::span<const double> xs) {
      unflatten(xs, {&a, &b});
      return loss(a, b).value;
    };
    e.max_rel_error = std::max(e.max_rel_error, finite_diff_check(fn, x, g, kFdStep));
    ++e.instances;
  }
  return e;
}

GradcheckEntry check_total(std::size_t n, Rng& rng) {
  GradcheckEntry e{"total_loss", 0, 0.0};
  const std::size_t p = kGh * kGw;
  const ObjectiveConfig cfg = gradcheck_objective();
  while (e.instances < n) {
    std::array<Mat, kTripleSlots> s;
    for (auto& m : s) m = random_mat(p, kGq, rng);
    if (triple_has_kink({&s[0], &s[1], &s[2], &s[3]})) continue;
    const TripleTargets t = random_targets(rng, p, p);
    const ObjectiveValue v = triple_objective(t, cfg, s[0], s[1], s[2], s[3]);
    const auto grads = slot_gradients(v);
    std::vector<double> x = flatten({&s[0], &s[1], &s[2], &s[3]});
    std::vector<double> g = flatten({&grads[0], &grads[1], &grads[2], &grads[3]});
    std::array<Mat, kTripleSlots> w = s;
    auto fn = [&](std::span<const double> xs) {
      unflatten(xs, {&w[0], &w[1], &w[2], &w[3]});
      return triple_objective(t, cfg, w[0], w[1], w[2], w[3]).value;
    };
    e.max_rel_error = std::max(e.max_rel_error, finite_diff_check(fn, x, g, kFdStep));
    ++e.instances;
  }
  return e;
}

GradcheckEntry check_seg_head(std::size_t n, Rng& rng) {
  GradcheckEntry e{"seg_head_forward", 0, 0.0};
  const std::size_t p = kGh * kGw;
  while (e.instances < n) {
    SegHeadParams head = SegHeadParams::init(kGc, kGq, kGc, rng);
    for (Mat* b : {&head.linear_b, &head.hidden_b, &head.out_b}) {
      for (double& v : b->data) v = 0.1 * rng.normal();
    }
    Mat x = random_mat(p, kGc, rng);
    const Mat r = random_mat(p, kGq, rng);
    HeadCache cache;
    const Mat codes = seg_head_rows(head, x, &cache);
    (void)codes;
    if (min_abs(cache.hidden_pre) < kKinkMargin) continue;
    const SegHeadGrad g = seg_head_backward(head, cache, r);

    std::vector<const Mat*> all = {&x};
    for (const Mat* m : std::as_const(head).tensors()) all.push_back(m);
    std::vector<const Mat*> gall = {&g.input};
    for (const Mat* m : g.params.tensors()) gall.push_back(m);
    const std::vector<double> xv = flatten(all), gv = flatten(gall);

    SegHeadParams h2 = head;
    Mat x2 = x;
    std::vector<Mat*> targets = {&x2};
    for (Mat* m : h2.tensors()) targets.push_back(m);
    auto fn = [&](std::span<const double> xs) {
      unflatten(xs, targets);
      const Mat out = seg_head_rows(h2, x2);
      double s = 0.0;
      for (std::size_t k = 0; k < out.data.size(); ++k) s += out.data[k] * r.data[k];
      return s;
    };
    e.max_rel_error = std::max(e.max_rel_error, finite_diff_check(fn, xv, gv, kFdStep));
    ++e.instances;
  }
  return e;
}

GradcheckEntry check_project(std::size_t n, Rng& rng) {
  GradcheckEntry e{"project", 0, 0.0};
  const std::size_t p = kGh * kGw;
  while (e.instances < n) {
    ProjectionHeadParams proj = ProjectionHeadParams::init(kGq, rng);
    for (double& v : proj.bias.data) v = 0.1 * rng.normal();
    const Mat codes = random_mat(p, kGq, rng);
    const Mat r = random_mat(p, kGq, rng);
    const ProjectionGrad g = project_rows_backward(proj, codes, r);
    const std::vector<double> xv = flatten({&codes, &proj.weight, &proj.bias});
    const std::vector<double> gv =
        flatten({&g.grad_input, &g.grad_params.weight, &g.grad_params.bias});
    Mat c2 = codes;
    ProjectionHeadParams p2 = proj;
    auto fn = [&](std::span<const double> xs) {
      unflatten(xs, {&c2, &p2.weight, &p2.bias});
      double s = 0.0;
      for (std::size_t row = 0; row < c2.rows; ++row) {
        const auto y = project(p2, c2.row(row));
        for (std::size_t k = 0; k < y.size(); ++k) s += y[k] * r(row, k);
      }
      return s;
    };
    e.max_rel_error = std::max(e.max_rel_error, finite_diff_check(fn, xv, gv, kFdStep));
    ++e.instances;
  }
  return e;
}

GradcheckEntry check_lhp(std::size_t n, Rng& rng) {
  GradcheckEntry e{"lhp_loss", 0, 0.0};
  const std::size_t p = kGh * kGw;
  const std::size_t k = 9;
  const ObjectiveConfig cfg = gradcheck_objective();
  LhpConfig lcfg;
  lcfg.neighbors = 3;
  lcfg.anchor_keep = 0.5;
  const double beta = 0.7;
  while (e.instances < n) {
    std::array<Mat, kTripleSlots> codes;
    std::array<PropagationMap, kTripleSlots> gather, mix;
    for (std::size_t s = 0; s < kTripleSlots; ++s) {
      codes[s] = random_mat(p, kGq, rng);
      const SampleSet samples = random_sample(kGh, kGw, k, rng);
      gather[s] = gather_map(samples);
      mix[s] = propagation_map(depth_to_pointcloud(random_depth(rng)), samples, lcfg);
    }
    ProjectionHeadParams proj = ProjectionHeadParams::init(kGq, rng);
    for (double& v : proj.bias.data) v = 0.1 * rng.normal();

    std::array<Mat, kTripleSlots> sampled, projected;
    for (std::size_t s = 0; s < kTripleSlots; ++s) {
      sampled[s] = apply(gather[s], codes[s]);
      projected[s] = project_rows(proj, apply(mix[s], codes[s]));
    }
    if (triple_has_kink({&sampled[0], &sampled[1], &sampled[2], &sampled[3]}) ||
        triple_has_kink({&projected[0], &projected[1], &projected[2], &projected[3]})) {
      continue;
    }
    const TripleTargets t = random_targets(rng, k, k);
    const LhpValue v = lhp_loss(t, cfg, {&codes[0], &codes[1], &codes[2], &codes[3]}, gather, mix,
                                proj, beta);
    const std::vector<double> xv =
        flatten({&codes[0], &codes[1], &codes[2], &codes[3], &proj.weight, &proj.bias});
    const std::vector<double> gv =
        flatten({&v.grad_codes[0], &v.grad_codes[1], &v.grad_codes[2], &v.grad_codes[3],
                 &v.grad_projection.weight, &v.grad_projection.bias});
    std::array<Mat, kTripleSlots> c2 = codes;
    ProjectionHeadParams p2 = proj;
    auto fn = [&](std::span<const double> xs) {
      unflatten(xs, {&c2[0], &c2[1], &c2[2], &c2[3], &p2.weight, &p2.bias});
      return lhp_loss(t, cfg, {&c2[0], &c2[1], &c2[2], &c2[3]}, gather, mix, p2, beta).value;
    };
    e.max_rel_error = std::max(e.max_rel_error, finite_diff_check(fn, xv, gv, kFdStep));
    ++e.instances;
  }
  return e;
}

GradcheckEntry check_cross_entropy(std::size_t n, Rng& rng) {
  GradcheckEntry e{"linear_probe_cross_entropy", 0, 0.0};
  const std::size_t p = kGh * kGw, classes = 3;
  while (e.instances < n) {
    const Mat x = random_mat(p, kGq, rng);
    Mat w = random_mat(kGq, classes, rng), b = random_mat(1, classes, rng);
    std::vector<std::uint8_t> labels(p);
    for (auto& y : labels) {
      y = rng.uniform(5) == 0 ? kIgnoreLabel : static_cast<std::uint8_t>(rng.uniform(classes));
    }
    if (std::all_of(labels.begin(), labels.end(), [](std::uint8_t y) { return y == kIgnoreLabel; })) {
      continue;
    }
    const CrossEntropy ce = softmax_cross_entropy(w, b, x, labels);
    const std::vector<double> xv = flatten({&w, &b});
    const std::vector<double> gv = flatten({&ce.grad_weight, &ce.grad_bias});
    Mat w2 = w, b2 = b;
    auto fn = [&](std::span<const double> xs) {
      unflatten(xs, {&w2, &b2});
      return softmax_cross_entropy(w2, b2, x, labels).value;
    };
    e.max_rel_error = std::max(e.max_rel_error, finite_diff_check(fn, xv, gv, kFdStep));
    ++e.instances;
  }
  return e;
}

}  // namespace

std::vector<GradcheckEntry> gradcheck_suite(std::size_t instances, std::uint64_t seed) {
  require(instances >= 1, "gradcheck: need at least one instance");
  std::vector<GradcheckEntry> out;
  Rng r1(derive_seed(seed, 21)), r2(derive_seed(seed, 22)), r3(derive_seed(seed, 23)),
      r4(derive_seed(seed, 24)), r5(derive_seed(seed, 25)), r6(derive_seed(seed, 26)),
      r7(derive_seed(seed, 27));
  out.push_back(check_pair_loss("corr_loss", false, instances, r1));
  out.push_back(check_pair_loss("depthg_loss", true, instances, r2));
  out.push_back(check_total(instances, r3));
  out.push_back(check_seg_head(instances, r4));
  out.push_back(check_project(instances, r5));
  out.push_back(check_lhp(instances, r6));
  out.push_back(check_cross_entropy(instances, r7));
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string out = "runs";
  bool print_config = false;
  int verbose = 0;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void add_common(CLI::App& sub, Common& c) {
  sub.add_option("-c,--config", c.config_file, "Config file (key = value lines)");
  sub.add_option("--set", c.sets, "Override one key, key=value (repeatable)");
  sub.add_option("--seed", c.seed, "Seed override");
  sub.add_option("--threads", c.threads, "Worker threads (results do not depend on it)");
  sub.add_option("-o,--out", c.out, "Root directory for run directories");
  sub.add_flag("--print-config", c.print_config, "Print the resolved config and exit");
  sub.add_flag("-v,--verbose", c.verbose, "More progress output");
}

Config resolve(const Common& c) {
  try {
    Config cfg;
    if (!c.config_file.empty()) cfg = parse_config(read_file(c.config_file), cfg);
    for (const auto& kv : c.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ContractError("--set expects key=value, got '" + kv + "'");
      set_value(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.threads) cfg.threads = *c.threads;
    if (cfg.threads == 0) throw ContractError("threads must be at least 1");
    propagate_shared(cfg);
    return cfg;
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  } catch (const FormatError& e) {
    throw UsageError(e.what());
  }
}

struct Data {
  Dataset train;
  Dataset val;
};

Data load_data(const Config& cfg, const fs::path& run_dir, bool verbose) {
  fs::path train_m = cfg.train_manifest, val_m = cfg.val_manifest;
  if (train_m.empty()) {
    const SynthPaths paths = gen_synthetic(cfg.synth, run_dir / "data");
    train_m = paths.train_manifest;
    val_m = paths.val_manifest;
  } else if (val_m.empty()) {
    val_m = train_m;
  }
  Data d{load_dataset(train_m), load_dataset(val_m)};
  if (verbose) {
    for (const auto& line : d.train.load_report) std::cerr << "train data: " << line << "\n";
    for (const auto& line : d.val.load_report) std::cerr << "val data: " << line << "\n";
  }
  return d;
}

void write_text(const fs::path& p, const std::string& s) { write_file(p, s); }

int cmd_gen_synth(const Config& cfg, const Common& c) {
  const fs::path dir = fs::path(c.out) / run_name(cfg) / "data";
  const SynthPaths paths = gen_synthetic(cfg.synth, dir);
  std::cout << paths.train_manifest.string() << "\n" << paths.val_manifest.string() << "\n";
  return 0;
}

TrainResult train_logged(const Config& cfg, const Dataset& data, const fs::path& log_path,
                         int verbose) {
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open " + log_path.string() + " for writing");
  log << log_header() << "\n";
  auto on_step = [&](const StepRecord& r) {
    log << format_record(r) << "\n";
    log.flush();
    if (verbose && (r.step % 100 == 0 || r.step + 1 == cfg.train.steps)) {
      std::cerr << "step " << r.step << " total " << r.total << " self " << r.self << " knn "
                << r.knn << " random " << r.random << " depthg " << r.depthg << "\n";
    }
  };
  TrainResult result = train(cfg.train, data, on_step);
  if (!log) throw std::runtime_error("write failed on " + log_path.string());
  return result;
}

int cmd_train(const Config& cfg, const Common& c) {
  const fs::path run_dir = fs::path(c.out) / run_name(cfg);
  fs::create_directories(run_dir);
  write_text(run_dir / "config.cfg", format_config(cfg));
  const Data d = load_data(cfg, run_dir, c.verbose > 0);
  const TrainResult r = train_logged(cfg, d.train, run_dir / "metrics.log", c.verbose);
  save_checkpoint(run_dir / "checkpoint", r, config_digest(cfg));
  std::cout << run_dir.string() << "\n";
  return 0;
}

int cmd_eval(Config cfg, const Common& c, const std::string& run_arg) {
  fs::path run_dir = run_arg.empty() ? fs::path(c.out) / run_name(cfg) : fs::path(run_arg);
  if (!run_arg.empty()) {
    Config stored;
    try {
      stored = parse_config(read_file(run_dir / "config.cfg"));
    } catch (const ContractError& e) {
      throw std::runtime_error((run_dir / "config.cfg").string() + ": " + e.what());
    }
    stored.threads = cfg.threads;
    cfg = stored;
    propagate_shared(cfg);
  }
  const Checkpoint ck = load_checkpoint(run_dir / "checkpoint");
  if (ck.digest != config_digest(cfg)) {
    throw std::runtime_error("checkpoint digest " + ck.digest + " does not match config digest " +
                             config_digest(cfg));
  }
  const Data d = load_data(cfg, run_dir, c.verbose > 0);
  const EvalReport report = evaluate_head(ck.head, d.train, d.val, cfg.eval);
  const std::string text = format_report_text(report);
  write_text(run_dir / "report.txt", text);
  write_text(run_dir / "report.json", format_report_json(report));
  std::cout << text;
  return 0;
}

int cmd_gradcheck(const Config& cfg, std::size_t instances) {
  const auto entries = gradcheck_suite(instances, cfg.seed);
  bool ok = true;
  double worst = 0.0;
  for (const auto& e : entries) {
    const bool pass = e.max_rel_error <= kGradcheckTolerance;
    ok = ok && pass;
    worst = std::max(worst, e.max_rel_error);
    std::printf("%-28s instances %3zu  max rel err %.3e  %s\n", e.name.c_str(), e.instances,
                e.max_rel_error, pass ? "ok" : "FAIL");
  }
  std::printf("max rel err %.3e (tolerance %.0e)\n", worst, kGradcheckTolerance);
  return ok ? 0 : 1;
}

double min_pairwise(const PointCloud& cloud, const SampleSet& s) {
  double m = std::numeric_limits<double>::infinity();
  const auto lin = s.linear();
  for (std::size_t i = 0; i < lin.size(); ++i) {
    for (std::size_t j = i + 1; j < lin.size(); ++j) {
      m = std::min(m, distance(cloud.points[lin[i]], cloud.points[lin[j]]));
    }
  }
  return m;
}

int cmd_sample(const Config& cfg, const Common& c, std::size_t crop) {
  const fs::path run_dir = fs::path(c.out) / run_name(cfg);
  const Data d = load_data(cfg, run_dir, c.verbose > 0);
  if (crop >= d.train.crops.size()) {
    throw UsageError("--crop " + std::to_string(crop) + " out of range (dataset has " +
                     std::to_string(d.train.crops.size()) + " crops)");
  }
  const auto& t = cfg.train;
  const Tensor2 guide = guidance_map(t.guidance, d.train.crops[crop].depth);
  const PointCloud cloud = depth_to_pointcloud(guide, t.depth_scale);
  const std::size_t k = t.samples_per_side * t.samples_per_side;
  Rng rng(derive_seed(cfg.seed, 2));
  const std::size_t init = t.fps_fixed_init ? 0 : rng.uniform(cloud.size());
  const SampleSet fps = farthest_point_sample(cloud, k, init);
  const SampleSet rnd = random_sample(guide.height(), guide.width(), k, rng);

  const fs::path out = run_dir / "sample";
  fs::create_directories(out);
  const Image a = render_overlay(guide, fps), b = render_overlay(guide, rnd);
  write_ppm(out / "fps.ppm", a);
  write_ppm(out / "random.ppm", b);
  write_ppm(out / "side_by_side.ppm", side_by_side({a, b}));
  std::printf("crop %s:%s  k=%zu  min pairwise 3D distance  fps %.6f  random %.6f\n",
              d.train.crops[crop].ref.image_id.c_str(), d.train.crops[crop].ref.crop_id.c_str(), k,
              min_pairwise(cloud, fps), min_pairwise(cloud, rnd));
  std::cout << out.string() << "\n";
  return 0;
}

struct Variant {
  std::string name;
  bool depthg;
  bool fps;
  bool lhp;
};

int cmd_ablate(const Config& cfg, const Common& c, bool with_lhp) {
  const fs::path run_dir = fs::path(c.out) / run_name(cfg);
  fs::create_directories(run_dir);
  write_text(run_dir / "config.cfg", format_config(cfg));
  const Data d = load_data(cfg, run_dir, c.verbose > 0);

  std::vector<Variant> variants = {{"STEGO", false, false, false},
                                   {"+DepthG (1)", true, false, false},
                                   {"+FPS (2)", false, true, false}};
  if (with_lhp) variants.push_back({"+3D-LHP (3)", false, false, true});
  variants.push_back({"Ours (1,2)", true, true, false});
  if (with_lhp) variants.push_back({"Ours w/ 3D-LHP", true, true, true});

  std::string table = "variant\tdepthg\tfps\tlhp\taccuracy\tmiou\tlinear_accuracy\tlinear_miou\n";
  std::printf("%-16s %6s %4s %4s %9s %7s %11s %9s\n", "Variant", "DepthG", "FPS", "LHP", "Acc",
              "mIoU", "Linear Acc", "Lin mIoU");
  for (const auto& v : variants) {
    TrainConfig t = cfg.train;
    t.depthg_enabled = v.depthg;
    t.sampler = v.fps ? Sampler::kFps : Sampler::kRandom;
    t.lhp = v.lhp;
    if (c.verbose) std::cerr << "ablate: training " << v.name << "\n";
    const TrainResult r = train(t, d.train);
    const EvalReport rep = evaluate_head(r.head, d.train, d.val, cfg.eval);
    const double lacc = rep.has_linear ? rep.linear.metrics.accuracy : std::nan("");
    const double lmiou = rep.has_linear ? rep.linear.metrics.miou : std::nan("");
    std::printf("%-16s %6s %4s %4s %9.2f %7.2f %11.2f %9.2f\n", v.name.c_str(), v.depthg ? "x" : "",
                v.fps ? "x" : "", v.lhp ? "x" : "", 100.0 * rep.cluster.metrics.accuracy,
                100.0 * rep.cluster.metrics.miou, 100.0 * lacc, 100.0 * lmiou);
    std::fflush(stdout);
    table += v.name + "\t" + fmt_bool(v.depthg) + "\t" + fmt_bool(v.fps) + "\t" + fmt_bool(v.lhp) +
             "\t" + fmt_double(rep.cluster.metrics.accuracy) + "\t" +
             fmt_double(rep.cluster.metrics.miou) + "\t" + fmt_double(lacc) + "\t" +
             fmt_double(lmiou) + "\n";
  }
  write_text(run_dir / "ablation.tsv", table);
  std::cout << (run_dir / "ablation.tsv").string() << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Depth-guided unsupervised segmentation: data, training, evaluation", "depthg"};
  app.require_subcommand(1);

  Common common;
  std::string run_arg;
  std::size_t instances = 20;
  std::size_t crop = 0;
  bool with_lhp = false;

  auto* gen = app.add_subcommand("gen-synth", "Generate the synthetic benchmark");
  auto* trn = app.add_subcommand("train", "Train a segmentation head");
  auto* evl = app.add_subcommand("eval", "Cluster and linear probe of a trained run");
  auto* grd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  auto* smp = app.add_subcommand("sample", "FPS and random sampling overlays");
  auto* abl = app.add_subcommand("ablate", "Contribution ablation table");
  for (auto* s : {gen, trn, evl, grd, smp, abl}) add_common(*s, common);
  evl->add_option("--run", run_arg, "Run directory written by train");
  grd->add_option("--instances", instances, "Instances per operation")->check(CLI::PositiveNumber);
  smp->add_option("--crop", crop, "Training crop index");
  abl->add_flag("--lhp", with_lhp, "Include the 3D-LHP rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const Config cfg = resolve(common);
    if (common.print_config) {
      std::cout << format_config(cfg);
      return 0;
    }
    if (gen->parsed()) return cmd_gen_synth(cfg, common);
    if (trn->parsed()) return cmd_train(cfg, common);
    if (evl->parsed()) return cmd_eval(cfg, common, run_arg);
    if (grd->parsed()) return cmd_gradcheck(cfg, instances);
    if (smp->parsed()) return cmd_sample(cfg, common, crop);
    if (abl->parsed()) return cmd_ablate(cfg, common, with_lhp);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  for (const auto& a : args) argv.push_back(a.c_str());
  argv.push_back(nullptr);
  return run(static_cast<int>(args.size()), argv.data());
}

}  // namespace depthg::cli
