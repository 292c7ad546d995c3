#include "depthg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace depthg {

std::string to_string(Reduction r) { return r == Reduction::kSum ? "sum" : "mean"; }

Reduction parse_reduction(const std::string& text) {
  if (text == "sum") return Reduction::kSum;
  if (text == "mean") return Reduction::kMean;
  throw ContractError("unknown reduction '" + text + "' (expected sum or mean)");
}

namespace {

struct Normalized {
  Mat unit;
  std::vector<double> norms;
};

Normalized normalize_rows(const Mat& m) {
  Normalized out{Mat(m.rows, m.cols), std::vector<double>(m.rows)};
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double n = norm(m.row(r));
    out.norms[r] = n;
    if (n < kNormEpsilon) continue;
    auto src = m.row(r);
    auto dst = out.unit.row(r);
    for (std::size_t c = 0; c < m.cols; ++c) dst[c] = src[c] / n;
  }
  return out;
}

// Pulls a gradient on unit vectors back through x -> x / |x|.
void unit_backward(const Normalized& n, const Mat& grad_unit, Mat& grad) {
  for (std::size_t r = 0; r < grad.rows; ++r) {
    if (n.norms[r] < kNormEpsilon) continue;
    auto u = n.unit.row(r);
    auto g = grad_unit.row(r);
    const double proj = dot(g, u);
    auto out = grad.row(r);
    for (std::size_t c = 0; c < grad.cols; ++c) out[c] = (g[c] - proj * u[c]) / n.norms[r];
  }
}

}  // namespace

LossValue clamped_alignment_loss(const CorrelationTensor& target, double bias,
                                 const Mat& s_i, const Mat& s_j, bool clamp,
                                 Reduction reduction) {
  require(s_i.cols == s_j.cols, "alignment loss: code dimension mismatch");
  require(target.rows == s_i.rows && target.cols == s_j.rows,
          "alignment loss: correlation shape does not match the code matrices");
  require(std::isfinite(bias), "alignment loss: non-finite bias");

  const Normalized a = normalize_rows(s_i);
  const Normalized b = normalize_rows(s_j);
  const std::size_t A = s_i.rows;
  const std::size_t B = s_j.rows;
  const std::size_t Q = s_i.cols;
  const double scale =
      reduction == Reduction::kMean && A * B > 0 ? 1.0 / static_cast<double>(A * B) : 1.0;

  LossValue out{0.0, Mat(A, Q), Mat(B, Q)};
  Mat grad_a(A, Q), grad_b(B, Q);
  double acc = 0.0;
  for (std::size_t p = 0; p < A; ++p) {
    auto ua = a.unit.row(p);
    for (std::size_t q = 0; q < B; ++q) {
      auto ub = b.unit.row(q);
      const double s = dot(ua, ub);
      if (clamp && s <= 0.0) continue;
      const double w = target(p, q) - bias;
      acc += w * s;
      // d value / d s = -scale * w
      const double g = -scale * w;
      auto ga = grad_a.row(p);
      auto gb = grad_b.row(q);
      for (std::size_t c = 0; c < Q; ++c) {
        ga[c] += g * ub[c];
        gb[c] += g * ua[c];
      }
    }
  }
  out.value = -scale * acc;
  unit_backward(a, grad_a, out.grad_i);
  unit_backward(b, grad_b, out.grad_j);
  require(std::isfinite(out.value), "alignment loss: non-finite value");
  return out;
}

LossValue corr_loss(const CorrelationTensor& F, const Mat& s_i, const Mat& s_j,
                    const LossTermConfig& cfg) {
  require(F.rows == s_i.rows && F.cols == s_j.rows, "corr_loss: shape mismatch");
  if (cfg.centering == Centering::kNone) {
    return clamped_alignment_loss(F, cfg.bias, s_i, s_j, cfg.clamp, cfg.reduction);
  }
  return clamped_alignment_loss(spatial_center(F, cfg.centering), cfg.bias, s_i, s_j,
                                cfg.clamp, cfg.reduction);
}

LossValue depthg_loss(const CorrelationTensor& D, const Mat& s_i, const Mat& s_j,
                      const LossTermConfig& cfg) {
  require(D.rows == s_i.rows && D.cols == s_j.rows, "depthg_loss: shape mismatch");
  return corr_loss(D, s_i, s_j, cfg);
}

namespace {

LossValue scaled(LossValue v, double w) {
  v.value *= w;
  for (double& g : v.grad_i.data) g *= w;
  for (double& g : v.grad_j.data) g *= w;
  return v;
}

void add_into(Mat& dst, const Mat& src, double w) {
  require(dst.rows == src.rows && dst.cols == src.cols, "gradient shape mismatch");
  for (std::size_t k = 0; k < dst.data.size(); ++k) dst.data[k] += w * src.data[k];
}

}  // namespace

ObjectiveValue stego_loss(const PairTerm& self, const PairTerm& knn, const PairTerm& random) {
  for (const PairTerm* t : {&self, &knn, &random}) {
    require(t->cfg.weight >= 0.0 && std::isfinite(t->cfg.weight),
            "stego_loss: term weights must be finite and non-negative");
  }
  ObjectiveValue out;
  LossValue ls = corr_loss(self.F, self.s_i, self.s_j, self.cfg);
  LossValue lk = corr_loss(knn.F, knn.s_i, knn.s_j, knn.cfg);
  LossValue lr = corr_loss(random.F, random.s_i, random.s_j, random.cfg);
  out.self = ls.value;
  out.knn = lk.value;
  out.random = lr.value;
  out.self_pair = scaled(std::move(ls), self.cfg.weight);
  out.knn_pair = scaled(std::move(lk), knn.cfg.weight);
  out.random_pair = scaled(std::move(lr), random.cfg.weight);
  out.value = out.self_pair.value + out.knn_pair.value + out.random_pair.value;
  return out;
}

ObjectiveValue total_loss(ObjectiveValue stego, const LossValue& depthg, double lambda_depthg) {
  require(std::isfinite(lambda_depthg) && lambda_depthg >= 0.0,
          "total_loss: depth weight must be finite and non-negative");
  stego.depthg = depthg.value;
  if (lambda_depthg == 0.0) return stego;
  add_into(stego.self_pair.grad_i, depthg.grad_i, lambda_depthg);
  add_into(stego.self_pair.grad_j, depthg.grad_j, lambda_depthg);
  stego.self_pair.value += lambda_depthg * depthg.value;
  stego.value += lambda_depthg * depthg.value;
  return stego;
}

ObjectiveValue triple_objective(const TripleTargets& targets, const ObjectiveConfig& cfg,
                                const Mat& anchor, const Mat& partner, const Mat& knn,
                                const Mat& random) {
  ObjectiveValue stego = stego_loss({targets.self_F, anchor, partner, cfg.self},
                                    {targets.knn_F, anchor, knn, cfg.knn},
                                    {targets.random_F, anchor, random, cfg.random});
  if (!cfg.depthg_enabled) return stego;
  const LossValue depth = depthg_loss(targets.self_D, anchor, partner, cfg.depthg);
  return total_loss(std::move(stego), depth, cfg.depthg.weight);
}

std::array<Mat, kTripleSlots> slot_gradients(const ObjectiveValue& v) {
  Mat anchor = v.self_pair.grad_i;
  add_into(anchor, v.knn_pair.grad_i, 1.0);
  add_into(anchor, v.random_pair.grad_i, 1.0);
  return {std::move(anchor), v.self_pair.grad_j, v.knn_pair.grad_j, v.random_pair.grad_j};
}

double finite_diff_check(const ScalarFn& fn, std::span<const double> x,
                         std::span<const double> analytic, double h) {
  require(h > 0.0, "finite_diff_check: step must be positive");
  require(x.size() == analytic.size(), "finite_diff_check: gradient length mismatch");
  std::vector<double> probe(x.begin(), x.end());
  double max_abs_grad = 0.0;
  for (double g : analytic) {
    require(std::isfinite(g), "finite_diff_check: non-finite analytic gradient");
    max_abs_grad = std::max(max_abs_grad, std::abs(g));
  }
  double max_delta = 0.0;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const double saved = probe[k];
    probe[k] = saved + h;
    const double up = fn(probe);
    probe[k] = saved - h;
    const double down = fn(probe);
    probe[k] = saved;
    require(std::isfinite(up) && std::isfinite(down),
            "finite_diff_check: non-finite loss during probing");
    const double numeric = (up - down) / (2.0 * h);
    max_delta = std::max(max_delta, std::abs(numeric - analytic[k]));
  }
  return max_delta / std::max(max_abs_grad, 1e-8);
}

}  // namespace depthg
