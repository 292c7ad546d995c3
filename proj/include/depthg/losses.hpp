#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>

#include "depthg/core.hpp"
#include "depthg/correlation.hpp"

namespace depthg {

/// kMean divides by the number of summed entries so weights do not depend on
/// the number of samples; kSum is the literal double sum.
enum class Reduction { kSum, kMean };

std::string to_string(Reduction r);
Reduction parse_reduction(const std::string& text);

struct LossTermConfig {
  double weight = 1.0;
  double bias = 0.0;
  Centering centering = Centering::kRow;
  bool clamp = true;
  Reduction reduction = Reduction::kMean;
};

/// Scalar loss with its gradient on the two code matrices it was computed
/// from (rows = sampled positions, cols = code dimension).
struct LossValue {
  double value = 0.0;
  Mat grad_i;
  Mat grad_j;
};

/// -sum_{p,q} (target(p,q) - bias) * max(S(p,q), 0), with S the cosine
/// correlation of the rows of s_i and s_j. Entries with S <= 0 contribute
/// neither value nor gradient when `clamp` is set.
LossValue clamped_alignment_loss(const CorrelationTensor& target, double bias,
                                 const Mat& s_i, const Mat& s_j, bool clamp,
                                 Reduction reduction);

/// Feature correlation loss. F is centered per cfg.centering, then aligned.
/// The returned value is unweighted; cfg.weight is applied by stego_loss.
LossValue corr_loss(const CorrelationTensor& F, const Mat& s_i, const Mat& s_j,
                    const LossTermConfig& cfg);

/// Depth-feature correlation loss. Identical structure with the depth
/// correspondence D in place of F; callers normally leave D uncentered.
LossValue depthg_loss(const CorrelationTensor& D, const Mat& s_i, const Mat& s_j,
                      const LossTermConfig& cfg);

struct PairTerm {
  const CorrelationTensor& F;
  const Mat& s_i;
  const Mat& s_j;
  const LossTermConfig& cfg;
};

/// Weighted objective over the self / knn / random pairs plus the optional
/// depth term on the self pair. Per-term values are unweighted; the gradients
/// in each pair already carry the weights.
struct ObjectiveValue {
  double value = 0.0;
  double self = 0.0;
  double knn = 0.0;
  double random = 0.0;
  double depthg = 0.0;
  LossValue self_pair;
  LossValue knn_pair;
  LossValue random_pair;
};

ObjectiveValue stego_loss(const PairTerm& self, const PairTerm& knn, const PairTerm& random);

/// Adds lambda_depthg * depthg to the self pair. lambda_depthg == 0 returns
/// `stego` unchanged apart from recording the depth term's value.
ObjectiveValue total_loss(ObjectiveValue stego, const LossValue& depthg, double lambda_depthg);

/// Targets of one training triple: anchor crop a paired with its partner crop
/// (self), a k-NN crop and a random crop. Rows index a's samples throughout.
struct TripleTargets {
  CorrelationTensor self_F;
  CorrelationTensor knn_F;
  CorrelationTensor random_F;
  CorrelationTensor self_D;  // empty when the depth term is disabled
};

struct ObjectiveConfig {
  LossTermConfig self;
  LossTermConfig knn;
  LossTermConfig random;
  LossTermConfig depthg;  // weight / bias already scheduled
  bool depthg_enabled = true;
};

/// Number of crops in a triple: anchor, partner, knn, random.
inline constexpr std::size_t kTripleSlots = 4;

/// Combined objective on the sampled codes of the four crops of a triple.
/// Gradients: self_pair.grad_i, knn_pair.grad_i and random_pair.grad_i all
/// refer to the anchor codes.
ObjectiveValue triple_objective(const TripleTargets& targets, const ObjectiveConfig& cfg,
                                const Mat& anchor, const Mat& partner, const Mat& knn,
                                const Mat& random);

/// Gradient of a triple objective on each slot's code rows.
std::array<Mat, kTripleSlots> slot_gradients(const ObjectiveValue& v);

using ScalarFn = std::function<double(std::span<const double>)>;

/// Central-difference gradient of `fn` at `x` compared with `analytic`.
/// Returns max_k |numeric_k - analytic_k| / max(max_k |analytic_k|, 1e-8).
double finite_diff_check(const ScalarFn& fn, std::span<const double> x,
                         std::span<const double> analytic, double h);

}  // namespace depthg
