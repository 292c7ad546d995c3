#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "depthg/core.hpp"
#include "depthg/dataio.hpp"
#include "depthg/evaluation.hpp"
#include "depthg/lhp3d.hpp"
#include "depthg/losses.hpp"
#include "depthg/sampling.hpp"

namespace depthg {

// ---------------------------------------------------------------------------
// Segmentation head

/// out = x Wl + bl + relu(x W1 + b1) W2 + b2, applied per position.
struct SegHeadParams {
  Mat linear_w;  // C x Q
  Mat linear_b;  // 1 x Q
  Mat hidden_w;  // C x Ch
  Mat hidden_b;  // 1 x Ch
  Mat out_w;     // Ch x Q
  Mat out_b;     // 1 x Q

  static SegHeadParams zeros(std::size_t c, std::size_t q, std::size_t hidden);
  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
  static SegHeadParams init(std::size_t c, std::size_t q, std::size_t hidden, Rng& rng);

  std::size_t in_dim() const { return linear_w.rows; }
  std::size_t code_dim() const { return linear_w.cols; }
  std::size_t hidden_dim() const { return hidden_w.cols; }

  std::vector<Mat*> tensors();
  std::vector<const Mat*> tensors() const;
  static std::vector<std::string> tensor_names();
};

/// Activations kept for the backward pass.
struct HeadCache {
  Mat input;       // N x C
  Mat hidden_pre;  // N x Ch, before the ReLU
};

/// Rows of `x` (N x C) to codes (N x Q).
Mat seg_head_rows(const SegHeadParams& params, const Mat& x, HeadCache* cache = nullptr);

struct SegHeadGrad {
  SegHeadParams params;
  Mat input;
};

SegHeadGrad seg_head_backward(const SegHeadParams& params, const HeadCache& cache,
                              const Mat& grad_codes);

Tensor3 seg_head_forward(const SegHeadParams& params, const Tensor3& f);

// ---------------------------------------------------------------------------
// Optimizer and schedules

/// base * factor^floor(t / decay_step); decay_step == 0 disables decay.
struct Schedule {
  double base = 0.0;
  std::size_t decay_step = 0;
  double decay_factor = 1.0;
};

double schedule_value(const Schedule& s, std::size_t t);

struct AdamConfig {
  double learning_rate = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Mat> m;
  std::vector<Mat> v;
  std::uint64_t step = 0;
};

AdamState adam_init(const std::vector<Mat*>& params);

/// One bias-corrected Adam update. Throws std::runtime_error naming the
/// offending tensor and entry when a gradient is not finite.
void adam_step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
               AdamState& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Pairs

std::vector<double> mean_pooled(const Tensor3& features);

/// For every item, the k most cosine-similar other items (descending
/// similarity, ties by lower index). Items sharing a non-empty `groups` id
/// are never paired.
std::vector<std::vector<std::size_t>> knn_pairs(const std::vector<std::vector<double>>& pooled,
                                                std::size_t k,
                                                const std::vector<std::size_t>& groups = {});

// ---------------------------------------------------------------------------
// Training loop

enum class Sampler { kFps, kRandom, kFullMap };
std::string to_string(Sampler s);
Sampler parse_sampler(const std::string& text);

/// Map driving the depth correlation and the FPS point cloud.
///   depth:             the crop's depth
///   image-plane:       constant 0.5 (flat fronto-parallel plane)
///   perspective-plane: 1 - h/(H-1), a ground plane receding upwards
enum class Guidance { kDepth, kImagePlane, kPerspectivePlane };
std::string to_string(Guidance g);
Guidance parse_guidance(const std::string& text);

Tensor2 guidance_map(Guidance g, const Tensor2& depth);

struct TrainConfig {
  LossTermConfig self{0.58, 0.07};
  LossTermConfig knn{0.36, 0.02};
  LossTermConfig random{0.70, 0.76};
  LossTermConfig depthg{0.19, 0.03, Centering::kNone};
  bool depthg_enabled = true;
  std::size_t decay_step = 250;  // applies to depthg weight and bias; 0 = none
  double decay_factor = 0.6;

  std::size_t samples_per_side = 9;  // N, N*N samples per crop
  std::size_t n_decay_step = 0;      // N drops by one every n_decay_step steps; 0 = never
  Sampler sampler = Sampler::kFps;
  bool fps_fixed_init = false;       // start FPS at cell 0 instead of a random cell
  double depth_scale = 1.0;
  Guidance guidance = Guidance::kDepth;

  bool lhp = false;
  LhpConfig lhp_cfg;

  std::size_t code_dim = 64;
  std::size_t hidden_dim = 0;  // 0 = feature channels
  AdamConfig adam;
  std::size_t steps = 7000;
  std::size_t batch = 1;
  std::size_t knn_k = 3;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Throws ContractError on an invalid combination for an H x W grid.
void validate(const TrainConfig& cfg, std::size_t height, std::size_t width);

Schedule depthg_weight_schedule(const TrainConfig& cfg);
Schedule depthg_bias_schedule(const TrainConfig& cfg);
/// N at step t after N-decay, floored at 1.
std::size_t samples_per_side_at(const TrainConfig& cfg, std::size_t t);

struct StepRecord {
  std::size_t step = 0;
  double lambda_depthg = 0.0;
  double bias_depthg = 0.0;
  double self = 0.0;
  double knn = 0.0;
  double random = 0.0;
  double depthg = 0.0;
  double total = 0.0;
};

std::string log_header();
std::string format_record(const StepRecord& r);

struct TrainResult {
  SegHeadParams head;
  std::optional<ProjectionHeadParams> projection;
  std::vector<StepRecord> log;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Deterministic for a given config and dataset, independent of cfg.threads.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// Checkpoints: a directory with one '<f4' .npy per tensor and a meta file.

void save_checkpoint(const std::filesystem::path& dir, const TrainResult& result,
                     const std::string& digest);

struct Checkpoint {
  SegHeadParams head;
  std::optional<ProjectionHeadParams> projection;
  std::string digest;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Probing a trained head.

struct EvalConfig {
  std::size_t classes = 0;   // 0 = infer from the labels
  std::size_t clusters = 0;  // 0 = classes
  std::size_t kmeans_iters = 100;
  std::size_t kmeans_restarts = 5;
  KMeansMetric metric = KMeansMetric::kCosine;
  bool linear = true;
  LinearProbeConfig linear_cfg;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Codes and labels of every labelled position of every crop.
struct CodeSet {
  Mat codes;
  std::vector<std::uint8_t> labels;
};

CodeSet head_codes(const SegHeadParams& head, const Dataset& data);

/// Cluster probe on `val`; the linear probe trains on `train`.
EvalReport evaluate_head(const SegHeadParams& head, const Dataset& train, const Dataset& val,
                         const EvalConfig& cfg);

}  // namespace depthg
