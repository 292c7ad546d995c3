#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace depthg {

/// Raised when a caller violates an operation's preconditions.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Throws ContractError with `message` unless `condition` holds.
void require(bool condition, const std::string& message);

/// Dense C x H x W tensor, channel-outermost, row-major, 32-bit storage.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(std::size_t channels, std::size_t height, std::size_t width);
  Tensor3(std::size_t channels, std::size_t height, std::size_t width,
          std::vector<float> data);

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t positions() const { return height_ * width_; }

  float at(std::size_t c, std::size_t h, std::size_t w) const {
    return data_[(c * height_ + h) * width_ + w];
  }
  void set(std::size_t c, std::size_t h, std::size_t w, float value);

  /// Feature vector at linear position `pos` (= h * W + w), widened to double.
  std::vector<double> vector_at(std::size_t pos) const;

  std::span<const float> data() const { return data_; }

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> data_;
};

/// Dense H x W map, row-major, 32-bit storage.
class Tensor2 {
 public:
  Tensor2() = default;
  Tensor2(std::size_t height, std::size_t width);
  Tensor2(std::size_t height, std::size_t width, std::vector<float> data);

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  float at(std::size_t h, std::size_t w) const { return data_[h * width_ + w]; }
  float operator[](std::size_t pos) const { return data_[pos]; }
  void set(std::size_t h, std::size_t w, float value);

  std::span<const float> data() const { return data_; }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<float> data_;
};

/// Row-major matrix of doubles. Used for every differentiable quantity
/// (codes at sampled positions, head parameters, gradients).
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols, cols};
  }
};

struct GridIndex {
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const GridIndex&, const GridIndex&) = default;
};

/// Linear index of `g` in a grid of width `width`.
inline std::size_t linear_index(GridIndex g, std::size_t width) {
  return g.row * width + g.col;
}

/// Feature matrix (H*W x C) in linear position order.
Mat positions_by_channels(const Tensor3& t);

// Norms below this are treated as zero vectors.
inline constexpr double kNormEpsilon = 1e-12;

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// Normalized dot product; 0 when either vector has (near-)zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Non-overlapping block mean pooling. Input dimensions must be exact
/// multiples of the output dimensions.
Tensor2 avg_pool_to(const Tensor2& map, std::size_t out_height, std::size_t out_width);

/// xoshiro256** seeded through splitmix64.
///
/// Output is a pure function of the seed on every platform. Seeding expands
/// the 64-bit seed with splitmix64 (increment 0x9E3779B97F4A7C15, multipliers
/// 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB, shifts 30/27/31) into the four
/// words of xoshiro256** state. The generator step uses rotations 7 and 45,
/// shift 17 and the multiplier pair 5/9.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();

  /// Unbiased integer in [0, n). Throws ContractError when n == 0.
  std::size_t uniform(std::size_t n);

  /// Double in [0, 1) with 53 random bits.
  double uniform01();

  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t state_[4];
};

/// Child seed for an independent stream, derived from `seed` and a tag.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace depthg
