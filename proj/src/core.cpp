#include "depthg/core.hpp"

#include <cmath>
#include <numbers>

namespace depthg {

void require(bool condition, const std::string& message) {
  if (!condition) throw ContractError(message);
}

namespace {

void require_finite(std::span<const float> data, const char* what) {
  for (float v : data) {
    if (!std::isfinite(v)) throw ContractError(std::string(what) + ": non-finite value");
  }
}

}  // namespace

Tensor3::Tensor3(std::size_t channels, std::size_t height, std::size_t width)
    : channels_(channels), height_(height), width_(width),
      data_(channels * height * width, 0.0f) {}

Tensor3::Tensor3(std::size_t channels, std::size_t height, std::size_t width,
                 std::vector<float> data)
    : channels_(channels), height_(height), width_(width), data_(std::move(data)) {
  require(data_.size() == channels * height * width,
          "Tensor3: data length does not match C*H*W");
  require_finite(data_, "Tensor3");
}

void Tensor3::set(std::size_t c, std::size_t h, std::size_t w, float value) {
  require(std::isfinite(value), "Tensor3: non-finite value");
  data_[(c * height_ + h) * width_ + w] = value;
}

std::vector<double> Tensor3::vector_at(std::size_t pos) const {
  std::vector<double> v(channels_);
  const std::size_t plane = height_ * width_;
  for (std::size_t c = 0; c < channels_; ++c) v[c] = data_[c * plane + pos];
  return v;
}

Tensor2::Tensor2(std::size_t height, std::size_t width)
    : height_(height), width_(width), data_(height * width, 0.0f) {}

Tensor2::Tensor2(std::size_t height, std::size_t width, std::vector<float> data)
    : height_(height), width_(width), data_(std::move(data)) {
  require(data_.size() == height * width, "Tensor2: data length does not match H*W");
  require_finite(data_, "Tensor2");
}

void Tensor2::set(std::size_t h, std::size_t w, float value) {
  require(std::isfinite(value), "Tensor2: non-finite value");
  data_[h * width_ + w] = value;
}

Mat positions_by_channels(const Tensor3& t) {
  Mat m(t.positions(), t.channels());
  const std::size_t plane = t.positions();
  auto src = t.data();
  for (std::size_t c = 0; c < t.channels(); ++c) {
    for (std::size_t p = 0; p < plane; ++p) m(p, c) = src[c * plane + p];
  }
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "cosine_similarity: length mismatch");
  require(!a.empty(), "cosine_similarity: empty vectors");
  const double na = norm(a);
  const double nb = norm(b);
  if (na < kNormEpsilon || nb < kNormEpsilon) return 0.0;
  return dot(a, b) / (na * nb);
}

Tensor2 avg_pool_to(const Tensor2& map, std::size_t out_height, std::size_t out_width) {
  require(out_height > 0 && out_width > 0, "avg_pool_to: empty output");
  require(map.height() % out_height == 0 && map.width() % out_width == 0,
          "avg_pool_to: input dimensions must be multiples of the output dimensions");
  const std::size_t bh = map.height() / out_height;
  const std::size_t bw = map.width() / out_width;
  const double inv = 1.0 / static_cast<double>(bh * bw);
  std::vector<float> out(out_height * out_width);
  for (std::size_t oh = 0; oh < out_height; ++oh) {
    for (std::size_t ow = 0; ow < out_width; ++ow) {
      double acc = 0.0;
      for (std::size_t h = oh * bh; h < (oh + 1) * bh; ++h) {
        for (std::size_t w = ow * bw; w < (ow + 1) * bw; ++w) acc += map.at(h, w);
      }
      out[oh * out_width + ow] = static_cast<float>(acc * inv);
    }
  }
  return Tensor2(out_height, out_width, std::move(out));
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : state_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

std::size_t Rng::uniform(std::size_t n) {
  require(n >= 1, "Rng::uniform: n must be at least 1");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  // Rejection keeps the result exactly uniform.
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % bound + 1) % bound;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x > limit);
  return static_cast<std::size_t>(x % bound);
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed ^ (stream * 0xD1B54A32D192ED03ULL);
  splitmix64(x);
  return splitmix64(x);
}

}  // namespace depthg
