#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "depthg/core.hpp"
#include "depthg/sampling.hpp"

namespace depthg {

/// Malformed tensor file, manifest or dataset.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Tensor files: NPY v1.0 ('<f4' and '|u1', C order).

/// Per-pixel class ids; kIgnoreLabel marks pixels excluded from scoring.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;
};

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Raw array as stored on disk.
struct NpyArray {
  std::string descr;                 // "<f4" or "|u1"
  std::vector<std::size_t> shape;
  std::vector<float> f32;            // set when descr == "<f4"
  std::vector<std::uint8_t> u8;      // set when descr == "|u1"

  std::size_t element_count() const;
};

NpyArray parse_npy(const std::string& bytes);
std::string serialize_npy(const NpyArray& array);

NpyArray read_npy(const std::filesystem::path& path);
void write_npy(const std::filesystem::path& path, const NpyArray& array);

using AnyTensor = std::variant<Tensor2, Tensor3>;

/// Reads a 2-d or 3-d '<f4' array.
AnyTensor read_tensor(const std::filesystem::path& path);
void write_tensor(const std::filesystem::path& path, const Tensor2& t);
void write_tensor(const std::filesystem::path& path, const Tensor3& t);
/// Any-rank '<f4' array from a double matrix (stored as rows x cols).
void write_matrix(const std::filesystem::path& path, const Mat& m);
Mat read_matrix(const std::filesystem::path& path);

LabelMap read_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, const LabelMap& labels);

/// Min-max normalizes `depth` into [0,1] when any value lies outside it.
/// Returns true when the map was changed. A constant map becomes all zeros.
bool normalize_depth(Tensor2& depth);

// ---------------------------------------------------------------------------
// Datasets.

struct CropRef {
  std::string image_id;
  std::string crop_id;

  friend bool operator==(const CropRef&, const CropRef&) = default;
};

/// One manifest line. Field order, tab separated:
///   image_id  crop_id  features  depth  labels|-  knn|-
/// where knn is a comma-separated list of image_id:crop_id. Paths are
/// relative to the manifest's directory. Lines starting with '#' are comments.
struct ManifestRecord {
  CropRef ref;
  std::filesystem::path features;
  std::filesystem::path depth;
  std::optional<std::filesystem::path> labels;
  std::vector<CropRef> knn;
};

std::vector<ManifestRecord> parse_manifest(const std::string& text);
std::string format_manifest(const std::vector<ManifestRecord>& records);

struct Crop {
  CropRef ref;
  std::size_t image = 0;  // index into Dataset::images
  Tensor3 features;
  Tensor2 depth;
  std::optional<LabelMap> labels;
  std::vector<std::size_t> knn;  // crop indices, empty when not precomputed
};

struct Dataset {
  std::vector<Crop> crops;
  std::vector<std::vector<std::size_t>> images;  // crop indices per image
  std::vector<std::string> load_report;           // one line per notable event

  std::size_t channels() const { return crops.empty() ? 0 : crops.front().features.channels(); }
};

/// Loads and validates a manifest. Every crop must share the feature
/// channel count; depth and labels must match the feature grid; every image
/// needs at least two crops. Depth maps outside [0,1] are normalized and
/// reported.
Dataset load_dataset(const std::filesystem::path& manifest);

// ---------------------------------------------------------------------------
// Synthetic scenes.

struct SynthConfig {
  std::size_t scenes = 32;       // training scenes
  std::size_t val_scenes = 12;   // held-out scenes
  std::size_t height = 14;       // crop grid
  std::size_t width = 14;
  std::size_t margin = 4;        // scene canvas = crop + margin on each axis
  std::size_t channels = 24;     // feature dim C
  std::size_t classes = 4;       // K, class 0 is the background
  std::size_t regions = 3;       // foreground rectangles per scene
  std::size_t planes = 4;        // distinct depth plateaus; 1 = flat scene
  double noise = 0.35;           // feature noise sigma
  double nuisance = 1.0;         // strength of the position-dependent confounder
  double depth_noise = 0.02;     // amplitude of the smooth depth perturbation
  std::uint64_t seed = 0;
};

void validate(const SynthConfig& cfg);

struct SynthPaths {
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
};

/// Writes tensors and train/val manifests under `dir`. Byte-identical output
/// for identical configs.
SynthPaths gen_synthetic(const SynthConfig& cfg, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Overlays.

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<Rgb> pixels;

  Rgb at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

inline constexpr Rgb kMarkerColor{255, 32, 32};

/// Grayscale depth upscaled by `scale` (nearest neighbor) with a 3x3 marker
/// centred on every sampled cell.
Image render_overlay(const Tensor2& depth, const SampleSet& samples, std::size_t scale = 8);
/// Panels left to right with `gap` white columns between them.
Image side_by_side(const std::vector<Image>& panels, std::size_t gap = 4);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

void write_overlay(const Tensor2& depth, const SampleSet& samples,
                   const std::filesystem::path& path, std::size_t scale = 8);

/// Whole file as bytes.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace depthg
