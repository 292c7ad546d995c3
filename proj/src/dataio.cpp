#include "depthg/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace depthg {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// NPY

std::size_t NpyArray::element_count() const {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr std::size_t kMagicLen = 6;

[[noreturn]] void format_fail(const std::string& what, std::size_t offset) {
  throw FormatError("npy: " + what + " (at byte offset " + std::to_string(offset) + ")");
}

// Minimal reader for the header's Python dict literal.
class HeaderParser {
 public:
  HeaderParser(const std::string& text, std::size_t base) : s_(text), base_(base) {}

  std::map<std::string, std::string> parse() {
    std::map<std::string, std::string> out;
    skip_ws();
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') break;
      std::string key = quoted();
      skip_ws();
      expect(':');
      skip_ws();
      out[key] = value();
      skip_ws();
      if (peek() == ',') {
        ++i_;
        continue;
      }
      skip_ws();
      if (peek() == '}') break;
      fail("expected ',' or '}' in header");
    }
    return out;
  }

 private:
  char peek() const { return i_ < s_.size() ? s_[i_] : '\0'; }
  void skip_ws() {
    while (i_ < s_.size() && (s_[i_] == ' ' || s_[i_] == '\t' || s_[i_] == '\n')) ++i_;
  }
  [[noreturn]] void fail(const std::string& what) const { format_fail(what, base_ + i_); }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "' in header");
    ++i_;
  }
  std::string quoted() {
    const char q = peek();
    if (q != '\'' && q != '"') fail("expected a quoted string in header");
    ++i_;
    const std::size_t start = i_;
    while (i_ < s_.size() && s_[i_] != q) ++i_;
    if (i_ >= s_.size()) fail("unterminated string in header");
    return s_.substr(start, i_++ - start);
  }
  std::string value() {
    const char c = peek();
    if (c == '\'' || c == '"') return quoted();
    if (c == '(') {
      const std::size_t start = i_;
      while (i_ < s_.size() && s_[i_] != ')') ++i_;
      if (i_ >= s_.size()) fail("unterminated shape tuple");
      ++i_;
      return s_.substr(start, i_ - start);
    }
    const std::size_t start = i_;
    while (i_ < s_.size() && s_[i_] != ',' && s_[i_] != '}' && s_[i_] != ' ') ++i_;
    return s_.substr(start, i_ - start);
  }

  const std::string& s_;
  std::size_t base_;
  std::size_t i_ = 0;
};

std::vector<std::size_t> parse_shape(const std::string& tuple, std::size_t offset) {
  std::vector<std::size_t> shape;
  std::string inner = tuple.substr(1, tuple.size() - 2);
  std::stringstream ss(inner);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
    if (item.empty()) continue;
    if (!std::all_of(item.begin(), item.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      format_fail("invalid shape entry '" + item + "'", offset);
    }
    shape.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  return shape;
}

std::string shape_literal(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  if (shape.size() == 1) s += ",";
  return s + ")";
}

}  // namespace

NpyArray parse_npy(const std::string& bytes) {
  if (bytes.size() < kMagicLen + 4 || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0) {
    format_fail("bad magic string", 0);
  }
  const auto major = static_cast<unsigned char>(bytes[6]);
  const auto minor = static_cast<unsigned char>(bytes[7]);
  std::size_t header_len = 0;
  std::size_t header_start = 0;
  if (major == 1 && minor == 0) {
    header_len = static_cast<unsigned char>(bytes[8]) |
                 (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    header_start = 10;
  } else if (major == 2 && minor == 0) {
    if (bytes.size() < 12) format_fail("truncated header length", 8);
    for (int k = 0; k < 4; ++k) {
      header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[8 + k])) << (8 * k);
    }
    header_start = 12;
  } else {
    format_fail("unsupported version " + std::to_string(major) + "." + std::to_string(minor), 6);
  }
  if (bytes.size() < header_start + header_len) format_fail("truncated header", header_start);

  const std::string header = bytes.substr(header_start, header_len);
  auto dict = HeaderParser(header, header_start).parse();
  for (const char* key : {"descr", "fortran_order", "shape"}) {
    if (!dict.count(key)) format_fail(std::string("header lacks '") + key + "'", header_start);
  }
  NpyArray out;
  out.descr = dict["descr"];
  if (out.descr != "<f4" && out.descr != "|u1") {
    format_fail("unsupported descr '" + out.descr + "' (expected '<f4' or '|u1')", header_start);
  }
  if (dict["fortran_order"] != "False") {
    format_fail("fortran_order must be False", header_start);
  }
  out.shape = parse_shape(dict["shape"], header_start);

  const std::size_t payload = header_start + header_len;
  const std::size_t count = out.element_count();
  const std::size_t item = out.descr == "<f4" ? 4 : 1;
  if (bytes.size() - payload != count * item) {
    format_fail("payload holds " + std::to_string(bytes.size() - payload) + " bytes, shape needs " +
                    std::to_string(count * item),
                payload);
  }
  if (out.descr == "<f4") {
    out.f32.resize(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[payload + 4 * k + b]))
                << (8 * b);
      }
      std::memcpy(&out.f32[k], &bits, 4);
    }
  } else {
    out.u8.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload), bytes.end());
  }
  return out;
}

std::string serialize_npy(const NpyArray& array) {
  require(array.descr == "<f4" || array.descr == "|u1", "serialize_npy: unsupported descr");
  const std::size_t count = array.element_count();
  require(array.descr == "<f4" ? array.f32.size() == count : array.u8.size() == count,
          "serialize_npy: shape does not match the data length");
  std::string header = "{'descr': '" + array.descr +
                       "', 'fortran_order': False, 'shape': " + shape_literal(array.shape) + ", }";
  // magic(6) + version(2) + length(2) + header + '\n' padded to 64 bytes.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  require(header.size() <= 0xFFFF, "serialize_npy: header too long");

  std::string out(kMagic, kMagicLen);
  out.push_back('\x01');
  out.push_back('\x00');
  out.push_back(static_cast<char>(header.size() & 0xFF));
  out.push_back(static_cast<char>((header.size() >> 8) & 0xFF));
  out += header;
  if (array.descr == "<f4") {
    for (float v : array.f32) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  } else {
    out.append(array.u8.begin(), array.u8.end());
  }
  return out;
}

NpyArray read_npy(const fs::path& path) {
  try {
    return parse_npy(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_npy(const fs::path& path, const NpyArray& array) {
  write_file(path, serialize_npy(array));
}

AnyTensor read_tensor(const fs::path& path) {
  NpyArray a = read_npy(path);
  if (a.descr != "<f4") throw FormatError(path.string() + ": expected a '<f4' tensor");
  if (a.shape.size() == 2) return Tensor2(a.shape[0], a.shape[1], std::move(a.f32));
  if (a.shape.size() == 3) return Tensor3(a.shape[0], a.shape[1], a.shape[2], std::move(a.f32));
  throw FormatError(path.string() + ": expected a 2-d or 3-d tensor");
}

void write_tensor(const fs::path& path, const Tensor2& t) {
  NpyArray a{"<f4", {t.height(), t.width()}, {t.data().begin(), t.data().end()}, {}};
  write_npy(path, a);
}

void write_tensor(const fs::path& path, const Tensor3& t) {
  NpyArray a{"<f4", {t.channels(), t.height(), t.width()}, {t.data().begin(), t.data().end()}, {}};
  write_npy(path, a);
}

void write_matrix(const fs::path& path, const Mat& m) {
  NpyArray a{"<f4", {m.rows, m.cols}, {}, {}};
  a.f32.reserve(m.data.size());
  for (double v : m.data) a.f32.push_back(static_cast<float>(v));
  write_npy(path, a);
}

Mat read_matrix(const fs::path& path) {
  NpyArray a = read_npy(path);
  if (a.descr != "<f4" || a.shape.size() != 2) {
    throw FormatError(path.string() + ": expected a 2-d '<f4' matrix");
  }
  Mat m(a.shape[0], a.shape[1]);
  for (std::size_t k = 0; k < a.f32.size(); ++k) m.data[k] = a.f32[k];
  return m;
}

LabelMap read_labels(const fs::path& path) {
  NpyArray a = read_npy(path);
  if (a.descr != "|u1" || a.shape.size() != 2) {
    throw FormatError(path.string() + ": expected a 2-d '|u1' label map");
  }
  return {a.shape[0], a.shape[1], std::move(a.u8)};
}

void write_labels(const fs::path& path, const LabelMap& labels) {
  write_npy(path, NpyArray{"|u1", {labels.height, labels.width}, {}, labels.data});
}

bool normalize_depth(Tensor2& depth) {
  auto d = depth.data();
  if (d.empty()) return false;
  const auto [lo_it, hi_it] = std::minmax_element(d.begin(), d.end());
  const float lo = *lo_it;
  const float hi = *hi_it;
  if (lo >= 0.0f && hi <= 1.0f) return false;
  std::vector<float> out(d.size(), 0.0f);
  const double range = static_cast<double>(hi) - static_cast<double>(lo);
  if (range > 0.0) {
    for (std::size_t k = 0; k < d.size(); ++k) {
      out[k] = static_cast<float>((static_cast<double>(d[k]) - lo) / range);
    }
  }
  depth = Tensor2(depth.height(), depth.width(), std::move(out));
  return true;
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

CropRef parse_ref(const std::string& s, std::size_t line) {
  const auto colon = s.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw FormatError("manifest line " + std::to_string(line) + ": bad knn entry '" + s + "'");
  }
  return {s.substr(0, colon), s.substr(colon + 1)};
}

}  // namespace

std::vector<ManifestRecord> parse_manifest(const std::string& text) {
  std::vector<ManifestRecord> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, '\t');
    if (f.size() < 4 || f.size() > 6) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected 4 to 6 fields, got " +
                        std::to_string(f.size()));
    }
    for (std::size_t k = 0; k < 4; ++k) {
      if (f[k].empty()) {
        throw FormatError("manifest line " + std::to_string(lineno) + ": empty field " +
                          std::to_string(k + 1));
      }
    }
    ManifestRecord r;
    r.ref = {f[0], f[1]};
    r.features = f[2];
    r.depth = f[3];
    if (f.size() > 4 && !f[4].empty() && f[4] != "-") r.labels = fs::path(f[4]);
    if (f.size() > 5 && !f[5].empty() && f[5] != "-") {
      for (const auto& item : split(f[5], ',')) r.knn.push_back(parse_ref(item, lineno));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_manifest(const std::vector<ManifestRecord>& records) {
  std::string out = "# image_id\tcrop_id\tfeatures\tdepth\tlabels\tknn\n";
  for (const auto& r : records) {
    out += r.ref.image_id + "\t" + r.ref.crop_id + "\t" + r.features.generic_string() + "\t" +
           r.depth.generic_string() + "\t" + (r.labels ? r.labels->generic_string() : "-") + "\t";
    if (r.knn.empty()) {
      out += "-";
    } else {
      for (std::size_t k = 0; k < r.knn.size(); ++k) {
        if (k) out += ",";
        out += r.knn[k].image_id + ":" + r.knn[k].crop_id;
      }
    }
    out += "\n";
  }
  return out;
}

Dataset load_dataset(const fs::path& manifest) {
  const auto records = parse_manifest(read_file(manifest));
  if (records.empty()) throw FormatError(manifest.string() + ": manifest has no records");
  const fs::path base = manifest.parent_path();
  auto resolve = [&](const fs::path& p) { return p.is_absolute() ? p : base / p; };

  Dataset ds;
  std::map<std::string, std::size_t> image_index;
  std::map<std::pair<std::string, std::string>, std::size_t> crop_index;
  for (const auto& r : records) {
    const std::string where = manifest.string() + " [" + r.ref.image_id + ":" + r.ref.crop_id + "]";
    if (crop_index.count({r.ref.image_id, r.ref.crop_id})) {
      throw FormatError(where + ": duplicate crop");
    }
    Crop c;
    c.ref = r.ref;
    auto feat = read_tensor(resolve(r.features));
    if (!std::holds_alternative<Tensor3>(feat)) throw FormatError(where + ": features must be C x H x W");
    c.features = std::get<Tensor3>(std::move(feat));
    auto depth = read_tensor(resolve(r.depth));
    if (!std::holds_alternative<Tensor2>(depth)) throw FormatError(where + ": depth must be H x W");
    c.depth = std::get<Tensor2>(std::move(depth));
    if (c.depth.height() != c.features.height() || c.depth.width() != c.features.width()) {
      throw FormatError(where + ": depth grid " + std::to_string(c.depth.height()) + "x" +
                        std::to_string(c.depth.width()) + " does not match feature grid " +
                        std::to_string(c.features.height()) + "x" +
                        std::to_string(c.features.width()));
    }
    if (normalize_depth(c.depth)) {
      ds.load_report.push_back(where + ": depth outside [0,1], min-max normalized");
    }
    if (r.labels) {
      LabelMap l = read_labels(resolve(*r.labels));
      if (l.height != c.features.height() || l.width != c.features.width()) {
        throw FormatError(where + ": label grid does not match feature grid");
      }
      c.labels = std::move(l);
    }
    if (!ds.crops.empty() && c.features.channels() != ds.crops.front().features.channels()) {
      throw FormatError(where + ": feature channel count differs from the first crop");
    }
    auto [it, inserted] = image_index.emplace(r.ref.image_id, ds.images.size());
    if (inserted) ds.images.emplace_back();
    c.image = it->second;
    ds.images[c.image].push_back(ds.crops.size());
    crop_index[{r.ref.image_id, r.ref.crop_id}] = ds.crops.size();
    ds.crops.push_back(std::move(c));
  }
  for (std::size_t k = 0; k < records.size(); ++k) {
    for (const auto& ref : records[k].knn) {
      auto it = crop_index.find({ref.image_id, ref.crop_id});
      if (it == crop_index.end()) {
        throw FormatError(manifest.string() + ": knn entry " + ref.image_id + ":" + ref.crop_id +
                          " does not name a crop in the manifest");
      }
      ds.crops[k].knn.push_back(it->second);
    }
  }
  for (const auto& [id, idx] : image_index) {
    if (ds.images[idx].size() < 2) {
      throw FormatError(manifest.string() + ": image '" + id + "' has fewer than two crops");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

void validate(const SynthConfig& cfg) {
  require(cfg.scenes >= 1 && cfg.val_scenes >= 1, "synth: scene counts must be at least 1");
  require(cfg.height >= 1 && cfg.width >= 1 && cfg.channels >= 1, "synth: empty grid");
  require(cfg.classes >= 1 && cfg.regions >= 1 && cfg.planes >= 1,
          "synth: classes, regions and planes must be at least 1");
  require(cfg.classes <= cfg.regions + 1, "synth: classes must not exceed regions + 1");
  require(cfg.classes + 1 <= cfg.channels, "synth: need more channels than classes");
  require(cfg.noise >= 0.0 && cfg.nuisance >= 0.0 && cfg.depth_noise >= 0.0,
          "synth: noise parameters must be non-negative");
  require(cfg.classes <= 254, "synth: too many classes for 8-bit labels");
}

namespace {

// Orthonormal rows from Gaussian draws (Gram-Schmidt).
std::vector<std::vector<double>> orthonormal_directions(std::size_t count, std::size_t dim,
                                                        Rng& rng) {
  std::vector<std::vector<double>> dirs;
  while (dirs.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& d : dirs) {
      const double p = dot(v, d);
      for (std::size_t k = 0; k < dim; ++k) v[k] -= p * d[k];
    }
    const double n = norm(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

struct Rect {
  std::size_t r0, c0, r1, c1;  // half-open
  std::size_t cls;
  double depth;
};

// Classes are spread over the plateaus in order, so with fewer plateaus
// than classes neighbouring classes share a depth. Plateau 0 (the
// background's) is the farthest.
std::size_t class_plane(std::size_t cls, const SynthConfig& cfg) {
  return cls * cfg.planes / cfg.classes;
}

double plane_depth(std::size_t plane, std::size_t planes) {
  if (planes == 1) return 0.5;
  return 0.9 - 0.75 * static_cast<double>(plane) / static_cast<double>(planes - 1);
}

struct Scene {
  std::size_t H, W;
  std::vector<std::uint8_t> labels;
  std::vector<double> depth;
  std::vector<std::vector<double>> features;  // per cell
};

Scene make_scene(const SynthConfig& cfg, const std::vector<std::vector<double>>& class_dirs,
                 const std::vector<double>& nuisance_dir, Rng& rng) {
  Scene s;
  s.H = cfg.height + cfg.margin;
  s.W = cfg.width + cfg.margin;
  const std::size_t n = s.H * s.W;
  // Each plateau gets one small offset per scene; classes on the same
  // plateau stay level with each other.
  std::vector<double> plateau(cfg.planes);
  for (std::size_t p = 0; p < cfg.planes; ++p) {
    const double jitter = cfg.planes > 1 ? 0.04 * (2.0 * rng.uniform01() - 1.0) : 0.0;
    plateau[p] = plane_depth(p, cfg.planes) + jitter;
  }
  s.labels.assign(n, 0);
  s.depth.assign(n, plateau[class_plane(0, cfg)]);

  std::vector<Rect> rects;
  for (std::size_t k = 0; k < cfg.regions; ++k) {
    const std::size_t min_side = std::max<std::size_t>(2, std::min(s.H, s.W) / 5);
    const std::size_t max_side = std::max(min_side, std::min(s.H, s.W) / 2);
    const std::size_t h = min_side + rng.uniform(max_side - min_side + 1);
    const std::size_t w = min_side + rng.uniform(max_side - min_side + 1);
    const std::size_t r0 = rng.uniform(s.H - std::min(h, s.H) + 1);
    const std::size_t c0 = rng.uniform(s.W - std::min(w, s.W) + 1);
    // Every foreground class appears once before classes repeat.
    const std::size_t cls = cfg.classes > 1 ? 1 + k % (cfg.classes - 1) : 0;
    rects.push_back({r0, c0, std::min(s.H, r0 + h), std::min(s.W, c0 + w), cls,
                     plateau[class_plane(cls, cfg)]});
  }
  // Paint far to near so nearer rectangles occlude; level rectangles keep
  // their draw order.
  std::stable_sort(rects.begin(), rects.end(),
                   [](const Rect& a, const Rect& b) { return a.depth > b.depth; });
  for (const auto& r : rects) {
    for (std::size_t i = r.r0; i < r.r1; ++i) {
      for (std::size_t j = r.c0; j < r.c1; ++j) {
        s.labels[i * s.W + j] = static_cast<std::uint8_t>(r.cls);
        s.depth[i * s.W + j] = r.depth;
      }
    }
  }

  // Smooth depth perturbation and the positional nuisance field share a
  // random orientation and phase per scene.
  const double angle = 2.0 * std::numbers::pi * rng.uniform01();
  const double phase = 2.0 * std::numbers::pi * rng.uniform01();
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double span = static_cast<double>(std::max(s.H, s.W));
  s.features.resize(n);
  for (std::size_t i = 0; i < s.H; ++i) {
    for (std::size_t j = 0; j < s.W; ++j) {
      const std::size_t cell = i * s.W + j;
      const double u = (ca * static_cast<double>(j) + sa * static_cast<double>(i)) / span;
      const double field = std::cos(std::numbers::pi * u + phase);
      s.depth[cell] = std::clamp(s.depth[cell] + cfg.depth_noise * field, 0.0, 1.0);
      std::vector<double> f(cfg.channels);
      const auto& e = class_dirs[s.labels[cell]];
      for (std::size_t c = 0; c < cfg.channels; ++c) {
        f[c] = e[c] + cfg.nuisance * field * nuisance_dir[c] + cfg.noise * rng.normal();
      }
      s.features[cell] = std::move(f);
    }
  }
  return s;
}

void emit_split(const SynthConfig& cfg, const std::vector<std::vector<double>>& class_dirs,
                const std::vector<double>& nuisance_dir, std::size_t count,
                const std::string& prefix, Rng& rng, const fs::path& dir,
                std::vector<ManifestRecord>& records) {
  for (std::size_t k = 0; k < count; ++k) {
    Scene s = make_scene(cfg, class_dirs, nuisance_dir, rng);
    // Two overlapping crops: top-left corner region and a random offset.
    const std::size_t offsets[2][2] = {
        {rng.uniform(cfg.margin / 2 + 1), rng.uniform(cfg.margin / 2 + 1)},
        {cfg.margin / 2 + rng.uniform(cfg.margin - cfg.margin / 2 + 1),
         cfg.margin / 2 + rng.uniform(cfg.margin - cfg.margin / 2 + 1)}};
    char id[32];
    std::snprintf(id, sizeof id, "%s%04zu", prefix.c_str(), k);
    for (std::size_t c = 0; c < 2; ++c) {
      const std::size_t oy = offsets[c][0], ox = offsets[c][1];
      Tensor3 feat(cfg.channels, cfg.height, cfg.width);
      Tensor2 depth(cfg.height, cfg.width);
      LabelMap labels{cfg.height, cfg.width, std::vector<std::uint8_t>(cfg.height * cfg.width)};
      for (std::size_t i = 0; i < cfg.height; ++i) {
        for (std::size_t j = 0; j < cfg.width; ++j) {
          const std::size_t cell = (i + oy) * s.W + (j + ox);
          for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
            feat.set(ch, i, j, static_cast<float>(s.features[cell][ch]));
          }
          depth.set(i, j, static_cast<float>(s.depth[cell]));
          labels.data[i * cfg.width + j] = s.labels[cell];
        }
      }
      const std::string stem = std::string(id) + "_c" + std::to_string(c);
      const fs::path rel = fs::path("tensors") / stem;
      write_tensor(dir / (rel.string() + "_feat.npy"), feat);
      write_tensor(dir / (rel.string() + "_depth.npy"), depth);
      write_labels(dir / (rel.string() + "_label.npy"), labels);
      ManifestRecord r;
      r.ref = {id, "c" + std::to_string(c)};
      r.features = rel.string() + "_feat.npy";
      r.depth = rel.string() + "_depth.npy";
      r.labels = fs::path(rel.string() + "_label.npy");
      records.push_back(std::move(r));
    }
  }
}

}  // namespace

SynthPaths gen_synthetic(const SynthConfig& cfg, const fs::path& dir) {
  validate(cfg);
  fs::create_directories(dir / "tensors");
  Rng rng(cfg.seed);
  // Class embeddings and the nuisance direction are mutually orthogonal.
  auto dirs = orthonormal_directions(cfg.classes + 1, cfg.channels, rng);
  std::vector<double> nuisance_dir = dirs.back();
  dirs.pop_back();

  Rng train_rng(derive_seed(cfg.seed, 101));
  Rng val_rng(derive_seed(cfg.seed, 202));
  std::vector<ManifestRecord> train, val;
  emit_split(cfg, dirs, nuisance_dir, cfg.scenes, "train", train_rng, dir, train);
  emit_split(cfg, dirs, nuisance_dir, cfg.val_scenes, "val", val_rng, dir, val);

  SynthPaths paths{dir / "train.manifest", dir / "val.manifest"};
  write_file(paths.train_manifest, format_manifest(train));
  write_file(paths.val_manifest, format_manifest(val));
  return paths;
}

// ---------------------------------------------------------------------------
// Overlays

Image render_overlay(const Tensor2& depth, const SampleSet& samples, std::size_t scale) {
  require(scale >= 1, "render_overlay: scale must be at least 1");
  require(samples.size() == 0 || (samples.height == depth.height() && samples.width == depth.width()),
          "render_overlay: sample grid does not match the depth map");
  Image img{depth.width() * scale, depth.height() * scale, {}};
  img.pixels.resize(img.width * img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double d = std::clamp(static_cast<double>(depth.at(y / scale, x / scale)), 0.0, 1.0);
      const auto v = static_cast<std::uint8_t>(std::lround(255.0 * d));
      img.pixels[y * img.width + x] = {v, v, v};
    }
  }
  for (const auto& g : samples.indices) {
    require(g.row < depth.height() && g.col < depth.width(), "render_overlay: sample out of bounds");
    const std::size_t cy = g.row * scale + scale / 2;
    const std::size_t cx = g.col * scale + scale / 2;
    for (std::size_t y = cy == 0 ? 0 : cy - 1; y <= std::min(cy + 1, img.height - 1); ++y) {
      for (std::size_t x = cx == 0 ? 0 : cx - 1; x <= std::min(cx + 1, img.width - 1); ++x) {
        img.pixels[y * img.width + x] = kMarkerColor;
      }
    }
  }
  return img;
}

Image side_by_side(const std::vector<Image>& panels, std::size_t gap) {
  Image out;
  for (const auto& p : panels) out.height = std::max(out.height, p.height);
  for (std::size_t k = 0; k < panels.size(); ++k) out.width += panels[k].width + (k ? gap : 0);
  out.pixels.assign(out.width * out.height, Rgb{255, 255, 255});
  std::size_t x0 = 0;
  for (const auto& p : panels) {
    for (std::size_t y = 0; y < p.height; ++y) {
      for (std::size_t x = 0; x < p.width; ++x) out.pixels[y * out.width + x0 + x] = p.at(x, y);
    }
    x0 += p.width + gap;
  }
  return out;
}

void write_ppm(const fs::path& path, const Image& image) {
  std::string bytes = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                      "\n255\n";
  bytes.reserve(bytes.size() + image.pixels.size() * 3);
  for (const auto& p : image.pixels) {
    bytes.push_back(static_cast<char>(p.r));
    bytes.push_back(static_cast<char>(p.g));
    bytes.push_back(static_cast<char>(p.b));
  }
  write_file(path, bytes);
}

Image read_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || !in) throw FormatError(path.string() + ": not a P6 image");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() - offset != w * h * 3) throw FormatError(path.string() + ": truncated pixmap");
  Image img{w, h, std::vector<Rgb>(w * h)};
  for (std::size_t k = 0; k < w * h; ++k) {
    img.pixels[k] = {static_cast<std::uint8_t>(bytes[offset + 3 * k]),
                     static_cast<std::uint8_t>(bytes[offset + 3 * k + 1]),
                     static_cast<std::uint8_t>(bytes[offset + 3 * k + 2])};
  }
  return img;
}

void write_overlay(const Tensor2& depth, const SampleSet& samples, const fs::path& path,
                   std::size_t scale) {
  write_ppm(path, render_overlay(depth, samples, scale));
}

}  // namespace depthg
