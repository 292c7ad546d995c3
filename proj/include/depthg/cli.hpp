#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthg/dataio.hpp"
#include "depthg/training.hpp"

namespace depthg::cli {

/// Everything a run depends on. Serialized as `key = value` lines.
struct Config {
  std::uint64_t seed = 0;
  std::size_t threads = 1;  // execution only, excluded from the digest
  std::string train_manifest;  // empty: synthetic data generated in the run dir
  std::string val_manifest;
  SynthConfig synth;
  TrainConfig train;
  EvalConfig eval;
};

/// Canonical text; every key is listed. Doubles are written in their
/// shortest round-trip form, so the text re-parses to an identical config.
std::string format_config(const Config& cfg);

/// Applies `key = value` lines on top of `base`. Blank lines and '#'
/// comments are skipped. Unknown keys and malformed values throw
/// ContractError naming the line.
Config parse_config(const std::string& text, Config base = {});

/// Sets one key. Throws ContractError on unknown keys or bad values.
void set_value(Config& cfg, const std::string& key, const std::string& value);

/// Seed and thread count are copied into the train/eval sections.
void propagate_shared(Config& cfg);

/// 16 hex digits of FNV-1a 64 over the canonical text without `threads`.
std::string config_digest(const Config& cfg);

/// <digest>-s<seed>
std::string run_name(const Config& cfg);

struct GradcheckEntry {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
};

/// Finite-difference checks (h = 1e-5) of every differentiable operation on
/// `instances` seeded problems each (H = W = 4, C = 6, Q = 5).
std::vector<GradcheckEntry> gradcheck_suite(std::size_t instances, std::uint64_t seed);

inline constexpr double kGradcheckTolerance = 1e-6;

/// Entry point. Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace depthg::cli
