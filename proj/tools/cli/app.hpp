#pragma once

#include "matattr/core.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

namespace matattr::cli {

/// Exit status for an error class: 1 malformed input, 2 dimension or config
/// mismatch, 3 numerical failure.
int exit_code(ErrorKind kind);

/// Runs one subcommand; returns the process exit status.
int run(int argc, const char* const* argv);

/// Global seed: the explicit flag wins, then PERCEPT_SEED, then the default.
std::uint64_t resolve_seed(bool flag_given, std::uint64_t flag_value);

/// Relative input paths resolve against PERCEPT_DATA_DIR when it is set.
std::filesystem::path resolve_input(const std::string& path);

/// Collects what a stage read and wrote and records it as a manifest JSON.
class RunManifest {
 public:
  RunManifest(std::string command, nlohmann::json config, std::uint64_t seed);

  std::filesystem::path input(const std::string& path);
  void output(const std::filesystem::path& path);
  std::string config_hash() const;
  std::uint64_t seed() const { return seed_; }
  /// {"seed", "config_hash"} for embedding into JSON outputs.
  nlohmann::json stamp() const;
  /// Writes `path` (default: first output + ".manifest.json").
  std::filesystem::path finish(const std::filesystem::path& path = {}) const;

 private:
  std::string command_;
  nlohmann::json config_;
  std::uint64_t seed_;
  nlohmann::json inputs_ = nlohmann::json::array();
  nlohmann::json outputs_ = nlohmann::json::array();
  std::vector<std::filesystem::path> output_paths_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace matattr::cli
