#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mxacl/data.hpp"
#include "mxacl/model.hpp"
#include "mxacl/training.hpp"

namespace mxacl {

/// Everything one experiment needs. JSON layout:
///   {"model": ModelConfig, "preset": name, "regime": RegimeConfig,
///    "data": {"synth": SynthSpec} | {"dir": path}, "out": path, "seeds": [u64, ...]}
/// Every section is optional; unknown keys are rejected at every level.
/// A preset is applied first and explicit "regime" keys override it.
struct RunConfig {
  ModelConfig model;
  std::string preset;  ///< ablation preset name, empty for none
  RegimeConfig regime;
  std::optional<SynthSpec> synth;
  std::string data_dir;
  std::string out_dir = "out";
  std::vector<std::uint64_t> seeds{0};

  /// Throws ValidationError. Requires exactly one data source and distinct seeds.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Resolves the preset, then overlays "regime"; throws ValidationError on unknown keys or bad values.
RunConfig parse_run_config(const nlohmann::json& j);
/// Throws IoError when unreadable, ValidationError on malformed JSON.
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);
/// Pretty JSON with a trailing newline; throws IoError.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

/// Generates or loads the configured dataset.
Dataset load_run_data(const RunConfig& c);
/// Copies the class count of `data` into the model config.
void fit_model_to_data(RunConfig& c, const Dataset& data);

}  // namespace mxacl
