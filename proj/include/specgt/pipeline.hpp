#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "specgt/nn.hpp"
#include "specgt/resolution.hpp"
#include "specgt/unmixing.hpp"

namespace specgt::pipeline {

/// Everything `run-all` needs. Sub-seeds fan out from `seed`:
///   scene i          derive_seed(seed, "scene/<i>")
///   fold k split     derive_seed(seed, "fold/<k>/split")
///   fold k training  derive_seed(seed, "fold/<k>/train")   (also seeds the weights)
struct PipelineConfig {
  std::size_t scenes = 6;
  std::size_t rows = 250;
  std::size_t cols = 250;
  double smoothness = 12.0;
  double noise_sigma = 0.0;
  std::optional<double> snr_db = 40.0;
  /// Endmember CSV; the built-in library when empty.
  std::filesystem::path endmembers;
  resolution::AggregationSpec aggregation;
  resolution::BandSpec bands = resolution::default_target_bands();
  unmixing::UnmixOptions unmix;
  std::size_t patch_size = 5;
  std::vector<std::size_t> conv_filters{64, 64, 32, 16};
  std::vector<std::size_t> hidden_sizes{128, 64};
  double dropout_rate = 0.25;
  double input_noise_sigma = 0.0;
  nn::TrainConfig train;
  double train_fraction = 0.9;
  /// Held-out scene indices; every scene when empty.
  std::vector<std::size_t> folds;
  std::uint64_t seed = 0;
  std::size_t threads = 0;

  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& source);
PipelineConfig read_pipeline_config(const std::filesystem::path& path);

struct FoldResult {
  std::size_t test_image = 0;
  nn::Metrics metrics;
  double validation_accuracy = 0.0;
  std::vector<nn::HistoryRow> history;
};

struct PipelineResult {
  std::vector<FoldResult> folds;
  std::filesystem::path manifest;
};

using Logger = std::function<void(const std::string&)>;

/// gen-scene -> unmix -> adapt -> synth-gt per scene, then build-dataset ->
/// train -> classify -> eval per fold, all under `out_dir`, followed by
/// manifest.json listing the SHA-256 of every artifact.
PipelineResult run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir,
                            const Logger& log = {});

// Artifact writers shared by the individual commands.
void write_unmix_report(const unmixing::UnmixReport& report, const std::filesystem::path& path);
nlohmann::json metrics_json(const nn::Metrics& metrics, const std::vector<std::string>& class_names);
/// <prefix>.metrics.json and <prefix>.confusion.csv
void write_metrics(const nn::Metrics& metrics, const std::vector<std::string>& class_names,
                   const std::filesystem::path& prefix);

unmixing::Objective parse_objective(const std::string& name);  // "sam" or "l2"
std::string objective_name(unmixing::Objective objective);

std::string sha256_file(const std::filesystem::path& path);
/// Every regular file under `dir` except `exclude`, sorted by relative path.
nlohmann::json artifact_hashes(const std::filesystem::path& dir, const std::filesystem::path& exclude = {});

}  // namespace specgt::pipeline
