#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "specgt/cube_io.hpp"

namespace specgt::scenegen {

struct SceneSpec {
  std::size_t rows = 0;
  std::size_t cols = 0;
  EndmemberLibrary endmembers;
  /// Gaussian correlation length of the fraction fields, in pixels. 0 gives i.i.d. pixels.
  double smoothness = 0.0;
  /// Standard deviation of the additive reflectance noise.
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  /// When set, replaces noise_sigma by the value giving this signal-to-noise
  /// ratio (dB) against the clean scene's mean squared reflectance.
  std::optional<double> snr_db;

  void validate() const;
};

/// Seven analytic spectra (soils, rock, four vegetation types) on 41 bands,
/// 400-2400 nm, 5 nm wide. Pairwise spectral angles are checked against
/// `min_pairwise_angle` on construction.
EndmemberLibrary default_library(double min_pairwise_angle = 0.1);

/// Independent Gaussian-smoothed noise per endmember, mapped to 0.5 + 0.5 z and
/// projected onto the feasible set per pixel.
FractionMap generate_fraction_field(const SceneSpec& spec);

/// values = E f + N(0, noise_sigma^2), band metadata copied from E.
SpectralCube render_scene(const FractionMap& fractions, const EndmemberLibrary& E, double noise_sigma,
                          std::uint64_t seed);

/// sigma with 10 log10(mean(x^2) / sigma^2) == snr_db over every value of `clean`.
double noise_sigma_for_snr(const SpectralCube& clean, double snr_db);

struct Scene {
  FractionMap fractions;
  SpectralCube cube;
  double noise_sigma = 0.0;
};

/// generate_fraction_field + render_scene with the spec's noise setting.
Scene generate_scene(const SceneSpec& spec);

/// Reads {rows, cols, smoothness, noise_sigma | snr_db, seed, endmembers?} JSON; a relative
/// `endmembers` CSV path resolves against the spec file's directory.
SceneSpec read_scene_spec(const std::filesystem::path& path);

}  // namespace specgt::scenegen
