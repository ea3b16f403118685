#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "specgt/cube_io.hpp"

namespace specgt::resolution {

/// Target sensor band grid. Excluded indices refer to positions in `centers_nm`.
struct BandSpec {
  std::vector<double> centers_nm;
  std::vector<double> widths_nm;
  std::vector<std::size_t> excluded_indices;

  void validate() const;
};

enum class Reducer { mean };

struct AggregationSpec {
  std::size_t factor = 5;
  Reducer reducer = Reducer::mean;
};

/// Twelve-band 415-910 nm grid shipped as configuration, with the duplicated
/// sixth band excluded. Values are nominal, not calibrated response functions.
BandSpec default_target_bands();

BandSpec read_band_spec(const std::filesystem::path& path);
void write_band_spec(const BandSpec& spec, const std::filesystem::path& path);

/// Means over non-overlapping factor x factor tiles; remainder rows/cols are dropped.
SpectralCube aggregate_spatial(const SpectralCube& cube, const AggregationSpec& spec);

/// Boxcar mean of source bands within center +/- width/2, nearest band when the window is empty.
SpectralCube resample_spectral(const SpectralCube& cube, const BandSpec& spec);

/// Per-endmember tile means. Outputs stay feasible because they are convex combinations.
FractionMap aggregate_fractions(const FractionMap& fractions, const AggregationSpec& spec);

/// Per-pixel argmax of the fractions, lowest index on ties.
LabelMap synthesize_labels(const FractionMap& fractions, const std::vector<std::string>& palette_names);

}  // namespace specgt::resolution
