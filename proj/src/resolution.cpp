#include "specgt/resolution.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "specgt/error.hpp"

namespace specgt::resolution {
namespace {

void check_factor(std::size_t rows, std::size_t cols, std::size_t factor) {
  if (factor == 0) throw usage_error("aggregation factor must be >= 1");
  if (factor > rows || factor > cols) {
    throw data_error("aggregation factor " + std::to_string(factor) + " exceeds image size " + std::to_string(rows) +
                     "x" + std::to_string(cols));
  }
}

}  // namespace

void BandSpec::validate() const {
  if (centers_nm.empty()) throw data_error("band spec: no target bands");
  if (centers_nm.size() != widths_nm.size()) throw data_error("band spec: centers and widths differ in length");
  for (std::size_t b = 0; b < centers_nm.size(); ++b) {
    if (!(widths_nm[b] > 0.0)) throw data_error("band spec: width of band " + std::to_string(b) + " must be positive");
    if (b > 0 && centers_nm[b] < centers_nm[b - 1]) throw data_error("band spec: centers must be increasing");
  }
  for (std::size_t i : excluded_indices) {
    if (i >= centers_nm.size()) throw data_error("band spec: excluded index " + std::to_string(i) + " out of range");
  }
  std::size_t retained = 0;
  for (std::size_t b = 0; b < centers_nm.size(); ++b) {
    if (std::find(excluded_indices.begin(), excluded_indices.end(), b) == excluded_indices.end()) ++retained;
  }
  if (retained == 0) {
    throw data_error("band spec: every band is excluded");
  }
}

BandSpec default_target_bands() {
  return BandSpec{{424, 447, 492, 555, 621, 621, 666, 702, 741, 783, 867, 909},
                  {40, 40, 40, 40, 40, 40, 30, 24, 16, 16, 40, 20},
                  {5}};
}

BandSpec read_band_spec(const std::filesystem::path& path) {
  const auto doc = detail::read_json(path);
  BandSpec spec{detail::field<std::vector<double>>(doc, "centers_nm", path),
                detail::field<std::vector<double>>(doc, "widths_nm", path),
                doc.contains("excluded_indices")
                    ? detail::field<std::vector<std::size_t>>(doc, "excluded_indices", path)
                    : std::vector<std::size_t>{}};
  spec.validate();
  return spec;
}

void write_band_spec(const BandSpec& spec, const std::filesystem::path& path) {
  detail::write_json(path, {{"centers_nm", spec.centers_nm},
                            {"widths_nm", spec.widths_nm},
                            {"excluded_indices", spec.excluded_indices}});
}

SpectralCube aggregate_spatial(const SpectralCube& cube, const AggregationSpec& spec) {
  check_factor(cube.rows(), cube.cols(), spec.factor);
  const std::size_t f = spec.factor;
  const std::size_t rows = cube.rows() / f;
  const std::size_t cols = cube.cols() / f;
  const double inv = 1.0 / static_cast<double>(f * f);
  std::vector<double> values(rows * cols * cube.bands());
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < f; ++i) {
          for (std::size_t j = 0; j < f; ++j) acc += cube.at(r * f + i, c * f + j, b);
        }
        values[(b * rows + r) * cols + c] = acc * inv;
      }
    }
  }
  return SpectralCube(rows, cols, cube.band_centers(), cube.band_widths(), std::move(values));
}

SpectralCube resample_spectral(const SpectralCube& cube, const BandSpec& spec) {
  spec.validate();
  const auto& src = cube.band_centers();
  std::vector<double> centers;
  std::vector<double> widths;
  std::vector<std::vector<std::size_t>> sources;
  for (std::size_t t = 0; t < spec.centers_nm.size(); ++t) {
    const double center = spec.centers_nm[t];
    if (center < src.front() || center > src.back()) {
      throw data_error("resample: target center " + std::to_string(center) + " nm outside source range [" +
                       std::to_string(src.front()) + ", " + std::to_string(src.back()) + "] nm");
    }
    if (std::find(spec.excluded_indices.begin(), spec.excluded_indices.end(), t) != spec.excluded_indices.end()) {
      continue;
    }
    const double half = spec.widths_nm[t] / 2.0;
    std::vector<std::size_t> inside;
    for (std::size_t b = 0; b < src.size(); ++b) {
      if (std::abs(src[b] - center) <= half) inside.push_back(b);
    }
    if (inside.empty()) {
      std::size_t nearest = 0;
      for (std::size_t b = 1; b < src.size(); ++b) {
        if (std::abs(src[b] - center) < std::abs(src[nearest] - center)) nearest = b;
      }
      inside.push_back(nearest);
    }
    centers.push_back(center);
    widths.push_back(spec.widths_nm[t]);
    sources.push_back(std::move(inside));
  }
  // Retained centers become the output cube's band grid.
  for (std::size_t i = 1; i < centers.size(); ++i) {
    if (!(centers[i] > centers[i - 1])) {
      throw data_error("resample: retained target centers must be strictly increasing (duplicate at " +
                       std::to_string(centers[i]) + " nm)");
    }
  }
  const std::size_t n = cube.pixel_count();
  std::vector<double> values(n * centers.size());
  for (std::size_t t = 0; t < centers.size(); ++t) {
    const double inv = 1.0 / static_cast<double>(sources[t].size());
    for (std::size_t p = 0; p < n; ++p) {
      double acc = 0.0;
      for (std::size_t b : sources[t]) acc += cube.band(b)[p];
      values[t * n + p] = acc * inv;
    }
  }
  return SpectralCube(cube.rows(), cube.cols(), std::move(centers), std::move(widths), std::move(values));
}

FractionMap aggregate_fractions(const FractionMap& fractions, const AggregationSpec& spec) {
  check_factor(fractions.rows(), fractions.cols(), spec.factor);
  const std::size_t f = spec.factor;
  const std::size_t d = fractions.endmembers();
  const std::size_t rows = fractions.rows() / f;
  const std::size_t cols = fractions.cols() / f;
  const double inv = 1.0 / static_cast<double>(f * f);
  std::vector<double> values(rows * cols * d, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double* out = &values[(r * cols + c) * d];
      for (std::size_t i = 0; i < f; ++i) {
        for (std::size_t j = 0; j < f; ++j) {
          const auto px = fractions.pixel(r * f + i, c * f + j);
          for (std::size_t k = 0; k < d; ++k) out[k] += px[k];
        }
      }
      for (std::size_t k = 0; k < d; ++k) out[k] = std::max(0.0, out[k] * inv);
    }
  }
  return FractionMap(rows, cols, d, std::move(values), fractions.names());
}

LabelMap synthesize_labels(const FractionMap& fractions, const std::vector<std::string>& palette_names) {
  const std::size_t d = fractions.endmembers();
  if (palette_names.size() != d) {
    throw data_error("synthesize_labels: " + std::to_string(palette_names.size()) + " names for " +
                     std::to_string(d) + " endmembers");
  }
  if (d > 256) throw data_error("synthesize_labels: more than 256 classes");
  std::vector<std::uint8_t> labels(fractions.rows() * fractions.cols());
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const auto px = fractions.values().subspan(p * d, d);
    std::size_t best = 0;
    for (std::size_t k = 1; k < d; ++k) {
      if (px[k] > px[best]) best = k;
    }
    labels[p] = static_cast<std::uint8_t>(best);
  }
  return LabelMap(fractions.rows(), fractions.cols(), std::move(labels), make_palette(palette_names));
}

}  // namespace specgt::resolution
