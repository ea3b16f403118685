#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace specgt {

/// Lower bound on each fraction and upper bound slack on the fraction sum.
inline constexpr double kFractionLowerTol = -1e-12;
inline constexpr double kFractionSumTol = 1e-9;

/// rows x cols x bands reflectance raster, stored band-sequential:
/// value(r, c, b) lives at (b * rows + r) * cols + c.
class SpectralCube {
 public:
  SpectralCube(std::size_t rows, std::size_t cols, std::vector<double> band_centers,
               std::vector<double> band_widths, std::vector<double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t bands() const noexcept { return centers_.size(); }
  std::size_t pixel_count() const noexcept { return rows_ * cols_; }

  const std::vector<double>& band_centers() const noexcept { return centers_; }
  const std::vector<double>& band_widths() const noexcept { return widths_; }
  std::span<const double> values() const noexcept { return values_; }

  std::size_t index(std::size_t r, std::size_t c, std::size_t b) const noexcept {
    return (b * rows_ + r) * cols_ + c;
  }
  double at(std::size_t r, std::size_t c, std::size_t b) const noexcept {
    return values_[index(r, c, b)];
  }
  std::span<const double> band(std::size_t b) const noexcept {
    return std::span<const double>(values_).subspan(b * rows_ * cols_, rows_ * cols_);
  }
  Eigen::VectorXd pixel(std::size_t r, std::size_t c) const;

  bool operator==(const SpectralCube&) const = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> centers_;
  std::vector<double> widths_;
  std::vector<double> values_;
};

/// d named endmember spectra over a shared band grid; spectra() is bands x d.
class EndmemberLibrary {
 public:
  EndmemberLibrary(std::vector<std::string> names, std::vector<double> band_centers,
                   std::vector<double> band_widths, Eigen::MatrixXd spectra);

  std::size_t count() const noexcept { return names_.size(); }
  std::size_t bands() const noexcept { return centers_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<double>& band_centers() const noexcept { return centers_; }
  const std::vector<double>& band_widths() const noexcept { return widths_; }
  const Eigen::MatrixXd& spectra() const noexcept { return spectra_; }

 private:
  std::vector<std::string> names_;
  std::vector<double> centers_;
  std::vector<double> widths_;
  Eigen::MatrixXd spectra_;
};

/// rows x cols x d abundances, pixel-major: fraction(r, c, k) at (r * cols + c) * d + k.
/// Every pixel satisfies f >= -1e-12 and sum(f) <= 1 + 1e-9.
class FractionMap {
 public:
  FractionMap(std::size_t rows, std::size_t cols, std::size_t endmembers, std::vector<double> fractions,
              std::vector<std::string> names = {});

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t endmembers() const noexcept { return d_; }
  const std::vector<std::string>& names() const noexcept { return names_; }
  std::span<const double> values() const noexcept { return values_; }

  std::span<const double> pixel(std::size_t r, std::size_t c) const noexcept {
    return std::span<const double>(values_).subspan((r * cols_ + c) * d_, d_);
  }
  double at(std::size_t r, std::size_t c, std::size_t k) const noexcept {
    return values_[(r * cols_ + c) * d_ + k];
  }

  bool operator==(const FractionMap&) const = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::size_t d_;
  std::vector<double> values_;
  std::vector<std::string> names_;
};

using Rgb = std::array<std::uint8_t, 3>;

struct PaletteEntry {
  std::string name;
  Rgb color{};
  bool operator==(const PaletteEntry&) const = default;
};

/// Class-index raster. When `sentinel` is set, that palette entry marks pixels
/// without a prediction (e.g. image borders) and is not a class.
class LabelMap {
 public:
  LabelMap(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> labels,
           std::vector<PaletteEntry> palette, std::optional<std::uint8_t> sentinel = std::nullopt);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<const std::uint8_t> labels() const noexcept { return labels_; }
  const std::vector<PaletteEntry>& palette() const noexcept { return palette_; }
  std::optional<std::uint8_t> sentinel() const noexcept { return sentinel_; }
  std::size_t class_count() const noexcept { return palette_.size() - (sentinel_ ? 1 : 0); }

  std::uint8_t at(std::size_t r, std::size_t c) const noexcept { return labels_[r * cols_ + c]; }

  bool operator==(const LabelMap&) const = default;

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<std::uint8_t> labels_;
  std::vector<PaletteEntry> palette_;
  std::optional<std::uint8_t> sentinel_;
};

/// Distinct colors for up to 16 classes; used when no palette is supplied.
Rgb default_class_color(std::size_t index);
std::vector<PaletteEntry> make_palette(const std::vector<std::string>& names);

// Cube files: <path>.json header + <path>.bin (f64 little-endian, band-sequential).
void write_cube(const SpectralCube& cube, const std::filesystem::path& path);
SpectralCube read_cube(const std::filesystem::path& path);

// Fraction maps reuse the cube layout with one plane per endmember.
void write_fraction_map(const FractionMap& map, const std::filesystem::path& path);
FractionMap read_fraction_map(const std::filesystem::path& path);

/// CSV with header `wavelength_nm[,width_nm],<name1>,...,<nameD>`, one row per band.
EndmemberLibrary read_endmembers(const std::filesystem::path& path);
void write_endmembers(const EndmemberLibrary& library, const std::filesystem::path& path);

// Label maps: <path>.labels.bin (u8 row-major) + <path>.labels.json palette.
void write_label_map(const LabelMap& map, const std::filesystem::path& path);
LabelMap read_label_map(const std::filesystem::path& path);

/// 8-bit RGB PNG with pixel color = palette[label].
void render_label_map(const LabelMap& map, const std::filesystem::path& png_path);

/// Appends `suffix` to the final path component ("out/a" + ".json" -> "out/a.json").
std::filesystem::path with_suffix(const std::filesystem::path& path, const std::string& suffix);

}  // namespace specgt
