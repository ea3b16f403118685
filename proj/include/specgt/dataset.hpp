#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "specgt/cube_io.hpp"
#include "specgt/rng.hpp"

namespace specgt::dataset {

/// Per-band mean and population standard deviation.
struct BandStats {
  std::vector<double> mean;
  std::vector<double> std;

  std::size_t bands() const noexcept { return mean.size(); }
  bool operator==(const BandStats&) const = default;
};

/// Pooled statistics over every pixel of every cube. Throws on a zero-variance band.
BandStats compute_band_stats(std::span<const SpectralCube* const> cubes);
BandStats compute_band_stats(const SpectralCube& cube);

/// (x - mean) / std per band.
SpectralCube apply_standardization(const SpectralCube& cube, const BandStats& stats);
std::pair<SpectralCube, BandStats> standardize(const SpectralCube& cube);

struct PatchSource {
  std::size_t image = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  bool operator==(const PatchSource&) const = default;
};

/// size x size x bands window, stored (row, col, band) with band fastest.
struct Patch {
  std::size_t size = 0;
  std::size_t bands = 0;
  std::vector<double> values;
  std::uint8_t label = 0;
  PatchSource source;

  double at(std::size_t r, std::size_t c, std::size_t b) const noexcept {
    return values[(r * size + c) * bands + b];
  }
  bool operator==(const Patch&) const = default;
};

struct PatchDataset {
  std::size_t patch_size = 0;
  std::size_t bands = 0;
  std::size_t class_count = 0;
  std::vector<std::string> class_names;
  BandStats band_stats;
  std::vector<Patch> patches;

  /// Throws when patches disagree on dims, labels exceed class_count, or a std is not positive.
  void validate() const;
  std::vector<std::size_t> class_histogram() const;
  bool operator==(const PatchDataset&) const = default;
};

/// One patch per pixel whose full window fits inside the image, labeled by its center pixel.
PatchDataset extract_patches(const SpectralCube& cube, const LabelMap& labels, std::size_t patch_size,
                             std::size_t image_id = 0);

enum class AugmentKind { identity, flip_h, flip_v, rot90, rot180, rot270, gaussian_noise };
inline constexpr std::size_t kAugmentKinds = 7;

struct AugmentationOp {
  AugmentKind kind = AugmentKind::identity;
  double noise_sigma = 0.1;
};

Patch augment(const Patch& patch, const AugmentationOp& op, Rng& rng);

/// Recipe for one balanced-epoch sample; materialize() turns it into a patch.
struct EpochItem {
  std::size_t base = 0;
  AugmentKind spatial = AugmentKind::identity;
  bool add_noise = false;
  std::uint64_t noise_seed = 0;
};

/// per_label recipes for every class, in shuffled order. Each draws a base patch
/// uniformly within its class and one of the seven operations uniformly; a
/// spatial operation gets Gaussian noise composed after it with probability 0.5.
std::vector<EpochItem> plan_balanced_epoch(const PatchDataset& ds, std::size_t per_label, Rng& rng);
Patch materialize(const PatchDataset& ds, const EpochItem& item, double noise_sigma = 0.1);
std::vector<Patch> balanced_epoch(const PatchDataset& ds, std::size_t per_label, Rng& rng,
                                  double noise_sigma = 0.1);

struct LabeledImage {
  SpectralCube cube;
  LabelMap labels;
};

struct SplitPlan {
  std::size_t test_image = 0;
  double train_fraction = 0.9;
  std::uint64_t seed = 0;
};

struct LoioSplit {
  PatchDataset train;
  PatchDataset validation;
  PatchDataset test;
};

/// Leave-one-image-out split. Band statistics come from the non-test images and
/// are applied to all of them; the non-test patches are pooled, shuffled and cut
/// train_fraction / (1 - train_fraction). Neighbouring train and validation
/// patches overlap spatially.
LoioSplit split_loio(std::span<const LabeledImage> images, const SplitPlan& plan, std::size_t patch_size = 5);

/// Same as split_loio with no held-out image; `test` stays empty.
LoioSplit split_pooled(std::span<const LabeledImage> images, double train_fraction, std::uint64_t seed,
                       std::size_t patch_size = 5);

// <path>.bin holds all patch values (f64 little-endian); <path>.json is the manifest.
void write_dataset(const PatchDataset& ds, const std::filesystem::path& path);
PatchDataset read_dataset(const std::filesystem::path& path);

}  // namespace specgt::dataset
