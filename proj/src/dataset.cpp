#include "specgt/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "binary_io.hpp"
#include "specgt/error.hpp"

namespace specgt::dataset {
namespace {

constexpr int kManifestVersion = 1;

template <typename T>
void shuffle_in_place(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(items[i - 1], items[j]);
  }
}

std::vector<std::string> class_names_of(const LabelMap& labels) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < labels.palette().size(); ++k) {
    if (labels.sentinel() && *labels.sentinel() == k) continue;
    names.push_back(labels.palette()[k].name);
  }
  return names;
}

}  // namespace

// ---------------------------------------------------------------------------
// Standardization

BandStats compute_band_stats(std::span<const SpectralCube* const> cubes) {
  if (cubes.empty()) throw data_error("band stats: no cubes");
  const std::size_t bands = cubes.front()->bands();
  BandStats stats{std::vector<double>(bands, 0.0), std::vector<double>(bands, 0.0)};
  for (std::size_t b = 0; b < bands; ++b) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const SpectralCube* cube : cubes) {
      if (cube->bands() != bands) throw data_error("band stats: cubes disagree on band count");
      for (double v : cube->band(b)) sum += v;
      count += cube->pixel_count();
    }
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (const SpectralCube* cube : cubes) {
      for (double v : cube->band(b)) ss += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(count));
    if (!(sd > 0.0)) throw data_error("standardize: band " + std::to_string(b) + " has zero variance");
    stats.mean[b] = mean;
    stats.std[b] = sd;
  }
  return stats;
}

BandStats compute_band_stats(const SpectralCube& cube) {
  const SpectralCube* one[] = {&cube};
  return compute_band_stats(one);
}

SpectralCube apply_standardization(const SpectralCube& cube, const BandStats& stats) {
  if (stats.bands() != cube.bands() || stats.std.size() != cube.bands()) {
    throw data_error("standardize: statistics cover " + std::to_string(stats.bands()) + " bands, cube has " +
                     std::to_string(cube.bands()));
  }
  std::vector<double> values(cube.values().begin(), cube.values().end());
  const std::size_t n = cube.pixel_count();
  for (std::size_t b = 0; b < cube.bands(); ++b) {
    if (!(stats.std[b] > 0.0)) throw data_error("standardize: non-positive std for band " + std::to_string(b));
    for (std::size_t p = 0; p < n; ++p) values[b * n + p] = (values[b * n + p] - stats.mean[b]) / stats.std[b];
  }
  return SpectralCube(cube.rows(), cube.cols(), cube.band_centers(), cube.band_widths(), std::move(values));
}

std::pair<SpectralCube, BandStats> standardize(const SpectralCube& cube) {
  BandStats stats = compute_band_stats(cube);
  return {apply_standardization(cube, stats), std::move(stats)};
}

// ---------------------------------------------------------------------------
// Patches

void PatchDataset::validate() const {
  if (class_count == 0 || class_count > 256) throw data_error("dataset: class_count must be in [1, 256]");
  if (!class_names.empty() && class_names.size() != class_count) {
    throw data_error("dataset: class_names length differs from class_count");
  }
  if (!band_stats.mean.empty()) {
    if (band_stats.mean.size() != bands || band_stats.std.size() != bands) {
      throw data_error("dataset: band_stats do not match band count");
    }
    for (double s : band_stats.std) {
      if (!(s > 0.0)) throw data_error("dataset: band_stats std entries must be positive");
    }
  }
  for (const Patch& p : patches) {
    if (p.size != patch_size || p.bands != bands || p.values.size() != patch_size * patch_size * bands) {
      throw data_error("dataset: patch dimensions disagree with the dataset");
    }
    if (p.label >= class_count) throw data_error("dataset: patch label " + std::to_string(p.label) + " out of range");
  }
}

std::vector<std::size_t> PatchDataset::class_histogram() const {
  std::vector<std::size_t> hist(class_count, 0);
  for (const Patch& p : patches) ++hist[p.label];
  return hist;
}

PatchDataset extract_patches(const SpectralCube& cube, const LabelMap& labels, std::size_t patch_size,
                             std::size_t image_id) {
  if (patch_size == 0 || patch_size % 2 == 0) {
    throw usage_error("patch size must be odd, got " + std::to_string(patch_size));
  }
  if (cube.rows() != labels.rows() || cube.cols() != labels.cols()) {
    throw data_error("extract_patches: cube is " + std::to_string(cube.rows()) + "x" + std::to_string(cube.cols()) +
                     " but labels are " + std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()));
  }
  if (patch_size > cube.rows() || patch_size > cube.cols()) {
    throw data_error("extract_patches: patch size " + std::to_string(patch_size) + " exceeds image size");
  }
  PatchDataset ds;
  ds.patch_size = patch_size;
  ds.bands = cube.bands();
  ds.class_names = class_names_of(labels);
  ds.class_count = ds.class_names.size();
  const std::size_t half = patch_size / 2;
  for (std::size_t r = half; r + half < cube.rows(); ++r) {
    for (std::size_t c = half; c + half < cube.cols(); ++c) {
      const std::uint8_t label = labels.at(r, c);
      if (labels.sentinel() && label == *labels.sentinel()) continue;
      Patch p;
      p.size = patch_size;
      p.bands = cube.bands();
      p.label = (labels.sentinel() && label > *labels.sentinel()) ? static_cast<std::uint8_t>(label - 1) : label;
      p.source = {image_id, r, c};
      p.values.resize(patch_size * patch_size * cube.bands());
      for (std::size_t i = 0; i < patch_size; ++i) {
        for (std::size_t j = 0; j < patch_size; ++j) {
          for (std::size_t b = 0; b < cube.bands(); ++b) {
            p.values[(i * patch_size + j) * cube.bands() + b] = cube.at(r - half + i, c - half + j, b);
          }
        }
      }
      ds.patches.push_back(std::move(p));
    }
  }
  return ds;
}

Patch augment(const Patch& patch, const AugmentationOp& op, Rng& rng) {
  if (op.kind == AugmentKind::gaussian_noise) {
    if (!(op.noise_sigma >= 0.0)) throw usage_error("augment: noise_sigma must be >= 0");
    Patch out = patch;
    for (double& v : out.values) v += op.noise_sigma * rng.normal();
    return out;
  }
  if (op.kind == AugmentKind::identity) return patch;
  const std::size_t n = patch.size;
  const std::size_t bands = patch.bands;
  Patch out = patch;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      std::size_t sr = r;
      std::size_t sc = c;
      switch (op.kind) {
        case AugmentKind::flip_h: sc = n - 1 - c; break;
        case AugmentKind::flip_v: sr = n - 1 - r; break;
        case AugmentKind::rot90: sr = c; sc = n - 1 - r; break;  // counter-clockwise
        case AugmentKind::rot180: sr = n - 1 - r; sc = n - 1 - c; break;
        case AugmentKind::rot270: sr = n - 1 - c; sc = r; break;
        default: break;
      }
      std::copy_n(patch.values.begin() + static_cast<std::ptrdiff_t>((sr * n + sc) * bands), bands,
                  out.values.begin() + static_cast<std::ptrdiff_t>((r * n + c) * bands));
    }
  }
  return out;
}

std::vector<EpochItem> plan_balanced_epoch(const PatchDataset& ds, std::size_t per_label, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(ds.class_count);
  for (std::size_t i = 0; i < ds.patches.size(); ++i) by_class.at(ds.patches[i].label).push_back(i);
  std::string missing;
  for (std::size_t k = 0; k < ds.class_count; ++k) {
    if (by_class[k].empty()) {
      if (!missing.empty()) missing += ", ";
      missing += std::to_string(k);
      if (k < ds.class_names.size()) missing += " (" + ds.class_names[k] + ")";
    }
  }
  if (!missing.empty()) throw data_error("balanced_epoch: no base patches for classes " + missing);

  std::vector<EpochItem> items;
  items.reserve(per_label * ds.class_count);
  for (std::size_t k = 0; k < ds.class_count; ++k) {
    for (std::size_t i = 0; i < per_label; ++i) {
      EpochItem item;
      item.base = by_class[k][rng.uniform_index(by_class[k].size())];
      const auto kind = static_cast<AugmentKind>(rng.uniform_index(kAugmentKinds));
      if (kind == AugmentKind::gaussian_noise) {
        item.spatial = AugmentKind::identity;
        item.add_noise = true;
      } else {
        item.spatial = kind;
        item.add_noise = rng.bernoulli(0.5);
      }
      item.noise_seed = rng.next_u64();
      items.push_back(item);
    }
  }
  shuffle_in_place(items, rng);
  return items;
}

Patch materialize(const PatchDataset& ds, const EpochItem& item, double noise_sigma) {
  Rng rng(item.noise_seed);
  Patch p = augment(ds.patches.at(item.base), {item.spatial, noise_sigma}, rng);
  if (item.add_noise) p = augment(p, {AugmentKind::gaussian_noise, noise_sigma}, rng);
  return p;
}

std::vector<Patch> balanced_epoch(const PatchDataset& ds, std::size_t per_label, Rng& rng, double noise_sigma) {
  const auto plan = plan_balanced_epoch(ds, per_label, rng);
  std::vector<Patch> out;
  out.reserve(plan.size());
  for (const auto& item : plan) out.push_back(materialize(ds, item, noise_sigma));
  return out;
}

// ---------------------------------------------------------------------------
// Leave-one-image-out

namespace {

// test == images.size() means no held-out image.
LoioSplit split_images(std::span<const LabeledImage> images, std::size_t test, double train_fraction,
                       std::uint64_t seed, std::size_t patch_size) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw usage_error("split: train_fraction must be in (0, 1)");
  }
  std::vector<const SpectralCube*> training_cubes;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (i != test) training_cubes.push_back(&images[i].cube);
  }
  const BandStats stats = compute_band_stats(training_cubes);

  LoioSplit split;
  std::vector<Patch> pool;
  for (std::size_t i = 0; i < images.size(); ++i) {
    PatchDataset ds = extract_patches(apply_standardization(images[i].cube, stats), images[i].labels, patch_size, i);
    ds.band_stats = stats;
    if (i == test) {
      split.test = std::move(ds);
      continue;
    }
    if (split.train.class_count == 0) {
      split.train.patch_size = ds.patch_size;
      split.train.bands = ds.bands;
      split.train.class_count = ds.class_count;
      split.train.class_names = ds.class_names;
      split.train.band_stats = stats;
    } else if (ds.class_count != split.train.class_count || ds.bands != split.train.bands) {
      throw data_error("split: image " + std::to_string(i) + " disagrees on class or band count");
    }
    std::move(ds.patches.begin(), ds.patches.end(), std::back_inserter(pool));
  }
  if (test < images.size() &&
      (split.test.class_count != split.train.class_count || split.test.bands != split.train.bands)) {
    throw data_error("split: test image disagrees on class or band count");
  }
  Rng rng(Rng::derive_seed(seed, "split"));
  shuffle_in_place(pool, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(pool.size())));
  split.validation = split.train;
  split.train.patches.assign(std::make_move_iterator(pool.begin()),
                             std::make_move_iterator(pool.begin() + static_cast<std::ptrdiff_t>(n_train)));
  split.validation.patches.assign(std::make_move_iterator(pool.begin() + static_cast<std::ptrdiff_t>(n_train)),
                                  std::make_move_iterator(pool.end()));
  return split;
}

}  // namespace

LoioSplit split_loio(std::span<const LabeledImage> images, const SplitPlan& plan, std::size_t patch_size) {
  if (images.size() < 2) throw usage_error("split_loio: need at least 2 images");
  if (plan.test_image >= images.size()) {
    throw usage_error("split_loio: test index " + std::to_string(plan.test_image) + " out of range for " +
                      std::to_string(images.size()) + " images");
  }
  return split_images(images, plan.test_image, plan.train_fraction, plan.seed, patch_size);
}

LoioSplit split_pooled(std::span<const LabeledImage> images, double train_fraction, std::uint64_t seed,
                       std::size_t patch_size) {
  if (images.empty()) throw usage_error("split_pooled: need at least 1 image");
  return split_images(images, images.size(), train_fraction, seed, patch_size);
}

// ---------------------------------------------------------------------------
// Persistence

void write_dataset(const PatchDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  const std::size_t per_patch = ds.patch_size * ds.patch_size * ds.bands;
  std::vector<double> values;
  values.reserve(ds.patches.size() * per_patch);
  nlohmann::json labels = nlohmann::json::array();
  nlohmann::json sources = nlohmann::json::array();
  for (const Patch& p : ds.patches) {
    values.insert(values.end(), p.values.begin(), p.values.end());
    labels.push_back(p.label);
    sources.push_back({p.source.image, p.source.row, p.source.col});
  }
  nlohmann::json doc = {{"version", kManifestVersion},
                        {"kind", "patches"},
                        {"dtype", "f64le"},
                        {"layout", "patch,row,col,band"},
                        {"patch_size", ds.patch_size},
                        {"bands", ds.bands},
                        {"class_count", ds.class_count},
                        {"class_names", ds.class_names},
                        {"band_stats", {{"mean", ds.band_stats.mean}, {"std", ds.band_stats.std}}},
                        {"count", ds.patches.size()},
                        {"labels", labels},
                        {"sources", sources}};
  detail::write_f64le(with_suffix(path, ".bin"), values);
  detail::write_json(with_suffix(path, ".json"), doc);
}

PatchDataset read_dataset(const std::filesystem::path& path) {
  const auto json_path = with_suffix(path, ".json");
  const auto doc = detail::read_json(json_path);
  if (detail::field<int>(doc, "version", json_path) != kManifestVersion ||
      detail::field<std::string>(doc, "kind", json_path) != "patches") {
    throw data_error("'" + json_path.string() + "': not a version-1 patch manifest");
  }
  PatchDataset ds;
  ds.patch_size = detail::field<std::size_t>(doc, "patch_size", json_path);
  ds.bands = detail::field<std::size_t>(doc, "bands", json_path);
  ds.class_count = detail::field<std::size_t>(doc, "class_count", json_path);
  ds.class_names = detail::field<std::vector<std::string>>(doc, "class_names", json_path);
  const auto stats = detail::field<nlohmann::json>(doc, "band_stats", json_path);
  ds.band_stats.mean = detail::field<std::vector<double>>(stats, "mean", json_path);
  ds.band_stats.std = detail::field<std::vector<double>>(stats, "std", json_path);
  const auto count = detail::field<std::size_t>(doc, "count", json_path);
  const auto labels = detail::field<std::vector<std::size_t>>(doc, "labels", json_path);
  const auto sources = detail::field<nlohmann::json>(doc, "sources", json_path);
  if (labels.size() != count || !sources.is_array() || sources.size() != count) {
    throw data_error("'" + json_path.string() + "': labels/sources length differs from count");
  }
  const std::size_t per_patch = ds.patch_size * ds.patch_size * ds.bands;
  const auto values = detail::read_f64le(with_suffix(path, ".bin"), count * per_patch);
  detail::require_finite(values, "'" + with_suffix(path, ".bin").string() + "'");
  ds.patches.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Patch& p = ds.patches[i];
    p.size = ds.patch_size;
    p.bands = ds.bands;
    if (labels[i] > 255) throw data_error("'" + json_path.string() + "': label out of range");
    p.label = static_cast<std::uint8_t>(labels[i]);
    try {
      p.source = {sources[i].at(0).get<std::size_t>(), sources[i].at(1).get<std::size_t>(),
                  sources[i].at(2).get<std::size_t>()};
    } catch (const nlohmann::json::exception& e) {
      throw data_error("'" + json_path.string() + "': bad source entry: " + e.what());
    }
    p.values.assign(values.begin() + static_cast<std::ptrdiff_t>(i * per_patch),
                    values.begin() + static_cast<std::ptrdiff_t>((i + 1) * per_patch));
  }
  ds.validate();
  return ds;
}

}  // namespace specgt::dataset
