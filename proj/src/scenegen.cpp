#include "specgt/scenegen.hpp"

#include <cmath>

#include "binary_io.hpp"
#include "specgt/error.hpp"
#include "specgt/rng.hpp"
#include "specgt/unmixing.hpp"

namespace specgt::scenegen {
namespace {

// Mixing contrast of the fraction fields: v = kFieldOffset + kFieldScale * z.
constexpr double kFieldOffset = 0.5;
constexpr double kFieldScale = 0.5;

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

std::size_t reflect(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  if (len == 1) return 0;
  const long period = 2 * (len - 1);
  long j = i % period;
  if (j < 0) j += period;
  return static_cast<std::size_t>(j < len ? j : period - j);
}

// Separable blur with reflected borders, rescaled so white noise keeps unit variance.
std::vector<double> smooth_field(std::vector<double> field, std::size_t rows, std::size_t cols, double sigma) {
  if (sigma <= 0.0) return field;
  const auto k = gaussian_kernel(sigma);
  const long radius = static_cast<long>(k.size() / 2);
  double k2 = 0.0;
  for (double v : k) k2 += v * v;
  std::vector<double> tmp(field.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (long i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * field[r * cols + reflect(static_cast<long>(c) + i, cols)];
      }
      tmp[r * cols + c] = acc;
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (long i = -radius; i <= radius; ++i) {
        acc += k[static_cast<std::size_t>(i + radius)] * tmp[reflect(static_cast<long>(r) + i, rows) * cols + c];
      }
      field[r * cols + c] = acc / k2;  // variance of the 2-D blur is k2^2
    }
  }
  return field;
}

}  // namespace

void SceneSpec::validate() const {
  if (rows == 0 || cols == 0) throw data_error("scene spec: rows and cols must be positive");
  if (!(smoothness >= 0.0) || !std::isfinite(smoothness)) throw data_error("scene spec: smoothness must be >= 0");
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw data_error("scene spec: noise_sigma must be >= 0");
  if (snr_db && !std::isfinite(*snr_db)) throw data_error("scene spec: snr_db must be finite");
}

EndmemberLibrary default_library(double min_pairwise_angle) {
  constexpr std::size_t kBands = 41;
  std::vector<double> centers(kBands);
  for (std::size_t b = 0; b < kBands; ++b) centers[b] = 400.0 + 50.0 * static_cast<double>(b);
  std::vector<double> widths(kBands, 5.0);

  auto bump = [](double x, double c, double w) { return std::exp(-0.5 * ((x - c) / w) * ((x - c) / w)); };
  auto step = [](double x, double c, double w) { return 1.0 / (1.0 + std::exp(-(x - c) / w)); };
  auto water = [&](double x) { return 1.0 - 0.5 * bump(x, 1450, 60) - 0.6 * bump(x, 1950, 70); };

  const std::vector<std::string> names = {"Brown Soil", "Light Soil",  "Rock",
                                          "Tall Tree/Shrub", "Dwarf Shrub", "Herbaceous",
                                          "Dense Shrub/Burned Area"};
  Eigen::MatrixXd spectra(static_cast<Eigen::Index>(kBands), static_cast<Eigen::Index>(names.size()));
  for (std::size_t b = 0; b < kBands; ++b) {
    const double x = centers[b];
    const auto row = static_cast<Eigen::Index>(b);
    spectra(row, 0) = 0.05 + 0.30 * bump(x, 640, 70) + 0.20 * step(x, 1100, 150) * water(x);
    spectra(row, 1) = 0.10 + 0.35 * bump(x, 520, 60) + 0.25 * bump(x, 2150, 150);
    spectra(row, 2) = 0.08 + 0.30 * bump(x, 430, 50) + 0.20 * bump(x, 1250, 150);
    spectra(row, 3) = 0.03 + 0.45 * step(x, 715, 20) * (1.0 - 0.6 * step(x, 1300, 100)) * water(x);
    spectra(row, 4) = 0.04 + 0.30 * bump(x, 590, 50) + 0.25 * bump(x, 800, 60) + 0.15 * bump(x, 1650, 150);
    spectra(row, 5) = 0.03 + 0.40 * bump(x, 880, 50) + 0.15 * bump(x, 1800, 200) * water(x);
    spectra(row, 6) = 0.03 + 0.25 * bump(x, 740, 40) + 0.25 * bump(x, 2350, 150);
  }
  for (Eigen::Index i = 0; i < spectra.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < spectra.cols(); ++j) {
      const double angle = unmixing::sam(spectra.col(i), spectra.col(j));
      if (angle < min_pairwise_angle) {
        throw data_error("default library: endmembers '" + names[static_cast<std::size_t>(i)] + "' and '" +
                         names[static_cast<std::size_t>(j)] + "' are only " + std::to_string(angle) + " rad apart");
      }
    }
  }
  return EndmemberLibrary(names, std::move(centers), std::move(widths), std::move(spectra));
}

FractionMap generate_fraction_field(const SceneSpec& spec) {
  spec.validate();
  const std::size_t d = spec.endmembers.count();
  const std::size_t n = spec.rows * spec.cols;
  std::vector<std::vector<double>> fields(d);
  for (std::size_t k = 0; k < d; ++k) {
    Rng rng(Rng::derive_seed(spec.seed, "fractions/" + std::to_string(k)));
    std::vector<double> white(n);
    for (double& v : white) v = rng.normal();
    fields[k] = smooth_field(std::move(white), spec.rows, spec.cols, spec.smoothness);
  }
  std::vector<double> fractions(n * d);
  Eigen::VectorXd v(static_cast<Eigen::Index>(d));
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t k = 0; k < d; ++k) v[static_cast<Eigen::Index>(k)] = kFieldOffset + kFieldScale * fields[k][p];
    const Eigen::VectorXd f = unmixing::project_feasible(v);
    for (std::size_t k = 0; k < d; ++k) fractions[p * d + k] = f[static_cast<Eigen::Index>(k)];
  }
  return FractionMap(spec.rows, spec.cols, d, std::move(fractions), spec.endmembers.names());
}

SpectralCube render_scene(const FractionMap& fractions, const EndmemberLibrary& E, double noise_sigma,
                          std::uint64_t seed) {
  if (fractions.endmembers() != E.count()) {
    throw data_error("render_scene: fraction map has " + std::to_string(fractions.endmembers()) +
                     " endmembers but library has " + std::to_string(E.count()));
  }
  if (!(noise_sigma >= 0.0)) throw data_error("render_scene: noise_sigma must be >= 0");
  const std::size_t rows = fractions.rows();
  const std::size_t cols = fractions.cols();
  const std::size_t bands = E.bands();
  const std::size_t d = E.count();
  std::vector<double> values(rows * cols * bands);
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t p = 0; p < rows * cols; ++p) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        acc += E.spectra()(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) * fractions.values()[p * d + k];
      }
      values[b * rows * cols + p] = acc;
    }
  }
  if (noise_sigma > 0.0) {
    Rng rng(Rng::derive_seed(seed, "noise"));
    for (double& v : values) v += noise_sigma * rng.normal();
  }
  return SpectralCube(rows, cols, E.band_centers(), E.band_widths(), std::move(values));
}

double noise_sigma_for_snr(const SpectralCube& clean, double snr_db) {
  double power = 0.0;
  for (double v : clean.values()) power += v * v;
  power /= static_cast<double>(clean.values().size());
  return std::sqrt(power / std::pow(10.0, snr_db / 10.0));
}

Scene generate_scene(const SceneSpec& spec) {
  FractionMap fractions = generate_fraction_field(spec);
  double sigma = spec.noise_sigma;
  if (spec.snr_db) sigma = noise_sigma_for_snr(render_scene(fractions, spec.endmembers, 0.0, spec.seed), *spec.snr_db);
  SpectralCube cube = render_scene(fractions, spec.endmembers, sigma, spec.seed);
  return Scene{std::move(fractions), std::move(cube), sigma};
}

SceneSpec read_scene_spec(const std::filesystem::path& path) {
  const auto doc = detail::read_json(path);
  auto library = default_library();
  if (doc.contains("endmembers") && !doc["endmembers"].is_null()) {
    std::filesystem::path csv = detail::field<std::string>(doc, "endmembers", path);
    if (csv.is_relative()) csv = path.parent_path() / csv;
    library = read_endmembers(csv);
  }
  SceneSpec spec{detail::field<std::size_t>(doc, "rows", path),
                 detail::field<std::size_t>(doc, "cols", path),
                 std::move(library),
                 doc.contains("smoothness") ? detail::field<double>(doc, "smoothness", path) : 0.0,
                 doc.contains("noise_sigma") ? detail::field<double>(doc, "noise_sigma", path) : 0.0,
                 doc.contains("seed") ? detail::field<std::uint64_t>(doc, "seed", path) : 0,
                 std::nullopt};
  if (doc.contains("snr_db") && !doc["snr_db"].is_null()) spec.snr_db = detail::field<double>(doc, "snr_db", path);
  spec.validate();
  return spec;
}

}  // namespace specgt::scenegen
