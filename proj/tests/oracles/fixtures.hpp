#pragma once

// Small synthetic inputs shared by the unit and acceptance tests.

#include <cstddef>
#include <string>
#include <vector>

#include "specgt/cube_io.hpp"
#include "specgt/dataset.hpp"
#include "specgt/rng.hpp"

namespace fixture {

inline std::vector<std::string> class_names(std::size_t classes) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < classes; ++k) out.push_back("class" + std::to_string(k));
  return out;
}

/// Uniform random cube with bands at 500, 510, ... nm.
inline specgt::SpectralCube random_cube(specgt::Rng& rng, std::size_t rows, std::size_t cols, std::size_t bands) {
  std::vector<double> centers, widths(bands, 10.0), values(rows * cols * bands);
  for (std::size_t b = 0; b < bands; ++b) centers.push_back(500.0 + 10.0 * static_cast<double>(b));
  for (double& v : values) v = rng.uniform();
  return specgt::SpectralCube(rows, cols, centers, widths, values);
}

/// Random cube with labels cycling through every class, so each class is present.
inline specgt::dataset::LabeledImage labeled_image(specgt::Rng& rng, std::size_t rows, std::size_t cols,
                                                   std::size_t bands, std::size_t classes) {
  std::vector<std::uint8_t> labels(rows * cols);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(rng.uniform_index(classes));
  for (std::size_t k = 0; k < classes && k < labels.size(); ++k) labels[k] = static_cast<std::uint8_t>(k);
  return {random_cube(rng, rows, cols, bands),
          specgt::LabelMap(rows, cols, labels, specgt::make_palette(class_names(classes)))};
}

}  // namespace fixture
