#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "oracles/oracles.hpp"
#include "specgt/error.hpp"
#include "specgt/resolution.hpp"
#include "specgt/rng.hpp"
#include "specgt/unmixing.hpp"

using namespace specgt;
using namespace specgt::resolution;

namespace {

SpectralCube random_cube(Rng& rng, std::size_t rows, std::size_t cols, std::vector<double> centers) {
  std::vector<double> widths(centers.size(), 5.0);
  std::vector<double> values(rows * cols * centers.size());
  for (double& v : values) v = rng.uniform();
  return SpectralCube(rows, cols, centers, widths, values);
}

FractionMap random_fractions(Rng& rng, std::size_t rows, std::size_t cols, std::size_t d) {
  std::vector<double> values;
  values.reserve(rows * cols * d);
  for (std::size_t p = 0; p < rows * cols; ++p) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(d));
    for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = 0.01 + 1.25 * rng.uniform();
    const Eigen::VectorXd f = unmixing::project_feasible(v);
    values.insert(values.end(), f.data(), f.data() + f.size());
  }
  return FractionMap(rows, cols, d, values);
}

std::vector<std::string> names(std::size_t d) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < d; ++k) out.push_back("c" + std::to_string(k));
  return out;
}

}  // namespace

TEST_CASE("aggregate_spatial") {
  Rng rng(1);
  SUBCASE("constant block") {
    SpectralCube cube(5, 5, {500.0}, {10.0}, std::vector<double>(25, 0.2));
    const auto out = aggregate_spatial(cube, {5, Reducer::mean});
    REQUIRE(out.rows() == 1);
    CHECK(std::abs(out.at(0, 0, 0) - 0.2) < 1e-15);
  }
  SUBCASE("factor 1 is the identity") {
    const auto cube = random_cube(rng, 4, 3, {500.0, 510.0});
    CHECK(aggregate_spatial(cube, {1, Reducer::mean}) == cube);
  }
  SUBCASE("10x10 against a naive double loop, and mean preservation") {
    const auto cube = random_cube(rng, 10, 10, {500.0, 510.0, 520.0});
    const auto out = aggregate_spatial(cube, {5, Reducer::mean});
    REQUIRE(out.rows() == 2);
    REQUIRE(out.cols() == 2);
    for (std::size_t b = 0; b < 3; ++b) {
      double in_mean = 0.0, out_mean = 0.0;
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 2; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 5; ++j) s += cube.at(5 * r + i, 5 * c + j, b);
          CHECK(std::abs(out.at(r, c, b) - s / 25.0) < 1e-14);
          out_mean += out.at(r, c, b) / 4.0;
        }
      for (double v : cube.band(b)) in_mean += v / 100.0;
      CHECK(std::abs(in_mean - out_mean) < 1e-12);
    }
  }
  SUBCASE("remainder rows and cols are dropped") {
    const auto cube = random_cube(rng, 12, 7, {500.0});
    const auto out = aggregate_spatial(cube, {5, Reducer::mean});
    CHECK(out.rows() == 2);
    CHECK(out.cols() == 1);
  }
  SUBCASE("factor larger than the image") {
    const auto cube = random_cube(rng, 3, 3, {500.0});
    CHECK_THROWS_AS(aggregate_spatial(cube, {5, Reducer::mean}), Error);
  }
}

TEST_CASE("resample_spectral") {
  Rng rng(2);
  SUBCASE("identical grid is the identity") {
    const auto cube = random_cube(rng, 3, 3, {500.0, 505.0, 510.0});
    BandSpec spec{cube.band_centers(), cube.band_widths(), {}};
    CHECK(resample_spectral(cube, spec) == cube);
  }
  SUBCASE("window covering three source bands") {
    const auto cube = random_cube(rng, 2, 2, {400.0, 405.0, 410.0});
    const auto out = resample_spectral(cube, BandSpec{{405.0}, {10.0}, {}});
    REQUIRE(out.bands() == 1);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) {
        const double mean = (cube.at(r, c, 0) + cube.at(r, c, 1) + cube.at(r, c, 2)) / 3.0;
        CHECK(std::abs(out.at(r, c, 0) - mean) < 1e-15);
      }
  }
  SUBCASE("empty window falls back to the nearest band") {
    const auto cube = random_cube(rng, 1, 1, {400.0, 420.0});
    const auto out = resample_spectral(cube, BandSpec{{414.0}, {2.0}, {}});
    CHECK(out.at(0, 0, 0) == cube.at(0, 0, 1));
  }
  SUBCASE("default grid drops its excluded band") {
    const auto spec = default_target_bands();
    CHECK(spec.centers_nm.size() == 12);
    REQUIRE(spec.excluded_indices.size() == 1);
    CHECK(spec.excluded_indices[0] == 5);
    std::vector<double> centers;
    for (double w = 400.0; w <= 2400.0; w += 50.0) centers.push_back(w);
    const auto cube = random_cube(rng, 2, 2, centers);
    CHECK(resample_spectral(cube, spec).bands() == 11);
  }
  SUBCASE("target outside the source range") {
    const auto cube = random_cube(rng, 1, 1, {500.0, 600.0});
    CHECK_THROWS_AS(resample_spectral(cube, BandSpec{{700.0}, {10.0}, {}}), Error);
  }
}

TEST_CASE("aggregate_fractions") {
  SUBCASE("pure block") {
    std::vector<double> v;
    for (int i = 0; i < 25; ++i) v.insert(v.end(), {1.0, 0.0});
    const auto out = aggregate_fractions(FractionMap(5, 5, 2, v), {5, Reducer::mean});
    CHECK(out.at(0, 0, 0) == 1.0);
    CHECK(out.at(0, 0, 1) == 0.0);
  }
  SUBCASE("two pixels") {
    const auto out = aggregate_fractions(FractionMap(2, 2, 2, {1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0}), {2, Reducer::mean});
    CHECK(std::abs(out.at(0, 0, 0) - 0.5) < 1e-15);
    CHECK(std::abs(out.at(0, 0, 1) - 0.5) < 1e-15);
  }
  SUBCASE("outputs stay feasible over 1000 random maps") {
    Rng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
      const auto fm = random_fractions(rng, 4, 4, 1 + rng.uniform_index(7));
      const auto out = aggregate_fractions(fm, {2, Reducer::mean});
      for (std::size_t p = 0; p < 4; ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < out.endmembers(); ++k) {
          CHECK(out.values()[p * out.endmembers() + k] >= 0.0);
          s += out.values()[p * out.endmembers() + k];
        }
        CHECK(s <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("synthesize_labels") {
  SUBCASE("argmax and ties") {
    const auto labels = synthesize_labels(FractionMap(1, 2, 3, {0.1, 0.7, 0.2, 0.4, 0.4, 0.2}), names(3));
    CHECK(labels.at(0, 0) == 1);
    CHECK(labels.at(0, 1) == 0);
    const auto tie = synthesize_labels(FractionMap(1, 1, 2, {0.5, 0.5}), names(2));
    CHECK(tie.at(0, 0) == 0);
  }
  SUBCASE("matches the naive oracle and is permutation equivariant") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t d = 2 + rng.uniform_index(6);
      const auto fm = random_fractions(rng, 10, 10, d);
      const auto labels = synthesize_labels(fm, names(d));
      const auto expected = oracle::naive_argmax({fm.values().begin(), fm.values().end()}, d);
      CHECK(std::equal(labels.labels().begin(), labels.labels().end(), expected.begin()));

      std::vector<std::size_t> perm(d);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = d - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
      std::vector<double> permuted(fm.values().size());
      for (std::size_t p = 0; p < 100; ++p)
        for (std::size_t k = 0; k < d; ++k) permuted[p * d + perm[k]] = fm.values()[p * d + k];
      const auto plabels = synthesize_labels(FractionMap(10, 10, d, permuted), names(d));
      for (std::size_t p = 0; p < 100; ++p) CHECK(plabels.labels()[p] == perm[labels.labels()[p]]);
    }
  }
  SUBCASE("sum and mean block reducers give the same labels") {
    Rng rng(5);
    const auto fm = random_fractions(rng, 10, 10, 4);
    const auto mean_labels = synthesize_labels(aggregate_fractions(fm, {5, Reducer::mean}), names(4));
    auto sums = oracle::naive_block_mean(fm, 5);
    for (double& v : sums) v *= 25.0;
    CHECK(std::equal(mean_labels.labels().begin(), mean_labels.labels().end(), oracle::naive_argmax(sums, 4).begin()));
  }
}

TEST_CASE("band spec validation") {
  CHECK_THROWS_AS((BandSpec{{500.0}, {10.0, 5.0}, {}}.validate()), Error);
  CHECK_THROWS_AS((BandSpec{{500.0}, {10.0}, {3}}.validate()), Error);
}
