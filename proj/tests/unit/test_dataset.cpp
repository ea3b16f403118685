#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>
#include <vector>

#include <doctest.h>

#include "oracles/fixtures.hpp"
#include "specgt/dataset.hpp"
#include "specgt/error.hpp"
#include "unit/tmpdir.hpp"

using namespace specgt;
using namespace specgt::dataset;

namespace {

Patch ramp_patch(std::size_t size, std::size_t bands) {
  Patch p;
  p.size = size;
  p.bands = bands;
  p.label = 3;
  for (std::size_t i = 0; i < size * size * bands; ++i) p.values.push_back(static_cast<double>(i));
  return p;
}

Patch apply(const Patch& p, AugmentKind kind) {
  Rng rng(0);
  return augment(p, {kind, 0.1}, rng);
}

using SourceKey = std::tuple<std::size_t, std::size_t, std::size_t>;
SourceKey key(const Patch& p) { return {p.source.image, p.source.row, p.source.col}; }

}  // namespace

TEST_CASE("standardize") {
  SUBCASE("three-value band") {
    SpectralCube cube(1, 3, {500.0}, {10.0}, {1.0, 2.0, 3.0});
    const auto [out, stats] = standardize(cube);
    CHECK(stats.mean[0] == 2.0);
    CHECK(std::abs(stats.std[0] - std::sqrt(2.0 / 3.0)) < 1e-15);
    CHECK(std::abs(out.values()[0] + 1.2247) < 1e-4);
    CHECK(std::abs(out.values()[1]) < 1e-15);
    CHECK(std::abs(out.values()[2] - 1.2247) < 1e-4);
  }
  SUBCASE("moments and idempotence") {
    Rng rng(1);
    const auto cube = fixture::random_cube(rng, 20, 30, 4);
    const auto [once, stats] = standardize(cube);
    for (std::size_t b = 0; b < 4; ++b) {
      double mean = 0.0, sq = 0.0;
      for (double v : once.band(b)) mean += v;
      mean /= 600.0;
      for (double v : once.band(b)) sq += (v - mean) * (v - mean);
      CHECK(std::abs(mean) < 1e-9);
      CHECK(std::abs(std::sqrt(sq / 600.0) - 1.0) < 1e-9);
    }
    const auto [twice, stats2] = standardize(once);
    for (std::size_t i = 0; i < once.values().size(); ++i) CHECK(std::abs(twice.values()[i] - once.values()[i]) < 1e-9);
  }
  SUBCASE("constant band") {
    SpectralCube cube(1, 3, {500.0, 510.0}, {10.0, 10.0}, {1.0, 2.0, 3.0, 4.0, 4.0, 4.0});
    try {
      standardize(cube);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("band 1") != std::string::npos);
    }
  }
}

TEST_CASE("extract_patches") {
  Rng rng(2);
  SUBCASE("5x5 image gives one centred patch") {
    const auto img = fixture::labeled_image(rng, 5, 5, 3, 2);
    const auto ds = extract_patches(img.cube, img.labels, 5);
    REQUIRE(ds.patches.size() == 1);
    CHECK(ds.patches[0].source.row == 2);
    CHECK(ds.patches[0].source.col == 2);
    CHECK(ds.patches[0].label == img.labels.at(2, 2));
  }
  SUBCASE("7x7 image gives 9 patches matching a naive window read") {
    const auto img = fixture::labeled_image(rng, 7, 7, 3, 4);
    const auto ds = extract_patches(img.cube, img.labels, 5);
    REQUIRE(ds.patches.size() == 9);
    for (const auto& p : ds.patches) {
      CHECK(p.label == img.labels.at(p.source.row, p.source.col));
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j)
          for (std::size_t b = 0; b < 3; ++b)
            CHECK(p.at(i, j, b) == img.cube.at(p.source.row - 2 + i, p.source.col - 2 + j, b));
    }
  }
  SUBCASE("errors") {
    const auto img = fixture::labeled_image(rng, 7, 7, 3, 2);
    CHECK_THROWS_AS(extract_patches(img.cube, img.labels, 4), Error);
    CHECK_THROWS_AS(extract_patches(img.cube, img.labels, 9), Error);
  }
}

TEST_CASE("augmentation group laws") {
  const Patch p = ramp_patch(5, 3);
  CHECK(apply(apply(apply(apply(p, AugmentKind::rot90), AugmentKind::rot90), AugmentKind::rot90),
              AugmentKind::rot90) == p);
  CHECK(apply(apply(p, AugmentKind::flip_h), AugmentKind::flip_h) == p);
  CHECK(apply(apply(p, AugmentKind::flip_v), AugmentKind::flip_v) == p);
  CHECK(apply(apply(p, AugmentKind::rot90), AugmentKind::rot90) == apply(p, AugmentKind::rot180));
  CHECK(apply(apply(p, AugmentKind::rot90), AugmentKind::rot180) == apply(p, AugmentKind::rot270));
  CHECK(apply(p, AugmentKind::identity) == p);
  for (auto kind : {AugmentKind::flip_h, AugmentKind::flip_v, AugmentKind::rot90, AugmentKind::rot180,
                    AugmentKind::rot270}) {
    const Patch q = apply(p, kind);
    CHECK(q.label == p.label);
    auto a = p.values, b = q.values;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
    CHECK(q != p);
  }
  // rot90 turns the top row into the left column (counter-clockwise).
  const Patch r = apply(p, AugmentKind::rot90);
  CHECK(r.at(4, 0, 0) == p.at(0, 0, 0));
  CHECK(r.at(0, 0, 1) == p.at(0, 4, 1));
}

TEST_CASE("gaussian noise augmentation moments") {
  Patch p;
  p.size = 1;
  p.bands = 100000;
  p.values.assign(100000, 0.5);
  Rng rng(77);
  const Patch q = augment(p, {AugmentKind::gaussian_noise, 0.1}, rng);
  double mean = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < q.values.size(); ++i) mean += q.values[i] - 0.5;
  mean /= 1e5;
  for (std::size_t i = 0; i < q.values.size(); ++i) sq += (q.values[i] - 0.5 - mean) * (q.values[i] - 0.5 - mean);
  CHECK(std::abs(mean) <= 0.002);
  CHECK(std::abs(std::sqrt(sq / 1e5) - 0.1) <= 0.003);
}

TEST_CASE("balanced epoch") {
  Rng data_rng(3);
  const auto img = fixture::labeled_image(data_rng, 12, 12, 2, 7);
  const auto ds = extract_patches(img.cube, img.labels, 3);
  SUBCASE("exact per-class counts") {
    Rng rng(4);
    const auto epoch = balanced_epoch(ds, 10, rng);
    CHECK(epoch.size() == 70);
    std::vector<std::size_t> hist(7, 0);
    for (const auto& p : epoch) hist.at(p.label)++;
    CHECK(hist == std::vector<std::size_t>(7, 10));
  }
  SUBCASE("full-scale plan size") {
    Rng rng(4);
    CHECK(plan_balanced_epoch(ds, 30000, rng).size() == 210000);
  }
  SUBCASE("determinism") {
    Rng a(5), b(5), c(6);
    const auto ea = balanced_epoch(ds, 10, a);
    CHECK(ea == balanced_epoch(ds, 10, b));
    CHECK(ea != balanced_epoch(ds, 10, c));
  }
  SUBCASE("missing class is named") {
    PatchDataset partial = ds;
    partial.patches.erase(std::remove_if(partial.patches.begin(), partial.patches.end(),
                                         [](const Patch& p) { return p.label == 4; }),
                          partial.patches.end());
    Rng rng(4);
    try {
      plan_balanced_epoch(partial, 5, rng);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("4 (class4)") != std::string::npos);
    }
  }
}

TEST_CASE("leave-one-image-out split") {
  Rng rng(6);
  std::vector<LabeledImage> images;
  for (int i = 0; i < 6; ++i) images.push_back(fixture::labeled_image(rng, 8, 8, 3, 3));
  SUBCASE("partition over every fold") {
    for (std::size_t t = 0; t < 6; ++t) {
      const auto split = split_loio(images, {t, 0.9, 42}, 5);
      std::set<SourceKey> seen;
      for (const auto& p : split.test.patches) {
        CHECK(p.source.image == t);
        CHECK(seen.insert(key(p)).second);
      }
      for (const auto* set : {&split.train, &split.validation})
        for (const auto& p : set->patches) {
          CHECK(p.source.image != t);
          CHECK(seen.insert(key(p)).second);
        }
      CHECK(seen.size() == 6 * 16);
      CHECK(split.train.patches.size() == static_cast<std::size_t>(std::llround(0.9 * 80)));
      CHECK(split_loio(images, {t, 0.9, 42}, 5).train == split.train);
    }
  }
  SUBCASE("two images of 100 patches") {
    Rng r2(7);
    std::vector<LabeledImage> two{fixture::labeled_image(r2, 14, 14, 2, 2), fixture::labeled_image(r2, 14, 14, 2, 2)};
    const auto split = split_loio(two, {1, 0.9, 1}, 5);
    CHECK(split.train.patches.size() == 90);
    CHECK(split.validation.patches.size() == 10);
    CHECK(split.test.patches.size() == 100);
  }
  SUBCASE("statistics come from the training images only") {
    const auto split = split_loio(images, {2, 0.9, 1}, 5);
    std::vector<const SpectralCube*> training;
    for (std::size_t i = 0; i < 6; ++i)
      if (i != 2) training.push_back(&images[i].cube);
    CHECK(split.train.band_stats == compute_band_stats(training));
    CHECK(split.test.band_stats == split.train.band_stats);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(split_loio(images, {6, 0.9, 1}, 5), Error);
    CHECK_THROWS_AS(split_loio(images, {0, 1.0, 1}, 5), Error);
    CHECK_THROWS_AS(split_loio(std::span(images).first(1), {0, 0.9, 1}, 5), Error);
  }
}

TEST_CASE("dataset file round trip") {
  auto dir = testutil::scratch_dir("dataset_rt");
  Rng rng(8);
  std::vector<LabeledImage> images{fixture::labeled_image(rng, 9, 9, 3, 3), fixture::labeled_image(rng, 9, 9, 3, 3)};
  const auto split = split_loio(images, {0, 0.8, 3}, 5);
  write_dataset(split.train, dir / "train");
  CHECK(read_dataset(dir / "train") == split.train);
  std::filesystem::resize_file(dir / "train.bin", 8);
  CHECK_THROWS_AS(read_dataset(dir / "train"), Error);
}
