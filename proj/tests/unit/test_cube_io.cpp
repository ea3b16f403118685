#include <cstdint>
#include <functional>
#include <limits>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>
#include <png.h>

#include "specgt/cube_io.hpp"
#include "specgt/error.hpp"
#include "unit/tmpdir.hpp"

using namespace specgt;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_png_rgb(const fs::path& path, std::uint32_t& width, std::uint32_t& height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  REQUIRE(png_image_begin_read_from_file(&image, path.string().c_str()) != 0);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  REQUIRE(png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr) != 0);
  width = image.width;
  height = image.height;
  return pixels;
}

int error_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return static_cast<int>(e.kind());
  }
  return -1;
}

}  // namespace

TEST_CASE("smallest cube writes 16 bytes and reads back") {
  auto dir = testutil::scratch_dir("cube_small");
  SpectralCube cube(1, 1, {500.0, 600.0}, {10.0, 10.0}, {0.5, 0.25});
  write_cube(cube, dir / "c");
  CHECK(fs::file_size(dir / "c.bin") == 16);
  CHECK(read_cube(dir / "c") == cube);
}

TEST_CASE("cube construction rejects a value count mismatch") {
  CHECK_THROWS_AS(SpectralCube(2, 2, {500.0}, {10.0}, {1.0, 2.0, 3.0}), Error);
}

TEST_CASE("truncated cube binary names expected and actual byte counts") {
  auto dir = testutil::scratch_dir("cube_trunc");
  SpectralCube cube(2, 2, {500.0}, {10.0}, {0.1, 0.2, 0.3, 0.4});
  write_cube(cube, dir / "c");
  fs::resize_file(dir / "c.bin", 20);
  try {
    read_cube(dir / "c");
    FAIL("expected a data error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
    const std::string msg = e.what();
    CHECK(msg.find("32") != std::string::npos);
    CHECK(msg.find("20") != std::string::npos);
  }
}

TEST_CASE("cube header band count must match the band centers") {
  auto dir = testutil::scratch_dir("cube_hdr");
  SpectralCube cube(1, 1, {500.0, 600.0}, {10.0, 10.0}, {0.5, 0.25});
  write_cube(cube, dir / "c");
  std::ifstream in(dir / "c.json");
  auto doc = nlohmann::json::parse(in);
  in.close();
  doc["bands"] = 3;
  std::ofstream(dir / "c.json") << doc.dump();
  CHECK(error_kind([&] { read_cube(dir / "c"); }) == static_cast<int>(ErrorKind::data));
}

TEST_CASE("non-finite cube value is rejected on read") {
  auto dir = testutil::scratch_dir("cube_nan");
  SpectralCube cube(1, 2, {500.0}, {10.0}, {0.5, 0.25});
  write_cube(cube, dir / "c");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::fstream f(dir / "c.bin", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(8);
  f.write(reinterpret_cast<const char*>(&nan), 8);
  f.close();
  CHECK(error_kind([&] { read_cube(dir / "c"); }) == static_cast<int>(ErrorKind::data));
}

TEST_CASE("missing cube is an i/o error naming the path") {
  auto dir = testutil::scratch_dir("cube_missing");
  try {
    read_cube(dir / "nope");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("nope") != std::string::npos);
  }
}

TEST_CASE("endmember CSV") {
  auto dir = testutil::scratch_dir("em_csv");
  SUBCASE("2 bands, 2 endmembers") {
    std::ofstream(dir / "e.csv") << "wavelength_nm,soil,leaf\n500,0.2,0.1\n600,0.3,0.5\n";
    auto lib = read_endmembers(dir / "e.csv");
    CHECK(lib.count() == 2);
    CHECK(lib.bands() == 2);
    CHECK(lib.spectra()(1, 1) == 0.5);
    write_endmembers(lib, dir / "f.csv");
    auto again = read_endmembers(dir / "f.csv");
    CHECK(again.spectra() == lib.spectra());
    CHECK(again.names() == lib.names());
  }
  SUBCASE("duplicate names") {
    std::ofstream(dir / "e.csv") << "wavelength_nm,soil,soil\n500,0.2,0.1\n600,0.3,0.5\n";
    CHECK(error_kind([&] { read_endmembers(dir / "e.csv"); }) == static_cast<int>(ErrorKind::data));
  }
}

TEST_CASE("fraction map rejects infeasible pixels and round-trips") {
  CHECK_THROWS_AS(FractionMap(1, 1, 2, {0.7, 0.7}), Error);
  CHECK_THROWS_AS(FractionMap(1, 1, 2, {-0.1, 0.5}), Error);
  auto dir = testutil::scratch_dir("fractions");
  FractionMap fm(1, 2, 2, {0.25, 0.75, 0.1, 0.3}, {"a", "b"});
  write_fraction_map(fm, dir / "f");
  CHECK(read_fraction_map(dir / "f") == fm);
}

TEST_CASE("label maps") {
  auto dir = testutil::scratch_dir("labels");
  const auto palette = make_palette({"a", "b", "c", "d", "e", "f", "g"});
  SUBCASE("round trip with sentinel") {
    auto pal = palette;
    pal.push_back({"unlabeled", {0, 0, 0}});
    LabelMap map(2, 3, {0, 1, 7, 3, 6, 2}, pal, std::uint8_t{7});
    write_label_map(map, dir / "m");
    CHECK(read_label_map(dir / "m") == map);
  }
  SUBCASE("label beyond the palette") {
    CHECK_THROWS_AS(LabelMap(1, 1, {7}, palette), Error);
  }
  SUBCASE("empty map") {
    LabelMap map(0, 0, {}, palette);
    write_label_map(map, dir / "m");
    CHECK(fs::file_size(dir / "m.labels.bin") == 0);
    CHECK(read_label_map(dir / "m") == map);
  }
}

TEST_CASE("render writes palette colors") {
  auto dir = testutil::scratch_dir("render");
  SUBCASE("single gray pixel") {
    LabelMap map(1, 1, {0}, {{"Rock", {128, 128, 128}}});
    render_label_map(map, dir / "r.png");
    std::uint32_t w = 0, h = 0;
    auto px = read_png_rgb(dir / "r.png", w, h);
    CHECK(w == 1);
    CHECK(h == 1);
    CHECK(px == std::vector<std::uint8_t>{128, 128, 128});
  }
  SUBCASE("uniform map is one color") {
    LabelMap map(3, 4, std::vector<std::uint8_t>(12, 1), make_palette({"a", "b"}));
    render_label_map(map, dir / "u.png");
    std::uint32_t w = 0, h = 0;
    auto px = read_png_rgb(dir / "u.png", w, h);
    CHECK(w == 4);
    CHECK(h == 3);
    const auto c = default_class_color(1);
    for (std::size_t i = 0; i < 12; ++i) {
      CHECK(px[3 * i] == c[0]);
      CHECK(px[3 * i + 1] == c[1]);
      CHECK(px[3 * i + 2] == c[2]);
    }
  }
}

TEST_CASE("with_suffix appends to the last component") {
  CHECK(with_suffix("out/a", ".json") == fs::path("out/a.json"));
  CHECK(with_suffix("a.b", ".bin") == fs::path("a.b.bin"));
}
