#include "specgt/cube_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <png.h>

#include "binary_io.hpp"
#include "specgt/error.hpp"

namespace specgt {
namespace {

constexpr int kFormatVersion = 1;

void check_band_grid(const std::vector<double>& centers, const std::vector<double>& widths,
                     const std::string& what) {
  if (centers.empty()) throw data_error(what + ": at least one band is required");
  if (centers.size() != widths.size()) {
    throw data_error(what + ": " + std::to_string(centers.size()) + " band centers but " +
                     std::to_string(widths.size()) + " band widths");
  }
  for (std::size_t b = 0; b < centers.size(); ++b) {
    if (!std::isfinite(centers[b]) || !std::isfinite(widths[b]) || widths[b] <= 0.0) {
      throw data_error(what + ": band " + std::to_string(b) + " has invalid center/width");
    }
    if (b > 0 && !(centers[b] > centers[b - 1])) {
      throw data_error(what + ": band centers must be strictly increasing (band " + std::to_string(b) + ")");
    }
  }
}

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(const std::string& token, const std::filesystem::path& source, std::size_t line) {
  double value = 0.0;
  const char* begin = token.data();
  const char* end = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw data_error("'" + source.string() + "' line " + std::to_string(line) + ": bad number '" + token + "'");
  }
  return value;
}

nlohmann::json raster_header(std::size_t rows, std::size_t cols, const std::vector<double>& centers,
                             const std::vector<double>& widths) {
  return {{"version", kFormatVersion},
          {"rows", rows},
          {"cols", cols},
          {"bands", centers.size()},
          {"band_centers_nm", centers},
          {"band_widths_nm", widths},
          {"dtype", "f64le"},
          {"order", "bsq"}};
}

struct RasterHeader {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t bands = 0;
  nlohmann::json doc;
};

RasterHeader read_raster_header(const std::filesystem::path& json_path) {
  RasterHeader h;
  h.doc = detail::read_json(json_path);
  const int version = detail::field<int>(h.doc, "version", json_path);
  if (version != kFormatVersion) {
    throw data_error("'" + json_path.string() + "': unsupported format version " + std::to_string(version));
  }
  if (detail::field<std::string>(h.doc, "dtype", json_path) != "f64le") {
    throw data_error("'" + json_path.string() + "': dtype must be \"f64le\"");
  }
  if (detail::field<std::string>(h.doc, "order", json_path) != "bsq") {
    throw data_error("'" + json_path.string() + "': order must be \"bsq\"");
  }
  h.rows = detail::field<std::size_t>(h.doc, "rows", json_path);
  h.cols = detail::field<std::size_t>(h.doc, "cols", json_path);
  h.bands = detail::field<std::size_t>(h.doc, "bands", json_path);
  return h;
}

}  // namespace

std::filesystem::path with_suffix(const std::filesystem::path& path, const std::string& suffix) {
  std::filesystem::path out = path;
  out += suffix;
  return out;
}

// ---------------------------------------------------------------------------
// SpectralCube

SpectralCube::SpectralCube(std::size_t rows, std::size_t cols, std::vector<double> band_centers,
                           std::vector<double> band_widths, std::vector<double> values)
    : rows_(rows),
      cols_(cols),
      centers_(std::move(band_centers)),
      widths_(std::move(band_widths)),
      values_(std::move(values)) {
  if (rows_ == 0 || cols_ == 0) throw data_error("cube: rows and cols must be positive");
  check_band_grid(centers_, widths_, "cube");
  const std::size_t expected = rows_ * cols_ * centers_.size();
  if (values_.size() != expected) {
    throw data_error("cube: rows*cols*bands = " + std::to_string(expected) + " but " +
                     std::to_string(values_.size()) + " values supplied");
  }
  detail::require_finite(values_, "cube");
}

Eigen::VectorXd SpectralCube::pixel(std::size_t r, std::size_t c) const {
  Eigen::VectorXd m(static_cast<Eigen::Index>(bands()));
  for (std::size_t b = 0; b < bands(); ++b) m[static_cast<Eigen::Index>(b)] = at(r, c, b);
  return m;
}

void write_cube(const SpectralCube& cube, const std::filesystem::path& path) {
  detail::write_f64le(with_suffix(path, ".bin"), cube.values());
  detail::write_json(with_suffix(path, ".json"),
                     raster_header(cube.rows(), cube.cols(), cube.band_centers(), cube.band_widths()));
}

SpectralCube read_cube(const std::filesystem::path& path) {
  const auto json_path = with_suffix(path, ".json");
  const RasterHeader h = read_raster_header(json_path);
  auto centers = detail::field<std::vector<double>>(h.doc, "band_centers_nm", json_path);
  auto widths = detail::field<std::vector<double>>(h.doc, "band_widths_nm", json_path);
  if (centers.size() != h.bands || widths.size() != h.bands) {
    throw data_error("'" + json_path.string() + "': bands=" + std::to_string(h.bands) + " but " +
                     std::to_string(centers.size()) + " band centers and " + std::to_string(widths.size()) +
                     " band widths");
  }
  auto values = detail::read_f64le(with_suffix(path, ".bin"), h.rows * h.cols * h.bands);
  detail::require_finite(values, "'" + with_suffix(path, ".bin").string() + "'");
  return SpectralCube(h.rows, h.cols, std::move(centers), std::move(widths), std::move(values));
}

// ---------------------------------------------------------------------------
// EndmemberLibrary

EndmemberLibrary::EndmemberLibrary(std::vector<std::string> names, std::vector<double> band_centers,
                                   std::vector<double> band_widths, Eigen::MatrixXd spectra)
    : names_(std::move(names)),
      centers_(std::move(band_centers)),
      widths_(std::move(band_widths)),
      spectra_(std::move(spectra)) {
  if (names_.empty()) throw data_error("endmember library: at least one endmember is required");
  check_band_grid(centers_, widths_, "endmember library");
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw data_error("endmember library: empty endmember name");
    if (!seen.insert(n).second) throw data_error("endmember library: duplicate endmember name '" + n + "'");
  }
  if (static_cast<std::size_t>(spectra_.rows()) != centers_.size() ||
      static_cast<std::size_t>(spectra_.cols()) != names_.size()) {
    throw data_error("endmember library: spectra matrix must be bands x endmembers");
  }
  if (!spectra_.allFinite()) throw data_error("endmember library: non-finite reflectance");
  for (Eigen::Index k = 0; k < spectra_.cols(); ++k) {
    if (spectra_.col(k).norm() == 0.0) {
      throw data_error("endmember library: spectrum '" + names_[static_cast<std::size_t>(k)] + "' has zero norm");
    }
  }
}

EndmemberLibrary read_endmembers(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw data_error("'" + path.string() + "': empty endmember file");
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "wavelength_nm") {
    throw data_error("'" + path.string() + "': first column must be 'wavelength_nm'");
  }
  const bool has_width = header.size() > 1 && header[1] == "width_nm";
  const std::size_t first_em = has_width ? 2 : 1;
  if (header.size() <= first_em) throw data_error("'" + path.string() + "': no endmember columns");
  std::vector<std::string> names(header.begin() + static_cast<std::ptrdiff_t>(first_em), header.end());
  {
    std::set<std::string> seen;
    for (const auto& n : names) {
      if (!seen.insert(n).second) throw data_error("'" + path.string() + "': duplicate endmember name '" + n + "'");
    }
  }

  std::vector<double> centers;
  std::vector<double> widths;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw data_error("'" + path.string() + "' line " + std::to_string(line_no) + ": expected " +
                       std::to_string(header.size()) + " columns, found " + std::to_string(cells.size()));
    }
    centers.push_back(parse_double(cells[0], path, line_no));
    if (has_width) widths.push_back(parse_double(cells[1], path, line_no));
    std::vector<double> row;
    for (std::size_t j = first_em; j < cells.size(); ++j) row.push_back(parse_double(cells[j], path, line_no));
    rows.push_back(std::move(row));
  }
  if (centers.empty()) throw data_error("'" + path.string() + "': no spectral rows");
  for (std::size_t b = 1; b < centers.size(); ++b) {
    if (!(centers[b] > centers[b - 1])) {
      throw data_error("'" + path.string() + "': wavelengths must be strictly increasing (row " +
                       std::to_string(b + 1) + ")");
    }
  }
  if (!has_width) {
    // Without explicit widths, each band spans the smaller gap to a neighbor.
    widths.assign(centers.size(), 1.0);
    for (std::size_t b = 0; b < centers.size(); ++b) {
      double gap = std::numeric_limits<double>::infinity();
      if (b > 0) gap = std::min(gap, centers[b] - centers[b - 1]);
      if (b + 1 < centers.size()) gap = std::min(gap, centers[b + 1] - centers[b]);
      if (std::isfinite(gap)) widths[b] = gap;
    }
  }
  Eigen::MatrixXd spectra(static_cast<Eigen::Index>(centers.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t b = 0; b < rows.size(); ++b) {
    for (std::size_t k = 0; k < names.size(); ++k) {
      spectra(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k)) = rows[b][k];
    }
  }
  return EndmemberLibrary(std::move(names), std::move(centers), std::move(widths), std::move(spectra));
}

void write_endmembers(const EndmemberLibrary& library, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  out << "wavelength_nm,width_nm";
  for (const auto& n : library.names()) out << ',' << n;
  out << '\n';
  out.precision(17);
  for (std::size_t b = 0; b < library.bands(); ++b) {
    out << library.band_centers()[b] << ',' << library.band_widths()[b];
    for (std::size_t k = 0; k < library.count(); ++k) {
      out << ',' << library.spectra()(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k));
    }
    out << '\n';
  }
  if (!out) throw io_error("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// FractionMap

FractionMap::FractionMap(std::size_t rows, std::size_t cols, std::size_t endmembers, std::vector<double> fractions,
                         std::vector<std::string> names)
    : rows_(rows), cols_(cols), d_(endmembers), values_(std::move(fractions)), names_(std::move(names)) {
  if (d_ == 0) throw data_error("fraction map: endmember count must be positive");
  if (values_.size() != rows_ * cols_ * d_) {
    throw data_error("fraction map: expected " + std::to_string(rows_ * cols_ * d_) + " values, got " +
                     std::to_string(values_.size()));
  }
  if (!names_.empty() && names_.size() != d_) {
    throw data_error("fraction map: " + std::to_string(names_.size()) + " names for " + std::to_string(d_) +
                     " endmembers");
  }
  for (std::size_t p = 0; p < rows_ * cols_; ++p) {
    double sum = 0.0;
    for (std::size_t k = 0; k < d_; ++k) {
      const double f = values_[p * d_ + k];
      if (!std::isfinite(f) || f < kFractionLowerTol) {
        throw data_error("fraction map: pixel " + std::to_string(p) + " has infeasible fraction " +
                         std::to_string(f));
      }
      sum += f;
    }
    if (sum > 1.0 + kFractionSumTol) {
      throw data_error("fraction map: pixel " + std::to_string(p) + " fractions sum to " + std::to_string(sum));
    }
  }
}

void write_fraction_map(const FractionMap& map, const std::filesystem::path& path) {
  const std::size_t d = map.endmembers();
  const std::size_t n = map.rows() * map.cols();
  std::vector<double> planes(n * d);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t k = 0; k < d; ++k) planes[k * n + p] = map.values()[p * d + k];
  }
  std::vector<double> centers(d);
  for (std::size_t k = 0; k < d; ++k) centers[k] = static_cast<double>(k);
  auto header = raster_header(map.rows(), map.cols(), centers, std::vector<double>(d, 1.0));
  header["kind"] = "fractions";
  header["endmembers"] = map.names();
  detail::write_f64le(with_suffix(path, ".bin"), planes);
  detail::write_json(with_suffix(path, ".json"), header);
}

FractionMap read_fraction_map(const std::filesystem::path& path) {
  const auto json_path = with_suffix(path, ".json");
  const RasterHeader h = read_raster_header(json_path);
  if (!h.doc.contains("kind") || h.doc["kind"] != "fractions") {
    throw data_error("'" + json_path.string() + "': not a fraction map (kind != \"fractions\")");
  }
  auto names = detail::field<std::vector<std::string>>(h.doc, "endmembers", json_path);
  const std::size_t n = h.rows * h.cols;
  const auto planes = detail::read_f64le(with_suffix(path, ".bin"), n * h.bands);
  std::vector<double> values(n * h.bands);
  for (std::size_t k = 0; k < h.bands; ++k) {
    for (std::size_t p = 0; p < n; ++p) values[p * h.bands + k] = planes[k * n + p];
  }
  return FractionMap(h.rows, h.cols, h.bands, std::move(values), std::move(names));
}

// ---------------------------------------------------------------------------
// LabelMap

LabelMap::LabelMap(std::size_t rows, std::size_t cols, std::vector<std::uint8_t> labels,
                   std::vector<PaletteEntry> palette, std::optional<std::uint8_t> sentinel)
    : rows_(rows), cols_(cols), labels_(std::move(labels)), palette_(std::move(palette)), sentinel_(sentinel) {
  if (labels_.size() != rows_ * cols_) {
    throw data_error("label map: expected " + std::to_string(rows_ * cols_) + " labels, got " +
                     std::to_string(labels_.size()));
  }
  if (palette_.size() > 256) throw data_error("label map: palette exceeds 256 entries");
  if (sentinel_ && *sentinel_ >= palette_.size()) {
    throw data_error("label map: sentinel " + std::to_string(*sentinel_) + " outside palette");
  }
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] >= palette_.size()) {
      throw data_error("label map: label " + std::to_string(labels_[i]) + " at pixel " + std::to_string(i) +
                       " but palette has " + std::to_string(palette_.size()) + " entries");
    }
  }
}

Rgb default_class_color(std::size_t index) {
  static constexpr std::array<Rgb, 16> kColors = {{{140, 90, 50},
                                                   {230, 210, 160},
                                                   {128, 128, 128},
                                                   {20, 100, 30},
                                                   {120, 170, 60},
                                                   {200, 230, 90},
                                                   {60, 40, 40},
                                                   {40, 90, 200},
                                                   {220, 60, 60},
                                                   {240, 160, 40},
                                                   {150, 60, 180},
                                                   {60, 200, 200},
                                                   {250, 250, 250},
                                                   {100, 100, 30},
                                                   {30, 30, 100},
                                                   {200, 120, 160}}};
  return kColors[index % kColors.size()];
}

std::vector<PaletteEntry> make_palette(const std::vector<std::string>& names) {
  std::vector<PaletteEntry> palette;
  palette.reserve(names.size());
  for (std::size_t k = 0; k < names.size(); ++k) palette.push_back({names[k], default_class_color(k)});
  return palette;
}

void write_label_map(const LabelMap& map, const std::filesystem::path& path) {
  nlohmann::json palette = nlohmann::json::array();
  for (const auto& e : map.palette()) {
    palette.push_back({{"name", e.name}, {"rgb", {e.color[0], e.color[1], e.color[2]}}});
  }
  nlohmann::json doc = {{"version", kFormatVersion},
                        {"rows", map.rows()},
                        {"cols", map.cols()},
                        {"dtype", "u8"},
                        {"order", "row-major"},
                        {"palette", palette}};
  doc["sentinel"] = map.sentinel() ? nlohmann::json(*map.sentinel()) : nlohmann::json(nullptr);
  detail::write_bytes(with_suffix(path, ".labels.bin"), map.labels());
  detail::write_json(with_suffix(path, ".labels.json"), doc);
}

LabelMap read_label_map(const std::filesystem::path& path) {
  const auto json_path = with_suffix(path, ".labels.json");
  const auto doc = detail::read_json(json_path);
  const int version = detail::field<int>(doc, "version", json_path);
  if (version != kFormatVersion) {
    throw data_error("'" + json_path.string() + "': unsupported format version " + std::to_string(version));
  }
  if (detail::field<std::string>(doc, "dtype", json_path) != "u8") {
    throw data_error("'" + json_path.string() + "': dtype must be \"u8\"");
  }
  const auto rows = detail::field<std::size_t>(doc, "rows", json_path);
  const auto cols = detail::field<std::size_t>(doc, "cols", json_path);
  std::vector<PaletteEntry> palette;
  try {
    for (const auto& e : doc.at("palette")) {
      const auto rgb = e.at("rgb").get<std::array<int, 3>>();
      PaletteEntry entry{e.at("name").get<std::string>(), {}};
      for (int i = 0; i < 3; ++i) {
        if (rgb[i] < 0 || rgb[i] > 255) throw data_error("'" + json_path.string() + "': rgb out of range");
        entry.color[i] = static_cast<std::uint8_t>(rgb[i]);
      }
      palette.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error("'" + json_path.string() + "': bad palette: " + e.what());
  }
  std::optional<std::uint8_t> sentinel;
  if (doc.contains("sentinel") && !doc["sentinel"].is_null()) {
    sentinel = static_cast<std::uint8_t>(detail::field<int>(doc, "sentinel", json_path));
  }
  auto labels = detail::read_bytes(with_suffix(path, ".labels.bin"), rows * cols);
  return LabelMap(rows, cols, std::move(labels), std::move(palette), sentinel);
}

// ---------------------------------------------------------------------------
// PNG rendering

void render_label_map(const LabelMap& map, const std::filesystem::path& png_path) {
  if (map.rows() == 0 || map.cols() == 0) throw data_error("render: cannot render an empty label map");
  std::FILE* fp = std::fopen(png_path.c_str(), "wb");
  if (!fp) throw io_error("cannot open '" + png_path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("libpng initialization failed");
  }
  std::vector<png_byte> row(map.cols() * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw io_error("PNG encoding failed for '" + png_path.string() + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(map.cols()), static_cast<png_uint_32>(map.rows()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < map.rows(); ++r) {
    for (std::size_t c = 0; c < map.cols(); ++c) {
      const Rgb& color = map.palette()[map.at(r, c)].color;
      std::copy(color.begin(), color.end(), row.begin() + static_cast<std::ptrdiff_t>(3 * c));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw io_error("write failed for '" + png_path.string() + "'");
}

}  // namespace specgt
