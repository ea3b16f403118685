#include "binary_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>

#include "specgt/error.hpp"

namespace specgt::detail {
namespace {

std::uint64_t to_le(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::little) {
    return x;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  return in;
}

void check_size(const std::filesystem::path& path, std::uintmax_t expected) {
  std::error_code ec;
  const auto actual = std::filesystem::file_size(path, ec);
  if (ec) throw io_error("cannot stat '" + path.string() + "': " + ec.message());
  if (actual != expected) {
    throw data_error("'" + path.string() + "': expected " + std::to_string(expected) + " bytes, found " +
                     std::to_string(actual));
  }
}

}  // namespace

void write_f64le(const std::filesystem::path& path, std::span<const double> values) {
  std::vector<std::uint64_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) words[i] = to_le(std::bit_cast<std::uint64_t>(values[i]));
  auto out = open_out(path);
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 8));
  if (!out) throw io_error("write failed for '" + path.string() + "'");
}

std::vector<double> read_f64le(const std::filesystem::path& path, std::size_t count) {
  auto in = open_in(path);
  check_size(path, static_cast<std::uintmax_t>(count) * 8);
  std::vector<std::uint64_t> words(count);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(count * 8));
  if (!in) throw io_error("read failed for '" + path.string() + "'");
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<double>(to_le(words[i]));
  return values;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto out = open_out(path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("write failed for '" + path.string() + "'");
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path, std::size_t count) {
  auto in = open_in(path);
  check_size(path, count);
  std::vector<std::uint8_t> bytes(count);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
  if (!in && count > 0) throw io_error("read failed for '" + path.string() + "'");
  return bytes;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot open '" + path.string() + "' for writing");
  out << std::setw(2) << doc << '\n';
  if (!out) throw io_error("write failed for '" + path.string() + "'");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw data_error("'" + path.string() + "': malformed JSON: " + e.what());
  }
}

template <typename T>
T field(const nlohmann::json& doc, const char* key, const std::filesystem::path& source) {
  if (!doc.is_object() || !doc.contains(key)) {
    throw data_error("'" + source.string() + "': missing field '" + key + "'");
  }
  try {
    return doc.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error("'" + source.string() + "': bad field '" + key + "': " + e.what());
  }
}

template std::size_t field<std::size_t>(const nlohmann::json&, const char*, const std::filesystem::path&);
template int field<int>(const nlohmann::json&, const char*, const std::filesystem::path&);
template double field<double>(const nlohmann::json&, const char*, const std::filesystem::path&);
template std::string field<std::string>(const nlohmann::json&, const char*, const std::filesystem::path&);
template std::vector<double> field<std::vector<double>>(const nlohmann::json&, const char*,
                                                       const std::filesystem::path&);
template std::vector<std::string> field<std::vector<std::string>>(const nlohmann::json&, const char*,
                                                                 const std::filesystem::path&);
template std::vector<std::size_t> field<std::vector<std::size_t>>(const nlohmann::json&, const char*,
                                                                 const std::filesystem::path&);
template nlohmann::json field<nlohmann::json>(const nlohmann::json&, const char*, const std::filesystem::path&);

void require_finite(std::span<const double> values, const std::string& what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw data_error(what + ": non-finite value at index " + std::to_string(i));
    }
  }
}

}  // namespace specgt::detail
