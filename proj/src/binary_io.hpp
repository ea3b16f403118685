#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace specgt::detail {

void write_f64le(const std::filesystem::path& path, std::span<const double> values);

/// Reads exactly `count` doubles; a size mismatch reports expected vs actual bytes.
std::vector<double> read_f64le(const std::filesystem::path& path, std::size_t count);

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path, std::size_t count);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

/// Typed field access that turns nlohmann errors into data errors naming the file.
template <typename T>
T field(const nlohmann::json& doc, const char* key, const std::filesystem::path& source);

void require_finite(std::span<const double> values, const std::string& what);

}  // namespace specgt::detail
