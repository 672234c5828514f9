#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pvatlas {

std::string read_text_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it into place, so readers never
/// observe a partial file. Creates parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents);

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

}  // namespace pvatlas
