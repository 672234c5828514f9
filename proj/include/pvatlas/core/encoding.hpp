#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pvatlas {

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

std::string base64_encode(std::span<const std::uint8_t> bytes);

/// Throws Error{DecodeError} on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace pvatlas
