#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fedimit::codec {

std::string base64_encode(std::span<const unsigned char> bytes);

/// Strict decoder: rejects bad alphabet, bad padding and lengths not a
/// multiple of four. Throws DecodeError.
std::vector<unsigned char> base64_decode(std::string_view text);

/// Lower-case hex SHA-256 of the input.
std::string sha256_hex(std::string_view data);

/// Little-endian IEEE-754 encoding of doubles.
std::vector<unsigned char> pack_f64_le(std::span<const double> values);
std::vector<double> unpack_f64_le(std::span<const unsigned char> bytes);

/// Shortest text that parses back to the same double.
std::string format_double(double v);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);

}  // namespace fedimit::codec
