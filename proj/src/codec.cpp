#include "fedimit/codec.hpp"

#include "fedimit/error.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fedimit::codec {

static_assert(sizeof(double) == 8 && std::numeric_limits<double>::is_iec559);

std::string base64_encode(std::span<const unsigned char> bytes) {
    if (bytes.empty()) return {};
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

namespace {
bool is_b64_char(char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '+' ||
           c == '/';
}
}  // namespace

std::vector<unsigned char> base64_decode(std::string_view text) {
    if (text.empty()) return {};
    if (text.size() % 4 != 0) throw DecodeError("base64: length is not a multiple of 4");
    std::size_t pad = 0;
    if (text.back() == '=') pad = (text[text.size() - 2] == '=') ? 2 : 1;
    for (std::size_t i = 0; i < text.size() - pad; ++i) {
        if (!is_b64_char(text[i])) throw DecodeError("base64: invalid character");
    }
    std::vector<unsigned char> out(3 * (text.size() / 4));
    const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw DecodeError("base64: decode failed");
    out.resize(static_cast<std::size_t>(n) - pad);
    return out;
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * SHA256_DIGEST_LENGTH);
    for (unsigned char b : digest) {
        out.push_back(hex[b >> 4]);
        out.push_back(hex[b & 0xf]);
    }
    return out;
}

std::vector<unsigned char> pack_f64_le(std::span<const double> values) {
    std::vector<unsigned char> out(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(values[i]);
        for (int k = 0; k < 8; ++k) out[8 * i + k] = static_cast<unsigned char>(bits >> (8 * k));
    }
    return out;
}

std::vector<double> unpack_f64_le(std::span<const unsigned char> bytes) {
    if (bytes.size() % 8 != 0) throw DecodeError("f64 array: byte length is not a multiple of 8");
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 0; k < 8; ++k) bits |= std::uint64_t{bytes[8 * i + k]} << (8 * k);
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view contents) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + path);
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace fedimit::codec
