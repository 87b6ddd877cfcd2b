// SPDX-License-Identifier: Apache-2.0
#include "mf/io.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/sha.h>

#include "mf/core.hpp"

namespace mf {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<unsigned char> sha256(const unsigned char* data, std::size_t n) {
    std::vector<unsigned char> digest(SHA256_DIGEST_LENGTH);
    SHA256(data, n, digest.data());
    return digest;
}

namespace {
std::string to_hex(const std::vector<unsigned char>& d) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s;
    s.reserve(d.size() * 2);
    for (unsigned char c : d) {
        s.push_back(kHex[c >> 4]);
        s.push_back(kHex[c & 15]);
    }
    return s;
}
}  // namespace

std::string sha256_hex(const std::vector<unsigned char>& bytes) {
    return to_hex(sha256(bytes.data(), bytes.size()));
}

std::string sha256_hex(const std::string& text) {
    return to_hex(sha256(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string file_sha256(const std::filesystem::path& path) {
    return sha256_hex(read_bytes(path));
}

std::string format_double(double x) {
    std::array<char, 32> buf{};
    auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), x);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf.data(), end);
}

}  // namespace mf
