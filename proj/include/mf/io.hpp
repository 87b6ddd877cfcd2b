// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace mf {

std::vector<unsigned char> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

std::vector<unsigned char> sha256(const unsigned char* data, std::size_t n);
std::string sha256_hex(const std::vector<unsigned char>& bytes);
std::string sha256_hex(const std::string& text);
std::string file_sha256(const std::filesystem::path& path);

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double x);

}  // namespace mf
