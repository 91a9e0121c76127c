#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nfk/linalg.hpp"

namespace nfk::io {

/// FNV-1a 64-bit digest.
std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);
std::uint64_t parse_hex64(const std::string& s);

/// Raw little-endian 64-bit float arrays.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count);
std::uint64_t file_digest(const std::filesystem::path& path);

void write_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix read_matrix(const std::filesystem::path& path, std::size_t rows, std::size_t cols);
void write_vector(const std::filesystem::path& path, const Vector& v);
Vector read_vector(const std::filesystem::path& path, std::size_t n);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// Shortest decimal form that parses back to the identical double.
std::string format_double(double v);

}  // namespace nfk::io
