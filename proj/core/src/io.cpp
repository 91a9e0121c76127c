#include "nfk/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "nfk/errors.hpp"

namespace nfk::io {

namespace {

constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return __builtin_bswap64(v);
    }
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (std::byte b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= kFnvPrime;
    }
    return h;
}

std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (double v : values) {
        const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(v));
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xffU;
            h *= kFnvPrime;
        }
    }
    return h;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed) {
    return fnv1a64(std::as_bytes(std::span(text.data(), text.size())), seed);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw DataError("invalid hex digest '" + s + "'");
    }
    return v;
}

void write_f64(const std::filesystem::path& path, std::span<const double> values) {
    std::vector<std::uint64_t> buf(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        buf[i] = to_le(std::bit_cast<std::uint64_t>(values[i]));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 8));
    if (!out) {
        throw DataError("write failed: " + path.string());
    }
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size != expected_count * 8) {
        throw DataError(path.string() + ": expected " + std::to_string(expected_count * 8) + " bytes, found " +
                        std::to_string(size));
    }
    in.seekg(0);
    std::vector<std::uint64_t> buf(expected_count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    std::vector<double> out(expected_count);
    for (std::size_t i = 0; i < expected_count; ++i) {
        out[i] = std::bit_cast<double>(to_le(buf[i]));
    }
    return out;
}

std::uint64_t file_digest(const std::filesystem::path& path) {
    const std::string bytes = read_text(path);
    return fnv1a64(std::string_view(bytes));
}

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
    write_f64(path, std::span<const double>(m.data(), static_cast<std::size_t>(m.size())));
}

Matrix read_matrix(const std::filesystem::path& path, std::size_t rows, std::size_t cols) {
    const auto values = read_f64(path, rows * cols);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::memcpy(m.data(), values.data(), values.size() * sizeof(double));
    return m;
}

void write_vector(const std::filesystem::path& path, const Vector& v) {
    write_f64(path, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

Vector read_vector(const std::filesystem::path& path, std::size_t n) {
    const auto values = read_f64(path, n);
    Vector v(static_cast<Eigen::Index>(n));
    std::memcpy(v.data(), values.data(), values.size() * sizeof(double));
    return v;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot open " + path.string() + " for writing");
    }
    out << text;
}

std::string format_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

}  // namespace nfk::io
