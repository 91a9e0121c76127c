#include "nfk/data.hpp"

#include <zlib.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "nfk/errors.hpp"
#include "nfk/fisher.hpp"
#include "nfk/io.hpp"
#include "nfk/nn/train.hpp"

namespace nfk::data {

void refresh_info(Dataset& ds) {
    ds.batch.validate();
    ds.info.n = ds.batch.size();
    ds.info.d = static_cast<std::size_t>(ds.batch.inputs.cols());
    int top = -1;
    for (int y : ds.batch.labels) {
        if (y < 0) {
            throw DataError("negative label " + std::to_string(y));
        }
        top = std::max(top, y);
    }
    ds.info.classes = static_cast<std::size_t>(top + 1);
    ds.info.checksum = fisher::batch_digest(ds.batch);
}

namespace {

std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw DataError("no such file: " + path.string());
    }
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (f == nullptr) {
        throw DataError("cannot open " + path.string());
    }
    std::vector<unsigned char> out;
    unsigned char buf[1 << 16];
    int got = 0;
    while ((got = gzread(f, buf, sizeof(buf))) > 0) {
        out.insert(out.end(), buf, buf + got);
    }
    const bool failed = got < 0;
    gzclose(f);
    if (failed) {
        throw DataError("corrupt compressed stream in " + path.string());
    }
    return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at) {
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto img = read_maybe_gzip(images);
    const auto lab = read_maybe_gzip(labels);
    if (img.size() < 16 || be32(img, 0) != 0x00000803) {
        throw DataError(images.string() + ": bad IDX image magic (expected 0x00000803)");
    }
    if (lab.size() < 8 || be32(lab, 0) != 0x00000801) {
        throw DataError(labels.string() + ": bad IDX label magic (expected 0x00000801)");
    }
    const std::size_t n = be32(img, 4);
    const std::size_t rows = be32(img, 8);
    const std::size_t cols = be32(img, 12);
    const std::size_t d = rows * cols;
    if (img.size() != 16 + n * d) {
        throw DataError(images.string() + ": expected " + std::to_string(n * d) + " pixel bytes");
    }
    if (be32(lab, 4) != n || lab.size() != 8 + n) {
        throw DataError(labels.string() + ": label count does not match " + std::to_string(n) + " images");
    }
    Dataset ds;
    ds.info.source = "idx";
    ds.batch.inputs.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            ds.batch.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = img[16 + i * d + j] / 255.0;
        }
        const int y = lab[8 + i];
        if (y > 9) {
            throw DataError(labels.string() + ": label " + std::to_string(y) + " out of range 0..9");
        }
        ds.batch.labels.push_back(y);
    }
    refresh_info(ds);
    return ds;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
        out.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

double parse_number(const std::string& s, const std::filesystem::path& path, std::size_t line) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw DataError(path.string() + ":" + std::to_string(line) + ": cannot parse '" + s + "' as a number");
    }
    return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(path.string() + ": empty file");
    }
    const auto header = split_csv_line(line);
    std::ptrdiff_t label_col = -1;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == "label") label_col = static_cast<std::ptrdiff_t>(c);
    }
    if (label_col < 0) {
        throw DataError(path.string() + ": no column named 'label'");
    }
    const std::size_t d = header.size() - 1;
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(header.size()) + " columns, got " + std::to_string(cells.size()));
        }
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const double v = parse_number(cells[c], path, lineno);
            if (static_cast<std::ptrdiff_t>(c) == label_col) {
                if (v != std::floor(v) || v < 0) {
                    throw DataError(path.string() + ":" + std::to_string(lineno) + ": label must be a nonnegative integer");
                }
                labels.push_back(static_cast<int>(v));
            } else {
                values.push_back(v);
            }
        }
    }
    Dataset ds;
    ds.info.source = "csv";
    ds.batch.inputs = Eigen::Map<const Matrix>(values.data(), static_cast<Eigen::Index>(labels.size()),
                                               static_cast<Eigen::Index>(d));
    ds.batch.labels = std::move(labels);
    refresh_info(ds);
    return ds;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
    std::ostringstream out;
    for (Eigen::Index j = 0; j < ds.batch.inputs.cols(); ++j) {
        out << "x" << j << ",";
    }
    out << "label\n";
    for (Eigen::Index i = 0; i < ds.batch.inputs.rows(); ++i) {
        for (Eigen::Index j = 0; j < ds.batch.inputs.cols(); ++j) {
            out << io::format_double(ds.batch.inputs(i, j)) << ",";
        }
        out << (ds.batch.has_labels() ? ds.batch.labels[static_cast<std::size_t>(i)] : 0) << "\n";
    }
    io::write_text(path, out.str());
}

Dataset two_moons(std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) {
        throw ConfigError("two_moons: n must be at least 2");
    }
    if (!(noise >= 0.0)) {
        throw ConfigError("two_moons: noise must be nonnegative");
    }
    RngStream rng = RngStream(seed).derive(stream_tag("two_moons"));
    const std::size_t outer = (n + 1) / 2;
    const std::size_t inner = n - outer;
    Dataset ds;
    ds.info.source = "synthetic:two_moons";
    ds.batch.inputs.resize(static_cast<Eigen::Index>(n), 2);
    for (std::size_t i = 0; i < n; ++i) {
        const bool top = i < outer;
        const std::size_t j = top ? i : i - outer;
        const std::size_t m = top ? outer : inner;
        const double t = m > 1 ? std::numbers::pi * static_cast<double>(j) / static_cast<double>(m - 1) : 0.0;
        double x = top ? std::cos(t) : 1.0 - std::cos(t);
        double y = top ? std::sin(t) : 0.5 - std::sin(t);
        x += noise * rng.normal();
        y += noise * rng.normal();
        ds.batch.inputs(static_cast<Eigen::Index>(i), 0) = x;
        ds.batch.inputs(static_cast<Eigen::Index>(i), 1) = y;
        ds.batch.labels.push_back(top ? 0 : 1);
    }
    refresh_info(ds);
    return ds;
}

Dataset gaussians(std::size_t n, const Matrix& means, double stddev, std::uint64_t seed) {
    if (n == 0 || means.rows() == 0) {
        throw ConfigError("gaussians: need n >= 1 and at least one mean");
    }
    RngStream rng = RngStream(seed).derive(stream_tag("gaussians"));
    Dataset ds;
    ds.info.source = "synthetic:gaussians";
    ds.batch.inputs.resize(static_cast<Eigen::Index>(n), means.cols());
    for (std::size_t i = 0; i < n; ++i) {
        const auto c = static_cast<Eigen::Index>(i % static_cast<std::size_t>(means.rows()));
        for (Eigen::Index j = 0; j < means.cols(); ++j) {
            ds.batch.inputs(static_cast<Eigen::Index>(i), j) = means(c, j) + stddev * rng.normal();
        }
        ds.batch.labels.push_back(static_cast<int>(c));
    }
    refresh_info(ds);
    return ds;
}

Dataset xor_data(std::size_t n, double noise, std::uint64_t seed) {
    if (n < 4) {
        throw ConfigError("xor: n must be at least 4");
    }
    RngStream rng = RngStream(seed).derive(stream_tag("xor"));
    Dataset ds;
    ds.info.source = "synthetic:xor";
    ds.batch.inputs.resize(static_cast<Eigen::Index>(n), 2);
    for (std::size_t i = 0; i < n; ++i) {
        const double sx = (i % 2 == 0) ? 1.0 : -1.0;
        const double sy = ((i / 2) % 2 == 0) ? 1.0 : -1.0;
        ds.batch.inputs(static_cast<Eigen::Index>(i), 0) = sx + noise * rng.normal();
        ds.batch.inputs(static_cast<Eigen::Index>(i), 1) = sy + noise * rng.normal();
        ds.batch.labels.push_back(sx * sy > 0 ? 0 : 1);
    }
    refresh_info(ds);
    return ds;
}

namespace {

std::map<std::string, double> parse_params(const std::string& text) {
    std::map<std::string, double> out;
    std::istringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("synthetic data: expected key=value, got '" + item + "'");
        }
        const std::string key = item.substr(0, eq);
        const std::string val = item.substr(eq + 1);
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
        if (ec != std::errc() || ptr != val.data() + val.size()) {
            throw ConfigError("synthetic data: bad value for '" + key + "'");
        }
        out[key] = v;
    }
    return out;
}

double take(std::map<std::string, double>& params, const std::string& key, double fallback) {
    const auto it = params.find(key);
    if (it == params.end()) return fallback;
    const double v = it->second;
    params.erase(it);
    return v;
}

std::size_t take_count(std::map<std::string, double>& params, const std::string& key, double fallback) {
    const double v = take(params, key, fallback);
    if (v < 0 || v != std::floor(v)) {
        throw ConfigError("synthetic data: '" + key + "' must be a nonnegative integer");
    }
    return static_cast<std::size_t>(v);
}

}  // namespace

Dataset synthetic(const std::string& spec, std::uint64_t seed) {
    const auto colon = spec.find(':');
    const std::string name = spec.substr(0, colon);
    auto params = parse_params(colon == std::string::npos ? "" : spec.substr(colon + 1));
    Dataset ds;
    if (name == "two_moons") {
        const std::size_t n = take_count(params, "n", 1000);
        const double noise = take(params, "noise", 0.1);
        ds = two_moons(n, noise, seed);
    } else if (name == "xor") {
        const std::size_t n = take_count(params, "n", 400);
        const double noise = take(params, "noise", 0.1);
        ds = xor_data(n, noise, seed);
    } else if (name == "gaussians") {
        const std::size_t n = take_count(params, "n", 600);
        const std::size_t k = take_count(params, "k", 3);
        const std::size_t dim = take_count(params, "dim", 2);
        const double sep = take(params, "sep", 3.0);
        const double sd = take(params, "std", 1.0);
        if (k == 0 || dim == 0) {
            throw ConfigError("gaussians: k and dim must be positive");
        }
        Matrix means = Matrix::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(dim));
        for (std::size_t c = 0; c < k; ++c) {
            const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(k);
            means(static_cast<Eigen::Index>(c), 0) = sep * std::cos(angle);
            if (dim > 1) means(static_cast<Eigen::Index>(c), 1) = sep * std::sin(angle);
        }
        ds = gaussians(n, means, sd, seed);
    } else {
        throw ConfigError("unknown synthetic dataset '" + name + "' (two_moons, gaussians, xor)");
    }
    if (!params.empty()) {
        throw ConfigError("synthetic " + name + ": unknown parameter '" + params.begin()->first + "'");
    }
    return ds;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
    for (std::size_t i : indices) {
        if (i >= ds.batch.size()) {
            throw DataError("subset index " + std::to_string(i) + " out of range");
        }
    }
    Dataset out;
    out.info.source = ds.info.source;
    out.batch = ds.batch.select(indices);
    refresh_info(out);
    return out;
}

Dataset head(const Dataset& ds, std::size_t n) {
    if (n > ds.batch.size()) {
        throw DataError("requested " + std::to_string(n) + " rows from a dataset of " +
                        std::to_string(ds.batch.size()));
    }
    Dataset out;
    out.info.source = ds.info.source;
    out.batch = ds.batch.rows(0, n);
    refresh_info(out);
    return out;
}

Dataset binarize(const Dataset& ds, int threshold) {
    Dataset out = ds;
    for (int& y : out.batch.labels) {
        y = y < threshold ? 0 : 1;
    }
    refresh_info(out);
    return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
        throw ConfigError("split: test fraction must be in [0, 1)");
    }
    RngStream rng = RngStream(seed).derive(stream_tag("split"));
    const auto perm = nn::permutation(ds.batch.size(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(perm.size())));
    const std::size_t n_train = perm.size() - n_test;
    return {subset(ds, std::span<const std::size_t>(perm.data(), n_train)),
            subset(ds, std::span<const std::size_t>(perm.data() + n_train, n_test))};
}

Dataset augment_shifts(const Dataset& ds, std::size_t n, int max_shift, std::uint64_t seed) {
    const std::size_t n0 = ds.batch.size();
    const auto d = static_cast<std::size_t>(ds.batch.inputs.cols());
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
    if (side * side != d) {
        throw DataError("augment_shifts: inputs are not square images");
    }
    if (n < n0 || n0 == 0 || max_shift < 1) {
        throw ConfigError("augment_shifts: need n >= dataset size and max_shift >= 1");
    }
    RngStream rng = RngStream(seed).derive(stream_tag("shift"));
    Dataset out;
    out.info.source = ds.info.source + "+shift";
    out.batch.inputs = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    out.batch.inputs.topRows(static_cast<Eigen::Index>(n0)) = ds.batch.inputs;
    out.batch.labels = ds.batch.labels;
    const auto span = static_cast<std::uint64_t>(2 * max_shift + 1);
    for (std::size_t i = n0; i < n; ++i) {
        const std::size_t src = rng.below(n0);
        int dx = 0;
        int dy = 0;
        while (dx == 0 && dy == 0) {
            dx = static_cast<int>(rng.below(span)) - max_shift;
            dy = static_cast<int>(rng.below(span)) - max_shift;
        }
        const auto s = static_cast<int>(side);
        for (int r = 0; r < s; ++r) {
            for (int c = 0; c < s; ++c) {
                const int sr = r - dy;
                const int sc = c - dx;
                if (sr < 0 || sr >= s || sc < 0 || sc >= s) continue;
                out.batch.inputs(static_cast<Eigen::Index>(i), r * s + c) =
                    ds.batch.inputs(static_cast<Eigen::Index>(src), sr * s + sc);
            }
        }
        if (ds.batch.has_labels()) {
            out.batch.labels.push_back(ds.batch.labels[src]);
        }
    }
    refresh_info(out);
    return out;
}

}  // namespace nfk::data
