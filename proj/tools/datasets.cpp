#include "datasets.hpp"

#include <charconv>
#include <filesystem>
#include <vector>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk::cli {

namespace {

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        parts.push_back(s.substr(start, pos - start));
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return parts;
}

double to_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError("dataset " + what + ": '" + s + "' is not a number");
}

std::uint64_t to_u64(const std::string& s, const std::string& what) {
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ConfigError("dataset " + what + ": '" + s + "' is not a non-negative integer");
    }
    return v;
}

// "F@S" or "N@S".
std::pair<std::string, std::uint64_t> value_at_seed(const std::string& s, const std::string& what) {
    const auto at = s.find('@');
    if (at == std::string::npos) {
        throw ConfigError("dataset " + what + " needs VALUE@SEED, got '" + s + "'");
    }
    return {s.substr(0, at), to_u64(s.substr(at + 1), what + " seed")};
}

nlohmann::json file_record(const std::filesystem::path& p) {
    if (!std::filesystem::exists(p)) {
        throw DataError("no such file: " + p.string());
    }
    return {{"path", p.string()}, {"digest", io::hex64(io::file_digest(p))}};
}

}  // namespace

LoadedDataset load_dataset(const std::string& descriptor) {
    if (descriptor.empty()) {
        throw ConfigError("empty dataset descriptor");
    }
    const std::vector<std::string> steps = split_on(descriptor, ';');
    const std::string& source = steps.front();

    std::uint64_t seed = 0;
    for (std::size_t i = 1; i < steps.size(); ++i) {
        if (steps[i].rfind("seed=", 0) == 0) seed = to_u64(steps[i].substr(5), "seed");
    }

    LoadedDataset out;
    out.record["descriptor"] = descriptor;
    out.record["files"] = nlohmann::json::array();
    if (source.rfind("idx:", 0) == 0) {
        const auto files = split_on(source.substr(4), ',');
        if (files.size() != 2) {
            throw ConfigError("idx source needs IMAGES,LABELS");
        }
        out.record["files"].push_back(file_record(files[0]));
        out.record["files"].push_back(file_record(files[1]));
        out.data = data::load_idx(files[0], files[1]);
    } else if (source.rfind("csv:", 0) == 0) {
        const std::string path = source.substr(4);
        out.record["files"].push_back(file_record(path));
        out.data = data::load_csv(path);
    } else if (source.rfind("synthetic:", 0) == 0) {
        out.data = data::synthetic(source.substr(10), seed);
    } else {
        throw ConfigError("unknown dataset source '" + source + "' (idx:, csv:, synthetic:)");
    }

    for (std::size_t i = 1; i < steps.size(); ++i) {
        const std::string& step = steps[i];
        const auto eq = step.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("dataset step '" + step + "' is not KEY=VALUE");
        }
        const std::string key = step.substr(0, eq);
        const std::string value = step.substr(eq + 1);
        if (key == "seed") {
            continue;
        } else if (key == "binarize") {
            out.data = data::binarize(out.data, static_cast<int>(to_u64(value, key)));
        } else if (key == "train" || key == "test") {
            const auto [frac, s] = value_at_seed(value, key);
            auto parts = data::split(out.data, to_double(frac, key), s);
            out.data = key == "train" ? std::move(parts.first) : std::move(parts.second);
        } else if (key == "limit") {
            out.data = data::head(out.data, to_u64(value, key));
        } else if (key == "augment") {
            const auto [n, s] = value_at_seed(value, key);
            out.data = data::augment_shifts(out.data, to_u64(n, key), 2, s);
        } else {
            throw ConfigError("unknown dataset step '" + key + "'");
        }
    }

    const data::DatasetInfo& info = out.data.info;
    out.record["n"] = info.n;
    out.record["d"] = info.d;
    out.record["classes"] = info.classes;
    out.record["checksum"] = io::hex64(info.checksum);
    return out;
}

}  // namespace nfk::cli
