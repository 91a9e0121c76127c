#include "run.hpp"

#include <algorithm>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk::cli {

namespace fs = std::filesystem;

namespace {

std::string scalar_token(const nlohmann::json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
    if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
    if (v.is_number_float()) return io::format_double(v.get<double>());
    throw ConfigError("config key '" + key + "' has an unsupported value type");
}

std::vector<std::string> split_list(const std::string& list) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= list.size()) {
        const auto pos = list.find(',', start);
        const std::string item = list.substr(start, pos - start);
        if (!item.empty()) out.push_back(item);
        if (pos == std::string::npos) break;
        start = pos + 1;
    }
    return out;
}

}  // namespace

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    std::vector<std::string> rest;
    std::string config;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 == args.size()) throw ConfigError("--config needs a file");
            config = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (config.empty()) return rest;
    if (rest.size() < 2) throw ConfigError("--config needs a subcommand");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(config));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + config + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config " + config + " must hold a JSON object");

    std::vector<std::string> tokens;
    for (const auto& [key, value] : j.items()) {
        if (key == "command") {
            if (value != rest[1]) {
                throw ConfigError("config " + config + " is for '" + scalar_token(value, key) + "', not '" +
                                  rest[1] + "'");
            }
            continue;
        }
        if (value.is_null()) continue;
        std::string token;
        if (value.is_array()) {
            for (const auto& item : value) {
                if (!token.empty()) token += ',';
                token += scalar_token(item, key);
            }
        } else {
            token = scalar_token(value, key);
        }
        tokens.push_back("--" + key);
        tokens.push_back(token);
    }
    std::vector<std::string> out(rest.begin(), rest.begin() + 2);
    out.insert(out.end(), tokens.begin(), tokens.end());
    out.insert(out.end(), rest.begin() + 2, rest.end());
    return out;
}

Run::Run(const CLI::App& command, fs::path out) : command_(command), out_(std::move(out)) {
    if (out_.empty()) throw ConfigError("--out is required");
    fs::create_directories(out_);
}

void Run::input(const std::string& key, nlohmann::json record) { inputs_[key] = std::move(record); }

void Run::input_path(const std::string& key, const fs::path& p) {
    if (!fs::exists(p)) throw DataError("no such file or directory: " + p.string());
    nlohmann::json rec;
    rec["path"] = p.string();
    if (fs::is_directory(p)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(p)) {
            const auto ext = entry.path().extension();
            if (entry.is_regular_file() && (ext == ".json" || ext == ".bin") &&
                entry.path().filename() != "config.json" && entry.path().filename() != "inputs.json") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) rec["files"][f.filename().string()] = io::hex64(io::file_digest(f));
    } else {
        rec["digest"] = io::hex64(io::file_digest(p));
        fs::path params = p;
        params.replace_extension(".params.bin");
        if (fs::exists(params)) rec["params_digest"] = io::hex64(io::file_digest(params));
    }
    inputs_[key] = std::move(rec);
}

void Run::finish() const {
    nlohmann::json cfg;
    cfg["command"] = command_.get_name();
    for (const CLI::Option* opt : command_.get_options()) {
        if (opt->get_lnames().empty()) continue;
        const std::string& name = opt->get_lnames().front();
        if (name == "help" || name == "config") continue;
        if (opt->count() > 0) {
            cfg[name] = opt->results().back();
        } else if (!opt->get_default_str().empty()) {
            cfg[name] = opt->get_default_str();
        }
    }
    io::write_text(out_ / "config.json", cfg.dump(2) + "\n");
    io::write_text(out_ / "inputs.json", inputs_.dump(2) + "\n");
}

std::vector<std::size_t> parse_sizes(const std::string& list, const std::string& what) {
    std::vector<std::size_t> out;
    for (const auto& item : split_list(list)) {
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(item, &used);
            if (used != item.size() || item.front() == '-') throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError(what + ": '" + item + "' is not a non-negative integer");
        }
    }
    return out;
}

std::vector<double> parse_doubles(const std::string& list, const std::string& what) {
    std::vector<double> out;
    for (const auto& item : split_list(list)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(what + ": '" + item + "' is not a number");
        }
    }
    return out;
}

}  // namespace nfk::cli
