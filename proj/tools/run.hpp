#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

namespace nfk::cli {

/// Expands `--config FILE` into option tokens placed right after the
/// subcommand name, so flags given on the command line (which come later)
/// win. Keys of the JSON object are long option names; arrays become
/// comma-joined lists. A "command" key must match the subcommand.
std::vector<std::string> expand_config(const std::vector<std::string>& args);

/// One command invocation writing into an output directory.
class Run {
public:
    Run(const CLI::App& command, std::filesystem::path out);

    const std::filesystem::path& out() const { return out_; }
    std::filesystem::path path(const std::string& name) const { return out_ / name; }

    /// Records an input under `key` for inputs.json.
    void input(const std::string& key, nlohmann::json record);
    /// Records an input file or directory by digest of its JSON manifest and binaries.
    void input_path(const std::string& key, const std::filesystem::path& p);

    /// Writes config.json (every option of the command, resolved) and
    /// inputs.json. Call after all outputs are written.
    void finish() const;

private:
    const CLI::App& command_;
    std::filesystem::path out_;
    nlohmann::json inputs_ = nlohmann::json::object();
};

std::vector<std::size_t> parse_sizes(const std::string& list, const std::string& what);
std::vector<double> parse_doubles(const std::string& list, const std::string& what);

}  // namespace nfk::cli
