#pragma once

#include <filesystem>
#include <string>

#include "nfk/nn/model.hpp"

namespace nfk::nn {

/// Writes `manifest` (JSON) and a sibling `<stem>.params.bin` holding the
/// parameters as little-endian doubles, generator parameters appended for GAN
/// models. `metadata_json` must be a JSON object; it is stored verbatim under
/// "metadata".
void save_model(const Model& model, const std::filesystem::path& manifest, const std::string& metadata_json = "{}");

/// Throws DataError on malformed manifests, size or digest mismatch.
Model load_model(const std::filesystem::path& manifest);

/// Digest over spec and parameter bytes; identifies a trained model.
std::uint64_t model_fingerprint(const Model& model);

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);

}  // namespace nfk::nn
