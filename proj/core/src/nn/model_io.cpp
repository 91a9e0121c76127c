#include "nfk/nn/model_io.hpp"

#include <json.hpp>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk::nn {

using nlohmann::json;

namespace {

json layers_json(const std::vector<LayerSpec>& layers) {
    json out = json::array();
    for (const auto& l : layers) {
        out.push_back({{"fan_in", l.fan_in}, {"fan_out", l.fan_out}, {"activation", to_string(l.activation)}});
    }
    return out;
}

std::vector<LayerSpec> layers_from(const json& j) {
    std::vector<LayerSpec> out;
    for (const auto& l : j) {
        out.push_back({l.at("fan_in").get<std::size_t>(), l.at("fan_out").get<std::size_t>(),
                       activation_from_string(l.at("activation").get<std::string>())});
    }
    return out;
}

json spec_json(const ModelSpec& spec) {
    json j = {{"family", to_string(spec.family)}, {"layers", layers_json(spec.layers)}};
    if (!spec.decoder.empty()) {
        j["decoder"] = layers_json(spec.decoder);
    }
    if (spec.latent_dim > 0) {
        j["latent_dim"] = spec.latent_dim;
    }
    return j;
}

ModelSpec spec_from(const json& j) {
    ModelSpec spec;
    spec.family = family_from_string(j.at("family").get<std::string>());
    spec.layers = layers_from(j.at("layers"));
    if (j.contains("decoder")) {
        spec.decoder = layers_from(j.at("decoder"));
    }
    spec.latent_dim = j.value("latent_dim", std::size_t{0});
    spec.validate();
    return spec;
}

}  // namespace

std::string spec_to_json(const ModelSpec& spec) { return spec_json(spec).dump(); }

ModelSpec spec_from_json(const std::string& text) {
    try {
        return spec_from(json::parse(text));
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model spec: ") + e.what());
    }
}

std::uint64_t model_fingerprint(const Model& model) {
    std::uint64_t h = io::fnv1a64(spec_to_json(model.spec));
    h = io::fnv1a64(model.params.span(), h);
    if (model.generator_spec) {
        h = io::fnv1a64(spec_to_json(*model.generator_spec), h);
        h = io::fnv1a64(model.generator_params.span(), h);
    }
    return h;
}

void save_model(const Model& model, const std::filesystem::path& manifest, const std::string& metadata_json) {
    model.spec.validate();
    std::filesystem::path bin = manifest;
    bin.replace_extension(".params.bin");

    std::vector<double> all(model.params.span().begin(), model.params.span().end());
    if (model.generator_spec) {
        all.insert(all.end(), model.generator_params.span().begin(), model.generator_params.span().end());
    }
    io::write_f64(bin, all);

    json j;
    j["format"] = "nfk-model/1";
    j["spec"] = spec_json(model.spec);
    j["param_count"] = model.params.size();
    if (model.generator_spec) {
        j["generator"] = spec_json(*model.generator_spec);
        j["generator_param_count"] = model.generator_params.size();
    }
    j["params_file"] = bin.filename().string();
    j["params_digest"] = io::hex64(io::file_digest(bin));
    j["fingerprint"] = io::hex64(model_fingerprint(model));
    j["metadata"] = json::parse(metadata_json);
    io::write_text(manifest, j.dump(2) + "\n");
}

Model load_model(const std::filesystem::path& manifest) {
    json j;
    try {
        j = json::parse(io::read_text(manifest));
    } catch (const json::exception& e) {
        throw DataError("model manifest " + manifest.string() + ": " + e.what());
    }
    Model model;
    try {
        if (j.value("format", std::string()) != "nfk-model/1") {
            throw DataError("model manifest " + manifest.string() + ": unknown format");
        }
        model.spec = spec_from(j.at("spec"));
        std::size_t total = model.spec.param_count();
        if (j.contains("generator")) {
            model.generator_spec = spec_from(j.at("generator"));
            total += model.generator_spec->param_count();
        }
        const auto bin = manifest.parent_path() / j.at("params_file").get<std::string>();
        if (io::hex64(io::file_digest(bin)) != j.at("params_digest").get<std::string>()) {
            throw DataError("model parameters " + bin.string() + ": digest mismatch");
        }
        const auto all = io::read_f64(bin, total);
        model.params = ParamVector::zeros(model.spec);
        const auto p = static_cast<Eigen::Index>(model.spec.param_count());
        model.params.values = Eigen::Map<const Vector>(all.data(), p);
        if (model.generator_spec) {
            model.generator_params = ParamVector::zeros(*model.generator_spec);
            model.generator_params.values =
                Eigen::Map<const Vector>(all.data() + p, static_cast<Eigen::Index>(all.size()) - p);
        }
    } catch (const json::exception& e) {
        throw DataError("model manifest " + manifest.string() + ": " + e.what());
    }
    require_finite(model.params.values, "model parameters");
    return model;
}

}  // namespace nfk::nn
