#include "nfk/nn/model.hpp"

#include <cmath>
#include <string>

#include "nfk/errors.hpp"

namespace nfk::nn {

std::string to_string(Family f) {
    switch (f) {
        case Family::classifier: return "classifier";
        case Family::vae: return "vae";
        case Family::gan_discriminator: return "gan-discriminator";
        case Family::gan_generator: return "gan-generator";
        case Family::ebm: return "ebm";
    }
    return "unknown";
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "unknown";
}

Family family_from_string(const std::string& s) {
    if (s == "classifier") return Family::classifier;
    if (s == "vae") return Family::vae;
    if (s == "gan-discriminator") return Family::gan_discriminator;
    if (s == "gan-generator") return Family::gan_generator;
    if (s == "ebm") return Family::ebm;
    throw ConfigError("unknown model family '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw ConfigError("unknown activation '" + s + "'");
}

namespace {

void check_chain(const std::vector<LayerSpec>& layers, const char* what) {
    if (layers.empty()) {
        throw ConfigError(std::string(what) + ": layer list is empty");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].fan_in == 0 || layers[l].fan_out == 0) {
            throw ConfigError(std::string(what) + ": layer " + std::to_string(l) + " has a zero dimension");
        }
        if (l > 0 && layers[l - 1].fan_out != layers[l].fan_in) {
            throw ConfigError(std::string(what) + ": layer " + std::to_string(l) + " fan_in " +
                              std::to_string(layers[l].fan_in) + " does not match previous fan_out " +
                              std::to_string(layers[l - 1].fan_out));
        }
    }
}

}  // namespace

std::size_t layers_param_count(std::span<const LayerSpec> layers) {
    std::size_t n = 0;
    for (const auto& l : layers) {
        n += l.fan_out * l.fan_in + l.fan_out;
    }
    return n;
}

void ModelSpec::validate() const {
    check_chain(layers, "model");
    switch (family) {
        case Family::classifier:
            break;
        case Family::ebm:
        case Family::gan_discriminator:
            if (layers.back().fan_out != 1) {
                throw ConfigError(to_string(family) + " must have a scalar output");
            }
            break;
        case Family::gan_generator:
            if (latent_dim == 0 || layers.front().fan_in != latent_dim) {
                throw ConfigError("gan-generator input width must equal latent_dim");
            }
            break;
        case Family::vae:
            check_chain(decoder, "vae decoder");
            if (latent_dim == 0 || layers.back().fan_out != 2 * latent_dim) {
                throw ConfigError("vae encoder must output 2*latent_dim values (mean, log-std)");
            }
            if (decoder.front().fan_in != latent_dim || decoder.back().fan_out != layers.front().fan_in) {
                throw ConfigError("vae decoder must map latent_dim back to the input width");
            }
            break;
    }
    if (family != Family::vae && !decoder.empty()) {
        throw ConfigError("decoder layers are only valid for the vae family");
    }
}

std::size_t ModelSpec::input_dim() const { return layers.front().fan_in; }

std::size_t ModelSpec::output_dim() const {
    return family == Family::vae ? decoder.back().fan_out : layers.back().fan_out;
}

std::size_t ModelSpec::param_count() const { return layers_param_count(layers) + layers_param_count(decoder); }

std::size_t ModelSpec::encoder_param_count() const { return layers_param_count(layers); }

ModelSpec ModelSpec::mlp(Family family, const std::vector<std::size_t>& widths, Activation hidden) {
    if (widths.size() < 2) {
        throw ConfigError("mlp: need at least input and output widths");
    }
    ModelSpec spec;
    spec.family = family;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const bool last = i + 2 == widths.size();
        spec.layers.push_back({widths[i], widths[i + 1], last ? Activation::identity : hidden});
    }
    if (family == Family::gan_generator) {
        spec.latent_dim = widths.front();
    }
    return spec;
}

std::vector<ParamSlot> param_layout(const ModelSpec& spec) {
    std::vector<ParamSlot> out;
    std::size_t offset = 0;
    auto add = [&](const std::vector<LayerSpec>& layers) {
        for (const auto& l : layers) {
            ParamSlot slot;
            slot.weight_offset = offset;
            slot.rows = l.fan_out;
            slot.cols = l.fan_in;
            offset += l.fan_out * l.fan_in;
            slot.bias_offset = offset;
            offset += l.fan_out;
            out.push_back(slot);
        }
    };
    add(spec.layers);
    add(spec.decoder);
    return out;
}

ParamVector ParamVector::zeros(const ModelSpec& spec) {
    spec.validate();
    ParamVector p;
    p.values = Vector::Zero(static_cast<Eigen::Index>(spec.param_count()));
    p.layout = param_layout(spec);
    return p;
}

ParamVector init_params(const ModelSpec& spec, RngStream rng) {
    ParamVector p = ParamVector::zeros(spec);
    std::vector<LayerSpec> all = spec.layers;
    all.insert(all.end(), spec.decoder.begin(), spec.decoder.end());
    for (std::size_t l = 0; l < all.size(); ++l) {
        const auto& layer = all[l];
        const auto& slot = p.layout[l];
        const double fan_in = static_cast<double>(layer.fan_in);
        const double fan_out = static_cast<double>(layer.fan_out);
        const double bound =
            layer.activation == Activation::relu ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
        for (std::size_t i = 0; i < slot.rows * slot.cols; ++i) {
            p.values(static_cast<Eigen::Index>(slot.weight_offset + i)) = bound * (2.0 * rng.uniform() - 1.0);
        }
    }
    return p;
}

void Batch::validate() const {
    const auto n = inputs.rows();
    if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != n) {
        throw DataError("batch: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " inputs");
    }
    if (latents.rows() > 0 && latents.rows() != n) {
        throw DataError("batch: latent rows do not match input rows");
    }
    require_finite(inputs, "batch inputs");
}

Batch Batch::rows(std::size_t begin, std::size_t count) const {
    Batch out;
    const auto b = static_cast<Eigen::Index>(begin);
    const auto c = static_cast<Eigen::Index>(count);
    out.inputs = inputs.middleRows(b, c);
    if (!labels.empty()) {
        out.labels.assign(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                          labels.begin() + static_cast<std::ptrdiff_t>(begin + count));
    }
    if (latents.rows() > 0) {
        out.latents = latents.middleRows(b, c);
    }
    return out;
}

Batch Batch::select(std::span<const std::size_t> indices) const {
    Batch out;
    out.inputs.resize(static_cast<Eigen::Index>(indices.size()), inputs.cols());
    if (latents.rows() > 0) {
        out.latents.resize(static_cast<Eigen::Index>(indices.size()), latents.cols());
    }
    for (std::size_t r = 0; r < indices.size(); ++r) {
        const auto src = static_cast<Eigen::Index>(indices[r]);
        out.inputs.row(static_cast<Eigen::Index>(r)) = inputs.row(src);
        if (!labels.empty()) {
            out.labels.push_back(labels[indices[r]]);
        }
        if (latents.rows() > 0) {
            out.latents.row(static_cast<Eigen::Index>(r)) = latents.row(src);
        }
    }
    return out;
}

}  // namespace nfk::nn
