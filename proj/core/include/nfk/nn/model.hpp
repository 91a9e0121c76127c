#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nfk/linalg.hpp"

namespace nfk::nn {

enum class Family { classifier, vae, gan_discriminator, gan_generator, ebm };
enum class Activation { relu, tanh, identity };

std::string to_string(Family f);
std::string to_string(Activation a);
Family family_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

struct LayerSpec {
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
    Activation activation = Activation::identity;
};

/// Architecture of one trainable network.
///
/// classifier: layers map D -> C logits. ebm / gan_discriminator: layers map
/// D -> 1 (energy or discriminator score). gan_generator: layers map
/// latent_dim -> D. vae: `layers` is the encoder D -> 2*latent_dim (mean and
/// log-std, in that order) and `decoder` maps latent_dim -> D (Gaussian mean,
/// unit variance). Parameters are laid out layer by layer, encoder before
/// decoder, each layer as W (fan_out x fan_in, row-major) followed by b.
struct ModelSpec {
    Family family = Family::classifier;
    std::vector<LayerSpec> layers;
    std::vector<LayerSpec> decoder;
    std::size_t latent_dim = 0;

    /// Throws ConfigError on inconsistent shapes.
    void validate() const;
    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t param_count() const;
    std::size_t encoder_param_count() const;

    /// Fully connected stack with `hidden` activation on all but the last layer.
    static ModelSpec mlp(Family family, const std::vector<std::size_t>& widths, Activation hidden = Activation::relu);
};

std::size_t layers_param_count(std::span<const LayerSpec> layers);

struct ParamSlot {
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
    std::size_t rows = 0;  // fan_out
    std::size_t cols = 0;  // fan_in
};

/// Flattened parameters plus the per-layer layout table.
struct ParamVector {
    Vector values;
    std::vector<ParamSlot> layout;

    static ParamVector zeros(const ModelSpec& spec);
    std::size_t size() const { return static_cast<std::size_t>(values.size()); }
    std::span<const double> span() const { return {values.data(), size()}; }
};

std::vector<ParamSlot> param_layout(const ModelSpec& spec);

/// Glorot-uniform weights (He-uniform for relu layers), zero biases.
ParamVector init_params(const ModelSpec& spec, RngStream rng);

/// Examples as rows. `labels` and `latents` are optional (empty when absent).
/// VAE latents are standard-normal draws, S per example, stored as
/// N x (S * latent_dim).
struct Batch {
    Matrix inputs;
    std::vector<int> labels;
    Matrix latents;

    std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
    bool has_labels() const { return !labels.empty(); }
    bool has_latents() const { return latents.rows() > 0; }
    /// Row counts agree across present fields; inputs finite.
    void validate() const;
    Batch rows(std::size_t begin, std::size_t count) const;
    Batch select(std::span<const std::size_t> indices) const;
};

/// A trained network, plus its generator for GAN models.
struct Model {
    ModelSpec spec;
    ParamVector params;
    std::optional<ModelSpec> generator_spec;
    ParamVector generator_params;
};

}  // namespace nfk::nn
