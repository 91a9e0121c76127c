#pragma once

#include <cmath>
#include <functional>

#include "nfk/linalg.hpp"
#include "nfk/nn/heads.hpp"
#include "nfk/nn/model.hpp"

namespace nfk::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    RngStream rng(seed);
    return seeded_gaussian(rows, cols, rng);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

inline double rel_fro(const Matrix& a, const Matrix& b) {
    const double s = std::max(a.norm(), b.norm());
    return s == 0.0 ? 0.0 : (a - b).norm() / s;
}

inline nn::Batch random_batch(std::size_t n, std::size_t d, std::uint64_t seed, int classes = 0) {
    nn::Batch b;
    b.inputs = random_matrix(n, d, seed);
    if (classes > 0) {
        RngStream rng = RngStream(seed).derive(1);
        for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.below(classes)));
    }
    return b;
}

/// Small model of each family with tanh hidden units (smooth, so finite
/// differences are clean).
inline nn::Model tiny_model(nn::Family family, std::uint64_t seed, std::size_t d = 3) {
    nn::Model m;
    switch (family) {
        case nn::Family::classifier:
            m.spec = nn::ModelSpec::mlp(family, {d, 5, 3}, nn::Activation::tanh);
            break;
        case nn::Family::ebm:
        case nn::Family::gan_discriminator:
            m.spec = nn::ModelSpec::mlp(family, {d, 5, 1}, nn::Activation::tanh);
            break;
        case nn::Family::vae:
            m.spec.family = family;
            m.spec.latent_dim = 2;
            m.spec.layers = {{d, 4, nn::Activation::tanh}, {4, 4, nn::Activation::identity}};
            m.spec.decoder = {{2, 4, nn::Activation::tanh}, {4, d, nn::Activation::identity}};
            break;
        case nn::Family::gan_generator:
            m.spec = nn::ModelSpec::mlp(family, {2, 4, d}, nn::Activation::tanh);
            break;
    }
    m.params = nn::init_params(m.spec, RngStream(seed));
    // Nonzero biases so every code path is exercised.
    RngStream rng = RngStream(seed).derive(7);
    for (const auto& slot : m.params.layout) {
        for (std::size_t i = 0; i < slot.rows; ++i) {
            m.params.values(static_cast<Eigen::Index>(slot.bias_offset + i)) = 0.3 * rng.normal();
        }
    }
    if (family == nn::Family::gan_discriminator) {
        m.generator_spec = nn::ModelSpec::mlp(nn::Family::gan_generator, {2, 4, d}, nn::Activation::tanh);
        m.generator_params = nn::init_params(*m.generator_spec, RngStream(seed + 1));
    }
    return m;
}

/// Central difference of f at x along v.
inline double central_difference(const std::function<double(const Vector&)>& f, const Vector& x, const Vector& v,
                                  double h = 1e-5) {
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h);
}

}  // namespace nfk::testing
