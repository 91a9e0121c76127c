#pragma once

#include <string>

#include "nfk/linalg.hpp"
#include "nfk/nn/mlp.hpp"
#include "nfk/nn/model.hpp"

namespace nfk::nn {

/// Scalar per-example function of the parameters whose gradient is the raw
/// feature differentiated by the kernel machinery.
enum class HeadKind {
    logit,            // f^y(x), y = Head::index
    neg_free_energy,  // -E(x) = log sum_y exp f^y(x)
    output,           // scalar network output (GAN discriminator D(x))
    neg_energy,       // -E(x) for a scalar-energy EBM
    elbo,             // Monte-Carlo ELBO with cached latents (VAE)
};

struct Head {
    HeadKind kind = HeadKind::neg_free_energy;
    std::size_t index = 0;
};

std::string to_string(HeadKind k);
HeadKind head_kind_from_string(const std::string& s);

/// Head whose gradient is the Fisher-score ingredient for `family`.
Head default_head(Family family);

/// Throws ConfigError if `head` is not a scalar function of `spec`'s outputs.
void check_head(const ModelSpec& spec, const Head& head);

double log_sum_exp(std::span<const double> v);
Matrix softmax_rows(const Matrix& logits);

/// Network outputs: logits / scalar scores; for a VAE, the decoder mean at the
/// encoder mean.
Matrix forward(const ModelSpec& spec, const ParamVector& params, const Batch& batch);

/// E(x) = -log sum_y exp f^y(x), max-shifted.
double free_energy(const ModelSpec& spec, const ParamVector& params, std::span<const double> x);

/// Gaussian KL(N(mu, diag sigma^2) || N(0, I)).
double gaussian_kl(std::span<const double> mu, std::span<const double> log_sigma);

/// Reparameterized Monte-Carlo ELBO of one input. `latents` is S x latent_dim
/// of standard-normal draws; decoder likelihood is N(x; mean, I).
double elbo(const ModelSpec& spec, const ParamVector& params, std::span<const double> x, const Matrix& latents);

/// Block-level head evaluation: values, forward-mode and reverse-mode
/// products, and per-example gradients. Stateless apart from the references it
/// holds; safe to share across threads.
class HeadEvaluator {
public:
    HeadEvaluator(const ModelSpec& spec, const ParamVector& params, Head head);

    const ModelSpec& spec() const { return spec_; }
    const Head& head() const { return head_; }
    std::size_t param_count() const { return static_cast<std::size_t>(params_.values.size()); }

    Vector values(const Batch& block) const;
    /// dirs: u x P. Returns B x u with (i, j) = <grad head(x_i), dirs_j>.
    Matrix jvp(const Batch& block, const ConstRowsRef& dirs) const;
    /// weights: B x u. Returns u x P with row j = sum_i weights(i, j) grad head(x_i).
    Matrix vjp(const Batch& block, const Matrix& weights) const;
    /// B x P matrix of per-example head gradients.
    Matrix per_example(const Batch& block) const;

private:
    struct VaePass;
    VaePass vae_forward(const Batch& block) const;
    MlpView main_view() const;
    MlpView decoder_view() const;
    Matrix output_slopes(const Matrix& outputs) const;

    const ModelSpec& spec_;
    const ParamVector& params_;
    Head head_;
};

/// Per-example head gradients, N x P.
Matrix grad_params(const ModelSpec& spec, const ParamVector& params, const Head& head, const Batch& batch);
/// Forward-mode directional derivatives <grad head(x_i), v>, length N.
Vector jvp_params(const ModelSpec& spec, const ParamVector& params, const Head& head, const Batch& batch,
                  const Vector& v);
/// Reverse-mode weighted gradient sum_i w_i grad head(x_i), length P.
Vector vjp_params(const ModelSpec& spec, const ParamVector& params, const Head& head, const Batch& batch,
                  const Vector& w);

}  // namespace nfk::nn
