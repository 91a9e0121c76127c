#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>

#include "nfk/linalg.hpp"
#include "nfk/nn/heads.hpp"
#include "nfk/nn/model.hpp"
#include "nfk/operator.hpp"
#include "nfk/parallel.hpp"

namespace nfk::fisher {

enum class KernelKind { nfk, ntk };

std::string to_string(KernelKind k);
KernelKind kernel_kind_from_string(const std::string& s);

struct FisherConfig {
    KernelKind kind = KernelKind::nfk;
    std::optional<nn::Head> head;  // defaults to nn::default_head(family)
    double damping = 1e-8;
    std::size_t gan_samples = 4096;  // generator draws for the GAN expectation
    std::size_t vae_samples = 8;     // latent draws per example for the ELBO
    std::uint64_t seed = 0;
    Parallelism parallelism;
};

/// Mean head gradient over `samples` (the centering term Z).
Vector centering_stats(const nn::ModelSpec& spec, const nn::ParamVector& params, const nn::Head& head,
                       const nn::Batch& samples, const Parallelism& par = {});

/// Mean of (grad - Z)^2 over `samples`, then d += eps * max(max(d), 1e-30).
Vector diag_fim(const nn::ModelSpec& spec, const nn::ParamVector& params, const nn::Head& head,
                const nn::Batch& samples, const Vector& centering, double eps, const Parallelism& par = {});

/// Immutable score geometry of one trained model: head, centering vector,
/// damped diagonal FIM and the cached stochastic draws that make the Fisher
/// vectors a fixed function of x.
class FisherContext {
public:
    /// Estimates centering and FIM. Classifier and EBM expectations run over
    /// `data`; GAN expectations over cached generator samples; VAE FIM over
    /// `data` with zero centering. NTK mode skips both (Z = 0, FIM = 1).
    static std::shared_ptr<const FisherContext> build(nn::Model model, const nn::Batch& data,
                                                      const FisherConfig& cfg);

    /// Reassembles a context from stored arrays (see save_context).
    static std::shared_ptr<const FisherContext> from_parts(nn::Model model, const FisherConfig& cfg,
                                                           Vector centering, Vector fim_diag,
                                                           std::size_t sample_count);

    const nn::Model& model() const { return model_; }
    const nn::ModelSpec& spec() const { return model_.spec; }
    const nn::ParamVector& params() const { return model_.params; }
    const nn::Head& head() const { return head_; }
    KernelKind kind() const { return cfg_.kind; }
    const FisherConfig& config() const { return cfg_; }
    const Vector& centering() const { return centering_; }
    const Vector& fim_diag() const { return fim_diag_; }
    const Vector& inv_sqrt_fim() const { return inv_sqrt_; }
    std::size_t param_count() const { return model_.params.size(); }
    std::size_t sample_count() const { return sample_count_; }
    std::uint64_t model_fingerprint() const { return model_fp_; }
    std::uint64_t fingerprint() const { return fingerprint_; }

    /// Copy of `x` with the context's VAE latent draws attached. Draws are
    /// keyed by the example's bytes, so the same input always receives the
    /// same latents. Other families: returns `x` unchanged.
    nn::Batch attach_latents(const nn::Batch& x) const;

    /// Generator samples G(h) over the cached noise (GAN models only).
    Matrix generator_samples() const;

private:
    FisherContext() = default;
    void finish();

    nn::Model model_;
    FisherConfig cfg_;
    nn::Head head_;
    Vector centering_;
    Vector fim_diag_;
    Vector inv_sqrt_;
    std::size_t sample_count_ = 0;
    std::uint64_t model_fp_ = 0;
    std::uint64_t fingerprint_ = 0;
};

using ContextPtr = std::shared_ptr<const FisherContext>;

/// U_x for each row of `x` (N x P). VAE inputs need latents (DataError).
Matrix fisher_score(const FisherContext& ctx, const nn::Batch& x);
/// V_x = U_x / sqrt(fim_diag) for each row of `x` (N x P).
Matrix fisher_vector(const FisherContext& ctx, const nn::Batch& x);

/// Matrix-free view of the N x P Fisher-vector matrix V over a fixed dataset.
class FisherOperator final : public LinearOperator {
public:
    FisherOperator(ContextPtr ctx, const nn::Batch& data);

    std::size_t rows() const override { return data_.size(); }
    std::size_t cols() const override { return ctx_->param_count(); }
    const FisherContext& context() const { return *ctx_; }
    const ContextPtr& context_ptr() const { return ctx_; }
    const nn::Batch& data() const { return data_; }
    const Parallelism& parallelism() const { return par_; }
    void set_parallelism(const Parallelism& par) { par_ = par; }

    /// V M for M (P x u); returns N x u.
    Matrix apply_jvp(const Matrix& m) const;
    /// V^T W for W (N x u); returns P x u.
    Matrix apply_vjp(const Matrix& w) const;

    /// V restricted to rows of another batch (N' x u), same context.
    Matrix apply_jvp(const nn::Batch& x, const Matrix& m) const;

    Matrix apply(const Matrix& m) const override { return apply_jvp(m); }
    Matrix apply_adjoint(const Matrix& w) const override { return apply_vjp(w); }

    /// Dense V; refuses above 1e8 entries.
    Matrix materialize() const override;
    /// Sum of squared Fisher-vector norms, block by block in order.
    double squared_norm() const override;

    std::string kernel_kind() const override { return to_string(ctx_->kind()); }
    /// Context fingerprint.
    std::uint64_t fingerprint() const override { return ctx_->fingerprint(); }
    /// Digest of the input rows.
    std::uint64_t data_digest() const override { return data_digest_; }

private:
    Matrix jvp_rows(const nn::Batch& x, const Matrix& m) const;

    ContextPtr ctx_;
    nn::Batch data_;
    Parallelism par_;
    std::uint64_t data_digest_ = 0;
};

/// <V_x, V_z> under `ctx`.
double kernel_eval(const FisherContext& ctx, std::span<const double> x, std::span<const double> z);

/// Digest of a batch's inputs and labels.
std::uint64_t batch_digest(const nn::Batch& b);

/// Context file: `dir/context.json` plus centering.bin and fim_diag.bin.
void save_context(const FisherContext& ctx, const std::filesystem::path& dir);
/// Throws DataError when the stored model fingerprint differs from `model`.
ContextPtr load_context(const std::filesystem::path& dir, nn::Model model);

}  // namespace nfk::fisher
