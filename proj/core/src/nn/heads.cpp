#include "nfk/nn/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "nfk/errors.hpp"

namespace nfk::nn {

std::string to_string(HeadKind k) {
    switch (k) {
        case HeadKind::logit: return "logit";
        case HeadKind::neg_free_energy: return "neg-free-energy";
        case HeadKind::output: return "output";
        case HeadKind::neg_energy: return "neg-energy";
        case HeadKind::elbo: return "elbo";
    }
    return "unknown";
}

HeadKind head_kind_from_string(const std::string& s) {
    if (s == "logit") return HeadKind::logit;
    if (s == "neg-free-energy") return HeadKind::neg_free_energy;
    if (s == "output") return HeadKind::output;
    if (s == "neg-energy") return HeadKind::neg_energy;
    if (s == "elbo") return HeadKind::elbo;
    throw ConfigError("unknown head '" + s + "'");
}

Head default_head(Family family) {
    switch (family) {
        case Family::classifier: return {HeadKind::neg_free_energy, 0};
        case Family::vae: return {HeadKind::elbo, 0};
        case Family::gan_discriminator: return {HeadKind::output, 0};
        case Family::ebm: return {HeadKind::neg_energy, 0};
        case Family::gan_generator: break;
    }
    throw ConfigError("gan-generator has no scalar head; use the discriminator");
}

void check_head(const ModelSpec& spec, const Head& head) {
    spec.validate();
    const std::size_t c = spec.output_dim();
    const auto fail = [&](const std::string& why) {
        throw ConfigError("head '" + to_string(head.kind) + "' invalid for " + to_string(spec.family) + ": " + why);
    };
    if (spec.family == Family::gan_generator) {
        fail("non-scalar head (generator output is a sample, not a score)");
    }
    switch (head.kind) {
        case HeadKind::logit:
            if (spec.family == Family::vae) fail("non-scalar head");
            if (head.index >= c) fail("logit index out of range");
            break;
        case HeadKind::neg_free_energy:
            if (spec.family != Family::classifier) fail("free energy needs classifier logits");
            break;
        case HeadKind::output:
            if (spec.family == Family::vae || c != 1) fail("non-scalar head (output dimension must be 1)");
            break;
        case HeadKind::neg_energy:
            if (spec.family != Family::ebm) fail("energy head needs an ebm");
            break;
        case HeadKind::elbo:
            if (spec.family != Family::vae) fail("elbo needs a vae");
            break;
    }
}

double log_sum_exp(std::span<const double> v) {
    if (v.empty()) {
        throw ShapeError("log_sum_exp: empty input");
    }
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) {
        s += std::exp(x - m);
    }
    return m + std::log(s);
}

Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double m = logits.row(i).maxCoeff();
        p.row(i) = (logits.row(i).array() - m).exp().matrix();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

namespace {

MlpView encoder_of(const ModelSpec& spec, const ParamVector& params) {
    return {spec.layers, std::span<const double>(params.values.data(), spec.encoder_param_count())};
}

MlpView decoder_of(const ModelSpec& spec, const ParamVector& params) {
    const std::size_t pe = spec.encoder_param_count();
    return {spec.decoder, std::span<const double>(params.values.data() + pe, params.size() - pe)};
}

void check_params(const ModelSpec& spec, const ParamVector& params) {
    if (params.size() != spec.param_count()) {
        throw ShapeError("parameter vector has " + std::to_string(params.size()) + " values, model needs " +
                         std::to_string(spec.param_count()));
    }
}

void check_input(const ModelSpec& spec, const Matrix& x) {
    if (static_cast<std::size_t>(x.cols()) != spec.input_dim()) {
        throw ShapeError("input width " + std::to_string(x.cols()) + " does not match model input " +
                         std::to_string(spec.input_dim()));
    }
}

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

}  // namespace

Matrix forward(const ModelSpec& spec, const ParamVector& params, const Batch& batch) {
    check_params(spec, params);
    check_input(spec, batch.inputs);
    if (spec.family != Family::vae) {
        return mlp_forward({spec.layers, params.span()}, batch.inputs);
    }
    const auto l = static_cast<Eigen::Index>(spec.latent_dim);
    const Matrix enc = mlp_forward(encoder_of(spec, params), batch.inputs);
    const Matrix mu = enc.leftCols(l);
    return mlp_forward(decoder_of(spec, params), mu);
}

double free_energy(const ModelSpec& spec, const ParamVector& params, std::span<const double> x) {
    if (spec.family != Family::classifier) {
        throw ConfigError("free_energy requires a classifier");
    }
    Batch b;
    b.inputs = Eigen::Map<const Matrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
    const Matrix f = forward(spec, params, b);
    return -log_sum_exp(std::span<const double>(f.data(), static_cast<std::size_t>(f.cols())));
}

double gaussian_kl(std::span<const double> mu, std::span<const double> log_sigma) {
    double kl = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double s2 = std::exp(2.0 * log_sigma[i]);
        kl += 0.5 * (mu[i] * mu[i] + s2 - 1.0 - 2.0 * log_sigma[i]);
    }
    return kl;
}

double elbo(const ModelSpec& spec, const ParamVector& params, std::span<const double> x, const Matrix& latents) {
    if (spec.family != Family::vae) {
        throw ConfigError("elbo requires a vae");
    }
    if (latents.rows() == 0) {
        throw ConfigError("elbo: need at least one latent sample (S = 0)");
    }
    if (static_cast<std::size_t>(latents.cols()) != spec.latent_dim) {
        throw ShapeError("elbo: latent width mismatch");
    }
    Batch b;
    b.inputs = Eigen::Map<const Matrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
    b.latents = Eigen::Map<const Matrix>(latents.data(), 1, latents.size());
    HeadEvaluator eval(spec, params, {HeadKind::elbo, 0});
    return eval.values(b)(0);
}

struct HeadEvaluator::VaePass {
    Tape enc_tape;
    Tape dec_tape;
    Matrix mu;         // B x L
    Matrix log_sigma;  // B x L
    Matrix sigma;      // B x L
    Matrix xhat;       // (B*S) x D
    Eigen::Index samples = 0;
};

HeadEvaluator::HeadEvaluator(const ModelSpec& spec, const ParamVector& params, Head head)
    : spec_(spec), params_(params), head_(head) {
    check_head(spec, head);
    check_params(spec, params);
}

MlpView HeadEvaluator::main_view() const {
    return spec_.family == Family::vae ? encoder_of(spec_, params_) : MlpView{spec_.layers, params_.span()};
}

MlpView HeadEvaluator::decoder_view() const { return decoder_of(spec_, params_); }

Matrix HeadEvaluator::output_slopes(const Matrix& outputs) const {
    switch (head_.kind) {
        case HeadKind::logit: {
            Matrix g = Matrix::Zero(outputs.rows(), outputs.cols());
            g.col(static_cast<Eigen::Index>(head_.index)).setOnes();
            return g;
        }
        case HeadKind::neg_free_energy: return softmax_rows(outputs);
        case HeadKind::output: return Matrix::Ones(outputs.rows(), 1);
        case HeadKind::neg_energy: return Matrix::Constant(outputs.rows(), 1, -1.0);
        case HeadKind::elbo: break;
    }
    throw ConfigError("output_slopes: not an output-function head");
}

HeadEvaluator::VaePass HeadEvaluator::vae_forward(const Batch& block) const {
    const auto l = static_cast<Eigen::Index>(spec_.latent_dim);
    if (!block.has_latents()) {
        throw DataError("vae head: missing cached latents for " + std::to_string(block.size()) + " examples");
    }
    if (block.latents.cols() == 0 || block.latents.cols() % l != 0) {
        throw ShapeError("vae head: latent row width must be a positive multiple of latent_dim");
    }
    VaePass pass;
    pass.samples = block.latents.cols() / l;
    const Eigen::Index b = block.inputs.rows();
    const Eigen::Index s = pass.samples;
    const Matrix enc = mlp_forward(main_view(), block.inputs, &pass.enc_tape);
    pass.mu = enc.leftCols(l);
    pass.log_sigma = enc.rightCols(l);
    pass.sigma = pass.log_sigma.array().exp().matrix();
    Matrix z(b * s, l);
    for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index k = 0; k < s; ++k) {
            z.row(i * s + k) = pass.mu.row(i).array() +
                               pass.sigma.row(i).array() * block.latents.row(i).segment(k * l, l).array();
        }
    }
    pass.xhat = mlp_forward(decoder_view(), z, &pass.dec_tape);
    return pass;
}

Vector HeadEvaluator::values(const Batch& block) const {
    check_input(spec_, block.inputs);
    const Eigen::Index b = block.inputs.rows();
    Vector out(b);
    if (head_.kind == HeadKind::elbo) {
        const VaePass pass = vae_forward(block);
        const Eigen::Index s = pass.samples;
        const double d = static_cast<double>(block.inputs.cols());
        for (Eigen::Index i = 0; i < b; ++i) {
            double rec = 0.0;
            for (Eigen::Index k = 0; k < s; ++k) {
                rec += -0.5 * (block.inputs.row(i) - pass.xhat.row(i * s + k)).squaredNorm() - d * kHalfLog2Pi;
            }
            rec /= static_cast<double>(s);
            const double kl = gaussian_kl(std::span<const double>(pass.mu.row(i).data(), spec_.latent_dim),
                                          std::span<const double>(pass.log_sigma.row(i).data(), spec_.latent_dim));
            out(i) = rec - kl;
        }
        return out;
    }
    const Matrix f = mlp_forward(main_view(), block.inputs);
    for (Eigen::Index i = 0; i < b; ++i) {
        switch (head_.kind) {
            case HeadKind::logit: out(i) = f(i, static_cast<Eigen::Index>(head_.index)); break;
            case HeadKind::neg_free_energy:
                out(i) = log_sum_exp(std::span<const double>(f.row(i).data(), static_cast<std::size_t>(f.cols())));
                break;
            case HeadKind::output: out(i) = f(i, 0); break;
            case HeadKind::neg_energy: out(i) = -f(i, 0); break;
            case HeadKind::elbo: break;
        }
    }
    return out;
}

Matrix HeadEvaluator::jvp(const Batch& block, const ConstRowsRef& dirs) const {
    check_input(spec_, block.inputs);
    if (static_cast<std::size_t>(dirs.cols()) != param_count()) {
        throw ShapeError("jvp: direction length " + std::to_string(dirs.cols()) + " != parameter count " +
                         std::to_string(param_count()));
    }
    const Eigen::Index b = block.inputs.rows();
    const Eigen::Index u = dirs.rows();
    Matrix out(b, u);

    if (head_.kind != HeadKind::elbo) {
        Tape tape;
        const Matrix f = mlp_forward(main_view(), block.inputs, &tape);
        const Matrix slopes = output_slopes(f);
        const Matrix t = mlp_jvp(main_view(), tape, dirs);
        for (Eigen::Index j = 0; j < u; ++j) {
            out.col(j) = (t.middleRows(j * b, b).array() * slopes.array()).rowwise().sum().matrix();
        }
        return out;
    }

    const VaePass pass = vae_forward(block);
    const auto l = static_cast<Eigen::Index>(spec_.latent_dim);
    const Eigen::Index s = pass.samples;
    const auto pe = static_cast<Eigen::Index>(spec_.encoder_param_count());
    const Eigen::Index pd = dirs.cols() - pe;
    const Matrix de = mlp_jvp(main_view(), pass.enc_tape, dirs.leftCols(pe));
    Matrix dz(u * b * s, l);
    for (Eigen::Index j = 0; j < u; ++j) {
        for (Eigen::Index i = 0; i < b; ++i) {
            const auto dmu = de.row(j * b + i).head(l).array();
            const auto dls = de.row(j * b + i).tail(l).array();
            for (Eigen::Index k = 0; k < s; ++k) {
                dz.row((j * b + i) * s + k) =
                    dmu + pass.sigma.row(i).array() * block.latents.row(i).segment(k * l, l).array() * dls;
            }
        }
    }
    const Matrix dx = mlp_jvp(decoder_view(), pass.dec_tape, dirs.rightCols(pd), &dz);
    const double inv_s = 1.0 / static_cast<double>(s);
    for (Eigen::Index j = 0; j < u; ++j) {
        for (Eigen::Index i = 0; i < b; ++i) {
            double rec = 0.0;
            for (Eigen::Index k = 0; k < s; ++k) {
                rec += (block.inputs.row(i) - pass.xhat.row(i * s + k)).dot(dx.row((j * b + i) * s + k));
            }
            const auto dmu = de.row(j * b + i).head(l).array();
            const auto dls = de.row(j * b + i).tail(l).array();
            const double dkl = (pass.mu.row(i).array() * dmu).sum() +
                               ((pass.sigma.row(i).array().square() - 1.0) * dls).sum();
            out(i, j) = rec * inv_s - dkl;
        }
    }
    return out;
}

Matrix HeadEvaluator::vjp(const Batch& block, const Matrix& weights) const {
    check_input(spec_, block.inputs);
    const Eigen::Index b = block.inputs.rows();
    if (weights.rows() != b) {
        throw ShapeError("vjp: weight rows must equal batch size");
    }
    const Eigen::Index u = weights.cols();
    const auto p = static_cast<Eigen::Index>(param_count());
    Matrix cot = Matrix::Zero(u, p);

    if (head_.kind != HeadKind::elbo) {
        Tape tape;
        const Matrix f = mlp_forward(main_view(), block.inputs, &tape);
        const Matrix slopes = output_slopes(f);
        Matrix out_cot(u * b, f.cols());
        for (Eigen::Index j = 0; j < u; ++j) {
            out_cot.middleRows(j * b, b) = slopes.array().colwise() * weights.col(j).array();
        }
        mlp_vjp(main_view(), tape, out_cot, cot);
        return cot;
    }

    const VaePass pass = vae_forward(block);
    const auto l = static_cast<Eigen::Index>(spec_.latent_dim);
    const Eigen::Index s = pass.samples;
    const auto pe = static_cast<Eigen::Index>(spec_.encoder_param_count());
    const double inv_s = 1.0 / static_cast<double>(s);
    Matrix dec_cot(u * b * s, block.inputs.cols());
    for (Eigen::Index j = 0; j < u; ++j) {
        for (Eigen::Index i = 0; i < b; ++i) {
            for (Eigen::Index k = 0; k < s; ++k) {
                dec_cot.row((j * b + i) * s + k) =
                    (weights(i, j) * inv_s) * (block.inputs.row(i) - pass.xhat.row(i * s + k));
            }
        }
    }
    Matrix dz;
    mlp_vjp(decoder_view(), pass.dec_tape, dec_cot, cot.rightCols(p - pe), &dz);
    Matrix enc_cot(u * b, 2 * l);
    for (Eigen::Index j = 0; j < u; ++j) {
        for (Eigen::Index i = 0; i < b; ++i) {
            Eigen::RowVectorXd dmu = -weights(i, j) * pass.mu.row(i);
            Eigen::RowVectorXd dls = -weights(i, j) * (pass.sigma.row(i).array().square() - 1.0).matrix();
            for (Eigen::Index k = 0; k < s; ++k) {
                const auto g = dz.row((j * b + i) * s + k);
                dmu += g;
                dls.array() += g.array() * pass.sigma.row(i).array() * block.latents.row(i).segment(k * l, l).array();
            }
            enc_cot.row(j * b + i) << dmu, dls;
        }
    }
    mlp_vjp(main_view(), pass.enc_tape, enc_cot, cot.leftCols(pe));
    return cot;
}

Matrix HeadEvaluator::per_example(const Batch& block) const {
    check_input(spec_, block.inputs);
    const Eigen::Index b = block.inputs.rows();
    const auto p = static_cast<Eigen::Index>(param_count());
    Matrix grads = Matrix::Zero(b, p);

    if (head_.kind != HeadKind::elbo) {
        Tape tape;
        const Matrix f = mlp_forward(main_view(), block.inputs, &tape);
        mlp_per_example_grad(main_view(), tape, output_slopes(f), 1, grads);
        return grads;
    }

    const VaePass pass = vae_forward(block);
    const auto l = static_cast<Eigen::Index>(spec_.latent_dim);
    const Eigen::Index s = pass.samples;
    const auto pe = static_cast<Eigen::Index>(spec_.encoder_param_count());
    const double inv_s = 1.0 / static_cast<double>(s);
    Matrix dec_cot(b * s, block.inputs.cols());
    for (Eigen::Index i = 0; i < b; ++i) {
        for (Eigen::Index k = 0; k < s; ++k) {
            dec_cot.row(i * s + k) = inv_s * (block.inputs.row(i) - pass.xhat.row(i * s + k));
        }
    }
    Matrix dz;
    mlp_per_example_grad(decoder_view(), pass.dec_tape, dec_cot, static_cast<std::size_t>(s), grads.rightCols(p - pe),
                         &dz);
    Matrix enc_cot(b, 2 * l);
    for (Eigen::Index i = 0; i < b; ++i) {
        Eigen::RowVectorXd dmu = -pass.mu.row(i);
        Eigen::RowVectorXd dls = -(pass.sigma.row(i).array().square() - 1.0).matrix();
        for (Eigen::Index k = 0; k < s; ++k) {
            const auto g = dz.row(i * s + k);
            dmu += g;
            dls.array() += g.array() * pass.sigma.row(i).array() * block.latents.row(i).segment(k * l, l).array();
        }
        enc_cot.row(i) << dmu, dls;
    }
    mlp_per_example_grad(main_view(), pass.enc_tape, enc_cot, 1, grads.leftCols(pe));
    return grads;
}

Matrix grad_params(const ModelSpec& spec, const ParamVector& params, const Head& head, const Batch& batch) {
    return HeadEvaluator(spec, params, head).per_example(batch);
}

Vector jvp_params(const ModelSpec& spec, const ParamVector& params, const Head& head, const Batch& batch,
                  const Vector& v) {
    const Matrix dirs = v.transpose();
    return HeadEvaluator(spec, params, head).jvp(batch, dirs).col(0);
}

Vector vjp_params(const ModelSpec& spec, const ParamVector& params, const Head& head, const Batch& batch,
                  const Vector& w) {
    const Matrix weights = w;
    return HeadEvaluator(spec, params, head).vjp(batch, weights).row(0).transpose();
}

}  // namespace nfk::nn
