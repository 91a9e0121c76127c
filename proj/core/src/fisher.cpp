#include "nfk/fisher.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"
#include "nfk/nn/mlp.hpp"
#include "nfk/nn/model_io.hpp"

namespace nfk::fisher {

using nlohmann::json;

std::string to_string(KernelKind k) { return k == KernelKind::nfk ? "nfk" : "ntk"; }

KernelKind kernel_kind_from_string(const std::string& s) {
    if (s == "nfk") return KernelKind::nfk;
    if (s == "ntk") return KernelKind::ntk;
    throw ConfigError("unknown kernel kind '" + s + "' (expected nfk or ntk)");
}

namespace {

std::size_t block_of(const Parallelism& par) { return std::max<std::size_t>(1, par.block); }

std::size_t block_count(std::size_t n, std::size_t block) { return (n + block - 1) / block; }

struct Sum {
    Matrix value;
};

}  // namespace

Vector centering_stats(const nn::ModelSpec& spec, const nn::ParamVector& params, const nn::Head& head,
                       const nn::Batch& samples, const Parallelism& par) {
    if (samples.size() == 0) {
        throw DataError("centering needs at least one sample");
    }
    const nn::HeadEvaluator eval(spec, params, head);
    const std::size_t block = block_of(par);
    Vector total = Vector::Zero(static_cast<Eigen::Index>(params.size()));
    ordered_reduce<Sum>(
        block_count(samples.size(), block), resolve_threads(par.threads),
        [&](std::size_t bi) {
            const std::size_t begin = bi * block;
            const std::size_t count = std::min(block, samples.size() - begin);
            const Matrix ones = Matrix::Ones(static_cast<Eigen::Index>(count), 1);
            return Sum{eval.vjp(samples.rows(begin, count), ones)};
        },
        [&](Sum&& s) { total += s.value.row(0).transpose(); });
    return total / static_cast<double>(samples.size());
}

Vector diag_fim(const nn::ModelSpec& spec, const nn::ParamVector& params, const nn::Head& head,
                const nn::Batch& samples, const Vector& centering, double eps, const Parallelism& par) {
    if (samples.size() == 0) {
        throw DataError("FIM estimate needs at least one sample");
    }
    if (centering.size() != static_cast<Eigen::Index>(params.size())) {
        throw ShapeError("diag_fim: centering length mismatch");
    }
    const nn::HeadEvaluator eval(spec, params, head);
    const std::size_t block = block_of(par);
    Vector total = Vector::Zero(centering.size());
    ordered_reduce<Sum>(
        block_count(samples.size(), block), resolve_threads(par.threads),
        [&](std::size_t bi) {
            const std::size_t begin = bi * block;
            const std::size_t count = std::min(block, samples.size() - begin);
            Matrix g = eval.per_example(samples.rows(begin, count));
            g.rowwise() -= centering.transpose();
            return Sum{g.cwiseProduct(g).colwise().sum()};
        },
        [&](Sum&& s) { total += s.value.row(0).transpose(); });
    Vector d = total / static_cast<double>(samples.size());
    const double top = d.size() > 0 ? d.maxCoeff() : 0.0;
    d.array() += eps * std::max(top, 1e-30);
    return d;
}

std::shared_ptr<const FisherContext> FisherContext::build(nn::Model model, const nn::Batch& data,
                                                          const FisherConfig& cfg) {
    model.spec.validate();
    data.validate();
    if (data.size() == 0) {
        throw DataError("Fisher context needs at least one example");
    }
    std::shared_ptr<FisherContext> ctx(new FisherContext());
    ctx->model_ = std::move(model);
    ctx->cfg_ = cfg;
    ctx->finish();
    const auto p = static_cast<Eigen::Index>(ctx->param_count());
    if (cfg.kind == KernelKind::ntk) {
        ctx->centering_ = Vector::Zero(p);
        ctx->fim_diag_ = Vector::Ones(p);
        ctx->sample_count_ = 0;
        ctx->finish();
        return ctx;
    }
    if (!(cfg.damping > 0.0) || !std::isfinite(cfg.damping)) {
        throw ConfigError("FIM damping must be positive");
    }
    const nn::Model& m = ctx->model_;
    nn::Batch samples;
    switch (m.spec.family) {
        case nn::Family::gan_discriminator:
            if (!m.generator_spec) {
                throw ConfigError("GAN Fisher context needs the generator");
            }
            if (cfg.gan_samples == 0) {
                throw ConfigError("gan_samples must be positive");
            }
            samples.inputs = ctx->generator_samples();
            break;
        case nn::Family::vae:
            if (cfg.vae_samples == 0) {
                throw ConfigError("vae_samples must be positive");
            }
            samples = ctx->attach_latents(data);
            break;
        case nn::Family::classifier:
        case nn::Family::ebm:
            samples = data;
            break;
        case nn::Family::gan_generator:
            throw ConfigError("Fisher context needs the discriminator, not the generator");
    }
    samples.validate();
    if (samples.size() == 0) {
        throw DataError("Fisher context needs a nonempty sample set");
    }
    ctx->centering_ = m.spec.family == nn::Family::vae
                          ? Vector::Zero(p)
                          : centering_stats(m.spec, m.params, ctx->head_, samples, cfg.parallelism);
    ctx->fim_diag_ = diag_fim(m.spec, m.params, ctx->head_, samples, ctx->centering_, cfg.damping, cfg.parallelism);
    ctx->sample_count_ = samples.size();
    ctx->finish();
    return ctx;
}

std::shared_ptr<const FisherContext> FisherContext::from_parts(nn::Model model, const FisherConfig& cfg,
                                                               Vector centering, Vector fim_diag,
                                                               std::size_t sample_count) {
    model.spec.validate();
    std::shared_ptr<FisherContext> ctx(new FisherContext());
    ctx->model_ = std::move(model);
    ctx->cfg_ = cfg;
    const auto p = static_cast<Eigen::Index>(ctx->model_.params.size());
    if (centering.size() != p || fim_diag.size() != p) {
        throw DataError("Fisher context arrays do not match the model parameter count");
    }
    if ((fim_diag.array() <= 0.0).any()) {
        throw DataError("Fisher context has nonpositive FIM entries");
    }
    ctx->centering_ = std::move(centering);
    ctx->fim_diag_ = std::move(fim_diag);
    ctx->sample_count_ = sample_count;
    ctx->finish();
    return ctx;
}

void FisherContext::finish() {
    head_ = cfg_.head.value_or(nn::default_head(model_.spec.family));
    nn::check_head(model_.spec, head_);
    model_fp_ = nn::model_fingerprint(model_);
    if (fim_diag_.size() > 0) {
        inv_sqrt_ = fim_diag_.array().rsqrt().matrix();
        if (cfg_.kind == KernelKind::ntk) {
            inv_sqrt_.setOnes();
        }
    }
    std::uint64_t h = io::fnv1a64(std::string("nfk-context/1"), model_fp_);
    h = io::fnv1a64(to_string(cfg_.kind) + "/" + nn::to_string(head_.kind) + "/" + std::to_string(head_.index), h);
    if (model_.spec.family == nn::Family::vae) {
        h = io::fnv1a64(std::to_string(cfg_.seed) + "/" + std::to_string(cfg_.vae_samples), h);
    }
    h = io::fnv1a64(std::span<const double>(centering_.data(), static_cast<std::size_t>(centering_.size())), h);
    h = io::fnv1a64(std::span<const double>(fim_diag_.data(), static_cast<std::size_t>(fim_diag_.size())), h);
    fingerprint_ = h;
}

nn::Batch FisherContext::attach_latents(const nn::Batch& x) const {
    if (model_.spec.family != nn::Family::vae) {
        return x;
    }
    const auto width = static_cast<Eigen::Index>(cfg_.vae_samples * model_.spec.latent_dim);
    if (x.has_latents()) {
        if (x.latents.cols() != width) {
            throw DataError("cached latents have " + std::to_string(x.latents.cols()) + " columns, expected " +
                            std::to_string(width));
        }
        return x;
    }
    nn::Batch out = x;
    out.latents.resize(x.inputs.rows(), width);
    const RngStream root = RngStream(cfg_.seed).derive(stream_tag("vae-latents"));
    for (Eigen::Index i = 0; i < x.inputs.rows(); ++i) {
        const auto key = io::fnv1a64(std::span<const double>(x.inputs.row(i).data(), static_cast<std::size_t>(x.inputs.cols())));
        RngStream rng = root.derive(key);
        for (Eigen::Index j = 0; j < width; ++j) {
            out.latents(i, j) = rng.normal();
        }
    }
    return out;
}

Matrix FisherContext::generator_samples() const {
    if (!model_.generator_spec) {
        throw ConfigError("model has no generator");
    }
    const auto& g = *model_.generator_spec;
    RngStream rng = RngStream(cfg_.seed).derive(stream_tag("gan-noise"));
    const Matrix h = seeded_gaussian(cfg_.gan_samples, g.latent_dim, rng);
    return nn::mlp_forward(nn::MlpView{g.layers, model_.generator_params.span()}, h);
}

Matrix fisher_score(const FisherContext& ctx, const nn::Batch& x) {
    if (ctx.spec().family == nn::Family::vae && !x.has_latents()) {
        throw DataError("VAE Fisher score needs cached latents for every example");
    }
    const nn::HeadEvaluator eval(ctx.spec(), ctx.params(), ctx.head());
    Matrix u = eval.per_example(x);
    if (ctx.kind() == KernelKind::nfk) {
        u.rowwise() -= ctx.centering().transpose();
    }
    return u;
}

Matrix fisher_vector(const FisherContext& ctx, const nn::Batch& x) {
    Matrix u = fisher_score(ctx, x);
    u.array().rowwise() *= ctx.inv_sqrt_fim().transpose().array();
    return u;
}

std::uint64_t batch_digest(const nn::Batch& b) {
    std::uint64_t h = io::fnv1a64(std::to_string(b.inputs.rows()) + "x" + std::to_string(b.inputs.cols()));
    h = io::fnv1a64(std::span<const double>(b.inputs.data(), static_cast<std::size_t>(b.inputs.size())), h);
    if (b.has_labels()) {
        h = io::fnv1a64(std::span<const std::byte>(reinterpret_cast<const std::byte*>(b.labels.data()),
                                                   b.labels.size() * sizeof(int)),
                        h);
    }
    return h;
}

FisherOperator::FisherOperator(ContextPtr ctx, const nn::Batch& data)
    : ctx_(std::move(ctx)), par_(ctx_->config().parallelism) {
    data.validate();
    if (data.size() == 0) {
        throw DataError("Fisher operator needs at least one example");
    }
    if (static_cast<std::size_t>(data.inputs.cols()) != ctx_->spec().input_dim()) {
        throw DataError("data width " + std::to_string(data.inputs.cols()) + " does not match model input " +
                        std::to_string(ctx_->spec().input_dim()));
    }
    data_ = ctx_->attach_latents(data);
    data_digest_ = batch_digest(data);
}

Matrix FisherOperator::jvp_rows(const nn::Batch& x, const Matrix& m) const {
    if (static_cast<std::size_t>(m.rows()) != cols()) {
        throw ShapeError("apply_jvp: M has " + std::to_string(m.rows()) + " rows, expected P = " +
                         std::to_string(cols()));
    }
    const FisherContext& ctx = *ctx_;
    const Matrix scaled = ctx.inv_sqrt_fim().asDiagonal() * m;
    const Matrix dirs = scaled.transpose();
    Eigen::RowVectorXd shift;
    if (ctx.kind() == KernelKind::nfk) {
        shift = ctx.centering().transpose() * scaled;
    }
    const nn::HeadEvaluator eval(ctx.spec(), ctx.params(), ctx.head());
    const std::size_t n = x.size();
    const std::size_t block = block_of(par_);
    Matrix out(static_cast<Eigen::Index>(n), m.cols());
    parallel_for(block_count(n, block), resolve_threads(par_.threads), [&](std::size_t bi) {
        const std::size_t begin = bi * block;
        const std::size_t count = std::min(block, n - begin);
        Matrix part = eval.jvp(x.rows(begin, count), dirs);
        if (shift.size() > 0) {
            part.rowwise() -= shift;
        }
        out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) = part;
    });
    return out;
}

Matrix FisherOperator::apply_jvp(const Matrix& m) const { return jvp_rows(data_, m); }

Matrix FisherOperator::apply_jvp(const nn::Batch& x, const Matrix& m) const {
    x.validate();
    return jvp_rows(ctx_->attach_latents(x), m);
}

Matrix FisherOperator::apply_vjp(const Matrix& w) const {
    if (static_cast<std::size_t>(w.rows()) != rows()) {
        throw ShapeError("apply_vjp: W has " + std::to_string(w.rows()) + " rows, expected N = " +
                         std::to_string(rows()));
    }
    const FisherContext& ctx = *ctx_;
    const nn::HeadEvaluator eval(ctx.spec(), ctx.params(), ctx.head());
    const std::size_t n = rows();
    const std::size_t block = block_of(par_);
    Matrix g = Matrix::Zero(w.cols(), static_cast<Eigen::Index>(cols()));
    ordered_reduce<Sum>(
        block_count(n, block), resolve_threads(par_.threads),
        [&](std::size_t bi) {
            const std::size_t begin = bi * block;
            const std::size_t count = std::min(block, n - begin);
            const Matrix wb = w.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
            return Sum{eval.vjp(data_.rows(begin, count), wb)};
        },
        [&](Sum&& s) { g += s.value; });
    if (ctx.kind() == KernelKind::nfk) {
        const Eigen::VectorXd colsum = w.colwise().sum().transpose();
        g.noalias() -= colsum * ctx.centering().transpose();
    }
    Matrix out = g.transpose();
    out = ctx.inv_sqrt_fim().asDiagonal() * out;
    return out;
}

Matrix FisherOperator::materialize() const {
    const double entries = static_cast<double>(rows()) * static_cast<double>(cols());
    if (entries > 1e8) {
        throw ConfigError("materialize_fisher: N x P = " + std::to_string(rows()) + " x " + std::to_string(cols()) +
                          " exceeds the 1e8-entry limit");
    }
    const std::size_t n = rows();
    const std::size_t block = block_of(par_);
    Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cols()));
    parallel_for(block_count(n, block), resolve_threads(par_.threads), [&](std::size_t bi) {
        const std::size_t begin = bi * block;
        const std::size_t count = std::min(block, n - begin);
        out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count)) =
            fisher_vector(*ctx_, data_.rows(begin, count));
    });
    return out;
}

double FisherOperator::squared_norm() const {
    const std::size_t n = rows();
    const std::size_t block = block_of(par_);
    std::vector<double> parts(block_count(n, block), 0.0);
    parallel_for(parts.size(), resolve_threads(par_.threads), [&](std::size_t bi) {
        const std::size_t begin = bi * block;
        const std::size_t count = std::min(block, n - begin);
        parts[bi] = fisher_vector(*ctx_, data_.rows(begin, count)).squaredNorm();
    });
    double total = 0.0;
    for (double v : parts) total += v;
    return total;
}

double kernel_eval(const FisherContext& ctx, std::span<const double> x, std::span<const double> z) {
    if (x.size() != ctx.spec().input_dim() || z.size() != ctx.spec().input_dim()) {
        throw ShapeError("kernel_eval: input width mismatch");
    }
    nn::Batch b;
    b.inputs.resize(2, static_cast<Eigen::Index>(x.size()));
    b.inputs.row(0) = Eigen::Map<const Eigen::RowVectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    b.inputs.row(1) = Eigen::Map<const Eigen::RowVectorXd>(z.data(), static_cast<Eigen::Index>(z.size()));
    const Matrix v = fisher_vector(ctx, ctx.attach_latents(b));
    return v.row(0).dot(v.row(1));
}

void save_context(const FisherContext& ctx, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_vector(dir / "centering.bin", ctx.centering());
    io::write_vector(dir / "fim_diag.bin", ctx.fim_diag());
    const auto& cfg = ctx.config();
    json j;
    j["format"] = "nfk-fisher-context/1";
    j["family"] = nn::to_string(ctx.spec().family);
    j["kernel_kind"] = to_string(ctx.kind());
    j["head"] = {{"kind", nn::to_string(ctx.head().kind)}, {"index", ctx.head().index}};
    j["P"] = ctx.param_count();
    j["N"] = ctx.sample_count();
    j["damping"] = cfg.damping;
    j["gan_samples"] = cfg.gan_samples;
    j["vae_samples"] = cfg.vae_samples;
    j["seed"] = cfg.seed;
    j["model_fingerprint"] = io::hex64(ctx.model_fingerprint());
    j["fingerprint"] = io::hex64(ctx.fingerprint());
    j["files"] = {{"centering.bin", io::hex64(io::file_digest(dir / "centering.bin"))},
                  {"fim_diag.bin", io::hex64(io::file_digest(dir / "fim_diag.bin"))}};
    io::write_text(dir / "context.json", j.dump(2) + "\n");
}

ContextPtr load_context(const std::filesystem::path& dir, nn::Model model) {
    try {
        const json j = json::parse(io::read_text(dir / "context.json"));
        if (j.value("format", std::string()) != "nfk-fisher-context/1") {
            throw DataError(dir.string() + ": not a Fisher context");
        }
        if (j.at("model_fingerprint").get<std::string>() != io::hex64(nn::model_fingerprint(model))) {
            throw DataError(dir.string() + ": context was built for a different model");
        }
        for (const auto& [name, digest] : j.at("files").items()) {
            if (io::hex64(io::file_digest(dir / name)) != digest.get<std::string>()) {
                throw DataError((dir / name).string() + ": digest mismatch");
            }
        }
        FisherConfig cfg;
        cfg.kind = kernel_kind_from_string(j.at("kernel_kind").get<std::string>());
        cfg.head = nn::Head{nn::head_kind_from_string(j.at("head").at("kind").get<std::string>()),
                            j.at("head").at("index").get<std::size_t>()};
        cfg.damping = j.at("damping").get<double>();
        cfg.gan_samples = j.at("gan_samples").get<std::size_t>();
        cfg.vae_samples = j.at("vae_samples").get<std::size_t>();
        cfg.seed = j.at("seed").get<std::uint64_t>();
        const std::size_t p = j.at("P").get<std::size_t>();
        Vector c = io::read_vector(dir / "centering.bin", p);
        Vector d = io::read_vector(dir / "fim_diag.bin", p);
        auto ctx = FisherContext::from_parts(std::move(model), cfg, std::move(c), std::move(d),
                                             j.at("N").get<std::size_t>());
        if (io::hex64(ctx->fingerprint()) != j.at("fingerprint").get<std::string>()) {
            throw DataError(dir.string() + ": context fingerprint mismatch");
        }
        return ctx;
    } catch (const json::exception& e) {
        throw DataError(dir.string() + "/context.json: " + e.what());
    }
}

}  // namespace nfk::fisher
