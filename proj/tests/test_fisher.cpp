#include <doctest.h>

#include <cstring>
#include <filesystem>

#include <Eigen/Eigenvalues>

#include "nfk/errors.hpp"
#include "nfk/fisher.hpp"
#include "support.hpp"

using namespace nfk;
using namespace nfk::fisher;
using nfk::testing::random_batch;
using nfk::testing::random_matrix;
using nfk::testing::rel_diff;
using nfk::testing::rel_fro;
using nfk::testing::tiny_model;

namespace {

bool same_bits(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

FisherConfig small_cfg(KernelKind kind = KernelKind::nfk) {
    FisherConfig cfg;
    cfg.kind = kind;
    cfg.gan_samples = 64;
    cfg.vae_samples = 3;
    cfg.seed = 5;
    cfg.parallelism.block = 4;
    return cfg;
}

const nn::Family kFamilies[] = {nn::Family::classifier, nn::Family::ebm, nn::Family::gan_discriminator,
                                nn::Family::vae};

}  // namespace

TEST_SUITE("fisher") {

TEST_CASE("one-point centering set gives a zero score") {
    const nn::Model m = tiny_model(nn::Family::classifier, 1);
    const nn::Batch x = random_batch(1, 3, 2);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    CHECK(fisher_score(*ctx, x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("GAN with a constant generator centers on the discriminator gradient at that point") {
    nn::Model m = tiny_model(nn::Family::gan_discriminator, 2);
    const auto& last = m.generator_params.layout.back();
    m.generator_params.values.setZero();
    const double c[] = {0.3, -0.7, 1.1};
    for (std::size_t i = 0; i < 3; ++i) m.generator_params.values(static_cast<Eigen::Index>(last.bias_offset + i)) = c[i];
    const auto ctx = FisherContext::build(m, random_batch(5, 3, 3), small_cfg());
    nn::Batch pt;
    pt.inputs = Eigen::Map<const Matrix>(c, 1, 3);
    const Matrix g = nn::grad_params(m.spec, m.params, {nn::HeadKind::output, 0}, pt);
    CHECK(rel_fro(ctx->centering().transpose(), g) < 1e-14);
}

TEST_CASE("classifier centering is minus the mean free-energy gradient, by per-logit oracle") {
    const nn::Model m = tiny_model(nn::Family::classifier, 3);
    const nn::Batch x = random_batch(7, 3, 4);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    const Matrix prob = nn::softmax_rows(nn::forward(m.spec, m.params, x));
    Vector oracle = Vector::Zero(static_cast<Eigen::Index>(m.params.size()));
    for (std::size_t y = 0; y < 3; ++y) {
        const Matrix gy = nn::grad_params(m.spec, m.params, {nn::HeadKind::logit, y}, x);
        for (Eigen::Index i = 0; i < 7; ++i) oracle += prob(i, y) * gy.row(i).transpose();
    }
    oracle /= 7.0;
    CHECK(rel_fro(ctx->centering(), oracle) < 1e-12);
}

TEST_CASE("diag_fim: one sample, zero scores, and the full-FIM diagonal") {
    const nn::Model m = tiny_model(nn::Family::ebm, 4);
    const nn::Head h{nn::HeadKind::neg_energy, 0};
    const nn::Batch one = random_batch(1, 3, 5);
    const Vector zero = Vector::Zero(static_cast<Eigen::Index>(m.params.size()));
    const Matrix g = nn::grad_params(m.spec, m.params, h, one);
    const Vector d1 = diag_fim(m.spec, m.params, h, one, zero, 1e-8);
    const Vector sq = g.row(0).array().square().matrix().transpose();
    CHECK(rel_fro(d1, (sq.array() + 1e-8 * sq.maxCoeff()).matrix()) < 1e-15);

    nn::ModelSpec flat = m.spec;
    nn::ParamVector zp = nn::ParamVector::zeros(flat);
    // All-zero weights: only the output bias has a nonzero gradient, so use a
    // centering equal to that gradient to make every score vanish.
    const Matrix gz = nn::grad_params(flat, zp, h, random_batch(3, 3, 6));
    const Vector dz = diag_fim(flat, zp, h, random_batch(3, 3, 6), gz.row(0).transpose(), 1e-8);
    CHECK((dz.array() == 1e-8 * 1e-30).all());

    const nn::Batch five = random_batch(5, 3, 7);
    const Vector z = nfk::fisher::centering_stats(m.spec, m.params, h, five);
    Matrix u = nn::grad_params(m.spec, m.params, h, five);
    u.rowwise() -= z.transpose();
    const Matrix full = u.transpose() * u / 5.0;
    const Vector d = diag_fim(m.spec, m.params, h, five, z, 1e-8);
    const Vector expect = (full.diagonal().array() + 1e-8 * full.diagonal().maxCoeff()).matrix();
    CHECK(rel_fro(d, expect) < 1e-13);
}

TEST_CASE("damped FIM is positive and bounded below by eps * max") {
    for (nn::Family fam : kFamilies) {
        const nn::Model m = tiny_model(fam, 8);
        const auto ctx = FisherContext::build(m, random_batch(12, 3, 9), small_cfg());
        CHECK(ctx->fim_diag().minCoeff() > 0.0);
        CHECK(ctx->fim_diag().minCoeff() >= 1e-8 * ctx->fim_diag().maxCoeff() / (1 + 1e-8) * (1 - 1e-12));
    }
}

TEST_CASE("constant discriminator gives zero scores") {
    nn::Model m = tiny_model(nn::Family::gan_discriminator, 5);
    for (const auto& slot : m.params.layout)
        for (std::size_t i = 0; i < slot.rows * slot.cols; ++i)
            m.params.values(static_cast<Eigen::Index>(slot.weight_offset + i)) = 0.0;
    const auto ctx = FisherContext::build(m, random_batch(6, 3, 1), small_cfg());
    // With every weight zero, D is constant in x and so is its parameter gradient.
    CHECK(fisher_score(*ctx, random_batch(4, 3, 2)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("scores average to zero over the centering set") {
    const nn::Model cls = tiny_model(nn::Family::classifier, 6);
    const nn::Batch x = random_batch(10, 3, 7);
    const auto ctx = FisherContext::build(cls, x, small_cfg());
    const Matrix u = fisher_score(*ctx, x);
    CHECK(u.colwise().sum().cwiseAbs().maxCoeff() <= 1e-12 * u.cwiseAbs().maxCoeff());

    const nn::Model gan = tiny_model(nn::Family::gan_discriminator, 6);
    const auto gctx = FisherContext::build(gan, x, small_cfg());
    nn::Batch samples;
    samples.inputs = gctx->generator_samples();
    const Matrix ug = fisher_score(*gctx, samples);
    CHECK(ug.colwise().sum().cwiseAbs().maxCoeff() <= 1e-12 * ug.cwiseAbs().maxCoeff() * 64);
}

TEST_CASE("binary linear-softmax classifier: brute-force score oracle") {
    nn::Model m;
    m.spec = nn::ModelSpec::mlp(nn::Family::classifier, {2, 2}, nn::Activation::identity);
    m.params = nn::init_params(m.spec, RngStream(3));
    m.params.values(4) = 0.2;
    m.params.values(5) = -0.4;
    Matrix pts(3, 2);
    pts << 0.5, 1.0, -1.0, 0.3, 2.0, -0.5;
    nn::Batch x;
    x.inputs = pts;
    const auto ctx = FisherContext::build(m, x, small_cfg());

    // grad f^y wrt (W, b) for a linear layer: row y of W gets x, b_y gets 1.
    auto logit_grad = [](const Eigen::RowVector2d& xi, int y) {
        Vector g = Vector::Zero(6);
        g(2 * y) = xi(0);
        g(2 * y + 1) = xi(1);
        g(4 + y) = 1.0;
        return g;
    };
    const Eigen::Map<const Matrix> w(m.params.values.data(), 2, 2);
    const Eigen::Map<const Vector> b(m.params.values.data() + 4, 2);
    std::vector<Vector> s;
    for (int i = 0; i < 3; ++i) {
        const Vector f = w * pts.row(i).transpose() + b;
        const double z = std::exp(f(0)) + std::exp(f(1));
        s.push_back(std::exp(f(0)) / z * logit_grad(pts.row(i), 0) + std::exp(f(1)) / z * logit_grad(pts.row(i), 1));
    }
    const Vector zc = (s[0] + s[1] + s[2]) / 3.0;
    const Matrix u = fisher_score(*ctx, x);
    for (int i = 0; i < 3; ++i) CHECK(rel_fro(u.row(i).transpose(), s[static_cast<std::size_t>(i)] - zc) < 1e-13);
}

TEST_CASE("VAE score with the exact posterior encoder matches grad log p(x)") {
    // Linear-Gaussian model p(z) = N(0, I), p(x|z) = N(A z + b, I) with
    // orthogonal columns in A, so the posterior is diagonal and representable by
    // a linear encoder. The ELBO is then tight and its decoder gradient is the
    // gradient of log N(x; b, A A^T + I).
    const std::size_t d = 3;
    nn::Model m;
    m.spec.family = nn::Family::vae;
    m.spec.latent_dim = 2;
    m.spec.layers = {{d, 4, nn::Activation::identity}};
    m.spec.decoder = {{2, d, nn::Activation::identity}};
    m.params = nn::ParamVector::zeros(m.spec);
    Matrix a(3, 2);
    a << 1.0, 0.4, 0.5, -0.2, 0.0, 0.6;
    a.col(1) -= a.col(1).dot(a.col(0)) / a.col(0).squaredNorm() * a.col(0);
    const Vector bvec = (Vector(3) << 0.1, -0.3, 0.2).finished();
    const Vector post_var = (1.0 / (1.0 + (a.transpose() * a).diagonal().array())).matrix();
    const Matrix e = post_var.asDiagonal() * a.transpose();  // mu = E (x - b)
    const auto& enc = m.params.layout[0];
    const auto& dec = m.params.layout[1];
    for (int r = 0; r < 2; ++r) {
        for (std::size_t c = 0; c < d; ++c)
            m.params.values(static_cast<Eigen::Index>(enc.weight_offset + r * d + c)) = e(r, static_cast<Eigen::Index>(c));
        m.params.values(static_cast<Eigen::Index>(enc.bias_offset + r)) = -(e * bvec)(r);
        m.params.values(static_cast<Eigen::Index>(enc.bias_offset + 2 + r)) = 0.5 * std::log(post_var(r));
    }
    for (std::size_t r = 0; r < d; ++r) {
        for (int c = 0; c < 2; ++c)
            m.params.values(static_cast<Eigen::Index>(dec.weight_offset + r * 2 + c)) = a(static_cast<Eigen::Index>(r), c);
        m.params.values(static_cast<Eigen::Index>(dec.bias_offset + r)) = bvec(static_cast<Eigen::Index>(r));
    }

    const Vector x = (Vector(3) << 0.7, -0.2, 0.9).finished();
    const Matrix cov = a * a.transpose() + Matrix::Identity(3, 3);
    const Matrix cinv = cov.inverse();
    const Vector r = cinv * (x - bvec);
    const Matrix grad_a = r * r.transpose() * a - cinv * a;

    const std::size_t s = 20000;
    FisherConfig cfg;
    cfg.vae_samples = 1;
    const auto ctx = FisherContext::from_parts(m, cfg, Vector::Zero(static_cast<Eigen::Index>(m.params.size())),
                                               Vector::Ones(static_cast<Eigen::Index>(m.params.size())), 0);
    nn::Batch rows;
    rows.inputs = x.transpose().replicate(static_cast<Eigen::Index>(s), 1);
    rows.latents = random_matrix(s, 2, 99);
    const Matrix u = fisher_score(*ctx, rows);  // one latent draw per row
    const Vector mean = u.colwise().mean().transpose();
    const Vector sd = ((u.rowwise() - mean.transpose()).array().square().colwise().mean().sqrt()).transpose();
    const Vector se = sd / std::sqrt(static_cast<double>(s));

    Vector exact = Vector::Zero(mean.size());
    for (std::size_t i = 0; i < d; ++i) {
        for (int c = 0; c < 2; ++c)
            exact(static_cast<Eigen::Index>(dec.weight_offset + i * 2 + c)) = grad_a(static_cast<Eigen::Index>(i), c);
        exact(static_cast<Eigen::Index>(dec.bias_offset + i)) = r(static_cast<Eigen::Index>(i));
    }
    // Encoder gradient vanishes at the exact posterior.
    for (Eigen::Index j = 0; j < mean.size(); ++j) {
        CAPTURE(j);
        CHECK(std::abs(mean(j) - exact(j)) <= 4.0 * se(j) + 1e-12);
    }
}

TEST_CASE("fisher_vector scales by the inverse square root of the FIM") {
    const nn::Model m = tiny_model(nn::Family::classifier, 9);
    const nn::Batch x = random_batch(4, 3, 10);
    const auto p = static_cast<Eigen::Index>(m.params.size());
    const Vector z = random_matrix(m.params.size(), 1, 11).col(0);
    const auto ones = FisherContext::from_parts(m, {}, z, Vector::Ones(p), 4);
    const auto fours = FisherContext::from_parts(m, {}, z, Vector::Constant(p, 4.0), 4);
    CHECK(same_bits(fisher_vector(*ones, x), fisher_score(*ones, x)));
    CHECK(rel_fro(fisher_vector(*fours, x), 0.5 * fisher_score(*fours, x)) < 1e-16);

    const auto ctx = FisherContext::build(m, x, small_cfg());
    Matrix oracle = fisher_score(*ctx, x);
    for (Eigen::Index j = 0; j < p; ++j) oracle.col(j) /= std::sqrt(ctx->fim_diag()(j));
    CHECK(rel_fro(fisher_vector(*ctx, x), oracle) < 1e-15);
}

TEST_CASE("operator products agree with the materialized matrix for every family") {
    for (KernelKind kind : {KernelKind::nfk, KernelKind::ntk}) {
        for (nn::Family fam : kFamilies) {
            const nn::Model m = tiny_model(fam, 12);
            const nn::Batch x = random_batch(11, 3, 13);
            const auto ctx = FisherContext::build(m, x, small_cfg(kind));
            const FisherOperator op(ctx, x);
            const Matrix v = op.materialize();
            const Matrix mdir = random_matrix(op.cols(), 3, 14);
            const Matrix w = random_matrix(op.rows(), 3, 15);
            CHECK(rel_fro(op.apply_jvp(mdir), v * mdir) < 1e-10);
            CHECK(rel_fro(op.apply_vjp(w), v.transpose() * w) < 1e-10);
            CHECK(rel_diff(frobenius_dot(op.apply_vjp(w), mdir), frobenius_dot(w, op.apply_jvp(mdir))) < 1e-10);
            CHECK(op.squared_norm() == doctest::Approx(v.squaredNorm()).epsilon(1e-12));
            CHECK(op.apply_jvp(Matrix::Zero(op.cols(), 2)).cwiseAbs().maxCoeff() == 0.0);
            CHECK(op.apply_vjp(Matrix::Zero(op.rows(), 2)).cwiseAbs().maxCoeff() == 0.0);
            for (Eigen::Index i : {0, 5, 10}) {
                Matrix ei = Matrix::Zero(op.rows(), 1);
                ei(i, 0) = 1.0;
                CHECK(rel_fro(op.apply_vjp(ei).transpose(), v.row(i)) < 1e-12);
            }
            const Matrix gram = v * v.transpose();
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
            CHECK(es.eigenvalues().minCoeff() >= -1e-9 * gram.trace());
            const double k01 = kernel_eval(*ctx, std::span<const double>(x.inputs.row(0).data(), 3),
                                           std::span<const double>(x.inputs.row(1).data(), 3));
            const double k10 = kernel_eval(*ctx, std::span<const double>(x.inputs.row(1).data(), 3),
                                           std::span<const double>(x.inputs.row(0).data(), 3));
            const double k00 = kernel_eval(*ctx, std::span<const double>(x.inputs.row(0).data(), 3),
                                           std::span<const double>(x.inputs.row(0).data(), 3));
            CHECK(k01 == k10);
            CHECK(k00 >= 0.0);
            CHECK(rel_diff(k01, gram(0, 1)) < 1e-10);
        }
    }
}

TEST_CASE("linear discriminator: scaled unit directions recover centered inputs") {
    nn::Model m;
    m.spec = nn::ModelSpec::mlp(nn::Family::gan_discriminator, {3, 1}, nn::Activation::identity);
    m.params = nn::init_params(m.spec, RngStream(1));
    m.generator_spec = nn::ModelSpec::mlp(nn::Family::gan_generator, {2, 3}, nn::Activation::identity);
    m.generator_params = nn::init_params(*m.generator_spec, RngStream(2));
    const nn::Batch x = random_batch(6, 3, 3);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    const FisherOperator op(ctx, x);
    Matrix mdir = Matrix::Zero(4, 3);
    for (Eigen::Index j = 0; j < 3; ++j) mdir(j, j) = std::sqrt(ctx->fim_diag()(j));
    const Matrix got = op.apply_jvp(mdir);
    const Matrix expect = x.inputs.rowwise() - ctx->centering().head(3).transpose();
    CHECK(rel_fro(got, expect) < 1e-12);
}

TEST_CASE("NTK mode reproduces the plain gradient Gram matrix") {
    const nn::Model m = tiny_model(nn::Family::ebm, 14);
    const nn::Batch x = random_batch(8, 3, 15);
    const auto ctx = FisherContext::build(m, x, small_cfg(KernelKind::ntk));
    CHECK(ctx->centering().cwiseAbs().maxCoeff() == 0.0);
    CHECK((ctx->fim_diag().array() == 1.0).all());
    const Matrix j = nn::grad_params(m.spec, m.params, ctx->head(), x);
    const Matrix v = FisherOperator(ctx, x).materialize();
    CHECK(rel_fro(v * v.transpose(), j * j.transpose()) < 1e-14);
}

TEST_CASE("products are bitwise independent of thread count and repeatable") {
    const nn::Model m = tiny_model(nn::Family::classifier, 16);
    const nn::Batch x = random_batch(37, 3, 17);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    FisherOperator op(ctx, x);
    const Matrix mdir = random_matrix(op.cols(), 4, 18);
    const Matrix w = random_matrix(op.rows(), 4, 19);
    op.set_parallelism({1, 4});
    const Matrix j1 = op.apply_jvp(mdir);
    const Matrix v1 = op.apply_vjp(w);
    for (std::size_t threads : {4u, 8u}) {
        op.set_parallelism({threads, 4});
        CHECK(same_bits(op.apply_jvp(mdir), j1));
        CHECK(same_bits(op.apply_vjp(w), v1));
    }
    CHECK(same_bits(fisher_score(*ctx, x), fisher_score(*ctx, x)));

    FisherConfig c1 = small_cfg();
    c1.parallelism = {1, 4};
    FisherConfig c8 = small_cfg();
    c8.parallelism = {8, 4};
    const auto a = FisherContext::build(m, x, c1);
    const auto b = FisherContext::build(m, x, c8);
    CHECK(a->fingerprint() == b->fingerprint());
}

TEST_CASE("VAE latents are cached per input and required for scores") {
    const nn::Model m = tiny_model(nn::Family::vae, 20);
    const nn::Batch x = random_batch(5, 3, 21);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    CHECK_THROWS_AS(fisher_score(*ctx, x), DataError);
    const nn::Batch a = ctx->attach_latents(x);
    const nn::Batch b = ctx->attach_latents(x.rows(2, 1));
    CHECK(a.latents.cols() == 3 * 2);
    CHECK(same_bits(a.latents.row(2), b.latents));
}

TEST_CASE("context files round-trip and reject a different model") {
    const auto dir = std::filesystem::temp_directory_path() / "nfk_test_ctx";
    const nn::Model m = tiny_model(nn::Family::gan_discriminator, 22);
    const nn::Batch x = random_batch(9, 3, 23);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    save_context(*ctx, dir);
    const auto back = load_context(dir, m);
    CHECK(back->fingerprint() == ctx->fingerprint());
    CHECK(same_bits(back->fim_diag(), ctx->fim_diag()));
    CHECK(same_bits(FisherOperator(back, x).apply_jvp(Matrix::Ones(m.params.size(), 1)),
                    FisherOperator(ctx, x).apply_jvp(Matrix::Ones(m.params.size(), 1))));
    nn::Model other = m;
    other.params.values(0) += 1.0;
    CHECK_THROWS_AS(load_context(dir, other), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("shape and size guards") {
    const nn::Model m = tiny_model(nn::Family::classifier, 24);
    const nn::Batch x = random_batch(4, 3, 25);
    const auto ctx = FisherContext::build(m, x, small_cfg());
    const FisherOperator op(ctx, x);
    CHECK_THROWS_AS(op.apply_jvp(Matrix::Zero(3, 1)), ShapeError);
    CHECK_THROWS_AS(op.apply_vjp(Matrix::Zero(3, 1)), ShapeError);
    CHECK_THROWS_AS(FisherOperator(ctx, random_batch(4, 2, 1)), DataError);
    nn::Batch empty;
    empty.inputs.resize(0, 3);
    CHECK_THROWS_AS(FisherContext::build(m, empty, small_cfg()), DataError);
}

}
