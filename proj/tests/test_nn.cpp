#include <doctest.h>

#include <cstring>
#include <filesystem>

#include "nfk/data.hpp"
#include "nfk/errors.hpp"
#include "nfk/nn/heads.hpp"
#include "nfk/nn/model_io.hpp"
#include "nfk/nn/train.hpp"
#include "support.hpp"

using namespace nfk;
using namespace nfk::nn;
using nfk::testing::random_batch;
using nfk::testing::random_matrix;
using nfk::testing::rel_diff;
using nfk::testing::rel_fro;
using nfk::testing::tiny_model;

namespace {

std::vector<Head> heads_for(const Model& m) {
    switch (m.spec.family) {
        case Family::classifier: return {{HeadKind::neg_free_energy, 0}, {HeadKind::logit, 1}};
        case Family::ebm: return {{HeadKind::neg_energy, 0}};
        case Family::gan_discriminator: return {{HeadKind::output, 0}};
        case Family::vae: return {{HeadKind::elbo, 0}};
        default: return {};
    }
}

Batch batch_for(const Model& m, std::size_t n, std::uint64_t seed) {
    Batch b = random_batch(n, m.spec.input_dim(), seed);
    if (m.spec.family == Family::vae) {
        b.latents = random_matrix(n, 3 * m.spec.latent_dim, seed + 100);
    }
    return b;
}

double head_value(const Model& m, const Head& h, const Vector& theta, const Batch& row) {
    ParamVector p = m.params;
    p.values = theta;
    return HeadEvaluator(m.spec, p, h).values(row)(0);
}

const Family kFamilies[] = {Family::classifier, Family::ebm, Family::gan_discriminator, Family::vae};

}  // namespace

TEST_SUITE("nn-engine") {

TEST_CASE("forward: linear dot product and zero parameters") {
    ModelSpec spec;
    spec.family = Family::classifier;
    spec.layers = {{2, 1, Activation::identity}};
    ParamVector p = ParamVector::zeros(spec);
    p.values << 1, 2, 0;
    Batch b;
    b.inputs = Matrix(1, 2);
    b.inputs << 3, 4;
    CHECK(forward(spec, p, b)(0, 0) == 11.0);

    for (Activation a : {Activation::relu, Activation::tanh, Activation::identity}) {
        const ModelSpec s = ModelSpec::mlp(Family::classifier, {3, 4, 2}, a);
        const Batch x = random_batch(5, 3, 1);
        CHECK(forward(s, ParamVector::zeros(s), x).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("forward: two identity layers equal the matrix product") {
    const ModelSpec s = ModelSpec::mlp(Family::classifier, {4, 3, 2}, Activation::identity);
    ParamVector p = init_params(s, RngStream(2));
    const auto& l0 = p.layout[0];
    const auto& l1 = p.layout[1];
    p.values.segment(static_cast<Eigen::Index>(l0.bias_offset), 3).setZero();
    p.values.segment(static_cast<Eigen::Index>(l1.bias_offset), 2).setZero();
    const Eigen::Map<const Matrix> w1(p.values.data() + l0.weight_offset, 3, 4);
    const Eigen::Map<const Matrix> w2(p.values.data() + l1.weight_offset, 2, 3);
    const Batch x = random_batch(6, 4, 3);
    const Matrix expected = x.inputs * (w2 * w1).transpose();
    CHECK(rel_fro(forward(s, p, x), expected) < 1e-14);
}

TEST_CASE("free energy values and stabilization") {
    ModelSpec spec = ModelSpec::mlp(Family::classifier, {1, 2}, Activation::identity);
    ParamVector p = ParamVector::zeros(spec);
    const double x0[] = {0.0};
    CHECK(free_energy(spec, p, x0) == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    p.values(2) = 1000.0;  // bias of logit 0
    CHECK(free_energy(spec, p, x0) == doctest::Approx(-1000.0).epsilon(1e-15));

    ModelSpec one = ModelSpec::mlp(Family::classifier, {1, 1}, Activation::identity);
    ParamVector q = ParamVector::zeros(one);
    q.values(1) = 2.5;
    CHECK(free_energy(one, q, x0) == doctest::Approx(-2.5));
}

TEST_CASE("softmax rows sum to one") {
    const Matrix p = softmax_rows(50.0 * random_matrix(20, 7, 5));
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(std::abs(p.row(i).sum() - 1.0) <= 1e-12);
}

TEST_CASE("grad_params: linear scalar model gradient is the input") {
    ModelSpec spec = ModelSpec::mlp(Family::ebm, {3, 1}, Activation::identity);
    ParamVector p = init_params(spec, RngStream(1));
    const Batch x = random_batch(4, 3, 2);
    const Matrix g = grad_params(spec, p, {HeadKind::logit, 0}, x);
    CHECK(rel_fro(g.leftCols(3), x.inputs) < 1e-15);
    CHECK((g.col(3).array() == 1.0).all());
    const Vector v = random_matrix(4, 1, 3).col(0);
    CHECK(rel_fro(jvp_params(spec, p, {HeadKind::logit, 0}, x, v), x.inputs * v.head(3) + Vector::Constant(4, v(3))) <
          1e-14);
}

TEST_CASE("free-energy gradient equals the softmax-weighted sum of per-logit gradients") {
    const Model m = tiny_model(Family::classifier, 3);
    const Batch x = random_batch(6, 3, 4);
    const Matrix fe = grad_params(m.spec, m.params, {HeadKind::neg_free_energy, 0}, x);
    const Matrix prob = softmax_rows(forward(m.spec, m.params, x));
    Matrix oracle = Matrix::Zero(fe.rows(), fe.cols());
    for (std::size_t y = 0; y < 3; ++y) {
        const Matrix gy = grad_params(m.spec, m.params, {HeadKind::logit, y}, x);
        for (Eigen::Index i = 0; i < x.inputs.rows(); ++i) oracle.row(i) += prob(i, y) * gy.row(i);
    }
    CHECK(rel_fro(fe, oracle) < 1e-10);
}

TEST_CASE("per-example gradients match central differences for every family") {
    for (Family fam : kFamilies) {
        const Model m = tiny_model(fam, 10);
        for (const Head& h : heads_for(m)) {
            CAPTURE(to_string(h.kind));
            const Batch x = batch_for(m, 4, 20);
            const Matrix g = grad_params(m.spec, m.params, h, x);
            for (Eigen::Index i = 0; i < 4; ++i) {
                const Batch row = x.rows(static_cast<std::size_t>(i), 1);
                for (std::uint64_t probe = 0; probe < 3; ++probe) {
                    const Vector v = random_matrix(m.params.size(), 1, 500 + probe).col(0);
                    const double fd = nfk::testing::central_difference(
                        [&](const Vector& t) { return head_value(m, h, t, row); }, m.params.values, v);
                    CHECK(rel_diff(g.row(i).dot(v), fd) <= 1e-5);
                }
            }
        }
    }
}

TEST_CASE("jvp/vjp adjoint identity and agreement with grad_params") {
    for (Family fam : kFamilies) {
        const Model m = tiny_model(fam, 30);
        for (const Head& h : heads_for(m)) {
            const Batch x = batch_for(m, 9, 31);
            const HeadEvaluator eval(m.spec, m.params, h);
            const Matrix dirs = random_matrix(4, m.params.size(), 32);
            const Matrix w = random_matrix(9, 4, 33);
            const Matrix jv = eval.jvp(x, dirs);
            const Matrix jtw = eval.vjp(x, w);
            const double lhs = frobenius_dot(jv, w);
            const double rhs = frobenius_dot(jtw, dirs);
            CHECK(rel_diff(lhs, rhs) <= 1e-10);
            const Matrix g = eval.per_example(x);
            CHECK(rel_fro(jv, g * dirs.transpose()) <= 1e-10);
            CHECK(rel_fro(jtw, w.transpose() * g) <= 1e-10);
        }
    }
}

TEST_CASE("non-scalar head is rejected") {
    const Model m = tiny_model(Family::classifier, 1);
    CHECK_THROWS_AS(check_head(m.spec, {HeadKind::output, 0}), ConfigError);
    CHECK_THROWS_AS(check_head(m.spec, {HeadKind::logit, 7}), ConfigError);
    CHECK_THROWS_AS(default_head(Family::gan_generator), ConfigError);
}

TEST_CASE("gaussian KL closed forms") {
    const double zero[] = {0.0, 0.0};
    CHECK(gaussian_kl(zero, zero) == 0.0);
    const double mu[] = {1.5};
    const double ls[] = {0.0};
    CHECK(gaussian_kl(mu, ls) == doctest::Approx(1.125).epsilon(1e-15));
}

TEST_CASE("elbo requires at least one latent sample") {
    const Model m = tiny_model(Family::vae, 2);
    const double x[] = {0.1, 0.2, 0.3};
    CHECK_THROWS_AS(elbo(m.spec, m.params, x, Matrix(0, 2)), ConfigError);
}

TEST_CASE("Monte-Carlo ELBO of a linear-Gaussian VAE matches the closed form") {
    // Encoder: identity activation, mu = E x + c, log sigma = s (bias only).
    // Decoder: xhat = A z + b. Closed form:
    // ELBO = -0.5 (|x - A mu - b|^2 + sum_j |A_j|^2 sigma_j^2) - D/2 log 2pi - KL.
    const std::size_t d = 3;
    ModelSpec spec;
    spec.family = Family::vae;
    spec.latent_dim = 2;
    spec.layers = {{d, 4, Activation::identity}};
    spec.decoder = {{2, d, Activation::identity}};
    ParamVector p = init_params(spec, RngStream(5));
    const auto& enc = p.layout[0];
    const auto& dec = p.layout[1];
    // log-sigma rows of the encoder ignore x.
    for (std::size_t r = 2; r < 4; ++r)
        for (std::size_t c = 0; c < d; ++c) p.values(static_cast<Eigen::Index>(enc.weight_offset + r * d + c)) = 0.0;
    p.values(static_cast<Eigen::Index>(enc.bias_offset + 0)) = 0.2;
    p.values(static_cast<Eigen::Index>(enc.bias_offset + 1)) = -0.1;
    p.values(static_cast<Eigen::Index>(enc.bias_offset + 2)) = -0.4;
    p.values(static_cast<Eigen::Index>(enc.bias_offset + 3)) = 0.3;
    for (std::size_t i = 0; i < d; ++i) p.values(static_cast<Eigen::Index>(dec.bias_offset + i)) = 0.1 * i;

    const double x[] = {0.5, -1.0, 0.25};
    const Eigen::Map<const Matrix> we(p.values.data() + enc.weight_offset, 4, d);
    const Eigen::Map<const Vector> be(p.values.data() + enc.bias_offset, 4);
    const Eigen::Map<const Matrix> a(p.values.data() + dec.weight_offset, d, 2);
    const Eigen::Map<const Vector> bd(p.values.data() + dec.bias_offset, d);
    const Eigen::Map<const Vector> xv(x, d);
    const Vector h = we * xv + be;
    const Vector mu = h.head(2);
    const Vector ls = h.tail(2);
    const Vector s2 = (2.0 * ls.array()).exp().matrix();
    double exact = -0.5 * (xv - a * mu - bd).squaredNorm() - 0.5 * static_cast<double>(d) * std::log(2 * M_PI);
    for (int j = 0; j < 2; ++j) exact -= 0.5 * a.col(j).squaredNorm() * s2(j);
    exact -= gaussian_kl(std::span<const double>(mu.data(), 2), std::span<const double>(ls.data(), 2));

    const std::size_t s = 1000;
    const Matrix eps = random_matrix(s, 2, 77);
    const double mc = elbo(spec, p, x, eps);
    double sq = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
        const double one = elbo(spec, p, x, eps.row(static_cast<Eigen::Index>(i)));
        sq += (one - mc) * (one - mc);
    }
    const double stderr_ = std::sqrt(sq / static_cast<double>(s - 1)) / std::sqrt(static_cast<double>(s));
    CHECK(std::abs(mc - exact) <= 3.0 * stderr_);
}

TEST_CASE("training with learning rate 0 leaves parameters unchanged") {
    const ModelSpec spec = ModelSpec::mlp(Family::classifier, {2, 8, 2}, Activation::relu);
    const auto ds = data::xor_data(64, 0.1, 1);
    TrainConfig cfg;
    cfg.optimizer.learning_rate = 0.0;
    cfg.optimizer.kind = OptimizerKind::sgd_momentum;
    cfg.schedule.epochs = 3;
    cfg.seed = 4;
    const auto init = init_params(spec, RngStream(4).derive(stream_tag("init")));
    const TrainResult r = train(spec, ds.batch, cfg);
    CHECK(std::memcmp(r.model.params.values.data(), init.values.data(), sizeof(double) * init.size()) == 0);
}

TEST_CASE("XOR 2-8-8-2 reaches low training loss, deterministically") {
    const ModelSpec spec = ModelSpec::mlp(Family::classifier, {2, 8, 8, 2}, Activation::tanh);
    const auto ds = data::xor_data(200, 0.1, 5);
    TrainConfig cfg;
    cfg.optimizer.learning_rate = 0.01;
    cfg.schedule.epochs = 150;
    cfg.schedule.batch_size = 32;
    cfg.seed = 1;
    const TrainResult a = train(spec, ds.batch, cfg);
    CHECK(a.history.back().loss < 0.05);
    CHECK(accuracy(spec, a.model.params, ds.batch) == 1.0);

    cfg.parallelism.threads = 4;
    cfg.parallelism.block = 8;
    const TrainResult b = train(spec, ds.batch, cfg);
    cfg.parallelism.threads = 1;
    const TrainResult c = train(spec, ds.batch, cfg);
    CHECK(std::memcmp(b.model.params.values.data(), c.model.params.values.data(),
                      sizeof(double) * a.model.params.size()) == 0);
}

TEST_CASE("same seed gives bitwise identical parameters for every objective") {
    const auto moons = data::two_moons(128, 0.1, 2);
    TrainConfig cfg;
    cfg.schedule.epochs = 3;
    cfg.schedule.batch_size = 16;
    cfg.seed = 9;

    auto same = [&](const ModelSpec& spec, const Batch& d, const ModelSpec* gen) {
        const TrainResult a = train(spec, d, cfg, gen);
        const TrainResult b = train(spec, d, cfg, gen);
        CHECK(std::memcmp(a.model.params.values.data(), b.model.params.values.data(),
                          sizeof(double) * a.model.params.size()) == 0);
        return a;
    };
    cfg.objective = Objective::cross_entropy;
    same(ModelSpec::mlp(Family::classifier, {2, 6, 2}), moons.batch, nullptr);
    cfg.objective = Objective::bce;
    same(ModelSpec::mlp(Family::classifier, {2, 6, 1}), moons.batch, nullptr);
    cfg.objective = Objective::mse;
    same(ModelSpec::mlp(Family::classifier, {2, 6, 2}), moons.batch, nullptr);
    cfg.objective = Objective::elbo;
    cfg.vae_samples = 2;
    same(tiny_model(Family::vae, 1, 2).spec, moons.batch, nullptr);
    cfg.objective = Objective::gan_nonsaturating;
    const Model gan = tiny_model(Family::gan_discriminator, 1, 2);
    const TrainResult g = same(gan.spec, moons.batch, &*gan.generator_spec);
    CHECK(g.model.generator_params.size() == gan.generator_spec->param_count());
}

TEST_CASE("incompatible objective and divergence are reported") {
    const auto moons = data::two_moons(32, 0.1, 2);
    TrainConfig cfg;
    cfg.objective = Objective::elbo;
    CHECK_THROWS_AS(train(ModelSpec::mlp(Family::classifier, {2, 3, 2}), moons.batch, cfg), ConfigError);
    cfg.objective = Objective::mse;
    cfg.optimizer.kind = OptimizerKind::sgd_momentum;
    cfg.optimizer.learning_rate = 1e6;
    cfg.schedule.epochs = 50;
    CHECK_THROWS_AS(train(ModelSpec::mlp(Family::classifier, {2, 16, 2}, Activation::identity), moons.batch, cfg),
                    NumericalError);
}

TEST_CASE("optimizer updates do not depend on the vector length") {
    // Appending zero-gradient coordinates must not change the others, bit for
    // bit; distillation relies on this when it appends head parameters.
    for (OptimizerKind kind : {OptimizerKind::adam, OptimizerKind::sgd_momentum}) {
        OptimizerConfig cfg;
        cfg.kind = kind;
        cfg.learning_rate = 0.01;
        for (std::size_t p : {13u, 42u, 43u}) {
            Optimizer a(cfg, p);
            Optimizer b(cfg, p + 7);
            Vector xa = random_matrix(p, 1, p).col(0);
            Vector xb = Vector::Zero(static_cast<Eigen::Index>(p + 7));
            xb.head(static_cast<Eigen::Index>(p)) = xa;
            for (int step = 0; step < 20; ++step) {
                const Vector g = xa.array().cos().matrix();
                Vector gb = Vector::Zero(xb.size());
                gb.head(g.size()) = g;
                a.step(xa, g, 0.01);
                b.step(xb, gb, 0.01);
            }
            CHECK((xa.array() == xb.head(xa.size()).array()).all());
        }
    }
}

TEST_CASE("step schedule decays at milestones") {
    Schedule s;
    s.milestones = {2, 4};
    s.gamma = 0.1;
    CHECK(s.learning_rate(0.1, 0) == 0.1);
    CHECK(s.learning_rate(0.1, 2) == doctest::Approx(0.01));
    CHECK(s.learning_rate(0.1, 5) == doctest::Approx(0.001));
}

TEST_CASE("model files round-trip bit-exactly") {
    const auto dir = std::filesystem::temp_directory_path() / "nfk_test_model_io";
    std::filesystem::create_directories(dir);
    for (Family fam : kFamilies) {
        const Model m = tiny_model(fam, 3);
        save_model(m, dir / "m.json", R"({"note": "x"})");
        const Model back = load_model(dir / "m.json");
        CHECK(spec_to_json(back.spec) == spec_to_json(m.spec));
        CHECK(std::memcmp(back.params.values.data(), m.params.values.data(), sizeof(double) * m.params.size()) == 0);
        CHECK(model_fingerprint(back) == model_fingerprint(m));
        CHECK(back.generator_spec.has_value() == m.generator_spec.has_value());
    }
    // Corrupting the parameter file is detected.
    {
        std::FILE* f = std::fopen((dir / "m.params.bin").c_str(), "r+b");
        REQUIRE(f != nullptr);
        std::fputc(0x7f, f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_model(dir / "m.json"), DataError);
    std::filesystem::remove_all(dir);
}

}
