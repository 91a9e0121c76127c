#include <doctest.h>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <Eigen/Eigenvalues>

#include "nfk/errors.hpp"
#include "nfk/fisher.hpp"
#include "nfk/lowrank.hpp"
#include "support.hpp"

using namespace nfk;
using namespace nfk::lowrank;
using nfk::testing::random_batch;
using nfk::testing::random_matrix;
using nfk::testing::rel_fro;
using nfk::testing::tiny_model;

namespace {

bool same_bits(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

double orth_error(const Matrix& q) {
    return (q.transpose() * q - Matrix::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

// Orthogonal projector distance between two column spans.
double subspace_gap(const Matrix& a, const Matrix& b) { return (a * a.transpose() - b * b.transpose()).norm(); }

class FlakyOperator final : public LinearOperator {
public:
    explicit FlakyOperator(Matrix a) : a_(std::move(a)) {}
    std::size_t rows() const override { return static_cast<std::size_t>(a_.rows()); }
    std::size_t cols() const override { return static_cast<std::size_t>(a_.cols()); }
    Matrix apply(const Matrix& m) const override { return a_ * m * (1.0 + 1e-12 * static_cast<double>(++calls_)); }
    Matrix apply_adjoint(const Matrix& w) const override { return a_.transpose() * w; }

private:
    Matrix a_;
    mutable std::atomic<int> calls_{0};
};

std::shared_ptr<const fisher::FisherContext> tiny_context(const nn::Batch& x) {
    nn::Model m;
    m.spec = nn::ModelSpec::mlp(nn::Family::classifier, {3, 6, 3}, nn::Activation::tanh);
    m.params = nn::init_params(m.spec, RngStream(40));
    fisher::FisherConfig cfg;
    cfg.seed = 1;
    return fisher::FisherContext::build(m, x, cfg);
}

}  // namespace

TEST_SUITE("lowrank") {

TEST_CASE("diagonal operator: exact singular values and coordinate vectors") {
    Matrix a = Matrix::Zero(30, 40);
    for (int i = 0; i < 30; ++i) a(i, i) = std::pow(0.5, i);
    SvdOptions o;
    o.k = 4;
    o.oversample = 6;
    o.seed = 3;
    const SvdFactors f = truncated_svd(DenseOperator(a), o);
    for (int i = 0; i < 4; ++i) {
        CHECK(f.sigma(i) == doctest::Approx(std::pow(0.5, i)).epsilon(1e-10));
        CHECK(std::abs(f.phi(i, i)) == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(f.phi(i, i) > 0.0);
    }
}

TEST_CASE("rank-one operator") {
    const Vector u = random_matrix(25, 1, 1).col(0);
    const Vector v = random_matrix(35, 1, 2).col(0);
    SvdOptions o;
    o.k = 3;
    o.oversample = 4;
    const SvdFactors f = truncated_svd(DenseOperator(u * v.transpose()), o);
    CHECK(f.sigma(0) == doctest::Approx(u.norm() * v.norm()).epsilon(1e-12));
    CHECK(f.sigma(1) <= 1e-12 * f.sigma(0));
    CHECK(std::abs(f.phi.col(0).dot(u.normalized())) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("exact low-rank matrix is reconstructed") {
    const Matrix a = random_matrix(30, 10, 3) * random_matrix(10, 50, 4);
    SvdOptions o;
    o.k = 10;
    o.oversample = 5;
    o.seed = 9;
    const SvdFactors f = truncated_svd(DenseOperator(a), o);
    CHECK(rel_fro(f.phi * f.sigma.asDiagonal() * f.pmat.transpose(), a) < 1e-10);
    CHECK(orth_error(f.phi) < 1e-12);
    CHECK(orth_error(f.pmat) < 1e-12);
    for (Eigen::Index i = 1; i < f.sigma.size(); ++i) CHECK(f.sigma(i) <= f.sigma(i - 1));
}

TEST_CASE("singular values squared are the eigenvalues of both Gram matrices") {
    const Matrix a = random_matrix(20, 8, 5) * random_matrix(8, 30, 6);
    SvdOptions o;
    o.k = 5;
    o.oversample = 5;
    const SvdFactors f = truncated_svd(DenseOperator(a), o);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> dual(a * a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> primal(a.transpose() * a);
    for (int i = 0; i < 5; ++i) {
        const double s2 = f.sigma(i) * f.sigma(i);
        CHECK(s2 == doctest::Approx(dual.eigenvalues()(19 - i)).epsilon(1e-10));
        CHECK(s2 == doctest::Approx(primal.eigenvalues()(29 - i)).epsilon(1e-10));
    }
}

TEST_CASE("randomized factors agree with the Gram baseline on a Fisher operator") {
    const nn::Batch x = random_batch(256, 3, 7);
    const auto ctx = tiny_context(x);
    const fisher::FisherOperator op(ctx, x);
    SvdOptions o;
    o.k = 8;
    o.seed = 11;
    const SvdFactors r = truncated_svd(op, o);
    const SvdFactors b = gram_eigh_baseline(op, 8);
    CHECK(b.meta.method == "gram-eigh");
    CHECK(r.meta.method == "randomized");
    CHECK(r.meta.context_fingerprint == ctx->fingerprint());
    for (int i = 0; i < 8; ++i) CHECK(std::abs(r.sigma(i) - b.sigma(i)) <= 1e-6 * b.sigma(i));
    // Compare the leading well-separated directions column by column.
    for (int i = 0; i < 3; ++i) CHECK(std::abs(r.phi.col(i).dot(b.phi.col(i))) > 1.0 - 1e-8);
    CHECK(orth_error(b.phi) < 1e-10);
    CHECK(orth_error(b.pmat) < 1e-10);
    CHECK(rel_fro(op.materialize().transpose() * b.phi, b.pmat * b.sigma.asDiagonal()) < 1e-10);
}

TEST_CASE("residuals do not increase across power iterations") {
    const nn::Batch x = random_batch(120, 3, 8);
    const fisher::FisherOperator op(tiny_context(x), x);
    SvdOptions o;
    o.k = 6;
    o.oversample = 4;
    o.iters = 8;
    const SvdFactors f = truncated_svd(op, o);
    REQUIRE(f.residuals.size() == 8);
    for (std::size_t i = 1; i < f.residuals.size(); ++i) {
        CAPTURE(i);
        CHECK(f.residuals[i] <= f.residuals[i - 1] * (1.0 + 1e-6) + 1e-13);
    }
}

TEST_CASE("explained variance") {
    const Vector s = (Vector(3) << 3.0, 2.0, 1.0).finished();
    CHECK(explained_variance(s, 1) == doctest::Approx(9.0 / 14.0));
    CHECK(explained_variance(s, 2) == doctest::Approx(13.0 / 14.0));
    CHECK(explained_variance(s, 3) == 1.0);
    CHECK(explained_variance(s, 0) == 0.0);
    CHECK(explained_variance(s.head(2), 1, 14.0) == doctest::Approx(9.0 / 14.0));
    const Matrix a = random_matrix(70, 9, 17);
    CHECK(DenseOperator(a).LinearOperator::squared_norm() == doctest::Approx(a.squaredNorm()).epsilon(1e-13));
}

TEST_CASE("sign canonicalization makes the largest entry of each phi column positive") {
    SvdOptions o;
    o.k = 4;
    o.oversample = 3;
    const SvdFactors f = truncated_svd(DenseOperator(random_matrix(15, 12, 12)), o);
    for (Eigen::Index c = 0; c < f.phi.cols(); ++c) {
        Eigen::Index at = 0;
        f.phi.col(c).cwiseAbs().maxCoeff(&at);
        CHECK(f.phi(at, c) > 0.0);
    }
}

TEST_CASE("same seed gives identical factors at any thread count") {
    const nn::Batch x = random_batch(90, 3, 13);
    const auto ctx = tiny_context(x);
    fisher::FisherOperator op(ctx, x);
    SvdOptions o;
    o.k = 5;
    o.seed = 21;
    op.set_parallelism({1, 16});
    const SvdFactors a = truncated_svd(op, o);
    op.set_parallelism({8, 16});
    const SvdFactors b = truncated_svd(op, o);
    CHECK(same_bits(a.phi, b.phi));
    CHECK(same_bits(a.sigma, b.sigma));
    CHECK(same_bits(a.pmat, b.pmat));
    CHECK(a.fingerprint() == b.fingerprint());
    o.seed = 22;
    CHECK(truncated_svd(op, o).fingerprint() != a.fingerprint());
}

TEST_CASE("factor store round-trips bit-exactly and detects corruption") {
    const auto dir = std::filesystem::temp_directory_path() / "nfk_test_factors";
    SvdOptions o;
    o.k = 3;
    o.oversample = 2;
    o.seed = 4;
    const SvdFactors f = truncated_svd(DenseOperator(random_matrix(10, 9, 14)), o);
    save_factors(f, dir);
    const SvdFactors g = load_factors(dir);
    CHECK(same_bits(f.phi, g.phi));
    CHECK(same_bits(f.sigma, g.sigma));
    CHECK(same_bits(f.pmat, g.pmat));
    CHECK(f.residuals == g.residuals);
    CHECK(f.fingerprint() == g.fingerprint());
    {
        std::fstream fs(dir / "sigma.bin", std::ios::in | std::ios::out | std::ios::binary);
        fs.seekp(-1, std::ios::end);
        fs.put('\x7f');
    }
    CHECK_THROWS_AS(load_factors(dir), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("invalid requests") {
    const DenseOperator op(random_matrix(10, 20, 15));
    SvdOptions o;
    o.k = 6;
    o.oversample = 5;
    CHECK_THROWS_AS(truncated_svd(op, o), ConfigError);
    o.k = 0;
    CHECK_THROWS_AS(truncated_svd(op, o), ConfigError);
    CHECK_THROWS_AS(gram_eigh_baseline(op, 11), ConfigError);
    CHECK_THROWS_AS(gram_eigh_baseline(DenseOperator(Matrix::Zero(4097, 1)), 1), ConfigError);
    o.k = 3;
    o.oversample = 2;
    CHECK_THROWS_AS(truncated_svd(FlakyOperator(random_matrix(10, 20, 16)), o), NumericalError);
}

}
