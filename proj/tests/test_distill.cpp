#include <doctest.h>

#include <cstring>

#include "nfk/data.hpp"
#include "nfk/distill.hpp"
#include "nfk/errors.hpp"
#include "nfk/fisher.hpp"
#include "support.hpp"

using namespace nfk;
using namespace nfk::distill;
using nfk::testing::central_difference;
using nfk::testing::random_batch;
using nfk::testing::random_matrix;
using nfk::testing::rel_fro;

namespace {

lowrank::SvdFactors teacher_factors(const nn::Model& teacher, const nn::Batch& x, std::size_t k) {
    fisher::FisherConfig cfg;
    cfg.seed = 1;
    const auto ctx = fisher::FisherContext::build(teacher, x, cfg);
    lowrank::SvdOptions o;
    o.k = k;
    o.oversample = 4;
    o.seed = 2;
    return lowrank::truncated_svd(fisher::FisherOperator(ctx, x), o);
}

nn::TrainConfig quick_train(std::size_t epochs, std::uint64_t seed) {
    nn::TrainConfig t;
    t.optimizer.kind = nn::OptimizerKind::adam;
    t.optimizer.learning_rate = 0.01;
    t.schedule.epochs = epochs;
    t.schedule.batch_size = 32;
    t.seed = seed;
    return t;
}

}  // namespace

TEST_SUITE("distill") {

TEST_CASE("nfkd_loss examples") {
    const std::vector<double> h{1.0, 3.0};
    const std::vector<double> t{2.0, 1.0};
    CHECK(nfkd_loss(0.7, h, t, 1.0) == 0.7);
    CHECK(nfkd_loss(0.7, t, t, 0.0) == 0.0);
    // Mean squared distance ((1 - 3)^2 + (3 - 1)^2) / 2 = 4.
    const std::vector<double> swapped{3.0, 1.0};
    CHECK(nfkd_loss(0.5, h, swapped, 0.0) == 4.0);
    // cls 0.5, squared distance 2.0, alpha 0.25.
    const std::vector<double> root2{std::sqrt(2.0)};
    const std::vector<double> zero{0.0};
    CHECK(nfkd_loss(0.5, root2, zero, 0.25) == doctest::Approx(1.625));
    CHECK_THROWS_AS(nfkd_loss(0.5, zero, h, 0.5), ShapeError);
}

TEST_CASE("nfkd_loss gradient matches finite differences and is affine in alpha") {
    const Vector h = random_matrix(5, 1, 1).col(0);
    const Vector t = random_matrix(5, 1, 2).col(0);
    const std::span<const double> ts(t.data(), 5);
    for (double alpha : {0.0, 0.3, 1.0}) {
        const Vector g = nfkd_loss_grad(std::span<const double>(h.data(), 5), ts, alpha);
        for (int d = 0; d < 5; ++d) {
            const Vector e = Vector::Unit(5, d);
            const double fd = central_difference(
                [&](const Vector& v) { return nfkd_loss(0.4, std::span<const double>(v.data(), 5), ts, alpha); }, h, e,
                1e-4);
            CHECK(std::abs(fd - g(d)) < 1e-8);
        }
    }
    const std::span<const double> hs(h.data(), 5);
    const double l0 = nfkd_loss(0.9, hs, ts, 0.0);
    const double l5 = nfkd_loss(0.9, hs, ts, 0.5);
    const double l1 = nfkd_loss(0.9, hs, ts, 1.0);
    CHECK(l5 == doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-14));
}

TEST_CASE("auxiliary head gradient flows correctly through the student") {
    const nn::ModelSpec spec = nn::ModelSpec::mlp(nn::Family::classifier, {3, 5, 4, 3}, nn::Activation::tanh);
    nn::Batch data = random_batch(9, 3, 3, 3);
    const Matrix targets = random_matrix(9, 2, 4);
    const auto p = static_cast<Eigen::Index>(spec.param_count());
    const Eigen::Index h = 4;
    const Eigen::Index k = 2;
    Vector params(p + k * (h + 1));
    params.head(p) = nn::init_params(spec, RngStream(5)).values;
    params.tail(k * (h + 1)) = random_matrix(static_cast<std::size_t>(k * (h + 1)), 1, 6).col(0);
    const double alpha = 0.4;

    const Vector* current = nullptr;
    nn::ClassifierAux aux;
    aux.cls_weight = alpha;
    aux.aux_params = static_cast<std::size_t>(k * (h + 1));
    aux.fn = [&](std::span<const std::size_t> rows, const Matrix& pen, Matrix& pen_cot, Eigen::Ref<Vector> ag) {
        const Eigen::Map<const Matrix> w(current->data() + p, k, h);
        const Eigen::Map<const Eigen::RowVectorXd> b(current->data() + p + k * h, k);
        Matrix r = pen * w.transpose();
        r.rowwise() += b;
        for (std::size_t i = 0; i < rows.size(); ++i)
            r.row(static_cast<Eigen::Index>(i)) -= targets.row(static_cast<Eigen::Index>(rows[i]));
        const Matrix g = r * (2.0 * (1.0 - alpha) / static_cast<double>(k));
        pen_cot += g * w;
        Eigen::Map<Matrix>(ag.data(), k, h) += g.transpose() * pen;
        ag.tail(k) += g.colwise().sum().transpose();
        return (1.0 - alpha) * r.squaredNorm() / static_cast<double>(k);
    };
    std::vector<std::size_t> rows(9);
    for (std::size_t i = 0; i < 9; ++i) rows[i] = i;
    auto loss = [&](const Vector& v) {
        current = &v;
        Vector g = Vector::Zero(v.size());
        std::size_t correct = 0;
        return nn::supervised_batch_gradient(spec, nn::Objective::cross_entropy, v, data, rows, {1, 4}, g, correct,
                                             &aux);
    };
    current = &params;
    Vector grad = Vector::Zero(params.size());
    std::size_t correct = 0;
    nn::supervised_batch_gradient(spec, nn::Objective::cross_entropy, params, data, rows, {1, 4}, grad, correct, &aux);
    for (Eigen::Index j = 0; j < params.size(); ++j) {
        CAPTURE(j);
        const double fd = central_difference(loss, params, Vector::Unit(params.size(), j));
        CHECK(std::abs(fd - grad(j)) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("alpha = 1 reproduces plain training bitwise") {
    const data::Dataset ds = data::two_moons(128, 0.1, 7);
    const nn::ModelSpec teacher_spec = nn::ModelSpec::mlp(nn::Family::classifier, {2, 16, 2}, nn::Activation::tanh);
    const nn::Model teacher = nn::train(teacher_spec, ds.batch, quick_train(5, 3)).model;
    const TeacherTargets t = teacher_targets(teacher_factors(teacher, ds.batch, 4), ds.batch);

    const nn::ModelSpec student = nn::ModelSpec::mlp(nn::Family::classifier, {2, 8, 2}, nn::Activation::tanh);
    DistillConfig cfg;
    cfg.alpha = 1.0;
    cfg.train = quick_train(4, 11);
    const DistillResult d = distill_train(t, student, ds.batch, cfg);
    const nn::TrainResult plain = nn::train(student, ds.batch, cfg.train);
    CHECK((d.student.params.values.array() == plain.model.params.values.array()).all());
    REQUIRE(d.history.size() == plain.history.size());
    for (std::size_t e = 0; e < d.history.size(); ++e) CHECK(d.history[e].loss == plain.history[e].loss);
}

TEST_CASE("teacher targets are z-scored, deterministic, and tied to their dataset") {
    const data::Dataset ds = data::two_moons(100, 0.1, 8);
    const nn::ModelSpec spec = nn::ModelSpec::mlp(nn::Family::classifier, {2, 12, 2}, nn::Activation::tanh);
    const nn::Model teacher = nn::train(spec, ds.batch, quick_train(3, 4)).model;
    const auto f = teacher_factors(teacher, ds.batch, 5);
    const TeacherTargets a = teacher_targets(f, ds.batch);
    const TeacherTargets b = teacher_targets(f, ds.batch);
    CHECK(std::memcmp(a.targets.data(), b.targets.data(), sizeof(double) * a.targets.size()) == 0);
    CHECK(a.targets.colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
    CHECK((a.targets.array().square().colwise().mean() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK(a.factor_fingerprint == f.fingerprint());
    const data::Dataset other = data::two_moons(100, 0.1, 9);
    CHECK_THROWS_AS(teacher_targets(f, other.batch), DataError);
}

TEST_CASE("distillation is deterministic and validates its inputs") {
    const data::Dataset ds = data::two_moons(96, 0.1, 10);
    const nn::ModelSpec spec = nn::ModelSpec::mlp(nn::Family::classifier, {2, 12, 2}, nn::Activation::tanh);
    const nn::Model teacher = nn::train(spec, ds.batch, quick_train(3, 5)).model;
    const TeacherTargets t = teacher_targets(teacher_factors(teacher, ds.batch, 4), ds.batch);
    const nn::ModelSpec student = nn::ModelSpec::mlp(nn::Family::classifier, {2, 6, 2}, nn::Activation::tanh);
    DistillConfig cfg;
    cfg.train = quick_train(3, 6);
    const DistillResult a = distill_train(t, student, ds.batch, cfg);
    const DistillResult b = distill_train(t, student, ds.batch, cfg);
    CHECK((a.student.params.values.array() == b.student.params.values.array()).all());
    CHECK((a.head.array() == b.head.array()).all());
    CHECK(a.head.rows() == 4);
    CHECK(a.head.cols() == 7);

    cfg.alpha = 1.5;
    CHECK_THROWS_AS(distill_train(t, student, ds.batch, cfg), ConfigError);
    cfg.alpha = 0.5;
    const nn::ModelSpec flat = nn::ModelSpec::mlp(nn::Family::classifier, {2, 2}, nn::Activation::tanh);
    CHECK_THROWS_AS(distill_train(t, flat, ds.batch, cfg), ConfigError);
    CHECK_THROWS_AS(distill_train(t, student, data::head(ds, 50).batch, cfg), DataError);
}

}
