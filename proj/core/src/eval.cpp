#include "nfk/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Cholesky>

#include "nfk/errors.hpp"
#include "nfk/nn/train.hpp"

namespace nfk::eval {

std::string to_string(ProbeMode m) { return m == ProbeMode::ridge ? "ridge" : "logistic"; }

ProbeMode probe_mode_from_string(const std::string& s) {
    if (s == "ridge") return ProbeMode::ridge;
    if (s == "logistic") return ProbeMode::logistic;
    throw ConfigError("unknown probe mode '" + s + "'");
}

Matrix one_hot(std::span<const int> y, std::size_t classes) {
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(y.size()), static_cast<Eigen::Index>(classes));
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= classes) {
            throw DataError("label " + std::to_string(y[i]) + " out of range");
        }
        out(static_cast<Eigen::Index>(i), y[i]) = 1.0;
    }
    return out;
}

double accuracy(std::span<const int> predicted, std::span<const int> truth) {
    if (predicted.size() != truth.size() || truth.empty()) {
        throw DataError("accuracy: prediction and label counts differ or are empty");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        hits += predicted[i] == truth[i] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

Matrix ProbeResult::scores(const Matrix& e) const {
    if (e.cols() != weights.rows()) {
        throw ShapeError("probe: embedding width " + std::to_string(e.cols()) + " != " +
                         std::to_string(weights.rows()));
    }
    Matrix x = e;
    if (feature_mean.size() > 0) {
        x.rowwise() -= feature_mean;
        x.array().rowwise() /= feature_scale.array();
    }
    Matrix s = x * weights;
    s.rowwise() += bias;
    return s;
}

std::vector<int> ProbeResult::predict(const Matrix& e) const {
    const Matrix s = scores(e);
    std::vector<int> out(static_cast<std::size_t>(s.rows()));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        Eigen::Index arg = 0;
        s.row(i).maxCoeff(&arg);
        out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
    return out;
}

namespace {

// Solves (A + lambda I) X = B for symmetric PSD A.
Matrix spd_solve(const Matrix& a, const Matrix& b, double lambda) {
    Eigen::MatrixXd s = a;
    s.diagonal().array() += lambda;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(s);
    // The LDLT rcond estimate can miss a roundoff-sized pivot, so the pivots
    // are checked directly as well.
    double rcond = 0.0;
    if (ldlt.info() == Eigen::Success) {
        const Vector d = ldlt.vectorD();
        const double dmax = d.cwiseAbs().maxCoeff();
        rcond = dmax > 0.0 ? std::min(ldlt.rcond(), d.minCoeff() / dmax) : 0.0;
    }
    if (ldlt.info() != Eigen::Success || !(rcond > 1e-12) || !ldlt.isPositive()) {
        if (lambda == 0.0) {
            throw NumericalError("ridge system is singular with lambda = 0 (rcond " + std::to_string(rcond) +
                                 "); use a positive lambda");
        }
        if (ldlt.info() != Eigen::Success) {
            throw NumericalError("ridge system could not be factorized");
        }
    }
    return ldlt.solve(Eigen::MatrixXd(b));
}

void fit_ridge(const Matrix& x, const Matrix& y, double lambda, ProbeResult& r) {
    const Eigen::RowVectorXd xm = x.colwise().mean();
    const Eigen::RowVectorXd ym = y.colwise().mean();
    Matrix xc = x.rowwise() - xm;
    Matrix yc = y.rowwise() - ym;
    if (xc.cols() <= xc.rows()) {
        r.weights = spd_solve(xc.transpose() * xc, xc.transpose() * yc, lambda);
    } else {
        r.weights = xc.transpose() * spd_solve(xc * xc.transpose(), yc, lambda);
    }
    r.bias = ym - xm * r.weights;
}

void fit_logistic(const Matrix& x, const Matrix& y, double lambda, const LogisticConfig& cfg, ProbeResult& r) {
    const auto n = static_cast<double>(x.rows());
    r.weights = Matrix::Zero(x.cols(), y.cols());
    r.bias = Eigen::RowVectorXd::Zero(y.cols());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Matrix s = x * r.weights;
        s.rowwise() += r.bias;
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const double m = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - m).exp().matrix();
            s.row(i) /= s.row(i).sum();
        }
        const Matrix d = (s - y) / n;
        const Matrix gw = x.transpose() * d + lambda * r.weights;
        const Eigen::RowVectorXd gb = d.colwise().sum();
        r.weights -= cfg.learning_rate * gw;
        r.bias -= cfg.learning_rate * gb;
    }
    require_finite(r.weights, "logistic probe weights");
}

std::size_t class_count(std::span<const int> a, std::span<const int> b) {
    int top = -1;
    for (int v : a) top = std::max(top, v);
    for (int v : b) top = std::max(top, v);
    return static_cast<std::size_t>(top + 1);
}

}  // namespace

ProbeResult linear_probe(const Matrix& e_train, std::span<const int> y_train, const Matrix& e_test,
                         std::span<const int> y_test, const ProbeOptions& opts) {
    if (static_cast<std::size_t>(e_train.rows()) != y_train.size() || y_train.empty()) {
        throw DataError("probe: " + std::to_string(e_train.rows()) + " embeddings for " +
                        std::to_string(y_train.size()) + " labels");
    }
    if (static_cast<std::size_t>(e_test.rows()) != y_test.size()) {
        throw DataError("probe: test embeddings and labels differ in count");
    }
    if (e_test.rows() > 0 && e_test.cols() != e_train.cols()) {
        throw DataError("probe: train and test embeddings differ in width");
    }
    if (!(opts.lambda >= 0.0)) {
        throw ConfigError("probe: lambda must be nonnegative");
    }
    require_finite(e_train, "probe embeddings");
    ProbeResult r;
    r.mode = opts.mode;
    r.lambda = opts.lambda;
    r.classes = class_count(y_train, y_test);
    const Matrix y = one_hot(y_train, r.classes);

    Matrix x = e_train;
    if (opts.standardize) {
        r.feature_mean = x.colwise().mean();
        x.rowwise() -= r.feature_mean;
        r.feature_scale = (x.array().square().colwise().mean()).sqrt().matrix();
        for (Eigen::Index j = 0; j < r.feature_scale.size(); ++j) {
            if (!(r.feature_scale(j) > 0.0)) r.feature_scale(j) = 1.0;
        }
        x.array().rowwise() /= r.feature_scale.array();
    }
    if (opts.mode == ProbeMode::ridge) {
        fit_ridge(x, y, opts.lambda, r);
    } else {
        fit_logistic(x, y, opts.lambda, opts.logistic, r);
    }
    r.train_accuracy = accuracy(r.predict(e_train), y_train);
    if (e_test.rows() > 0) {
        r.test_accuracy = accuracy(r.predict(e_test), y_test);
    }
    return r;
}

std::vector<double> default_lambda_grid() {
    std::vector<double> g;
    for (int e = -6; e <= 2; ++e) {
        g.push_back(std::pow(10.0, e));
    }
    return g;
}

SweepResult ridge_sweep(const Matrix& e_train, std::span<const int> y_train, const Matrix& e_test,
                        std::span<const int> y_test, const std::vector<double>& grid, double validation_fraction,
                        std::uint64_t seed, bool standardize) {
    if (grid.empty()) {
        throw ConfigError("ridge_sweep: empty lambda grid");
    }
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
        throw ConfigError("ridge_sweep: validation fraction must be in (0, 1)");
    }
    SweepResult out;
    out.lambda_scale = e_train.rowwise().squaredNorm().mean();
    if (!(out.lambda_scale > 0.0)) {
        out.lambda_scale = 1.0;
    }

    // Stratified split: a seeded share of every class goes to validation.
    std::vector<char> is_val(y_train.size(), 0);
    RngStream rng = RngStream(seed).derive(stream_tag("validation"));
    const std::size_t classes = class_count(y_train, {});
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < y_train.size(); ++i) {
            if (y_train[i] == static_cast<int>(c)) members.push_back(i);
        }
        if (members.size() < 2) continue;
        auto perm = nn::permutation(members.size(), rng);
        const auto take = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::ceil(validation_fraction * static_cast<double>(members.size()))), 1,
            members.size() - 1);
        for (std::size_t j = 0; j < take; ++j) {
            is_val[members[perm[j]]] = 1;
        }
    }
    std::vector<Eigen::Index> fit_rows;
    std::vector<Eigen::Index> val_rows;
    std::vector<int> y_fit;
    std::vector<int> y_val;
    for (std::size_t i = 0; i < y_train.size(); ++i) {
        (is_val[i] ? val_rows : fit_rows).push_back(static_cast<Eigen::Index>(i));
        (is_val[i] ? y_val : y_fit).push_back(y_train[i]);
    }
    const Matrix e_fit = e_train(fit_rows, Eigen::all);
    const Matrix e_val = e_train(val_rows, Eigen::all);

    double best = -1.0;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        ProbeOptions opts;
        opts.lambda = grid[g] * out.lambda_scale;
        opts.standardize = standardize;
        const ProbeResult fold = linear_probe(e_fit, y_fit, e_val, y_val, opts);
        out.validation_accuracy.push_back(fold.test_accuracy);
        out.grid.push_back(linear_probe(e_train, y_train, e_test, y_test, opts));
        if (fold.test_accuracy > best) {
            best = fold.test_accuracy;
            out.best = g;
        }
    }
    return out;
}

Matrix krr_predict(const Matrix& e_train, const Matrix& y, double lambda, const Matrix& e_query) {
    if (e_train.rows() != y.rows() || e_train.rows() == 0) {
        throw DataError("krr: embeddings and targets differ in count");
    }
    if (e_query.cols() != e_train.cols()) {
        throw DataError("krr: query width differs from train width");
    }
    if (!(lambda >= 0.0)) {
        throw ConfigError("krr: lambda must be nonnegative");
    }
    const double n = static_cast<double>(e_train.rows());
    const Matrix f = e_train * std::sqrt(n);
    const Matrix fq = e_query * std::sqrt(n);
    if (f.cols() <= f.rows()) {
        return fq * spd_solve(f.transpose() * f, f.transpose() * y, n * lambda);
    }
    return fq * (f.transpose() * spd_solve(f * f.transpose(), y, n * lambda));
}

Matrix krr_predict_gram(const Matrix& k_train, const Matrix& y, double lambda, const Matrix& k_query) {
    if (k_train.rows() != k_train.cols() || k_train.rows() != y.rows()) {
        throw DataError("krr: Gram matrix and targets differ in size");
    }
    if (k_query.cols() != k_train.cols()) {
        throw DataError("krr: query kernel width differs from train count");
    }
    const double n = static_cast<double>(k_train.rows());
    return k_query * spd_solve(k_train, y, n * lambda);
}

std::vector<std::size_t> subsample_labels(std::span<const int> y, std::size_t m, RngStream rng) {
    const std::size_t classes = class_count(y, {});
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < y.size(); ++i) {
            if (y[i] == static_cast<int>(c)) members.push_back(i);
        }
        if (members.empty()) continue;
        if (members.size() < m) {
            throw DataError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                            " examples, fewer than the " + std::to_string(m) + " requested");
        }
        RngStream cls = rng.derive(c);
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t pick = j + static_cast<std::size_t>(cls.below(members.size() - j));
            std::swap(members[j], members[pick]);
            out.push_back(members[j]);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

}  // namespace nfk::eval
