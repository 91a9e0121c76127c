#pragma once

#include <span>
#include <string>
#include <vector>

#include "nfk/linalg.hpp"

namespace nfk::eval {

enum class ProbeMode { ridge, logistic };

std::string to_string(ProbeMode m);
ProbeMode probe_mode_from_string(const std::string& s);

struct LogisticConfig {
    double learning_rate = 0.5;
    std::size_t epochs = 500;
};

struct ProbeOptions {
    ProbeMode mode = ProbeMode::ridge;
    double lambda = 1e-3;  // ridge penalty; L2 weight for logistic
    LogisticConfig logistic;
    bool standardize = false;  // per-dimension z-scoring with train statistics
};

/// Linear classifier scores = E W + b, decoded by argmax.
struct ProbeResult {
    ProbeMode mode = ProbeMode::ridge;
    double lambda = 0.0;
    Matrix weights;  // k x C
    Eigen::RowVectorXd bias;
    Eigen::RowVectorXd feature_mean;  // standardization, empty when off
    Eigen::RowVectorXd feature_scale;
    double train_accuracy = 0.0;
    double test_accuracy = -1.0;  // -1 without a test split
    std::size_t labels_per_class = 0;  // 0 = all training labels
    std::size_t classes = 0;

    Matrix scores(const Matrix& e) const;
    std::vector<int> predict(const Matrix& e) const;
};

/// Ridge: one-hot least squares with an unpenalized intercept, closed form
/// (primal or dual, whichever system is smaller). Logistic: softmax
/// regression by deterministic full-batch gradient descent. Ridge with
/// lambda = 0 on a singular system throws NumericalError.
ProbeResult linear_probe(const Matrix& e_train, std::span<const int> y_train, const Matrix& e_test,
                         std::span<const int> y_test, const ProbeOptions& opts);

double accuracy(std::span<const int> predicted, std::span<const int> truth);

/// 1e-6, 1e-5, ..., 1e2.
std::vector<double> default_lambda_grid();

struct SweepResult {
    std::vector<ProbeResult> grid;          // final fits on the full train split
    std::vector<double> validation_accuracy;
    std::size_t best = 0;
    double lambda_scale = 1.0;              // mean squared row norm of train embeddings
};

/// Ridge sweep: each grid value is multiplied by the mean squared row norm of
/// the training embeddings, chosen on a seeded stratified validation fold and
/// refit on the whole train split.
SweepResult ridge_sweep(const Matrix& e_train, std::span<const int> y_train, const Matrix& e_test,
                        std::span<const int> y_test, const std::vector<double>& grid, double validation_fraction,
                        std::uint64_t seed, bool standardize = false);

/// Low-rank KRR in feature form with F = sqrt(N) E, so that the kernel is
/// K = N E E^T: predictions F_q (F^T F + N lambda I)^{-1} F^T Y.
Matrix krr_predict(const Matrix& e_train, const Matrix& y, double lambda, const Matrix& e_query);
/// Gram-form KRR: K_q (K + N lambda I)^{-1} Y.
Matrix krr_predict_gram(const Matrix& k_train, const Matrix& y, double lambda, const Matrix& k_query);

/// Exactly m indices per class, drawn without replacement, sorted ascending.
std::vector<std::size_t> subsample_labels(std::span<const int> y, std::size_t m, RngStream rng);

Matrix one_hot(std::span<const int> y, std::size_t classes);

}  // namespace nfk::eval
