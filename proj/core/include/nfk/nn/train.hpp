#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nfk/linalg.hpp"
#include "nfk/nn/model.hpp"
#include "nfk/parallel.hpp"

namespace nfk::nn {

enum class Objective { cross_entropy, bce, mse, elbo, gan_nonsaturating };
enum class OptimizerKind { sgd_momentum, adam };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);
std::string to_string(OptimizerKind o);
OptimizerKind optimizer_from_string(const std::string& s);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;
};

/// Epoch-based step decay: lr * gamma^(number of milestones passed).
struct Schedule {
    std::size_t epochs = 10;
    std::size_t batch_size = 64;
    std::vector<std::size_t> milestones;
    double gamma = 0.1;

    double learning_rate(double base, std::size_t epoch) const;
};

struct TrainConfig {
    Objective objective = Objective::cross_entropy;
    OptimizerConfig optimizer;
    Schedule schedule;
    std::uint64_t seed = 0;
    Parallelism parallelism;
    std::size_t vae_samples = 1;  // reparameterized draws per example per step
};

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double accuracy = -1.0;  // classifiers only; -1 when not applicable
    double learning_rate = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<EpochLog> history;
};

/// Mean loss and gradient of a minibatch; returns the summed loss and fills
/// `grad_sum` (length P) with the summed gradient. `correct` counts argmax hits
/// when the objective has labels.
using BatchGradient = std::function<double(const Vector& params, std::span<const std::size_t> batch,
                                           Vector& grad_sum, std::size_t& correct)>;

/// First-order optimizer state over a flat parameter vector.
class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, std::size_t n);
    void step(Vector& params, const Vector& grad, double lr);

private:
    OptimizerConfig cfg_;
    Vector m_;
    Vector v_;
    std::size_t t_ = 0;
};

/// Shared minibatch loop: seeded shuffling, step-decay schedule, divergence
/// abort. `params` is updated in place.
std::vector<EpochLog> run_training(Vector& params, std::size_t n_examples, const TrainConfig& cfg,
                                   const BatchGradient& gradient, bool report_accuracy);

/// Summed supervised loss (cross-entropy, bce or mse) and gradient over the rows `batch` of `data`,
/// with per-block partials folded in block order. `aux`, when set, may add
/// extra cotangent into the penultimate activations of each block.
struct ClassifierAux {
    /// Given block rows and the penultimate activations (B x H), returns the
    /// summed auxiliary loss and fills `pen_cot` (B x H) and the auxiliary
    /// parameter gradient (length of the aux parameter slice).
    std::function<double(std::span<const std::size_t> rows, const Matrix& penultimate, Matrix& pen_cot,
                         Eigen::Ref<Vector> aux_grad)>
        fn;
    std::size_t aux_params = 0;
    double cls_weight = 1.0;
};

double supervised_batch_gradient(const ModelSpec& spec, Objective objective, const Vector& params,
                                 const Batch& data, std::span<const std::size_t> batch, const Parallelism& par,
                                 Vector& grad_sum, std::size_t& correct, const ClassifierAux* aux = nullptr);

/// Trains a freshly initialised model. For gan_nonsaturating `spec` is the
/// discriminator and `generator` must be given.
TrainResult train(const ModelSpec& spec, const Batch& data, const TrainConfig& cfg,
                  const ModelSpec* generator = nullptr);

/// Continues training from `init` (same contract as train()).
TrainResult train_from(const Model& init, const Batch& data, const TrainConfig& cfg);

/// Seeded permutation of 0..n-1 (Fisher-Yates).
std::vector<std::size_t> permutation(std::size_t n, RngStream& rng);

/// Fraction of rows whose argmax output equals the label.
double accuracy(const ModelSpec& spec, const ParamVector& params, const Batch& data);

}  // namespace nfk::nn
