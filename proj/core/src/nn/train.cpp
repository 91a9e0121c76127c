#include "nfk/nn/train.hpp"

#include <cmath>
#include <optional>
#include <sstream>

#include "nfk/errors.hpp"
#include "nfk/nn/heads.hpp"
#include "nfk/nn/mlp.hpp"

namespace nfk::nn {

std::string to_string(Objective o) {
    switch (o) {
        case Objective::cross_entropy: return "cross-entropy";
        case Objective::bce: return "bce";
        case Objective::mse: return "mse";
        case Objective::elbo: return "elbo";
        case Objective::gan_nonsaturating: return "gan-nonsaturating";
    }
    return "unknown";
}

Objective objective_from_string(const std::string& s) {
    if (s == "cross-entropy") return Objective::cross_entropy;
    if (s == "bce") return Objective::bce;
    if (s == "mse") return Objective::mse;
    if (s == "elbo") return Objective::elbo;
    if (s == "gan-nonsaturating") return Objective::gan_nonsaturating;
    throw ConfigError("unknown objective '" + s + "'");
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::adam ? "adam" : "sgd+momentum"; }

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd+momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
    throw ConfigError("unknown optimizer '" + s + "'");
}

double Schedule::learning_rate(double base, std::size_t epoch) const {
    double lr = base;
    for (std::size_t m : milestones) {
        if (epoch >= m) {
            lr *= gamma;
        }
    }
    return lr;
}

Optimizer::Optimizer(OptimizerConfig cfg, std::size_t n)
    : cfg_(cfg), m_(Vector::Zero(static_cast<Eigen::Index>(n))), v_(Vector::Zero(static_cast<Eigen::Index>(n))) {}

void Optimizer::step(Vector& params, const Vector& grad, double lr) {
    ++t_;
    if (cfg_.kind == OptimizerKind::sgd_momentum) {
        m_ = cfg_.momentum * m_ + grad + cfg_.weight_decay * params;
        params -= lr * m_;
        return;
    }
    const Vector g = grad + cfg_.weight_decay * params;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * g;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.epsilon);
}

std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

namespace {

void check_divergence(double loss, const Vector& grad, std::size_t epoch, std::size_t step) {
    if (!std::isfinite(loss) || !grad.allFinite()) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ", step " << step << " (loss = " << loss << ")";
        throw NumericalError(msg.str());
    }
}

struct BlockPartial {
    double loss = 0.0;
    std::size_t correct = 0;
    Vector grad;
};

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

std::vector<EpochLog> run_training(Vector& params, std::size_t n_examples, const TrainConfig& cfg,
                                   const BatchGradient& gradient, bool report_accuracy) {
    if (n_examples == 0) {
        throw DataError("training set is empty");
    }
    if (cfg.schedule.batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    RngStream shuffle = RngStream(cfg.seed).derive(stream_tag("shuffle"));
    Optimizer opt(cfg.optimizer, static_cast<std::size_t>(params.size()));
    std::vector<EpochLog> history;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.schedule.epochs; ++epoch) {
        const double lr = cfg.schedule.learning_rate(cfg.optimizer.learning_rate, epoch);
        const auto perm = permutation(n_examples, shuffle);
        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n_examples; start += cfg.schedule.batch_size, ++step) {
            const std::size_t count = std::min(cfg.schedule.batch_size, n_examples - start);
            const std::span<const std::size_t> batch(perm.data() + start, count);
            Vector grad = Vector::Zero(params.size());
            std::size_t batch_correct = 0;
            const double loss = gradient(params, batch, grad, batch_correct);
            check_divergence(loss, grad, epoch, step);
            grad /= static_cast<double>(count);
            opt.step(params, grad, lr);
            loss_sum += loss;
            correct += batch_correct;
        }
        EpochLog log;
        log.epoch = epoch;
        log.loss = loss_sum / static_cast<double>(n_examples);
        log.accuracy = report_accuracy ? static_cast<double>(correct) / static_cast<double>(n_examples) : -1.0;
        log.learning_rate = lr;
        history.push_back(log);
    }
    return history;
}

double supervised_batch_gradient(const ModelSpec& spec, Objective objective, const Vector& params,
                                 const Batch& data, std::span<const std::size_t> batch, const Parallelism& par,
                                 Vector& grad_sum, std::size_t& correct, const ClassifierAux* aux) {
    const std::size_t p_base = spec.param_count();
    const std::size_t p_total = p_base + (aux != nullptr ? aux->aux_params : 0);
    if (static_cast<std::size_t>(params.size()) != p_total || static_cast<std::size_t>(grad_sum.size()) != p_total) {
        throw ShapeError("supervised_batch_gradient: parameter length mismatch");
    }
    if (!data.has_labels()) {
        throw DataError("supervised objective needs labels");
    }
    const MlpView net{spec.layers, std::span<const double>(params.data(), p_base)};
    const std::size_t block = std::max<std::size_t>(1, par.block);
    const std::size_t n_blocks = (batch.size() + block - 1) / block;
    const auto c = static_cast<Eigen::Index>(spec.output_dim());

    double loss_total = 0.0;
    ordered_reduce<BlockPartial>(
        n_blocks, resolve_threads(par.threads),
        [&](std::size_t bi) {
            const std::size_t begin = bi * block;
            const std::size_t count = std::min(block, batch.size() - begin);
            const auto rows = batch.subspan(begin, count);
            const Batch sub = data.select(rows);
            const auto b = static_cast<Eigen::Index>(count);

            Tape tape;
            const Matrix f = mlp_forward(net, sub.inputs, &tape);
            Matrix cot(b, c);
            BlockPartial part;
            part.grad = Vector::Zero(static_cast<Eigen::Index>(p_total));
            for (Eigen::Index i = 0; i < b; ++i) {
                const int y = sub.labels[static_cast<std::size_t>(i)];
                switch (objective) {
                    case Objective::cross_entropy: {
                        if (y < 0 || y >= c) throw DataError("label " + std::to_string(y) + " out of range");
                        const double m = f.row(i).maxCoeff();
                        const Eigen::RowVectorXd e = (f.row(i).array() - m).exp().matrix();
                        const double z = e.sum();
                        part.loss += m + std::log(z) - f(i, y);
                        cot.row(i) = e / z;
                        cot(i, y) -= 1.0;
                        Eigen::Index arg = 0;
                        f.row(i).maxCoeff(&arg);
                        part.correct += arg == y ? 1 : 0;
                        break;
                    }
                    case Objective::bce: {
                        if (c != 1) throw ConfigError("bce needs a single output logit");
                        const double t = static_cast<double>(y);
                        part.loss += softplus(f(i, 0)) - t * f(i, 0);
                        cot(i, 0) = sigmoid(f(i, 0)) - t;
                        part.correct += ((f(i, 0) > 0.0) == (y == 1)) ? 1 : 0;
                        break;
                    }
                    case Objective::mse: {
                        Eigen::RowVectorXd target = Eigen::RowVectorXd::Zero(c);
                        if (c == 1) {
                            target(0) = static_cast<double>(y);
                        } else {
                            if (y < 0 || y >= c) throw DataError("label " + std::to_string(y) + " out of range");
                            target(y) = 1.0;
                            Eigen::Index arg = 0;
                            f.row(i).maxCoeff(&arg);
                            part.correct += arg == y ? 1 : 0;
                        }
                        cot.row(i) = f.row(i) - target;
                        part.loss += 0.5 * cot.row(i).squaredNorm();
                        break;
                    }
                    default: throw ConfigError("objective " + to_string(objective) + " is not supervised");
                }
            }
            std::vector<Matrix> inject;
            if (aux != nullptr) {
                if (aux->cls_weight != 1.0) {
                    cot *= aux->cls_weight;
                    part.loss *= aux->cls_weight;
                }
                if (aux->fn) {
                    const Matrix& pen = tape.inputs.back();
                    Matrix pen_cot = Matrix::Zero(pen.rows(), pen.cols());
                    part.loss += aux->fn(rows, pen, pen_cot,
                                         part.grad.segment(static_cast<Eigen::Index>(p_base),
                                                           static_cast<Eigen::Index>(aux->aux_params)));
                    inject.resize(spec.layers.size());
                    inject.back() = std::move(pen_cot);
                }
            }
            Matrix pcot = Matrix::Zero(1, static_cast<Eigen::Index>(p_base));
            mlp_vjp(net, tape, cot, pcot, nullptr, inject);
            part.grad.head(static_cast<Eigen::Index>(p_base)) = pcot.row(0).transpose();
            return part;
        },
        [&](BlockPartial&& part) {
            loss_total += part.loss;
            correct += part.correct;
            grad_sum += part.grad;
        });
    return loss_total;
}

namespace {

std::vector<EpochLog> train_vae(Model& model, const Batch& data, const TrainConfig& cfg) {
    const ModelSpec& spec = model.spec;
    const auto l = static_cast<Eigen::Index>(spec.latent_dim);
    const auto s = static_cast<Eigen::Index>(std::max<std::size_t>(1, cfg.vae_samples));
    const RngStream noise_root = RngStream(cfg.seed).derive(stream_tag("noise"));
    std::size_t step = 0;
    const std::size_t block = std::max<std::size_t>(1, cfg.parallelism.block);
    BatchGradient grad_fn = [&](const Vector& params, std::span<const std::size_t> batch, Vector& grad_sum,
                                std::size_t&) {
        Batch sub = data.select(batch);
        RngStream noise = noise_root.derive(step++);
        sub.latents.resize(sub.inputs.rows(), s * l);
        for (Eigen::Index i = 0; i < sub.latents.size(); ++i) {
            sub.latents.data()[i] = noise.normal();
        }
        ParamVector pv;
        pv.values = params;
        pv.layout = model.params.layout;
        const HeadEvaluator eval(spec, pv, {HeadKind::elbo, 0});
        const std::size_t n_blocks = (batch.size() + block - 1) / block;
        double loss = 0.0;
        ordered_reduce<BlockPartial>(
            n_blocks, resolve_threads(cfg.parallelism.threads),
            [&](std::size_t bi) {
                const std::size_t begin = bi * block;
                const std::size_t count = std::min(block, batch.size() - begin);
                const Batch part_batch = sub.rows(begin, count);
                BlockPartial part;
                part.loss = -eval.values(part_batch).sum();
                const Matrix w = Matrix::Constant(static_cast<Eigen::Index>(count), 1, -1.0);
                part.grad = eval.vjp(part_batch, w).row(0).transpose();
                return part;
            },
            [&](BlockPartial&& part) {
                loss += part.loss;
                grad_sum += part.grad;
            });
        return loss;
    };
    return run_training(model.params.values, data.size(), cfg, grad_fn, false);
}

std::vector<EpochLog> train_gan(Model& model, const Batch& data, const TrainConfig& cfg) {
    const ModelSpec& dspec = model.spec;
    const ModelSpec& gspec = *model.generator_spec;
    const auto latent = static_cast<Eigen::Index>(gspec.latent_dim);
    const std::size_t n = data.size();
    RngStream shuffle = RngStream(cfg.seed).derive(stream_tag("shuffle"));
    const RngStream noise_root = RngStream(cfg.seed).derive(stream_tag("noise"));
    Optimizer opt_d(cfg.optimizer, model.params.size());
    Optimizer opt_g(cfg.optimizer, model.generator_params.size());
    Vector& dparams = model.params.values;
    Vector& gparams = model.generator_params.values;

    std::vector<EpochLog> history;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.schedule.epochs; ++epoch) {
        const double lr = cfg.schedule.learning_rate(cfg.optimizer.learning_rate, epoch);
        const auto perm = permutation(n, shuffle);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n; start += cfg.schedule.batch_size, ++step) {
            const std::size_t count = std::min(cfg.schedule.batch_size, n - start);
            const auto b = static_cast<Eigen::Index>(count);
            const Batch real = data.select(std::span<const std::size_t>(perm.data() + start, count));
            RngStream noise = noise_root.derive(step);
            const MlpView dnet{dspec.layers, {dparams.data(), static_cast<std::size_t>(dparams.size())}};
            const MlpView gnet{gspec.layers, {gparams.data(), static_cast<std::size_t>(gparams.size())}};

            // Discriminator: maximise log D(x) + log(1 - D(G(h))) with D as a logit.
            const Matrix h1 = seeded_gaussian(count, static_cast<std::size_t>(latent), noise);
            const Matrix fake = mlp_forward(gnet, h1);
            Tape real_tape;
            Tape fake_tape;
            const Matrix d_real = mlp_forward(dnet, real.inputs, &real_tape);
            const Matrix d_fake = mlp_forward(dnet, fake, &fake_tape);
            Matrix cot_real(b, 1);
            Matrix cot_fake(b, 1);
            double d_loss = 0.0;
            for (Eigen::Index i = 0; i < b; ++i) {
                d_loss += softplus(-d_real(i, 0)) + softplus(d_fake(i, 0));
                cot_real(i, 0) = sigmoid(d_real(i, 0)) - 1.0;
                cot_fake(i, 0) = sigmoid(d_fake(i, 0));
            }
            Matrix dgrad = Matrix::Zero(1, dparams.size());
            mlp_vjp(dnet, real_tape, cot_real, dgrad);
            mlp_vjp(dnet, fake_tape, cot_fake, dgrad);
            Vector dg = dgrad.row(0).transpose() / static_cast<double>(count);
            check_divergence(d_loss, dg, epoch, step);
            opt_d.step(dparams, dg, lr);

            // Generator: non-saturating loss -log D(G(h)).
            const MlpView dnet2{dspec.layers, {dparams.data(), static_cast<std::size_t>(dparams.size())}};
            const Matrix h2 = seeded_gaussian(count, static_cast<std::size_t>(latent), noise);
            Tape gen_tape;
            const Matrix fake2 = mlp_forward(gnet, h2, &gen_tape);
            Tape disc_tape;
            const Matrix d2 = mlp_forward(dnet2, fake2, &disc_tape);
            Matrix cot2(b, 1);
            double g_loss = 0.0;
            for (Eigen::Index i = 0; i < b; ++i) {
                g_loss += softplus(-d2(i, 0));
                cot2(i, 0) = sigmoid(d2(i, 0)) - 1.0;
            }
            Matrix unused = Matrix::Zero(1, dparams.size());
            Matrix x_cot;
            mlp_vjp(dnet2, disc_tape, cot2, unused, &x_cot);
            Matrix ggrad = Matrix::Zero(1, gparams.size());
            mlp_vjp(gnet, gen_tape, x_cot, ggrad);
            Vector gg = ggrad.row(0).transpose() / static_cast<double>(count);
            check_divergence(g_loss, gg, epoch, step);
            opt_g.step(gparams, gg, lr);
            loss_sum += d_loss;
        }
        history.push_back({epoch, loss_sum / static_cast<double>(n), -1.0, lr});
    }
    return history;
}

}  // namespace

TrainResult train_from(const Model& init, const Batch& data, const TrainConfig& cfg) {
    init.spec.validate();
    data.validate();
    if (static_cast<std::size_t>(data.inputs.cols()) != init.spec.input_dim()) {
        throw DataError("training data width " + std::to_string(data.inputs.cols()) + " does not match model input " +
                        std::to_string(init.spec.input_dim()));
    }
    TrainResult result;
    result.model = init;
    Model& model = result.model;
    switch (cfg.objective) {
        case Objective::cross_entropy:
        case Objective::bce:
        case Objective::mse: {
            if (model.spec.family != Family::classifier && model.spec.family != Family::ebm) {
                throw ConfigError(to_string(cfg.objective) + " needs a classifier or ebm model");
            }
            if (cfg.objective == Objective::cross_entropy && model.spec.output_dim() < 2) {
                throw ConfigError("cross-entropy needs at least two logits");
            }
            const ModelSpec& spec = model.spec;
            BatchGradient grad_fn = [&](const Vector& params, std::span<const std::size_t> batch, Vector& grad_sum,
                                        std::size_t& correct) {
                return supervised_batch_gradient(spec, cfg.objective, params, data, batch, cfg.parallelism, grad_sum,
                                                 correct);
            };
            result.history = run_training(model.params.values, data.size(), cfg, grad_fn, true);
            break;
        }
        case Objective::elbo:
            if (model.spec.family != Family::vae) {
                throw ConfigError("elbo objective needs a vae model");
            }
            result.history = train_vae(model, data, cfg);
            break;
        case Objective::gan_nonsaturating:
            if (model.spec.family != Family::gan_discriminator || !model.generator_spec) {
                throw ConfigError("gan-nonsaturating needs a discriminator and a generator");
            }
            model.generator_spec->validate();
            if (model.generator_spec->output_dim() != model.spec.input_dim()) {
                throw ConfigError("generator output width must equal discriminator input width");
            }
            result.history = train_gan(model, data, cfg);
            break;
    }
    require_finite(model.params.values, "trained parameters");
    return result;
}

TrainResult train(const ModelSpec& spec, const Batch& data, const TrainConfig& cfg, const ModelSpec* generator) {
    spec.validate();
    Model init;
    init.spec = spec;
    const RngStream root(cfg.seed);
    init.params = init_params(spec, root.derive(stream_tag("init")));
    if (generator != nullptr) {
        init.generator_spec = *generator;
        init.generator_params = init_params(*generator, root.derive(stream_tag("init-generator")));
    }
    return train_from(init, data, cfg);
}

double accuracy(const ModelSpec& spec, const ParamVector& params, const Batch& data) {
    if (!data.has_labels() || data.size() == 0) {
        throw DataError("accuracy needs labelled data");
    }
    const Matrix f = forward(spec, params, data);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
        int pred = 0;
        if (f.cols() == 1) {
            pred = f(i, 0) > 0.0 ? 1 : 0;
        } else {
            Eigen::Index arg = 0;
            f.row(i).maxCoeff(&arg);
            pred = static_cast<int>(arg);
        }
        hits += pred == data.labels[static_cast<std::size_t>(i)] ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(f.rows());
}

}  // namespace nfk::nn
