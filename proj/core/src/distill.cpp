#include "nfk/distill.hpp"

#include <cmath>

#include "nfk/embedding.hpp"
#include "nfk/errors.hpp"
#include "nfk/fisher.hpp"
#include "nfk/io.hpp"

namespace nfk::distill {

double nfkd_loss(double cls_loss, std::span<const double> head_out, std::span<const double> target, double alpha) {
    if (head_out.size() != target.size() || head_out.empty()) {
        throw ShapeError("nfkd_loss: head output and target differ in length");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("nfkd_loss: alpha must be in [0, 1]");
    }
    if (alpha == 1.0) {
        return cls_loss;
    }
    double sq = 0.0;
    for (std::size_t d = 0; d < target.size(); ++d) {
        const double r = head_out[d] - target[d];
        sq += r * r;
    }
    return alpha * cls_loss + (1.0 - alpha) * sq / static_cast<double>(target.size());
}

Vector nfkd_loss_grad(std::span<const double> head_out, std::span<const double> target, double alpha) {
    if (head_out.size() != target.size() || head_out.empty()) {
        throw ShapeError("nfkd_loss_grad: head output and target differ in length");
    }
    Vector g(static_cast<Eigen::Index>(target.size()));
    const double c = 2.0 * (1.0 - alpha) / static_cast<double>(target.size());
    for (std::size_t d = 0; d < target.size(); ++d) {
        g(static_cast<Eigen::Index>(d)) = c * (head_out[d] - target[d]);
    }
    return g;
}

TeacherTargets teacher_targets(const lowrank::SvdFactors& factors, const nn::Batch& data, bool zscore) {
    const std::uint64_t digest = fisher::batch_digest(data);
    if (factors.meta.data_digest != digest) {
        throw DataError("teacher factors were computed on dataset " + io::hex64(factors.meta.data_digest) +
                        ", training data is " + io::hex64(digest));
    }
    TeacherTargets t;
    t.targets = embedding::embed_train(factors).vectors;
    t.factor_fingerprint = factors.fingerprint();
    t.data_digest = digest;
    const auto k = t.targets.cols();
    t.mean = Eigen::RowVectorXd::Zero(k);
    t.scale = Eigen::RowVectorXd::Ones(k);
    if (zscore) {
        t.mean = t.targets.colwise().mean();
        t.targets.rowwise() -= t.mean;
        t.scale = t.targets.array().square().colwise().mean().sqrt().matrix();
        for (Eigen::Index j = 0; j < k; ++j) {
            if (!(t.scale(j) > 0.0)) t.scale(j) = 1.0;
        }
        t.targets.array().rowwise() /= t.scale.array();
    }
    return t;
}

DistillResult distill_train(const TeacherTargets& teacher, const nn::ModelSpec& student, const nn::Batch& data,
                            const DistillConfig& cfg) {
    student.validate();
    data.validate();
    if (student.family != nn::Family::classifier || student.layers.size() < 2) {
        throw ConfigError("distillation student must be a classifier with at least one hidden layer");
    }
    if (cfg.train.objective != nn::Objective::cross_entropy) {
        throw ConfigError("distillation uses the cross-entropy objective");
    }
    if (!(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) {
        throw ConfigError("alpha must be in [0, 1]");
    }
    if (teacher.targets.rows() != data.inputs.rows()) {
        throw DataError("teacher targets cover " + std::to_string(teacher.targets.rows()) + " examples, data has " +
                        std::to_string(data.inputs.rows()));
    }
    if (static_cast<std::size_t>(data.inputs.cols()) != student.input_dim()) {
        throw DataError("data width does not match the student input");
    }

    const auto h = static_cast<Eigen::Index>(student.layers.back().fan_in);
    const auto k = teacher.targets.cols();
    const auto p = static_cast<Eigen::Index>(student.param_count());
    const RngStream root(cfg.train.seed);

    Vector params(p + k * (h + 1));
    params.head(p) = nn::init_params(student, root.derive(stream_tag("init"))).values;
    {
        RngStream rng = root.derive(stream_tag("head-init"));
        const double bound = std::sqrt(6.0 / static_cast<double>(h + k));
        for (Eigen::Index i = 0; i < k * h; ++i) {
            params(p + i) = bound * (2.0 * rng.uniform() - 1.0);
        }
        params.tail(k).setZero();
    }

    const double alpha = cfg.alpha;
    const Vector* current = nullptr;
    nn::ClassifierAux aux;
    aux.cls_weight = alpha;
    aux.aux_params = static_cast<std::size_t>(k * (h + 1));
    if (alpha < 1.0) {
        aux.fn = [&](std::span<const std::size_t> rows, const Matrix& pen, Matrix& pen_cot,
                     Eigen::Ref<Vector> aux_grad) {
            const Eigen::Map<const Matrix> w(current->data() + p, k, h);
            const Eigen::Map<const Eigen::RowVectorXd> b(current->data() + p + k * h, k);
            Matrix out = pen * w.transpose();
            out.rowwise() += b;
            Matrix resid(out.rows(), k);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                resid.row(static_cast<Eigen::Index>(i)) =
                    out.row(static_cast<Eigen::Index>(i)) - teacher.targets.row(static_cast<Eigen::Index>(rows[i]));
            }
            const double loss = (1.0 - alpha) * resid.squaredNorm() / static_cast<double>(k);
            const Matrix g = resid * (2.0 * (1.0 - alpha) / static_cast<double>(k));
            pen_cot.noalias() += g * w;
            Eigen::Map<Matrix> gw(aux_grad.data(), k, h);
            gw.noalias() += g.transpose() * pen;
            aux_grad.tail(k) += g.colwise().sum().transpose();
            return loss;
        };
    }

    nn::BatchGradient grad_fn = [&](const Vector& params_now, std::span<const std::size_t> batch, Vector& grad_sum,
                                    std::size_t& correct) {
        current = &params_now;
        return nn::supervised_batch_gradient(student, nn::Objective::cross_entropy, params_now, data, batch,
                                             cfg.train.parallelism, grad_sum, correct, &aux);
    };

    DistillResult result;
    result.history = nn::run_training(params, data.size(), cfg.train, grad_fn, true);
    result.student.spec = student;
    result.student.params = nn::ParamVector::zeros(student);
    result.student.params.values = params.head(p);
    result.head.resize(k, h + 1);
    result.head.leftCols(h) = Eigen::Map<const Matrix>(params.data() + p, k, h);
    result.head.col(h) = params.tail(k);
    return result;
}

}  // namespace nfk::distill
