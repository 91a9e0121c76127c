#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "nfk/linalg.hpp"
#include "nfk/lowrank.hpp"
#include "nfk/nn/model.hpp"
#include "nfk/nn/train.hpp"

namespace nfk::distill {

/// alpha * cls_loss + (1 - alpha) * mean_d (head_out_d - target_d)^2.
double nfkd_loss(double cls_loss, std::span<const double> head_out, std::span<const double> target, double alpha);

/// Gradient of nfkd_loss with respect to head_out.
Vector nfkd_loss_grad(std::span<const double> head_out, std::span<const double> target, double alpha);

/// Teacher embeddings of the training inputs, z-scored per dimension.
struct TeacherTargets {
    Matrix targets;  // N x k
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd scale;
    std::uint64_t factor_fingerprint = 0;
    std::uint64_t data_digest = 0;
};

/// Builds targets from the anchor embeddings of `factors`. Throws DataError if
/// the factors were computed on a dataset other than `data`.
TeacherTargets teacher_targets(const lowrank::SvdFactors& factors, const nn::Batch& data, bool zscore = true);

struct DistillConfig {
    double alpha = 0.5;
    nn::TrainConfig train;  // objective must be cross-entropy
};

struct DistillResult {
    nn::Model student;
    Matrix head;  // k x (H + 1): weights then bias column
    std::vector<nn::EpochLog> history;
};

/// Trains `student` on cross-entropy plus the embedding-regression term
/// through a linear head on its penultimate activations. The student's
/// initialization and shuffling streams are those of nn::train, so alpha = 1
/// reproduces nn::train bitwise.
DistillResult distill_train(const TeacherTargets& teacher, const nn::ModelSpec& student, const nn::Batch& data,
                            const DistillConfig& cfg);

}  // namespace nfk::distill
