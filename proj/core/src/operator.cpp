#include "nfk/operator.hpp"

#include <algorithm>
#include <string>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk {

Matrix LinearOperator::materialize() const {
    const auto n = static_cast<Eigen::Index>(rows());
    const auto p = static_cast<Eigen::Index>(cols());
    Matrix out(n, p);
    const Eigen::Index chunk = 64;
    for (Eigen::Index start = 0; start < n; start += chunk) {
        const Eigen::Index count = std::min(chunk, n - start);
        Matrix e = Matrix::Zero(n, count);
        for (Eigen::Index j = 0; j < count; ++j) {
            e(start + j, j) = 1.0;
        }
        out.middleRows(start, count) = apply_adjoint(e).transpose();
    }
    return out;
}

double LinearOperator::squared_norm() const {
    const auto n = static_cast<Eigen::Index>(rows());
    const Eigen::Index chunk = 64;
    double total = 0.0;
    for (Eigen::Index start = 0; start < n; start += chunk) {
        const Eigen::Index count = std::min(chunk, n - start);
        Matrix e = Matrix::Zero(n, count);
        for (Eigen::Index j = 0; j < count; ++j) {
            e(start + j, j) = 1.0;
        }
        total += apply_adjoint(e).squaredNorm();
    }
    return total;
}

DenseOperator::DenseOperator(Matrix a) : a_(std::move(a)) { require_finite(a_, "operator matrix"); }

Matrix DenseOperator::apply(const Matrix& m) const {
    if (m.rows() != a_.cols()) {
        throw ShapeError("DenseOperator::apply: expected " + std::to_string(a_.cols()) + " rows");
    }
    return a_ * m;
}

Matrix DenseOperator::apply_adjoint(const Matrix& w) const {
    if (w.rows() != a_.rows()) {
        throw ShapeError("DenseOperator::apply_adjoint: expected " + std::to_string(a_.rows()) + " rows");
    }
    return a_.transpose() * w;
}

std::uint64_t DenseOperator::fingerprint() const {
    return io::fnv1a64(std::span<const double>(a_.data(), static_cast<std::size_t>(a_.size())));
}

}  // namespace nfk
