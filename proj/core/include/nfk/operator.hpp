#pragma once

#include <cstdint>
#include <string>

#include "nfk/linalg.hpp"

namespace nfk {

/// Matrix-free rows() x cols() linear map A, seen only through products.
class LinearOperator {
public:
    virtual ~LinearOperator() = default;

    virtual std::size_t rows() const = 0;
    virtual std::size_t cols() const = 0;
    /// A M for M (cols x u).
    virtual Matrix apply(const Matrix& m) const = 0;
    /// A^T W for W (rows x u).
    virtual Matrix apply_adjoint(const Matrix& w) const = 0;
    /// Dense A. The default assembles it from adjoint products in column chunks.
    virtual Matrix materialize() const;
    /// ||A||_F^2, i.e. the trace of A A^T.
    virtual double squared_norm() const;

    /// Provenance carried into factor metadata.
    virtual std::string kernel_kind() const { return "dense"; }
    virtual std::uint64_t fingerprint() const { return 0; }
    virtual std::uint64_t data_digest() const { return 0; }
};

/// Explicit matrix behind the operator interface.
class DenseOperator final : public LinearOperator {
public:
    explicit DenseOperator(Matrix a);

    std::size_t rows() const override { return static_cast<std::size_t>(a_.rows()); }
    std::size_t cols() const override { return static_cast<std::size_t>(a_.cols()); }
    Matrix apply(const Matrix& m) const override;
    Matrix apply_adjoint(const Matrix& w) const override;
    Matrix materialize() const override { return a_; }
    std::uint64_t fingerprint() const override;

private:
    Matrix a_;
};

}  // namespace nfk
