#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace nfk {

/// Dense row-major double matrix. Row-major keeps per-example rows contiguous,
/// which is the access pattern of every batched kernel in this library.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Throws NumericalError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);
void require_finite(const Vector& v, const char* what);

/// Builds a matrix from row-major data, validating length and finiteness.
Matrix matrix_from_rows(std::size_t rows, std::size_t cols, std::span<const double> data);

/// Counter-based random stream. Output i of stream (seed, counter) depends only
/// on (seed, counter + i), so streams can be split or replayed without state.
class RngStream {
public:
    RngStream() = default;
    explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    /// Standard normal via Box-Muller; consumes two uniforms per call.
    double normal();
    /// Uniform integer on [0, bound).
    std::uint64_t below(std::uint64_t bound);

    /// Independent stream keyed by `tag`; does not advance this stream.
    RngStream derive(std::uint64_t tag) const;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t counter_ = 0;
};

/// Hash of an ASCII tag, for RngStream::derive.
std::uint64_t stream_tag(std::string_view name);

Matrix seeded_gaussian(std::size_t rows, std::size_t cols, RngStream& rng);

struct QrResult {
    Matrix q;  // m x u, orthonormal columns
    Matrix r;  // u x u, upper triangular, diag >= 0
    std::vector<std::size_t> deficient_columns;  // |R_ii| < 1e-300
};

/// Thin Householder QR of an m x u matrix with m >= u.
QrResult qr_thin(const Matrix& a);

struct EighResult {
    Vector values;  // descending
    Matrix vectors;  // columns are eigenvectors
};

/// Symmetric eigendecomposition (Householder tridiagonalization + implicit QL).
/// Rejects inputs with |S - S^T|_max > 1e-10 |S|_max.
EighResult sym_eigh_small(const Matrix& s);

struct SvdSmallResult {
    Matrix pu;     // u x u
    Vector sigma;  // u, descending, nonnegative
    Matrix qt;     // u x n
};

/// SVD of a wide u x n matrix (u <= n): left vectors from the eigendecomposition
/// of B B^T; singular values are the row norms of U^T B, and the right vectors
/// those rows normalized and re-orthogonalized.
SvdSmallResult svd_small(const Matrix& b);

/// Frobenius inner product <A, B>.
double frobenius_dot(const Matrix& a, const Matrix& b);

}  // namespace nfk
