#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nfk/linalg.hpp"
#include "nfk/operator.hpp"

namespace nfk::lowrank {

struct SvdMeta {
    std::string method;       // "randomized" or "gram-eigh"
    std::string kernel_kind;  // from the operator
    std::size_t n = 0;
    std::size_t p = 0;
    std::size_t k = 0;
    std::size_t oversample = 0;
    std::size_t iters = 0;
    std::uint64_t seed = 0;
    std::uint64_t context_fingerprint = 0;
    std::uint64_t data_digest = 0;
};

/// V ~= phi diag(sigma) pmat^T.
struct SvdFactors {
    Matrix phi;     // N x k, orthonormal columns
    Vector sigma;   // k, descending
    Matrix pmat;    // P x k, orthonormal columns
    SvdMeta meta;
    /// Invariant-subspace residual after each power iteration (randomized only).
    std::vector<double> residuals;

    std::size_t rank() const { return static_cast<std::size_t>(sigma.size()); }
    /// Digest of meta and arrays; what embeddings and distillation record.
    std::uint64_t fingerprint() const;
};

struct SvdOptions {
    std::size_t k = 32;
    std::size_t oversample = 10;
    std::size_t iters = 10;
    std::uint64_t seed = 0;
};

/// Randomized subspace iteration on the row space of `op`, re-orthonormalized
/// after every product, finished with a small SVD of the projected block.
/// Throws ConfigError when k + oversample > min(N, P) and NumericalError when
/// two identical operator applications disagree.
SvdFactors truncated_svd(const LinearOperator& op, const SvdOptions& opts);

/// Materializes V and K = V V^T and eigendecomposes K. N <= 4096 and
/// N * P <= 1e8 are enforced (ConfigError).
SvdFactors gram_eigh_baseline(const LinearOperator& op, std::size_t k);

/// sum_{i<k} sigma_i^2 / sum_i sigma_i^2.
double explained_variance(const Vector& sigma, std::size_t k);
/// Same ratio against a known total (LinearOperator::squared_norm), for
/// spectra truncated below full rank.
double explained_variance(const Vector& sigma, std::size_t k, double total);

/// Makes the largest-magnitude entry of each phi column positive, flipping the
/// matching pmat column.
void canonicalize_signs(SvdFactors& f);

/// Factor store: dir/manifest.json plus phi.bin, sigma.bin, pmat.bin.
void save_factors(const SvdFactors& f, const std::filesystem::path& dir);
/// Verifies file digests (DataError on mismatch).
SvdFactors load_factors(const std::filesystem::path& dir);

}  // namespace nfk::lowrank
