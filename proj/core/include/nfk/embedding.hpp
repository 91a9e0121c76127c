#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "nfk/fisher.hpp"
#include "nfk/linalg.hpp"
#include "nfk/lowrank.hpp"

namespace nfk::embedding {

/// k-dimensional kernel embeddings, one row per example.
struct EmbeddingSet {
    Matrix vectors;  // n x k
    std::uint64_t factor_fingerprint = 0;
    std::string normalization = "sqrt-n";  // e = Phi Sigma / sqrt(N) for anchors
    std::size_t anchor_count = 0;         // N of the source factors

    std::size_t size() const { return static_cast<std::size_t>(vectors.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
};

/// Rows Phi_j diag(Sigma) / sqrt(N) for the N anchor examples.
EmbeddingSet embed_train(const lowrank::SvdFactors& factors);

/// pmat^T V_x / sqrt(N) for every row of `x`. Throws DataError if the factors
/// were computed under a different Fisher context.
EmbeddingSet embed_points(const fisher::FisherOperator& op, const lowrank::SvdFactors& factors, const nn::Batch& x);
Vector embed_point(const fisher::FisherOperator& op, const lowrank::SvdFactors& factors, std::span<const double> x);

/// manifest.json (n, k, fingerprint) + embeddings.bin.
void save_embeddings(const EmbeddingSet& e, const std::filesystem::path& dir);
EmbeddingSet load_embeddings(const std::filesystem::path& dir);

}  // namespace nfk::embedding
