#include "nfk/embedding.hpp"

#include <cmath>

#include <json.hpp>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk::embedding {

using nlohmann::json;

EmbeddingSet embed_train(const lowrank::SvdFactors& factors) {
    if (factors.phi.rows() == 0 || factors.sigma.size() == 0) {
        throw DataError("embed_train: empty factors");
    }
    EmbeddingSet e;
    const double root_n = std::sqrt(static_cast<double>(factors.phi.rows()));
    e.vectors = factors.phi * factors.sigma.asDiagonal();
    e.vectors /= root_n;
    e.factor_fingerprint = factors.fingerprint();
    e.anchor_count = static_cast<std::size_t>(factors.phi.rows());
    return e;
}

EmbeddingSet embed_points(const fisher::FisherOperator& op, const lowrank::SvdFactors& factors, const nn::Batch& x) {
    if (factors.meta.context_fingerprint != op.fingerprint()) {
        throw DataError("embed: factors were computed under Fisher context " +
                        io::hex64(factors.meta.context_fingerprint) + ", operator has " + io::hex64(op.fingerprint()));
    }
    if (static_cast<std::size_t>(factors.pmat.rows()) != op.cols()) {
        throw DataError("embed: factor parameter dimension does not match the model");
    }
    EmbeddingSet e;
    e.vectors = op.apply_jvp(x, factors.pmat);
    e.vectors /= std::sqrt(static_cast<double>(factors.meta.n));
    e.factor_fingerprint = factors.fingerprint();
    e.anchor_count = factors.meta.n;
    return e;
}

Vector embed_point(const fisher::FisherOperator& op, const lowrank::SvdFactors& factors, std::span<const double> x) {
    nn::Batch b;
    b.inputs = Eigen::Map<const Matrix>(x.data(), 1, static_cast<Eigen::Index>(x.size()));
    return embed_points(op, factors, b).vectors.row(0).transpose();
}

void save_embeddings(const EmbeddingSet& e, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_matrix(dir / "embeddings.bin", e.vectors);
    json j;
    j["format"] = "nfk-embeddings/1";
    j["n"] = e.size();
    j["k"] = e.dim();
    j["anchor_count"] = e.anchor_count;
    j["normalization"] = e.normalization;
    j["fingerprint"] = io::hex64(e.factor_fingerprint);
    j["files"] = {{"embeddings.bin", io::hex64(io::file_digest(dir / "embeddings.bin"))}};
    io::write_text(dir / "manifest.json", j.dump(2) + "\n");
}

EmbeddingSet load_embeddings(const std::filesystem::path& dir) {
    try {
        const json j = json::parse(io::read_text(dir / "manifest.json"));
        if (j.value("format", std::string()) != "nfk-embeddings/1") {
            throw DataError(dir.string() + ": not an embedding set");
        }
        if (io::hex64(io::file_digest(dir / "embeddings.bin")) != j.at("files").at("embeddings.bin").get<std::string>()) {
            throw DataError(dir.string() + "/embeddings.bin: digest mismatch");
        }
        EmbeddingSet e;
        e.vectors = io::read_matrix(dir / "embeddings.bin", j.at("n").get<std::size_t>(), j.at("k").get<std::size_t>());
        e.anchor_count = j.at("anchor_count").get<std::size_t>();
        e.normalization = j.at("normalization").get<std::string>();
        e.factor_fingerprint = io::parse_hex64(j.at("fingerprint").get<std::string>());
        return e;
    } catch (const json::exception& ex) {
        throw DataError(dir.string() + "/manifest.json: " + ex.what());
    }
}

}  // namespace nfk::embedding
