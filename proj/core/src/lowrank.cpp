#include "nfk/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk::lowrank {

using nlohmann::json;

namespace {

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(double)) == 0;
}

void fill_meta(SvdMeta& meta, const LinearOperator& op) {
    meta.kernel_kind = op.kernel_kind();
    meta.n = op.rows();
    meta.p = op.cols();
    meta.context_fingerprint = op.fingerprint();
    meta.data_digest = op.data_digest();
}

}  // namespace

std::uint64_t SvdFactors::fingerprint() const {
    std::uint64_t h = io::fnv1a64(meta.method + "/" + meta.kernel_kind + "/" + std::to_string(meta.n) + "/" +
                                  std::to_string(meta.p) + "/" + std::to_string(meta.k) + "/" +
                                  io::hex64(meta.context_fingerprint) + "/" + io::hex64(meta.data_digest));
    h = io::fnv1a64(std::span<const double>(sigma.data(), static_cast<std::size_t>(sigma.size())), h);
    h = io::fnv1a64(std::span<const double>(phi.data(), static_cast<std::size_t>(phi.size())), h);
    h = io::fnv1a64(std::span<const double>(pmat.data(), static_cast<std::size_t>(pmat.size())), h);
    return h;
}

void canonicalize_signs(SvdFactors& f) {
    for (Eigen::Index j = 0; j < f.phi.cols(); ++j) {
        Eigen::Index arg = 0;
        f.phi.col(j).cwiseAbs().maxCoeff(&arg);
        if (f.phi(arg, j) < 0.0) {
            f.phi.col(j) *= -1.0;
            f.pmat.col(j) *= -1.0;
        }
    }
}

SvdFactors truncated_svd(const LinearOperator& op, const SvdOptions& opts) {
    const std::size_t n = op.rows();
    const std::size_t p = op.cols();
    if (opts.k == 0) {
        throw ConfigError("truncated_svd: k must be at least 1");
    }
    const std::size_t u = opts.k + opts.oversample;
    if (u > std::min(n, p)) {
        throw ConfigError("truncated_svd: k + oversample = " + std::to_string(u) + " exceeds min(N, P) = " +
                          std::to_string(std::min(n, p)));
    }

    RngStream rng = RngStream(opts.seed).derive(stream_tag("sketch"));
    const Matrix omega = seeded_gaussian(n, u, rng);
    Matrix q = qr_thin(op.apply_adjoint(omega)).q;  // P x u

    // The factorization is only meaningful if the operator is a fixed map.
    const Matrix probe = q.leftCols(1);
    if (!bitwise_equal(op.apply(probe), op.apply(probe))) {
        throw NumericalError("truncated_svd: operator is not deterministic (repeated products differ)");
    }

    SvdFactors f;
    for (std::size_t it = 0; it < opts.iters; ++it) {
        const QrResult z = qr_thin(op.apply(q));  // N x u
        const Matrix y = op.apply_adjoint(z.q);   // P x u, = V^T V q R_z^{-1}
        // V^T V q = y R_z; its component outside span(q) measures how far span(q)
        // is from an invariant subspace.
        const Matrix w = y * z.r.triangularView<Eigen::Upper>();
        const Matrix outside = w - q * (q.transpose() * w);
        const double scale = w.norm();
        f.residuals.push_back(scale > 0.0 ? outside.norm() / scale : 0.0);
        q = qr_thin(y).q;
    }

    const Matrix b = op.apply(q);  // N x u
    const SvdSmallResult s = svd_small(b.transpose());
    const auto k = static_cast<Eigen::Index>(opts.k);
    f.phi = s.qt.topRows(k).transpose();
    f.sigma = s.sigma.head(k);
    f.pmat = q * s.pu.leftCols(k);
    canonicalize_signs(f);

    f.meta.method = "randomized";
    fill_meta(f.meta, op);
    f.meta.k = opts.k;
    f.meta.oversample = opts.oversample;
    f.meta.iters = opts.iters;
    f.meta.seed = opts.seed;
    return f;
}

SvdFactors gram_eigh_baseline(const LinearOperator& op, std::size_t k) {
    const std::size_t n = op.rows();
    const std::size_t p = op.cols();
    if (n > 4096) {
        throw ConfigError("gram_eigh_baseline: N = " + std::to_string(n) + " exceeds the 4096 limit");
    }
    if (static_cast<double>(n) * static_cast<double>(p) > 1e8) {
        throw ConfigError("gram_eigh_baseline: N x P exceeds the 1e8-entry limit");
    }
    if (k == 0 || k > std::min(n, p)) {
        throw ConfigError("gram_eigh_baseline: k must be in [1, min(N, P)]");
    }
    const Matrix v = op.materialize();
    Eigen::MatrixXd gram(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    gram.setZero();
    gram.selfadjointView<Eigen::Lower>().rankUpdate(v);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram.selfadjointView<Eigen::Lower>());
    if (es.info() != Eigen::Success) {
        throw NumericalError("gram_eigh_baseline: eigensolver did not converge");
    }
    const auto ki = static_cast<Eigen::Index>(k);
    const auto ni = static_cast<Eigen::Index>(n);
    SvdFactors f;
    f.phi.resize(ni, ki);
    f.sigma.resize(ki);
    for (Eigen::Index j = 0; j < ki; ++j) {
        // Eigen sorts ascending.
        const Eigen::Index src = ni - 1 - j;
        f.phi.col(j) = es.eigenvectors().col(src);
        f.sigma(j) = std::sqrt(std::max(es.eigenvalues()(src), 0.0));
    }
    f.pmat = v.transpose() * f.phi;
    for (Eigen::Index j = 0; j < ki; ++j) {
        if (f.sigma(j) > 0.0) {
            f.pmat.col(j) /= f.sigma(j);
        } else {
            f.pmat.col(j).setZero();
        }
    }
    canonicalize_signs(f);
    f.meta.method = "gram-eigh";
    fill_meta(f.meta, op);
    f.meta.k = k;
    return f;
}

double explained_variance(const Vector& sigma, std::size_t k) {
    if (sigma.size() == 0) {
        throw ConfigError("explained_variance: empty spectrum");
    }
    const std::size_t len = static_cast<std::size_t>(sigma.size());
    const double total = sigma.squaredNorm();
    if (total == 0.0) {
        return k >= len ? 1.0 : 0.0;
    }
    const double head = sigma.head(static_cast<Eigen::Index>(std::min(k, len))).squaredNorm();
    return k >= len ? 1.0 : std::min(1.0, head / total);
}

double explained_variance(const Vector& sigma, std::size_t k, double total) {
    if (!(total > 0.0)) {
        throw ConfigError("explained_variance: total energy must be positive");
    }
    const auto len = std::min(static_cast<Eigen::Index>(k), sigma.size());
    return std::min(1.0, sigma.head(len).squaredNorm() / total);
}

void save_factors(const SvdFactors& f, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    io::write_matrix(dir / "phi.bin", f.phi);
    io::write_vector(dir / "sigma.bin", f.sigma);
    io::write_matrix(dir / "pmat.bin", f.pmat);
    json residuals = json::array();
    for (double r : f.residuals) {
        residuals.push_back(r);
    }
    json j;
    j["format"] = "nfk-factors/1";
    j["method"] = f.meta.method;
    j["kernel_kind"] = f.meta.kernel_kind;
    j["N"] = f.meta.n;
    j["P"] = f.meta.p;
    j["k"] = f.meta.k;
    j["oversample"] = f.meta.oversample;
    j["iters"] = f.meta.iters;
    j["seed"] = f.meta.seed;
    j["context_fingerprint"] = io::hex64(f.meta.context_fingerprint);
    j["data_digest"] = io::hex64(f.meta.data_digest);
    j["fingerprint"] = io::hex64(f.fingerprint());
    j["residuals"] = residuals;
    j["files"] = {{"phi.bin", io::hex64(io::file_digest(dir / "phi.bin"))},
                  {"sigma.bin", io::hex64(io::file_digest(dir / "sigma.bin"))},
                  {"pmat.bin", io::hex64(io::file_digest(dir / "pmat.bin"))}};
    io::write_text(dir / "manifest.json", j.dump(2) + "\n");
}

SvdFactors load_factors(const std::filesystem::path& dir) {
    try {
        const json j = json::parse(io::read_text(dir / "manifest.json"));
        if (j.value("format", std::string()) != "nfk-factors/1") {
            throw DataError(dir.string() + ": not a factor store");
        }
        for (const auto& [name, digest] : j.at("files").items()) {
            if (io::hex64(io::file_digest(dir / name)) != digest.get<std::string>()) {
                throw DataError((dir / name).string() + ": digest mismatch");
            }
        }
        SvdFactors f;
        f.meta.method = j.at("method").get<std::string>();
        f.meta.kernel_kind = j.at("kernel_kind").get<std::string>();
        f.meta.n = j.at("N").get<std::size_t>();
        f.meta.p = j.at("P").get<std::size_t>();
        f.meta.k = j.at("k").get<std::size_t>();
        f.meta.oversample = j.at("oversample").get<std::size_t>();
        f.meta.iters = j.at("iters").get<std::size_t>();
        f.meta.seed = j.at("seed").get<std::uint64_t>();
        f.meta.context_fingerprint = io::parse_hex64(j.at("context_fingerprint").get<std::string>());
        f.meta.data_digest = io::parse_hex64(j.at("data_digest").get<std::string>());
        f.residuals = j.at("residuals").get<std::vector<double>>();
        f.phi = io::read_matrix(dir / "phi.bin", f.meta.n, f.meta.k);
        f.sigma = io::read_vector(dir / "sigma.bin", f.meta.k);
        f.pmat = io::read_matrix(dir / "pmat.bin", f.meta.p, f.meta.k);
        if (io::hex64(f.fingerprint()) != j.at("fingerprint").get<std::string>()) {
            throw DataError(dir.string() + ": factor fingerprint mismatch");
        }
        return f;
    } catch (const json::exception& e) {
        throw DataError(dir.string() + "/manifest.json: " + e.what());
    }
}

}  // namespace nfk::lowrank
