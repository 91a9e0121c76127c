#include "nfk/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

#include "nfk/errors.hpp"

namespace nfk {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix64(std::uint64_t z) {
    z += kGolden;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

}  // namespace

void require_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) {
        throw NumericalError(std::string(what) + ": non-finite entry");
    }
}

void require_finite(const Vector& v, const char* what) {
    if (!v.allFinite()) {
        throw NumericalError(std::string(what) + ": non-finite entry");
    }
}

Matrix matrix_from_rows(std::size_t rows, std::size_t cols, std::span<const double> data) {
    if (data.size() != rows * cols) {
        throw ShapeError("matrix_from_rows: expected " + std::to_string(rows * cols) + " values, got " +
                         std::to_string(data.size()));
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    std::copy(data.begin(), data.end(), m.data());
    require_finite(m, "matrix_from_rows");
    return m;
}

std::uint64_t RngStream::next_u64() {
    const std::uint64_t out = splitmix64(splitmix64(seed_) ^ (counter_ * kGolden));
    ++counter_;
    return out;
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t bound) {
    if (bound == 0) {
        throw std::invalid_argument("RngStream::below: bound must be positive");
    }
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    for (;;) {
        const std::uint64_t x = next_u64();
        if (x < limit) {
            return x % bound;
        }
    }
}

RngStream RngStream::derive(std::uint64_t tag) const {
    return RngStream(splitmix64(splitmix64(seed_) ^ splitmix64(tag ^ 0xD1B54A32D192ED03ULL)), 0);
}

std::uint64_t stream_tag(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

Matrix seeded_gaussian(std::size_t rows, std::size_t cols, RngStream& rng) {
    if (rows == 0 || cols == 0) {
        throw ShapeError("seeded_gaussian: rows and cols must be >= 1");
    }
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.normal();
    }
    return m;
}

QrResult qr_thin(const Matrix& a) {
    const Eigen::Index m = a.rows();
    const Eigen::Index u = a.cols();
    if (m < u || u == 0) {
        throw ShapeError("qr_thin: need rows >= cols >= 1, got " + std::to_string(m) + "x" + std::to_string(u));
    }
    require_finite(a, "qr_thin");

    // Column-major work copy: reflections walk down columns.
    Eigen::MatrixXd w = a;
    std::vector<Eigen::VectorXd> reflectors(static_cast<std::size_t>(u));
    for (Eigen::Index j = 0; j < u; ++j) {
        const Eigen::Index len = m - j;
        Eigen::VectorXd v = w.col(j).tail(len);
        const double norm_x = v.norm();
        if (norm_x == 0.0) {
            reflectors[static_cast<std::size_t>(j)] = Eigen::VectorXd();
            continue;
        }
        const double alpha = v(0) > 0.0 ? -norm_x : norm_x;
        v(0) -= alpha;
        const double norm_v = v.norm();
        if (norm_v == 0.0) {
            reflectors[static_cast<std::size_t>(j)] = Eigen::VectorXd();
            continue;
        }
        v /= norm_v;
        auto block = w.bottomRightCorner(len, u - j);
        const Eigen::RowVectorXd proj = v.transpose() * block;
        block.noalias() -= 2.0 * v * proj;
        w.col(j).tail(len - 1).setZero();
        w(j, j) = alpha;
        reflectors[static_cast<std::size_t>(j)] = std::move(v);
    }

    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(m, u);
    q.topRows(u).setIdentity();
    for (Eigen::Index j = u - 1; j >= 0; --j) {
        const auto& v = reflectors[static_cast<std::size_t>(j)];
        if (v.size() == 0) {
            continue;
        }
        auto block = q.bottomRows(m - j);
        const Eigen::RowVectorXd proj = v.transpose() * block;
        block.noalias() -= 2.0 * v * proj;
    }

    QrResult out;
    out.r = w.topRows(u).triangularView<Eigen::Upper>();
    out.q = q;
    for (Eigen::Index i = 0; i < u; ++i) {
        if (out.r(i, i) < 0.0) {
            out.r.row(i) *= -1.0;
            out.q.col(i) *= -1.0;
        }
        if (std::abs(out.r(i, i)) < 1e-300) {
            out.deficient_columns.push_back(static_cast<std::size_t>(i));
        }
    }
    return out;
}

namespace {

// Householder reduction of a symmetric matrix to tridiagonal form, accumulating
// the orthogonal transform in `v` (n x n, row-major in a flat buffer).
void tridiagonalize(std::size_t n, std::vector<double>& v, std::vector<double>& d, std::vector<double>& e) {
    auto V = [&](std::size_t r, std::size_t c) -> double& { return v[r * n + c]; };
    for (std::size_t j = 0; j < n; ++j) {
        d[j] = V(n - 1, j);
    }
    for (std::size_t i = n - 1; i > 0; --i) {
        double scale = 0.0;
        double h = 0.0;
        for (std::size_t k = 0; k < i; ++k) {
            scale += std::abs(d[k]);
        }
        if (scale == 0.0) {
            e[i] = d[i - 1];
            for (std::size_t j = 0; j < i; ++j) {
                d[j] = V(i - 1, j);
                V(i, j) = 0.0;
                V(j, i) = 0.0;
            }
        } else {
            for (std::size_t k = 0; k < i; ++k) {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            double f = d[i - 1];
            double g = std::sqrt(h);
            if (f > 0.0) {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for (std::size_t j = 0; j < i; ++j) {
                e[j] = 0.0;
            }
            for (std::size_t j = 0; j < i; ++j) {
                f = d[j];
                V(j, i) = f;
                g = e[j] + V(j, j) * f;
                for (std::size_t k = j + 1; k < i; ++k) {
                    g += V(k, j) * d[k];
                    e[k] += V(k, j) * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for (std::size_t j = 0; j < i; ++j) {
                e[j] /= h;
                f += e[j] * d[j];
            }
            const double hh = f / (h + h);
            for (std::size_t j = 0; j < i; ++j) {
                e[j] -= hh * d[j];
            }
            for (std::size_t j = 0; j < i; ++j) {
                f = d[j];
                g = e[j];
                for (std::size_t k = j; k < i; ++k) {
                    V(k, j) -= (f * e[k] + g * d[k]);
                }
                d[j] = V(i - 1, j);
                V(i, j) = 0.0;
            }
        }
        d[i] = h;
    }
    for (std::size_t i = 0; i + 1 < n; ++i) {
        V(n - 1, i) = V(i, i);
        V(i, i) = 1.0;
        const double h = d[i + 1];
        if (h != 0.0) {
            for (std::size_t k = 0; k <= i; ++k) {
                d[k] = V(k, i + 1) / h;
            }
            for (std::size_t j = 0; j <= i; ++j) {
                double g = 0.0;
                for (std::size_t k = 0; k <= i; ++k) {
                    g += V(k, i + 1) * V(k, j);
                }
                for (std::size_t k = 0; k <= i; ++k) {
                    V(k, j) -= g * d[k];
                }
            }
        }
        for (std::size_t k = 0; k <= i; ++k) {
            V(k, i + 1) = 0.0;
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        d[j] = V(n - 1, j);
        V(n - 1, j) = 0.0;
    }
    V(n - 1, n - 1) = 1.0;
    e[0] = 0.0;
}

// Implicit QL iteration on the tridiagonal (d, e), rotating the columns of `v`.
void tridiagonal_ql(std::size_t n, std::vector<double>& v, std::vector<double>& d, std::vector<double>& e) {
    auto V = [&](std::size_t r, std::size_t c) -> double& { return v[r * n + c]; };
    for (std::size_t i = 1; i < n; ++i) {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    double f = 0.0;
    double tst1 = 0.0;
    const double eps = std::numeric_limits<double>::epsilon();
    for (std::size_t l = 0; l < n; ++l) {
        tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
        std::size_t m = l;
        while (m < n) {
            if (std::abs(e[m]) <= eps * tst1) {
                break;
            }
            ++m;
        }
        if (m > l) {
            int iter = 0;
            do {
                if (++iter > 100) {
                    throw NumericalError("sym_eigh_small: QL iteration did not converge");
                }
                double g = d[l];
                double p = (d[l + 1] - g) / (2.0 * e[l]);
                double r = std::hypot(p, 1.0);
                if (p < 0.0) {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                const double dl1 = d[l + 1];
                double h = g - d[l];
                for (std::size_t i = l + 2; i < n; ++i) {
                    d[i] -= h;
                }
                f += h;

                p = d[m];
                double c = 1.0;
                double c2 = c;
                double c3 = c;
                const double el1 = e[l + 1];
                double s = 0.0;
                double s2 = 0.0;
                for (std::size_t ii = m; ii-- > l;) {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[ii];
                    h = c * p;
                    r = std::hypot(p, e[ii]);
                    e[ii + 1] = s * r;
                    s = e[ii] / r;
                    c = p / r;
                    p = c * d[ii] - s * g;
                    d[ii + 1] = h + s * (c * g + s * d[ii]);
                    for (std::size_t k = 0; k < n; ++k) {
                        h = V(k, ii + 1);
                        V(k, ii + 1) = s * V(k, ii) + c * h;
                        V(k, ii) = c * V(k, ii) - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
            } while (std::abs(e[l]) > eps * tst1);
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

}  // namespace

EighResult sym_eigh_small(const Matrix& s) {
    const Eigen::Index n = s.rows();
    if (n != s.cols() || n == 0) {
        throw ShapeError("sym_eigh_small: matrix must be square and nonempty");
    }
    require_finite(s, "sym_eigh_small");
    const double scale = s.cwiseAbs().maxCoeff();
    const double asym = (s - s.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * scale) {
        throw std::invalid_argument("sym_eigh_small: input is not symmetric (max |S - S^T| = " +
                                    std::to_string(asym) + ")");
    }

    const auto un = static_cast<std::size_t>(n);
    std::vector<double> v(un * un);
    for (std::size_t r = 0; r < un; ++r) {
        for (std::size_t c = 0; c < un; ++c) {
            // Average the two triangles so the reduction sees an exactly symmetric matrix.
            v[r * un + c] = 0.5 * (s(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) +
                                   s(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(r)));
        }
    }
    std::vector<double> d(un);
    std::vector<double> e(un);
    if (un == 1) {
        d[0] = v[0];
        v[0] = 1.0;
    } else {
        tridiagonalize(un, v, d, e);
        tridiagonal_ql(un, v, d, e);
    }

    std::vector<std::size_t> order(un);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return d[a] > d[b]; });

    EighResult out;
    out.values.resize(n);
    out.vectors.resize(n, n);
    for (std::size_t j = 0; j < un; ++j) {
        const std::size_t src = order[j];
        out.values(static_cast<Eigen::Index>(j)) = d[src];
        for (std::size_t r = 0; r < un; ++r) {
            out.vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = v[r * un + src];
        }
    }
    return out;
}

SvdSmallResult svd_small(const Matrix& b) {
    const Eigen::Index u = b.rows();
    const Eigen::Index n = b.cols();
    if (u == 0 || u > n) {
        throw ShapeError("svd_small: need 1 <= rows <= cols, got " + std::to_string(u) + "x" + std::to_string(n));
    }
    require_finite(b, "svd_small");

    Matrix gram = b * b.transpose();
    gram = (0.5 * (gram + gram.transpose())).eval();
    EighResult eig = sym_eigh_small(gram);

    // Singular values are taken as row norms of Pu^T B rather than square roots
    // of the Gram eigenvalues: the latter lose everything below sqrt(eps) * sigma_0.
    Matrix c = eig.vectors.transpose() * b;
    Vector norms = c.rowwise().norm();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(u));
    for (Eigen::Index i = 0; i < u; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index z) { return norms(a) > norms(z); });

    SvdSmallResult out;
    out.pu.resize(u, u);
    out.sigma.resize(u);
    out.qt.resize(u, n);
    for (Eigen::Index i = 0; i < u; ++i) {
        const Eigen::Index src = order[static_cast<std::size_t>(i)];
        out.pu.col(i) = eig.vectors.col(src);
        out.sigma(i) = norms(src);
        out.qt.row(i) = c.row(src);
    }

    const double top = out.sigma(0);
    for (Eigen::Index i = 0; i < u; ++i) {
        const double s = out.sigma(i);
        if (s > 1e-13 * top && s > 0.0) {
            Eigen::RowVectorXd row = out.qt.row(i) / s;
            for (int pass = 0; pass < 2; ++pass) {
                for (Eigen::Index r = 0; r < i; ++r) {
                    row -= row.dot(out.qt.row(r)) * out.qt.row(r);
                }
            }
            const double norm = row.norm();
            if (norm > 0.5) {
                out.qt.row(i) = row / norm;
                continue;
            }
        }
        // Null direction: complete the row space with a unit vector orthogonal to
        // the rows already fixed.
        bool placed = false;
        for (Eigen::Index col = 0; col < n && !placed; ++col) {
            Eigen::RowVectorXd cand = Eigen::RowVectorXd::Zero(n);
            cand(col) = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (Eigen::Index r = 0; r < i; ++r) {
                    cand -= cand.dot(out.qt.row(r)) * out.qt.row(r);
                }
            }
            const double norm = cand.norm();
            if (norm > 0.5) {
                out.qt.row(i) = cand / norm;
                placed = true;
            }
        }
    }
    return out;
}

double frobenius_dot(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("frobenius_dot: shape mismatch");
    }
    return (a.array() * b.array()).sum();
}

}  // namespace nfk
