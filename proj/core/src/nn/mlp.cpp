#include "nfk/nn/mlp.hpp"

#include <string>

#include "nfk/errors.hpp"

namespace nfk::nn {

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;
using ConstRowMap = Eigen::Map<const Eigen::RowVectorXd>;
using MutRowMap = Eigen::Map<Eigen::RowVectorXd>;

struct Offsets {
    std::size_t weight;
    std::size_t bias;
};

std::vector<Offsets> offsets_of(std::span<const LayerSpec> layers) {
    std::vector<Offsets> out;
    std::size_t off = 0;
    for (const auto& l : layers) {
        out.push_back({off, off + l.fan_in * l.fan_out});
        off += l.fan_in * l.fan_out + l.fan_out;
    }
    return out;
}

Matrix activate(const Matrix& z, Activation act) {
    switch (act) {
        case Activation::relu: return z.cwiseMax(0.0);
        case Activation::tanh: return z.array().tanh().matrix();
        case Activation::identity: return z;
    }
    return z;
}

// Elementwise derivative of the activation at pre-activation z.
Matrix activation_slope(const Matrix& z, Activation act) {
    switch (act) {
        case Activation::relu: return (z.array() > 0.0).cast<double>().matrix();
        case Activation::tanh: return (1.0 - z.array().tanh().square()).matrix();
        case Activation::identity: return Matrix::Ones(z.rows(), z.cols());
    }
    return Matrix::Ones(z.rows(), z.cols());
}

// Multiplies each B-row block of `stacked` by `slope` (B x cols).
void scale_blocks(Matrix& stacked, const Matrix& slope) {
    const Eigen::Index b = slope.rows();
    if (b == 0) {
        return;
    }
    const Eigen::Index blocks = stacked.rows() / b;
    for (Eigen::Index j = 0; j < blocks; ++j) {
        stacked.middleRows(j * b, b).array() *= slope.array();
    }
}

}  // namespace

std::size_t MlpView::param_count() const { return layers_param_count(layers); }

Matrix mlp_forward(const MlpView& net, const Matrix& x, Tape* tape) {
    if (net.params.size() != net.param_count()) {
        throw ShapeError("mlp_forward: parameter span has " + std::to_string(net.params.size()) + " values, expected " +
                         std::to_string(net.param_count()));
    }
    if (static_cast<std::size_t>(x.cols()) != net.layers.front().fan_in) {
        throw ShapeError("mlp_forward: input width " + std::to_string(x.cols()) + " does not match fan_in " +
                         std::to_string(net.layers.front().fan_in));
    }
    const auto offs = offsets_of(net.layers);
    if (tape != nullptr) {
        tape->inputs.clear();
        tape->pre.clear();
    }
    Matrix a = x;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        const auto fo = static_cast<Eigen::Index>(layer.fan_out);
        const auto fi = static_cast<Eigen::Index>(layer.fan_in);
        ConstMap w(net.params.data() + offs[l].weight, fo, fi);
        ConstRowMap b(net.params.data() + offs[l].bias, fo);
        Matrix z(a.rows(), fo);
        z.noalias() = a * w.transpose();
        z.rowwise() += b;
        Matrix next = activate(z, layer.activation);
        if (tape != nullptr) {
            tape->inputs.push_back(std::move(a));
            tape->pre.push_back(std::move(z));
        }
        a = std::move(next);
    }
    return a;
}

Matrix mlp_jvp(const MlpView& net, const Tape& tape, const ConstRowsRef& dirs, const Matrix* input_tangent) {
    if (static_cast<std::size_t>(dirs.cols()) != net.param_count()) {
        throw ShapeError("mlp_jvp: direction width does not match parameter count");
    }
    const auto offs = offsets_of(net.layers);
    const Eigen::Index u = dirs.rows();
    const Eigen::Index b = tape.inputs.front().rows();
    if (input_tangent != nullptr && input_tangent->rows() != u * b) {
        throw ShapeError("mlp_jvp: input tangent rows must equal directions x batch");
    }

    Matrix t;
    bool have_tangent = input_tangent != nullptr;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const auto& layer = net.layers[l];
        const auto fo = static_cast<Eigen::Index>(layer.fan_out);
        const auto fi = static_cast<Eigen::Index>(layer.fan_in);
        ConstMap w(net.params.data() + offs[l].weight, fo, fi);
        const Matrix& a = tape.inputs[l];

        Matrix dz(u * b, fo);
        if (have_tangent) {
            const Matrix& src = (l == 0) ? *input_tangent : t;
            dz.noalias() = src * w.transpose();
        } else {
            dz.setZero();
        }
        for (Eigen::Index j = 0; j < u; ++j) {
            const double* row = dirs.row(j).data();
            ConstMap dw(row + offs[l].weight, fo, fi);
            ConstRowMap db(row + offs[l].bias, fo);
            auto block = dz.middleRows(j * b, b);
            block.noalias() += a * dw.transpose();
            block.rowwise() += db;
        }
        if (layer.activation != Activation::identity) {
            scale_blocks(dz, activation_slope(tape.pre[l], layer.activation));
        }
        t = std::move(dz);
        have_tangent = true;
    }
    return t;
}

void mlp_vjp(const MlpView& net, const Tape& tape, const Matrix& out_cot, RowsRef param_cot, Matrix* input_cot,
             std::span<const Matrix> inject) {
    if (static_cast<std::size_t>(param_cot.cols()) != net.param_count()) {
        throw ShapeError("mlp_vjp: cotangent width does not match parameter count");
    }
    const auto offs = offsets_of(net.layers);
    const Eigen::Index u = param_cot.rows();
    const Eigen::Index b = tape.inputs.front().rows();
    if (out_cot.rows() != u * b || static_cast<std::size_t>(out_cot.cols()) != net.layers.back().fan_out) {
        throw ShapeError("mlp_vjp: output cotangent shape mismatch");
    }

    Matrix d = out_cot;
    for (std::size_t l = net.layers.size(); l-- > 0;) {
        const auto& layer = net.layers[l];
        const auto fo = static_cast<Eigen::Index>(layer.fan_out);
        const auto fi = static_cast<Eigen::Index>(layer.fan_in);
        if (layer.activation != Activation::identity) {
            scale_blocks(d, activation_slope(tape.pre[l], layer.activation));
        }
        const Matrix& a = tape.inputs[l];
        for (Eigen::Index j = 0; j < u; ++j) {
            double* row = param_cot.row(j).data();
            MutMap dw(row + offs[l].weight, fo, fi);
            MutRowMap db(row + offs[l].bias, fo);
            const auto block = d.middleRows(j * b, b);
            dw.noalias() += block.transpose() * a;
            db += block.colwise().sum();
        }
        if (l > 0 || input_cot != nullptr) {
            ConstMap w(net.params.data() + offs[l].weight, fo, fi);
            Matrix d_in(d.rows(), fi);
            d_in.noalias() = d * w;
            if (l < inject.size() && inject[l].size() > 0) {
                d_in += inject[l];
            }
            d = std::move(d_in);
        }
    }
    if (input_cot != nullptr) {
        *input_cot = std::move(d);
    }
}

void mlp_per_example_grad(const MlpView& net, const Tape& tape, const Matrix& out_cot, std::size_t group,
                          RowsRef grads, Matrix* input_cot) {
    const auto offs = offsets_of(net.layers);
    const Eigen::Index rows = tape.inputs.front().rows();
    const auto g = static_cast<Eigen::Index>(group);
    if (group == 0 || rows % g != 0 || grads.rows() != rows / g ||
        static_cast<std::size_t>(grads.cols()) != net.param_count() || out_cot.rows() != rows) {
        throw ShapeError("mlp_per_example_grad: shape mismatch");
    }

    Matrix d = out_cot;
    for (std::size_t l = net.layers.size(); l-- > 0;) {
        const auto& layer = net.layers[l];
        const auto fo = static_cast<Eigen::Index>(layer.fan_out);
        const auto fi = static_cast<Eigen::Index>(layer.fan_in);
        if (layer.activation != Activation::identity) {
            d.array() *= activation_slope(tape.pre[l], layer.activation).array();
        }
        const Matrix& a = tape.inputs[l];
        for (Eigen::Index r = 0; r < rows; ++r) {
            double* row = grads.row(r / g).data();
            MutMap dw(row + offs[l].weight, fo, fi);
            MutRowMap db(row + offs[l].bias, fo);
            dw.noalias() += d.row(r).transpose() * a.row(r);
            db += d.row(r);
        }
        if (l > 0 || input_cot != nullptr) {
            ConstMap w(net.params.data() + offs[l].weight, fo, fi);
            Matrix d_in(rows, fi);
            d_in.noalias() = d * w;
            d = std::move(d_in);
        }
    }
    if (input_cot != nullptr) {
        *input_cot = std::move(d);
    }
}

}  // namespace nfk::nn
