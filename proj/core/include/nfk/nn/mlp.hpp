#pragma once

#include <span>
#include <vector>

#include "nfk/linalg.hpp"
#include "nfk/nn/model.hpp"

namespace nfk::nn {

/// Row-major matrix view with an arbitrary row stride, used for parameter
/// direction / cotangent blocks that are column slices of a wider matrix.
using ConstRowsRef = Eigen::Ref<const Matrix, 0, Eigen::OuterStride<>>;
using RowsRef = Eigen::Ref<Matrix, 0, Eigen::OuterStride<>>;

/// One fully connected stack and the slice of parameters it owns.
struct MlpView {
    std::span<const LayerSpec> layers;
    std::span<const double> params;

    std::size_t param_count() const;
};

/// Forward activations kept for differentiation.
struct Tape {
    std::vector<Matrix> inputs;  // input to layer l, B x fan_in
    std::vector<Matrix> pre;     // pre-activation of layer l, B x fan_out
};

Matrix mlp_forward(const MlpView& net, const Matrix& x, Tape* tape = nullptr);

/// Forward-mode product for u parameter directions at once.
///
/// `dirs` is u x P_net (row j = direction j). `input_tangent`, when given, is
/// (u*B) x fan_in with rows stacked direction-major (row j*B + i). Returns the
/// output tangents in the same stacking, (u*B) x fan_out.
Matrix mlp_jvp(const MlpView& net, const Tape& tape, const ConstRowsRef& dirs, const Matrix* input_tangent = nullptr);

/// Reverse-mode product for u output cotangents at once.
///
/// `out_cot` is (u*B) x fan_out, stacked direction-major. Accumulates into
/// `param_cot` (u x P_net). If `input_cot` is non-null it receives the
/// (u*B) x fan_in input cotangent. `inject`, when non-empty, holds extra
/// cotangents added to the input of layer l (one entry per layer, may be
/// empty matrices).
void mlp_vjp(const MlpView& net, const Tape& tape, const Matrix& out_cot, RowsRef param_cot,
             Matrix* input_cot = nullptr, std::span<const Matrix> inject = {});

/// Per-example parameter gradients.
///
/// `out_cot` is R x fan_out for the R rows on the tape; rows
/// [e*group, (e+1)*group) belong to example e. Accumulates into `grads`
/// (R/group x P_net).
void mlp_per_example_grad(const MlpView& net, const Tape& tape, const Matrix& out_cot, std::size_t group,
                          RowsRef grads, Matrix* input_cot = nullptr);

}  // namespace nfk::nn
