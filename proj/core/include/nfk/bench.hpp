#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nfk/fisher.hpp"
#include "nfk/lowrank.hpp"

namespace nfk::bench {

struct ScalingRow {
    std::size_t n = 0;
    double seconds = 0.0;
    double ratio = 0.0;  // seconds / previous row's seconds; 0 for the first row
    Vector sigma;        // numerical output, for determinism checks
};

/// Times truncated_svd on the first n anchors for each n in `sizes` (ascending,
/// each <= data size), with the Fisher context `ctx` held fixed.
std::vector<ScalingRow> bench_scaling(const fisher::ContextPtr& ctx, const nn::Batch& data,
                                      const std::vector<std::size_t>& sizes, const lowrank::SvdOptions& opts);

/// "n,seconds,ratio,sigma_1" rows with a header.
std::string scaling_csv(const std::vector<ScalingRow>& rows);

}  // namespace nfk::bench
