#include "nfk/bench.hpp"

#include <chrono>
#include <sstream>

#include "nfk/errors.hpp"
#include "nfk/io.hpp"

namespace nfk::bench {

std::vector<ScalingRow> bench_scaling(const fisher::ContextPtr& ctx, const nn::Batch& data,
                                      const std::vector<std::size_t>& sizes, const lowrank::SvdOptions& opts) {
    if (sizes.empty()) {
        throw ConfigError("bench: no sizes given");
    }
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        if (sizes[i] == 0 || sizes[i] > data.size() || (i > 0 && sizes[i] <= sizes[i - 1])) {
            throw ConfigError("bench: sizes must be ascending and within the dataset size " +
                              std::to_string(data.size()));
        }
    }
    std::vector<ScalingRow> rows;
    for (std::size_t n : sizes) {
        const fisher::FisherOperator op(ctx, data.rows(0, n));
        const auto start = std::chrono::steady_clock::now();
        const lowrank::SvdFactors f = lowrank::truncated_svd(op, opts);
        const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
        ScalingRow row;
        row.n = n;
        row.seconds = elapsed.count();
        row.ratio = rows.empty() ? 0.0 : row.seconds / rows.back().seconds;
        row.sigma = f.sigma;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string scaling_csv(const std::vector<ScalingRow>& rows) {
    std::ostringstream out;
    out << "n,seconds,ratio,sigma_1\n";
    for (const auto& r : rows) {
        out << r.n << "," << io::format_double(r.seconds) << "," << io::format_double(r.ratio) << ","
            << io::format_double(r.sigma.size() > 0 ? r.sigma(0) : 0.0) << "\n";
    }
    return out.str();
}

}  // namespace nfk::bench
