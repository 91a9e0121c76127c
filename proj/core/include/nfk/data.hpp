#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "nfk/linalg.hpp"
#include "nfk/nn/model.hpp"

namespace nfk::data {

struct DatasetInfo {
    std::string source;  // "idx", "csv" or "synthetic:<name>"
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t classes = 0;
    std::uint64_t checksum = 0;
};

struct Dataset {
    nn::Batch batch;
    DatasetInfo info;
};

/// Recomputes n, d, class count and checksum from the batch contents.
void refresh_info(Dataset& ds);

/// IDX image/label pair (0x00000803 / 0x00000801), optionally gzip-compressed.
/// Pixels are scaled to [0, 1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// CSV with a header row; the column named "label" holds integer labels, all
/// other columns are features.
Dataset load_csv(const std::filesystem::path& path);
void write_csv(const Dataset& ds, const std::filesystem::path& path);

/// Two interleaved half circles, n/2 points each (n even), Gaussian noise.
Dataset two_moons(std::size_t n, double noise, std::uint64_t seed);
/// Isotropic Gaussian blobs around the rows of `means`, assigned round-robin.
Dataset gaussians(std::size_t n, const Matrix& means, double stddev, std::uint64_t seed);
/// Noisy corners (+-1, +-1) labelled by the sign of x*y, n/4 per corner.
Dataset xor_data(std::size_t n, double noise, std::uint64_t seed);

/// Parses "two_moons:n=1000,noise=0.1", "gaussians:n=..,k=..,dim=..,sep=..,std=..",
/// "xor:n=..,noise=.." with the seed supplied separately.
Dataset synthetic(const std::string& spec, std::uint64_t seed);

/// Keeps the first n rows.
Dataset head(const Dataset& ds, std::size_t n);
/// Rows at `indices`, in order.
Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);
/// Labels < threshold become 0, others 1.
Dataset binarize(const Dataset& ds, int threshold);
/// Seeded shuffle, then the first (1 - test_fraction) share is train.
std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed);
/// Grows a square-image dataset to n rows with copies shifted by up to
/// `max_shift` pixels (zero fill); originals come first.
Dataset augment_shifts(const Dataset& ds, std::size_t n, int max_shift, std::uint64_t seed);

}  // namespace nfk::data
