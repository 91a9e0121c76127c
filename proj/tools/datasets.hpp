#pragma once

#include <json.hpp>
#include <string>

#include "nfk/data.hpp"

namespace nfk::cli {

/// Dataset descriptor: a source followed by ';'-separated steps applied in
/// order.
///
///   idx:IMAGES,LABELS       csv:PATH       synthetic:two_moons:n=1000,noise=0.1
///
///   seed=S          generator seed for synthetic sources (default 0)
///   binarize=T      labels < T become 0, others 1
///   train=F@S       keep the train part of split(test fraction F, seed S)
///   test=F@S        keep the test part
///   limit=N         first N rows
///   augment=N@S     grow square images to N rows with shifted copies
///
/// e.g. "idx:data/img.gz,data/lbl.gz;binarize=5;train=0.2@1;limit=2048".
struct LoadedDataset {
    data::Dataset data;
    nlohmann::json record;  // descriptor, source file digests, final shape and checksum
};

LoadedDataset load_dataset(const std::string& descriptor);

}  // namespace nfk::cli
