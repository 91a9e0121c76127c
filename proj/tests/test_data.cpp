#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>

#include "nfk/data.hpp"
#include "nfk/errors.hpp"

using namespace nfk;
using namespace nfk::data;

namespace {

void put_be32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_SUITE("data") {

TEST_CASE("IDX images and labels") {
    {
        std::ofstream f(tmp("nfk_t_img.idx"), std::ios::binary);
        put_be32(f, 0x803);
        put_be32(f, 2);
        put_be32(f, 2);
        put_be32(f, 2);
        const unsigned char px[8] = {0, 255, 51, 102, 255, 0, 0, 0};
        f.write(reinterpret_cast<const char*>(px), 8);
        std::ofstream l(tmp("nfk_t_lbl.idx"), std::ios::binary);
        put_be32(l, 0x801);
        put_be32(l, 2);
        const unsigned char lab[2] = {7, 3};
        l.write(reinterpret_cast<const char*>(lab), 2);
    }
    const Dataset ds = load_idx(tmp("nfk_t_img.idx"), tmp("nfk_t_lbl.idx"));
    CHECK(ds.info.n == 2);
    CHECK(ds.info.d == 4);
    CHECK(ds.batch.inputs(0, 1) == 1.0);
    CHECK(ds.batch.inputs(0, 2) == doctest::Approx(0.2));
    CHECK(ds.batch.labels == std::vector<int>{7, 3});
    CHECK(ds.info.classes == 8);

    {
        std::ofstream l(tmp("nfk_t_bad.idx"), std::ios::binary);
        put_be32(l, 0x801);
        put_be32(l, 3);
    }
    CHECK_THROWS_AS(load_idx(tmp("nfk_t_img.idx"), tmp("nfk_t_bad.idx")), DataError);
    CHECK_THROWS_AS(load_idx(tmp("nfk_t_lbl.idx"), tmp("nfk_t_lbl.idx")), DataError);
    for (auto n : {"nfk_t_img.idx", "nfk_t_lbl.idx", "nfk_t_bad.idx"}) std::filesystem::remove(tmp(n));
}

TEST_CASE("CSV round trip is exact") {
    const Dataset a = two_moons(20, 0.2, 1);
    write_csv(a, tmp("nfk_t.csv"));
    const Dataset b = load_csv(tmp("nfk_t.csv"));
    CHECK((a.batch.inputs.array() == b.batch.inputs.array()).all());
    CHECK(a.batch.labels == b.batch.labels);
    CHECK(a.info.checksum == b.info.checksum);
    {
        std::ofstream f(tmp("nfk_t.csv"));
        f << "x0,label\n1.5,0\nabc,1\n";
    }
    CHECK_THROWS_AS(load_csv(tmp("nfk_t.csv")), DataError);
    {
        std::ofstream f(tmp("nfk_t.csv"));
        f << "x0,x1\n1,2\n";
    }
    CHECK_THROWS_AS(load_csv(tmp("nfk_t.csv")), DataError);
    std::filesystem::remove(tmp("nfk_t.csv"));
}

TEST_CASE("synthetic generators") {
    const Dataset m = two_moons(101, 0.0, 2);
    CHECK(std::count(m.batch.labels.begin(), m.batch.labels.end(), 0) == 51);
    // Noise-free outer moon lies on the unit circle.
    for (Eigen::Index i = 0; i < 101; ++i)
        if (m.batch.labels[static_cast<std::size_t>(i)] == 0) CHECK(m.batch.inputs.row(i).norm() == doctest::Approx(1.0));

    const Dataset x = xor_data(40, 0.0, 3);
    for (Eigen::Index i = 0; i < 40; ++i)
        CHECK((x.batch.inputs(i, 0) * x.batch.inputs(i, 1) > 0) == (x.batch.labels[static_cast<std::size_t>(i)] == 0));

    const Dataset g = synthetic("gaussians:n=30,k=3,dim=4,sep=5,std=0.1", 4);
    CHECK(g.info.n == 30);
    CHECK(g.info.d == 4);
    CHECK(g.info.classes == 3);
    CHECK(g.info.source == "synthetic:gaussians");
    CHECK(synthetic("two_moons:n=64,noise=0.1", 5).info.checksum == two_moons(64, 0.1, 5).info.checksum);
    CHECK(synthetic("two_moons:n=64,noise=0.1", 5).info.checksum != two_moons(64, 0.1, 6).info.checksum);
    CHECK_THROWS_AS(synthetic("spirals:n=10", 1), ConfigError);
    CHECK_THROWS_AS(synthetic("two_moons:n=ten", 1), ConfigError);
}

TEST_CASE("split, subset, binarize") {
    const Dataset g = synthetic("gaussians:n=50,k=5,dim=2,sep=3,std=0.5", 6);
    const auto [train, test] = split(g, 0.2, 7);
    CHECK(train.info.n == 40);
    CHECK(test.info.n == 10);
    const auto [train2, test2] = split(g, 0.2, 7);
    CHECK(train2.info.checksum == train.info.checksum);
    const Dataset b = binarize(g, 2);
    for (std::size_t i = 0; i < 50; ++i) CHECK(b.batch.labels[i] == (g.batch.labels[i] < 2 ? 0 : 1));
    const std::vector<std::size_t> idx{4, 1};
    const Dataset s = subset(g, idx);
    CHECK((s.batch.inputs.row(0).array() == g.batch.inputs.row(4).array()).all());
    CHECK(head(g, 7).info.n == 7);
}

TEST_CASE("shift augmentation") {
    Dataset img;
    img.batch.inputs = Matrix::Zero(2, 16);
    img.batch.inputs(0, 5) = 1.0;
    img.batch.inputs(1, 10) = 0.5;
    img.batch.labels = {0, 1};
    refresh_info(img);
    const Dataset a = augment_shifts(img, 9, 1, 3);
    CHECK(a.info.n == 9);
    CHECK((a.batch.inputs.topRows(2).array() == img.batch.inputs.array()).all());
    for (Eigen::Index i = 2; i < 9; ++i) {
        const int src = a.batch.labels[static_cast<std::size_t>(i)];
        // A one-pixel shift of an interior pixel keeps its mass.
        CHECK(a.batch.inputs.row(i).sum() == img.batch.inputs.row(src).sum());
    }
    Dataset flat = img;
    flat.batch.inputs = Matrix::Zero(2, 15);
    refresh_info(flat);
    CHECK_THROWS_AS(augment_shifts(flat, 4, 1, 1), DataError);
}

}
