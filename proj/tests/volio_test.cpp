#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "lungquant/core/errors.hpp"
#include "lungquant/volio.hpp"
#include "test_util.hpp"

using namespace lungquant;
namespace fs = std::filesystem;
using testutil::contains;
using testutil::fresh_dir;
using testutil::message_of;
using testutil::read_bytes;
using testutil::write_bytes;

namespace {

volio::CtVolume sample_volume() {
    volio::CtVolume v;
    v.voxels.resize({3, 4, 5});
    for (std::size_t i = 0; i < v.voxels.size(); ++i)
        v.voxels[i] = std::int16_t(-1000 + int(i) * 57);
    v.voxels[0] = volio::kHuMin;
    v.voxels[1] = volio::kHuMax;
    v.spacing = {1.25, 0.7, 0.7};
    v.patient_id = "p001";
    return v;
}

volio::LabelMask sample_mask(bool with_lung) {
    volio::LabelMask m;
    m.labels.resize({3, 4, 5});
    for (std::size_t i = 0; i < m.labels.size(); ++i)
        m.labels[i] = std::uint8_t(i % 3);
    if (with_lung) {
        Tensor<std::uint8_t> lung({3, 4, 5});
        for (std::size_t i = 0; i < lung.size(); ++i) lung[i] = i % 2;
        m.lung = std::move(lung);
    }
    m.spacing = {1.25, 0.7, 0.7};
    m.patient_id = "p001";
    return m;
}

}  // namespace

TEST_CASE("voxel volume in milliliters") {
    CHECK(volio::voxel_volume_ml({1.25, 0.7, 0.7}) ==
          doctest::Approx(0.0006125).epsilon(1e-12));
    CHECK(volio::voxel_volume_ml({1, 1, 1}) == doctest::Approx(0.001).epsilon(1e-15));
    CHECK(volio::voxel_volume_ml({10, 10, 10}) == 1.0);
    CHECK_FALSE(volio::Spacing{0, 1, 1}.valid());
    CHECK_FALSE(volio::Spacing{1, -2, 1}.valid());
    CHECK(volio::Spacing{}.valid());
}

TEST_CASE("volume round trip is bit exact") {
    auto dir = fresh_dir("volio_vol");
    volio::CtVolume v = sample_volume();
    volio::save_volume(v, dir / "a.vol");
    volio::CtVolume r = volio::load_volume(dir / "a.vol");

    CHECK(r.shape() == v.shape());
    CHECK(r.spacing.dz == v.spacing.dz);
    CHECK(r.spacing.dy == v.spacing.dy);
    CHECK(r.spacing.dx == v.spacing.dx);
    CHECK(r.patient_id == v.patient_id);
    CHECK(std::memcmp(r.voxels.data(), v.voxels.data(),
                      v.voxels.size() * sizeof(std::int16_t)) == 0);

    volio::save_volume(r, dir / "b.vol");
    CHECK(read_bytes(dir / "a.vol") == read_bytes(dir / "b.vol"));
}

TEST_CASE("mask round trip preserves labels and lung plane") {
    auto dir = fresh_dir("volio_mask");
    volio::LabelMask m = sample_mask(true);
    volio::save_mask(m, dir / "a.mask");

    volio::LabelMask r = volio::load_mask(dir / "a.mask");
    CHECK(r.shape() == m.shape());
    REQUIRE(r.lung.has_value());
    CHECK(std::memcmp(r.labels.data(), m.labels.data(), m.labels.size()) == 0);
    CHECK(std::memcmp(r.lung->data(), m.lung->data(), m.lung->size()) == 0);

    volio::save_mask(r, dir / "b.mask");
    CHECK(read_bytes(dir / "a.mask") == read_bytes(dir / "b.mask"));

    volio::LabelMask bare = sample_mask(false);
    volio::save_mask(bare, dir / "c.mask");
    CHECK_FALSE(volio::load_mask(dir / "c.mask").lung.has_value());
}

TEST_CASE("mask load rejects a shape that disagrees with its volume") {
    auto dir = fresh_dir("volio_shape");
    volio::LabelMask m;
    m.labels.resize({15, 64, 64});
    m.labels.zero();
    m.patient_id = "p";
    volio::save_mask(m, dir / "m.mask");

    CHECK_NOTHROW(volio::load_mask(dir / "m.mask", {15, 64, 64}));
    auto msg = message_of<DataError>(
        [&] { volio::load_mask(dir / "m.mask", {16, 64, 64}); });
    CHECK(contains(msg, "shape mismatch"));
}

TEST_CASE("corrupted container bytes are rejected") {
    auto dir = fresh_dir("volio_corrupt");
    volio::save_volume(sample_volume(), dir / "v.vol");
    volio::save_mask(sample_mask(false), dir / "m.mask");
    const auto vol_bytes = read_bytes(dir / "v.vol");

    SUBCASE("zero slice spacing") {
        auto b = vol_bytes;
        std::fill(b.begin() + 32, b.begin() + 40, 0);  // dz double
        write_bytes(dir / "bad.vol", b);
        CHECK(contains(message_of<DataError>([&] { volio::load_volume(dir / "bad.vol"); }),
                       "non-positive spacing"));
    }
    SUBCASE("out-of-range HU sample") {
        auto b = vol_bytes;
        b[120] = 0x88;  // first voxel := 5000, above the representable ceiling
        b[121] = 0x13;
        write_bytes(dir / "bad.vol", b);
        CHECK(contains(message_of<DataError>([&] { volio::load_volume(dir / "bad.vol"); }),
                       "HU out of range: 5000"));
    }
    SUBCASE("unknown label code") {
        auto b = read_bytes(dir / "m.mask");
        b[120] = 3;
        write_bytes(dir / "bad.mask", b);
        CHECK(contains(message_of<DataError>([&] { volio::load_mask(dir / "bad.mask"); }),
                       "unknown class code: 3"));
    }
    SUBCASE("truncated voxel payload") {
        auto b = vol_bytes;
        b.resize(120 + 10);
        write_bytes(dir / "bad.vol", b);
        CHECK(contains(message_of<DataError>([&] { volio::load_volume(dir / "bad.vol"); }),
                       "truncated voxel data"));
    }
    SUBCASE("wrong magic") {
        auto b = vol_bytes;
        b[0] = 'X';
        write_bytes(dir / "bad.vol", b);
        CHECK(contains(message_of<DataError>([&] { volio::load_volume(dir / "bad.vol"); }),
                       "bad magic"));
    }
    SUBCASE("unsupported version") {
        auto b = vol_bytes;
        b[8] = 2;
        write_bytes(dir / "bad.vol", b);
        CHECK(contains(message_of<DataError>([&] { volio::load_volume(dir / "bad.vol"); }),
                       "unsupported container version"));
    }
    SUBCASE("volume loader refuses a mask file") {
        CHECK(contains(message_of<DataError>([&] { volio::load_volume(dir / "m.mask"); }),
                       "not a HU volume"));
        CHECK(contains(message_of<DataError>([&] { volio::load_mask(dir / "v.vol"); }),
                       "not a label mask"));
    }
}

TEST_CASE("validate guards degenerate metadata") {
    volio::CtVolume v = sample_volume();
    v.spacing.dx = 0;
    CHECK(contains(message_of<DataError>([&] { v.validate(); }), "non-positive spacing"));

    volio::CtVolume empty;
    CHECK(contains(message_of<DataError>([&] { empty.validate(); }),
                   "non-empty 3D grid"));

    auto dir = fresh_dir("volio_id");
    volio::CtVolume long_id = sample_volume();
    long_id.patient_id.assign(64, 'x');
    CHECK(contains(
        message_of<DataError>([&] { volio::save_volume(long_id, dir / "x.vol"); }),
        "patient_id longer than 63 bytes"));
}

TEST_CASE("manifest round trip resolves relative paths") {
    auto dir = fresh_dir("volio_manifest");
    volio::CtVolume v = sample_volume();
    volio::LabelMask m = sample_mask(true);

    volio::Dataset ds;
    for (const char* id : {"p001", "p002"}) {
        v.patient_id = id;
        m.patient_id = id;
        auto vp = dir / (std::string(id) + ".vol");
        auto mp = dir / (std::string(id) + ".mask");
        volio::save_volume(v, vp);
        volio::save_mask(m, mp);
        ds.records.push_back({id, vp, mp});
    }
    volio::save_manifest(ds, dir / "manifest.tsv");

    volio::Dataset r = volio::load_dataset(dir / "manifest.tsv");
    REQUIRE(r.records.size() == 2);
    CHECK(r.records[0].patient_id == "p001");
    CHECK(r.records[1].patient_id == "p002");
    CHECK(volio::load_volume(r.records[0].volume_path).patient_id == "p001");
    CHECK(volio::load_mask(r.records[1].mask_path).patient_id == "p002");
}

TEST_CASE("manifest rejects duplicates, missing files, bad lines") {
    auto dir = fresh_dir("volio_manifest_bad");
    volio::save_volume(sample_volume(), dir / "p.vol");
    volio::save_mask(sample_mask(false), dir / "p.mask");

    auto write_manifest = [&](const std::string& body) {
        std::ofstream out(dir / "manifest.tsv");
        out << body;
    };

    write_manifest("p001\tp.vol\tp.mask\np001\tp.vol\tp.mask\n");
    CHECK(contains(
        message_of<DataError>([&] { volio::load_dataset(dir / "manifest.tsv"); }),
        "duplicate patient_id"));

    write_manifest("p001\tghost.vol\tp.mask\n");
    CHECK(contains(
        message_of<DataError>([&] { volio::load_dataset(dir / "manifest.tsv"); }),
        "missing volume file"));

    write_manifest("p001\tp.vol\tp.mask\nonly_two\tfields\n");
    CHECK(contains(
        message_of<DataError>([&] { volio::load_dataset(dir / "manifest.tsv"); }),
        "malformed manifest line 2"));

    CHECK(contains(
        message_of<DataError>([&] { volio::load_dataset(dir / "nope.tsv"); }),
        "cannot open manifest"));
}
