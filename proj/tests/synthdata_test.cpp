#include <algorithm>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "lungquant/core/errors.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/synthdata.hpp"
#include "lungquant/volio.hpp"
#include "test_util.hpp"

using namespace lungquant;
namespace fs = std::filesystem;
using testutil::contains;
using testutil::fresh_dir;
using testutil::message_of;
using testutil::read_bytes;

TEST_CASE("lesion-free phantom has lungs and nothing to segment") {
    synth::PhantomSpec spec = synth::PhantomSpec::canonical({16, 64, 64}, 1);
    synth::PhantomResult ph = synth::generate_phantom(spec);

    CHECK(ph.ggo_voxels == 0);
    CHECK(ph.high_voxels == 0);
    CHECK(ph.lung_voxels > 0);
    CHECK(ph.ggo_ml == 0.0);
    for (std::size_t i = 0; i < ph.mask.labels.size(); ++i)
        REQUIRE(ph.mask.labels[i] == volio::kBackground);

    REQUIRE(ph.mask.lung.has_value());
    std::size_t lung_count = 0;
    for (std::size_t i = 0; i < ph.mask.lung->size(); ++i)
        lung_count += (*ph.mask.lung)[i];
    CHECK(lung_count == ph.lung_voxels);
}

TEST_CASE("phantom generation is seed deterministic") {
    synth::PhantomSpec spec = synth::PhantomSpec::canonical({8, 48, 48}, 5);
    spec = synth::with_lesions(std::move(spec), 1, 1, 0.5, 5);

    synth::PhantomResult a = synth::generate_phantom(spec);
    synth::PhantomResult b = synth::generate_phantom(spec);
    CHECK(std::memcmp(a.volume.voxels.data(), b.volume.voxels.data(),
                      a.volume.voxels.size() * sizeof(std::int16_t)) == 0);
    CHECK(std::memcmp(a.mask.labels.data(), b.mask.labels.data(),
                      a.mask.labels.size()) == 0);

    synth::PhantomSpec other = spec;
    other.seed = 6;
    synth::PhantomResult c = synth::generate_phantom(other);
    CHECK(std::memcmp(a.volume.voxels.data(), c.volume.voxels.data(),
                      a.volume.voxels.size() * sizeof(std::int16_t)) != 0);
}

TEST_CASE("analytic tallies equal mask-derived volumes exactly") {
    synth::PhantomSpec spec = synth::PhantomSpec::canonical({12, 64, 64}, 9);
    spec.spacing = {1.25, 0.7, 0.7};
    spec = synth::with_lesions(std::move(spec), 2, 1, 0.6, 9);
    synth::PhantomResult ph = synth::generate_phantom(spec);
    REQUIRE(ph.ggo_voxels > 0);
    REQUIRE(ph.high_voxels > 0);

    std::size_t ggo = 0, high = 0;
    for (std::size_t i = 0; i < ph.mask.labels.size(); ++i) {
        ggo += ph.mask.labels[i] == volio::kGgo;
        high += ph.mask.labels[i] == volio::kHighOpacity;
    }
    CHECK(ggo == ph.ggo_voxels);
    CHECK(high == ph.high_voxels);
    CHECK(quant::class_volume(ph.mask, volio::kGgo, spec.spacing) == ph.ggo_ml);
    CHECK(quant::class_volume(ph.mask, volio::kHighOpacity, spec.spacing) ==
          ph.high_ml);
}

TEST_CASE("noiseless phantom keeps each tissue in its HU band") {
    synth::PhantomSpec spec = synth::PhantomSpec::canonical({10, 48, 48}, 13);
    spec.noise_sd = 0;
    spec = synth::with_lesions(std::move(spec), 1, 1, 0.5, 13);
    synth::PhantomResult ph = synth::generate_phantom(spec);

    for (std::size_t i = 0; i < ph.mask.labels.size(); ++i) {
        const int hu = ph.volume.voxels[i];
        const bool in_lung = (*ph.mask.lung)[i] != 0;
        switch (ph.mask.labels[i]) {
            case volio::kGgo:
                CHECK(hu >= -650);
                CHECK(hu <= -450);
                break;
            case volio::kHighOpacity:
                CHECK(hu >= -20);
                CHECK(hu <= 80);
                break;
            default:
                if (in_lung)
                    CHECK(hu == -850);
                else
                    CHECK((hu == -1000 || hu == 40));
        }
    }
}

TEST_CASE("cohort writes a loadable, reproducible dataset") {
    auto dir_a = fresh_dir("synth_cohort_a");
    auto dir_b = fresh_dir("synth_cohort_b");
    synth::PhantomSpec base = synth::PhantomSpec::canonical({8, 48, 48}, 0);

    synth::CohortResult a = synth::generate_cohort(10, base, 4, dir_a);
    synth::CohortResult b = synth::generate_cohort(10, base, 4, dir_b);

    REQUIRE(a.dataset.records.size() == 10);
    REQUIRE(a.truth.size() == 10);
    CHECK(a.dataset.records[0].patient_id == "phantom000");
    CHECK(a.dataset.records[9].patient_id == "phantom009");

    volio::Dataset loaded = volio::load_dataset(dir_a / "manifest.tsv");
    REQUIRE(loaded.records.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(loaded.records[i].patient_id == a.dataset.records[i].patient_id);
        CHECK(fs::exists(loaded.records[i].volume_path));
        CHECK(fs::exists(loaded.records[i].mask_path));
    }

    auto truth = synth::load_cohort_truth(dir_a / "analytic_volumes.csv");
    REQUIRE(truth.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(truth[i].patient_id == a.truth[i].patient_id);
        CHECK(truth[i].ggo_ml == a.truth[i].ggo_ml);
        CHECK(truth[i].high_ml == a.truth[i].high_ml);
        CHECK(truth[i].lung_ml == a.truth[i].lung_ml);
    }

    for (const char* name : {"manifest.tsv", "analytic_volumes.csv", "phantom000.vol",
                             "phantom004.mask", "phantom009.vol"})
        CHECK(read_bytes(dir_a / name) == read_bytes(dir_b / name));

    double lo = 1e30, hi = 0;
    for (const auto& row : a.truth) {
        REQUIRE(row.ggo_ml > 0);
        lo = std::min(lo, row.ggo_ml);
        hi = std::max(hi, row.ggo_ml);
    }
    CHECK(hi / lo >= 10.0);  // lesion sizes span at least one decade
}

TEST_CASE("phantom rejects impossible geometry") {
    synth::PhantomSpec spec = synth::PhantomSpec::canonical({8, 32, 32}, 1);
    synth::LesionSpec big;
    big.shape = spec.body;  // cannot fit inside either lung
    spec.lesions.push_back(big);
    CHECK(contains(message_of<DataError>([&] { synth::generate_phantom(spec); }),
                   "not containable"));

    synth::PhantomSpec flat = synth::PhantomSpec::canonical({8, 32, 32}, 1);
    flat.grid.rows = 0;
    CHECK(contains(message_of<DataError>([&] { synth::generate_phantom(flat); }),
                   "non-empty"));

    synth::PhantomSpec bad_spacing = synth::PhantomSpec::canonical({8, 32, 32}, 1);
    bad_spacing.spacing.dz = -1;
    CHECK(contains(message_of<DataError>([&] { synth::generate_phantom(bad_spacing); }),
                   "non-positive spacing"));

    auto dir = fresh_dir("synth_zero");
    CHECK(contains(message_of<DataError>([&] {
                       synth::generate_cohort(0, synth::PhantomSpec::canonical(
                                                     {8, 32, 32}, 1),
                                              1, dir);
                   }),
                   "cohort size"));
}
