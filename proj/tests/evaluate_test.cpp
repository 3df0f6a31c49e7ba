#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "lungquant/core/errors.hpp"
#include "lungquant/core/rng.hpp"
#include "lungquant/evaluate.hpp"
#include "lungquant/synthdata.hpp"
#include "test_util.hpp"

using namespace lungquant;
namespace fs = std::filesystem;
using testutil::contains;
using testutil::fresh_dir;
using testutil::message_of;

namespace {

volio::LabelMask flat_mask(std::size_t n, const std::string& id = "p") {
    volio::LabelMask m;
    m.labels.resize({1, 1, n});
    m.labels.zero();
    m.spacing = {1, 1, 1};
    m.patient_id = id;
    return m;
}

double dice_by_counts(const volio::LabelMask& a, const volio::LabelMask& b,
                      std::uint8_t cls) {
    std::size_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.labels.size(); ++i) {
        const bool pa = a.labels[i] == cls, pb = b.labels[i] == cls;
        na += pa;
        nb += pb;
        inter += pa && pb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(inter) / double(na + nb);
}

}  // namespace

TEST_CASE("dice of half-overlapping regions is one half") {
    volio::LabelMask pred = flat_mask(20), gt = flat_mask(20);
    for (std::size_t i = 0; i < 10; ++i) pred.labels[i] = volio::kGgo;
    for (std::size_t i = 5; i < 15; ++i) gt.labels[i] = volio::kGgo;
    // TP=5 FP=5 FN=5
    CHECK(eval::dice(pred, gt, volio::kGgo) == 0.5);
    CHECK(eval::dice(gt, pred, volio::kGgo) == 0.5);
}

TEST_CASE("dice edge cases: absent classes") {
    volio::LabelMask pred = flat_mask(8), gt = flat_mask(8);
    CHECK(eval::dice(pred, gt, volio::kGgo) == 1.0);  // absent from both

    pred.labels[0] = volio::kGgo;
    CHECK(eval::dice(pred, gt, volio::kGgo) == 0.0);  // present on one side only
    CHECK(eval::dice(gt, pred, volio::kGgo) == 0.0);
}

TEST_CASE("dice equals the tally formula on random masks") {
    volio::LabelMask a = flat_mask(500), b = flat_mask(500);
    Rng rng(3);
    for (std::size_t i = 0; i < 500; ++i) {
        a.labels[i] = std::uint8_t(rng.below(3));
        b.labels[i] = std::uint8_t(rng.below(3));
    }
    for (int c = 0; c < volio::kNumClasses; ++c)
        CHECK(eval::dice(a, b, volio::ClassCode(c)) ==
              dice_by_counts(a, b, std::uint8_t(c)));

    volio::LabelMask wrong = flat_mask(499);
    CHECK(contains(message_of<DataError>([&] { eval::dice(a, wrong, volio::kGgo); }),
                   "shape mismatch"));
}

TEST_CASE("perfect predictions give a perfect report") {
    std::vector<volio::LabelMask> gt;
    for (int i = 0; i < 4; ++i) {
        synth::PhantomSpec spec = synth::PhantomSpec::canonical({6, 32, 32}, 40 + i);
        spec = synth::with_lesions(std::move(spec), 1, i % 2, 0.4 + 0.1 * i, 40 + i);
        spec.patient_id = "p" + std::to_string(i);
        gt.push_back(synth::generate_phantom(spec).mask);
    }
    eval::EvalReport rep = eval::build_report(gt, gt);

    CHECK(rep.n_patients == 4);
    for (int c = 0; c < volio::kNumClasses; ++c)
        CHECK(rep.dice_per_class[c].mean == 1.0);
    CHECK(rep.lesion_dice.mean == 1.0);
    REQUIRE(rep.lesion_dice.has_sd);
    CHECK(rep.lesion_dice.sd == 0.0);

    for (const auto& va : rep.volumes) {
        CHECK_FALSE(va.wilcoxon_p.has_value());  // all differences are zero
        REQUIRE(va.bland_altman.has_value());
        CHECK(va.bland_altman->bias == 0.0);
        CHECK(va.bland_altman->loa_low == 0.0);
        CHECK(va.bland_altman->loa_high == 0.0);
        CHECK(va.scatter.size() == 4);
    }
    // ggo volumes vary across phantoms, so identical rankings correlate fully
    REQUIRE(rep.volumes[0].spearman.has_value());
    CHECK(rep.volumes[0].spearman->rho == 1.0);

    for (const auto& pe : rep.patients) {
        CHECK(pe.pred.ggo_ml == pe.truth.ggo_ml);
        CHECK(pe.pred.total_pneumonia_ml == pe.truth.total_pneumonia_ml);
    }
}

TEST_CASE("lesion dice averages only classes present in the pair") {
    volio::LabelMask pred = flat_mask(40, "x"), gt = flat_mask(40, "x");
    // only GGO appears anywhere: lesion dice must equal the GGO dice
    for (std::size_t i = 0; i < 10; ++i) pred.labels[i] = volio::kGgo;
    for (std::size_t i = 5; i < 15; ++i) gt.labels[i] = volio::kGgo;
    eval::EvalReport rep = eval::build_report({pred}, {gt});
    CHECK(rep.patients[0].dice[volio::kGgo] == 0.5);
    CHECK(rep.patients[0].lesion_dice == 0.5);

    // no lesion class at all -> vacuously perfect
    eval::EvalReport clean = eval::build_report({flat_mask(7, "y")}, {flat_mask(7, "y")});
    CHECK(clean.patients[0].lesion_dice == 1.0);
}

TEST_CASE("single-patient report leaves small-sample statistics absent") {
    volio::LabelMask pred = flat_mask(30, "solo"), gt = flat_mask(30, "solo");
    pred.labels[0] = volio::kGgo;
    gt.labels[0] = volio::kGgo;
    gt.labels[1] = volio::kGgo;
    eval::EvalReport rep = eval::build_report({pred}, {gt});

    CHECK(rep.n_patients == 1);
    CHECK_FALSE(rep.lesion_dice.has_sd);
    for (const auto& va : rep.volumes) {
        CHECK_FALSE(va.spearman.has_value());
        CHECK_FALSE(va.bland_altman.has_value());
    }
    // one nonzero paired difference still admits a (vacuous) signed-rank p
    REQUIRE(rep.volumes[0].wilcoxon_p.has_value());
    CHECK(*rep.volumes[0].wilcoxon_p == 1.0);
}

TEST_CASE("report pairing is strict") {
    volio::LabelMask a = flat_mask(5, "a"), b = flat_mask(5, "b");
    CHECK(contains(message_of<DataError>([&] { eval::build_report({a}, {b}); }),
                   "patient id mismatch"));
    CHECK(contains(message_of<DataError>([&] { eval::build_report({a}, {}); }),
                   "patient counts differ"));
    CHECK(contains(message_of<DataError>([&] { eval::build_report({}, {}); }),
                   "no patients"));
}

TEST_CASE("report writers produce parseable artifacts") {
    auto dir = fresh_dir("eval_writers");
    std::vector<volio::LabelMask> pred, gt;
    Rng rng(11);
    for (int i = 0; i < 5; ++i) {
        volio::LabelMask g = flat_mask(200, "p" + std::to_string(i));
        g.spacing = {1, 1, 1};
        for (std::size_t v = 0; v < g.labels.size(); ++v)
            g.labels[v] = std::uint8_t(rng.below(3));
        volio::LabelMask p = g;
        for (std::size_t v = 0; v < 20; ++v)
            p.labels[rng.below(200)] = std::uint8_t(rng.below(3));
        gt.push_back(std::move(g));
        pred.push_back(std::move(p));
    }
    eval::EvalReport rep = eval::build_report(pred, gt);

    eval::write_report_csv(rep, dir / "report.csv");
    eval::write_summary_json(rep, dir / "summary.json");
    eval::write_ba_points_csv(rep, dir / "ba.csv");
    eval::write_scatter_points_csv(rep, dir / "scatter.csv");
    eval::write_scatter_svg(rep, dir / "scatter.svg");
    eval::write_ba_svg(rep, dir / "ba.svg");

    std::ifstream csv(dir / "report.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line ==
          "patient_id,dice_bg,dice_ggo,dice_high,dice_lesion,"
          "ggo_ml_pred,ggo_ml_true,high_ml_pred,high_ml_true,"
          "pneumonia_ml_pred,pneumonia_ml_true,burden_pct_pred,burden_pct_true");
    int rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 5);

    auto j = nlohmann::json::parse(testutil::read_text(dir / "summary.json"));
    CHECK(j["n_patients"] == 5);
    CHECK(j["p_threshold"] == 0.05);
    CHECK(j["dice"]["lesion"]["mean"].is_number());
    CHECK(j["volumes"]["ggo_ml"].contains("spearman_rho"));
    CHECK(j["volumes"]["pneumonia_ml"].contains("wilcoxon_p"));

    CHECK(contains(testutil::read_text(dir / "scatter.svg"), "<svg"));
    CHECK(contains(testutil::read_text(dir / "ba.svg"), "<svg"));
    std::ifstream ba(dir / "ba.csv");
    std::getline(ba, line);
    CHECK(line == "volume_type,mean,diff");
}
