#include <algorithm>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "doctest.h"
#include "lungquant/core/errors.hpp"
#include "lungquant/net/params.hpp"
#include "lungquant/synthdata.hpp"
#include "lungquant/train/trainer.hpp"
#include "test_util.hpp"

using namespace lungquant;
namespace fs = std::filesystem;
using testutil::contains;
using testutil::fresh_dir;
using testutil::message_of;
using testutil::read_text;

namespace {

// Pixel intensity is a pure function of the class band, so a pointwise map
// suffices to segment perfectly.
train::PatientSamples banded_sample(std::size_t slices, std::size_t side,
                                    std::size_t cohort_index) {
    train::PatientSamples ps;
    ps.cohort_index = cohort_index;
    ps.pv.planes.resize({slices, side, side});
    ps.pv.crop_box = {0, side, 0, side};
    ps.pv.source_shape = {slices, side, side};
    ps.labels.resize({slices, side, side});
    for (std::size_t z = 0; z < slices; ++z)
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const std::uint8_t cls =
                    c < side / 3 ? 0 : (c < 2 * side / 3 ? 1 : 2);
                ps.labels.at(z, r, c) = cls;
                ps.pv.planes.at(z, r, c) = 0.1f + 0.4f * float(cls);
            }
    return ps;
}

net::NetworkConfig small_net() {
    net::NetworkConfig cfg;
    cfg.window_len = 3;
    cfg.dense_layers = 1;
    cfg.dense_growth = 4;
    cfg.lstm_hidden = 4;
    cfg.head_channels = 8;
    return cfg;
}

}  // namespace

TEST_CASE("label_plane slices one z plane out of a label stack") {
    Tensor<std::uint8_t> labels({2, 3, 4});
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = std::uint8_t(i % 5);
    Tensor<std::uint8_t> plane = train::label_plane(labels, 1);
    REQUIRE(plane.dim(0) == 3);
    REQUIRE(plane.dim(1) == 4);
    CHECK(std::memcmp(plane.data(), labels.data() + 12, 12) == 0);
}

TEST_CASE("history csv lists one row per epoch") {
    train::TrainHistory h;
    h.records.push_back({0, 1.5, 2.5, 0.001});
    h.records.push_back({1, 0.25, 0.125, 0.001});
    auto dir = fresh_dir("trainer_history");
    train::write_history_csv(h, dir / "history.csv");
    CHECK(read_text(dir / "history.csv") ==
          "epoch,train_loss,val_loss,lr\n"
          "0,1.5,2.5,0.001\n"
          "1,0.25,0.125,0.001\n");
}

TEST_CASE("training overfits a deterministic banded phantom") {
    std::vector<train::PatientSamples> train_set{banded_sample(4, 15, 7)};
    std::vector<train::PatientSamples> val_set{banded_sample(4, 15, 7)};

    net::NetworkConfig net_cfg = small_net();
    train::TrainConfig cfg;
    cfg.lr0 = 0.05;
    cfg.batch_size = 4;
    cfg.loss_kind = train::LossKind::kCeDice;
    cfg.plateau_patience = 20;
    cfg.max_epochs = 150;
    cfg.seed = 11;

    auto out = train::train_windows<float>(train_set, val_set, net_cfg, cfg);
    REQUIRE_FALSE(out.history.records.empty());
    CHECK(out.history.best_val_loss < 0.15);
    CHECK(out.history.trained_patients == std::vector<std::size_t>{7});

    // history bookkeeping: best epoch holds the minimum, lr never increases,
    // every cut is recorded
    double min_val = 1e300;
    std::size_t argmin = 0;
    double last_lr = cfg.lr0;
    std::vector<std::size_t> cuts;
    for (const auto& r : out.history.records) {
        if (r.val_loss < min_val) {
            min_val = r.val_loss;
            argmin = r.epoch;
        }
        CHECK(r.lr <= last_lr);
        last_lr = r.lr;
    }
    CHECK(out.history.best_epoch == argmin);
    CHECK(out.history.best_val_loss == min_val);

    // the returned snapshot reproduces the best validation loss
    auto refs = train::detail::all_windows(val_set);
    const double replay = train::detail::mean_loss(
        val_set, refs, net_cfg.context_radius(), net_cfg, out.params,
        cfg.loss_kind, cfg.batch_size);
    CHECK(replay == doctest::Approx(out.history.best_val_loss).epsilon(1e-6));

    // and the model actually segments the bands
    prep::SliceWindow win = prep::window_at(val_set[0].pv, 2, 1);
    Tensor<float> input({3, 15, 15});
    std::copy_n(win.pixels.data(), input.size(), input.data());
    Tensor<std::uint8_t> pred = net::predict_slice(out.params, net_cfg, input);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        agree += pred[i] == val_set[0].labels.data()[2 * 15 * 15 + i];
    CHECK(double(agree) / double(pred.size()) > 0.95);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
    std::vector<train::PatientSamples> train_set{banded_sample(3, 12, 0)};
    std::vector<train::PatientSamples> val_set{banded_sample(2, 12, 1)};
    net::NetworkConfig net_cfg = small_net();
    train::TrainConfig cfg;
    cfg.lr0 = 0.02;
    cfg.batch_size = 3;
    cfg.loss_kind = train::LossKind::kCeDice;
    cfg.max_epochs = 4;
    cfg.seed = 5;

    auto a = train::train_windows<float>(train_set, val_set, net_cfg, cfg);
    auto b = train::train_windows<float>(train_set, val_set, net_cfg, cfg);
    REQUIRE(a.history.records.size() == b.history.records.size());
    for (std::size_t i = 0; i < a.history.records.size(); ++i) {
        CHECK(a.history.records[i].train_loss == b.history.records[i].train_loss);
        CHECK(a.history.records[i].val_loss == b.history.records[i].val_loss);
        CHECK(a.history.records[i].lr == b.history.records[i].lr);
    }
    const auto& wa = a.params.at("lstm.weight");
    const auto& wb = b.params.at("lstm.weight");
    CHECK(std::memcmp(wa.data(), wb.data(), wa.size() * sizeof(float)) == 0);

    train::TrainConfig other = cfg;
    other.seed = 6;
    auto c = train::train_windows<float>(train_set, val_set, net_cfg, other);
    CHECK(a.history.records[0].train_loss != c.history.records[0].train_loss);
}

TEST_CASE("numeric blowups report the epoch and batch") {
    std::vector<train::PatientSamples> train_set{banded_sample(4, 12, 0)};
    std::vector<train::PatientSamples> val_set{banded_sample(1, 12, 1)};
    net::NetworkConfig net_cfg = small_net();
    train::TrainConfig cfg;
    cfg.lr0 = 1e300;  // guarantees an overflow within the first epochs
    cfg.batch_size = 2;
    cfg.loss_kind = train::LossKind::kCeDice;
    cfg.max_epochs = 3;
    cfg.seed = 1;

    const std::string msg = message_of<NumericError>([&] {
        train::train_windows<float>(train_set, val_set, net_cfg, cfg);
    });
    CHECK(contains(msg, "epoch"));
    CHECK(contains(msg, "batch"));
}

TEST_CASE("training requires both data splits") {
    std::vector<train::PatientSamples> one{banded_sample(2, 12, 0)};
    std::vector<train::PatientSamples> none;
    net::NetworkConfig net_cfg = small_net();
    train::TrainConfig cfg;
    CHECK(contains(message_of<DataError>([&] {
                       train::train_windows<float>(one, none, net_cfg, cfg);
                   }),
                   "training and validation sets must be non-empty"));
}

TEST_CASE("an untrained model predicts background over a full volume") {
    synth::PhantomSpec spec = synth::PhantomSpec::canonical({6, 32, 32}, 3);
    spec.noise_sd = 0;
    synth::PhantomResult ph = synth::generate_phantom(spec);

    net::NetworkConfig net_cfg = small_net();
    auto params = net::make_dual_params<float>(net_cfg);
    prep::PrepOptions prep_opts;
    prep_opts.target_size = 16;

    volio::LabelMask pred =
        train::predict_volume(params, net_cfg, ph.volume, prep_opts);
    CHECK(pred.shape() == ph.volume.shape());
    CHECK(pred.patient_id == ph.volume.patient_id);
    CHECK(pred.spacing.dz == ph.volume.spacing.dz);
    CHECK_FALSE(pred.lung.has_value());
    for (std::size_t i = 0; i < pred.labels.size(); ++i)
        REQUIRE(pred.labels[i] == volio::kBackground);
}

TEST_CASE("cross-validation trains k folds and predicts every patient once") {
    auto dir = fresh_dir("trainer_cv");
    auto data_dir = dir / "cohort";
    synth::PhantomSpec base = synth::PhantomSpec::canonical({6, 24, 24}, 0);
    synth::CohortResult cohort = synth::generate_cohort(7, base, 9, data_dir);
    REQUIRE(cohort.dataset.records.size() == 7);

    net::NetworkConfig net_cfg = small_net();
    net_cfg.dense_growth = 2;
    net_cfg.lstm_hidden = 2;
    net_cfg.head_channels = 4;
    train::TrainConfig cfg;
    cfg.lr0 = 0.01;
    cfg.batch_size = 8;
    cfg.loss_kind = train::LossKind::kCeDice;
    cfg.max_epochs = 2;
    cfg.seed = 21;
    prep::PrepOptions prep_opts;
    prep_opts.target_size = 16;

    auto out_dir = dir / "cv";
    train::CrossValResult res = train::cross_validate<float>(
        cohort.dataset, net_cfg, cfg, prep_opts, out_dir, 5, 1);

    REQUIRE(res.folds.size() == 5);
    REQUIRE(res.model_files.size() == 5);
    REQUIRE(res.history_files.size() == 5);
    REQUIRE(res.histories.size() == 5);

    for (std::size_t f = 0; f < 5; ++f) {
        CHECK(fs::exists(res.model_files[f]));
        CHECK(res.model_files[f].filename() ==
              "fold" + std::to_string(f) + ".weights");
        auto loaded = net::load_params<float>(res.model_files[f]);
        CHECK(loaded.has("lstm.weight"));

        CHECK(contains(read_text(res.history_files[f]),
                       "epoch,train_loss,val_loss,lr"));
        CHECK(res.histories[f].records.size() == 2);

        // fold hygiene: no test patient ever contributed a gradient
        std::set<std::size_t> trained(res.histories[f].trained_patients.begin(),
                                      res.histories[f].trained_patients.end());
        CHECK(trained.size() == res.folds[f].train.size());
        for (std::size_t t : res.folds[f].test) CHECK(trained.count(t) == 0);
        for (std::size_t v : res.folds[f].val) CHECK(trained.count(v) == 0);
    }

    for (std::size_t i = 0; i < 7; ++i) {
        const auto& rec = cohort.dataset.records[i];
        REQUIRE_FALSE(res.prediction_files[i].empty());
        CHECK(res.prediction_files[i].filename() ==
              "pred_" + rec.patient_id + ".mask");
        volio::LabelMask pred = volio::load_mask(res.prediction_files[i]);
        volio::LabelMask truth = volio::load_mask(rec.mask_path);
        CHECK(pred.shape() == truth.shape());
        REQUIRE(pred.lung.has_value());
        CHECK(std::memcmp(pred.lung->data(), truth.lung->data(),
                          truth.lung->size()) == 0);
    }
}
