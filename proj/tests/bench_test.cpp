#include <cstdint>
#include <cstring>
#include <new>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "lungquant/bench/harness.hpp"
#include "lungquant/core/rng.hpp"
#include "lungquant/train/optim.hpp"
#include "test_util.hpp"

using namespace lungquant;
using testutil::fresh_dir;
using testutil::read_text;

namespace {

Tensor<float> random_stack(std::size_t n, std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<float> stack({n, side, side});
    for (std::size_t i = 0; i < stack.size(); ++i)
        stack[i] = float(rng.uniform());
    return stack;
}

// the pointwise band task from the trainer tests, reused to give every model
// something it can actually learn
train::PatientSamples banded_sample(std::size_t slices, std::size_t side) {
    train::PatientSamples ps;
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

}  // namespace

TEST_CASE("median helper handles odd and even counts") {
    CHECK(bench::detail::median_of({3.0, 1.0, 2.0}) == 2.0);
    CHECK(bench::detail::median_of({4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK(bench::detail::median_of({5.0}) == 5.0);
}

TEST_CASE("run_timed runs one warm-up plus the requested repetitions") {
    std::size_t calls = 0;
    bench::BenchResult r =
        bench::run_timed("probe", 12, 34, 5, [&] { ++calls; });
    CHECK(calls == 6);
    CHECK(r.model == "probe");
    CHECK(r.n_slices == 12);
    CHECK(r.param_count == 34);
    CHECK_FALSE(r.oom);
    CHECK(r.median_seconds >= 0.0);
}

TEST_CASE("run_timed reports a stable median for steady work") {
    // fixed-iteration spin, a few ms per call
    volatile double sink = 0;
    auto spin = [&] {
        for (int i = 0; i < 2000000; ++i) sink = sink + 1.0;
    };
    bench::BenchResult r = bench::run_timed("spin", 1, 0, 5, spin);
    CHECK(r.median_seconds > 0.0);
    CHECK(r.mad_seconds < 0.25 * r.median_seconds);
}

TEST_CASE("run_timed marks out-of-memory instead of propagating it") {
    bench::BenchResult r =
        bench::run_timed("balloon", 1, 0, 3, [] { throw std::bad_alloc(); });
    CHECK(r.oom);
    CHECK(r.median_seconds == 0.0);
    CHECK(r.peak_bytes == 0);
}

TEST_CASE("run_timed peak covers the timed phase, not earlier allocations") {
    {
        Tensor<float> big({1u << 20});  // 4 MB, freed before the harness runs
        big.fill(1.0f);
    }
    bench::BenchResult r = bench::run_timed("small", 1, 0, 3, [] {
        Tensor<float> t({1u << 14});  // 64 KB live inside the timed phase
        t.fill(2.0f);
    });
    CHECK(r.peak_bytes >= (1u << 14) * sizeof(float));
    CHECK(r.peak_bytes < (1u << 20) * sizeof(float));
}

TEST_CASE("slice stack runners fill every result column") {
    Tensor<float> stack = random_stack(8, 16, 1);

    net::NetworkConfig ours_cfg;
    ours_cfg.window_len = 3;
    ours_cfg.dense_layers = 1;
    ours_cfg.dense_growth = 2;
    ours_cfg.lstm_hidden = 2;
    ours_cfg.head_channels = 2;
    auto ours = net::init_dual_params<float>(ours_cfg, 0);
    bench::BenchResult r_ours = bench::bench_ours(ours, ours_cfg, stack, 2);
    CHECK(r_ours.model == "ours");
    CHECK(r_ours.n_slices == 8);
    CHECK(r_ours.param_count == ours.scalar_count());
    CHECK(r_ours.median_seconds > 0.0);
    CHECK(r_ours.peak_bytes > 0);
    CHECK_FALSE(r_ours.oom);

    bench::UnetConfig ucfg;
    ucfg.width = 2;
    auto u2 = bench::init_unet2d_params<float>(ucfg, 0);
    bench::BenchResult r_u2 = bench::bench_unet2d(u2, ucfg, stack, 2);
    CHECK(r_u2.model == "unet2d");
    CHECK(r_u2.param_count == u2.scalar_count());
    CHECK(r_u2.median_seconds > 0.0);

    auto u3 = bench::init_unet3d_params<float>(ucfg, 0);
    bench::BenchResult r_u3 = bench::bench_unet3d(u3, ucfg, stack, 2);
    CHECK(r_u3.model == "unet3d");
    CHECK(r_u3.median_seconds > 0.0);
    CHECK_FALSE(r_u3.oom);
}

TEST_CASE("3d runner copes with stacks that are not multiples of four") {
    bench::UnetConfig ucfg;
    ucfg.width = 2;
    auto u3 = bench::init_unet3d_params<float>(ucfg, 0);

    // 10 slices: one chunk of 8, tail of 2 skipped
    Tensor<float> stack = random_stack(10, 8, 2);
    bench::BenchResult r = bench::bench_unet3d(u3, ucfg, stack, 2);
    CHECK_FALSE(r.oom);
    CHECK(r.n_slices == 10);
    CHECK(r.median_seconds > 0.0);

    // fewer than 4 slices: nothing to run, but no failure either
    Tensor<float> tiny = random_stack(3, 8, 3);
    bench::BenchResult r3 = bench::bench_unet3d(u3, ucfg, tiny, 2);
    CHECK_FALSE(r3.oom);
}

TEST_CASE("doubling the stack roughly doubles 2d inference time") {
    bench::UnetConfig ucfg;
    ucfg.width = 4;
    auto u2 = bench::init_unet2d_params<float>(ucfg, 0);
    Tensor<float> four = random_stack(4, 32, 4);
    Tensor<float> eight = random_stack(8, 32, 5);
    bench::BenchResult r4 = bench::bench_unet2d(u2, ucfg, four, 5);
    bench::BenchResult r8 = bench::bench_unet2d(u2, ucfg, eight, 5);
    CHECK(r8.median_seconds > r4.median_seconds);
}

TEST_CASE("slice-recurrent inference peaks below volumetric inference") {
    // identical 16-slice stack; the 3d baseline must hold whole-volume
    // activations while the recurrent model only ever holds one window
    Tensor<float> stack = random_stack(16, 16, 6);

    net::NetworkConfig ours_cfg;
    ours_cfg.window_len = 5;
    ours_cfg.dense_layers = 2;
    ours_cfg.dense_growth = 8;
    ours_cfg.lstm_hidden = 8;
    ours_cfg.head_channels = 16;
    auto ours = net::init_dual_params<float>(ours_cfg, 0);

    bench::UnetConfig ucfg;
    ucfg.width = 14;
    auto u3 = bench::init_unet3d_params<float>(ucfg, 0);

    bench::BenchResult r_ours = bench::bench_ours(ours, ours_cfg, stack, 2);
    bench::BenchResult r_u3 = bench::bench_unet3d(u3, ucfg, stack, 2);
    REQUIRE_FALSE(r_ours.oom);
    REQUIRE_FALSE(r_u3.oom);
    CHECK(r_ours.peak_bytes < r_u3.peak_bytes);
}

TEST_CASE("bench json carries the protocol flags and one row per model") {
    std::vector<bench::BenchResult> rows(2);
    rows[0] = {"unet2d", 16, 0.25, 0.01, 1000, 267075, false};
    rows[1] = {"ours", 16, 0.125, 0.005, 800, 276055, true};
    auto dir = fresh_dir("bench_json");
    bench::write_bench_json(rows, dir / "bench.json", "1-core container");

    nlohmann::json j = nlohmann::json::parse(read_text(dir / "bench.json"));
    CHECK(j["machine"] == "1-core container");
    CHECK(j["exclusive"] == true);
    CHECK(j["includes_preprocessing"] == false);
    REQUIRE(j["rows"].size() == 2);
    CHECK(j["rows"][0]["model"] == "unet2d");
    CHECK(j["rows"][0]["n_slices"] == 16);
    CHECK(j["rows"][0]["median_seconds"] == 0.25);
    CHECK(j["rows"][0]["mad_seconds"] == 0.01);
    CHECK(j["rows"][0]["peak_bytes"] == 1000);
    CHECK(j["rows"][0]["param_count"] == 267075);
    CHECK(j["rows"][0]["oom"] == false);
    CHECK(j["rows"][1]["oom"] == true);
}

TEST_CASE("model comparison scores all three models on shared slices") {
    const std::size_t side = 16, slices = 8;
    std::vector<train::PatientSamples> test{banded_sample(slices, side)};

    // our model: a few epochs on the band task
    net::NetworkConfig ours_cfg;
    ours_cfg.window_len = 3;
    ours_cfg.dense_layers = 1;
    ours_cfg.dense_growth = 4;
    ours_cfg.lstm_hidden = 4;
    ours_cfg.head_channels = 8;
    train::TrainConfig tcfg;
    tcfg.lr0 = 0.05;
    tcfg.batch_size = 4;
    tcfg.loss_kind = train::LossKind::kCeDice;
    tcfg.plateau_patience = 20;
    tcfg.max_epochs = 60;
    tcfg.seed = 3;
    auto ours =
        train::train_windows<float>(test, test, ours_cfg, tcfg).params;

    // unet baselines: full-batch SGD on the same pixels
    bench::UnetConfig ucfg;
    ucfg.width = 4;
    auto u2 = bench::init_unet2d_params<float>(ucfg, 1);
    {
        Tensor<float> x({slices, 1, side, side});
        std::copy_n(test[0].pv.planes.data(), x.size(), x.data());
        Tensor<std::uint8_t> target = test[0].labels;
        auto vel = u2.zeros_like();
        for (int step = 0; step < 60; ++step) {
            bench::Unet2dTrace<float> tr;
            Tensor<float> logits = bench::unet2d_forward(u2, ucfg, x, true, &tr);
            Tensor<float> d_logits;
            train::loss_forward<float>(train::LossKind::kCeDice, logits, target,
                                       &d_logits);
            auto g = bench::unet2d_backward(u2, ucfg, tr, d_logits);
            train::sgd_step(u2, g, vel, 0.05f, 0.9f, 0.0f);
        }
    }
    auto u3 = bench::init_unet3d_params<float>(ucfg, 1);
    {
        Tensor<float> x({1, 1, slices, side, side});
        std::copy_n(test[0].pv.planes.data(), x.size(), x.data());
        Tensor<std::uint8_t> target({1, slices, side, side});
        std::copy_n(test[0].labels.data(), target.size(), target.data());
        auto vel = u3.zeros_like();
        for (int step = 0; step < 60; ++step) {
            bench::Unet3dTrace<float> tr;
            Tensor<float> logits = bench::unet3d_forward(u3, ucfg, x, true, &tr);
            Tensor<float> d_logits;
            train::loss_forward<float>(train::LossKind::kCeDice, logits, target,
                                       &d_logits);
            auto g = bench::unet3d_backward(u3, ucfg, tr, d_logits);
            train::sgd_step(u3, g, vel, 0.05f, 0.9f, 0.0f);
        }
    }

    std::vector<bench::ModelRow> rows =
        bench::compare_models(ours, ours_cfg, u2, u3, ucfg, test, 16, 2);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].model == "unet2d");
    CHECK(rows[1].model == "unet3d");
    CHECK(rows[2].model == "ours");
    for (const auto& r : rows) {
        for (double d : r.dice) {
            CHECK(d >= 0.0);
            CHECK(d <= 1.0);
        }
        CHECK(r.seconds > 0.0);
        CHECK(r.peak_bytes > 0);
    }
    // every model mastered the pointwise task on its training pixels
    for (const auto& r : rows)
        for (double d : r.dice) CHECK(d > 0.9);

    auto dir = fresh_dir("bench_compare");
    bench::write_compare_csv(rows, dir / "compare.csv");
    const std::string csv = read_text(dir / "compare.csv");
    CHECK(csv.rfind("model,dice_bg,dice_ggo,dice_high,seconds_16_slices,peak_bytes\n",
                    0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}
