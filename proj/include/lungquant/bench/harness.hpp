#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <new>
#include <string>
#include <vector>

#include "lungquant/bench/baselines.hpp"
#include "lungquant/core/membytes.hpp"
#include "lungquant/net/dualnet.hpp"
#include "lungquant/train/trainer.hpp"
#include "lungquant/volio.hpp"

#include "json.hpp"

namespace lungquant::bench {

struct BenchResult {
    std::string model;
    std::size_t n_slices = 0;
    double median_seconds = 0;
    double mad_seconds = 0;  // median absolute deviation across repetitions
    std::size_t peak_bytes = 0;
    std::size_t param_count = 0;
    bool oom = false;
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

// One warm-up run, then `reps` timed runs of `once`; peak tensor bytes are
// tracked across the timed phase. Out-of-memory marks the row instead of
// aborting the harness.
inline BenchResult run_timed(const std::string& model, std::size_t n_slices,
                             std::size_t param_count, std::size_t reps,
                             const std::function<void()>& once) {
    BenchResult r;
    r.model = model;
    r.n_slices = n_slices;
    r.param_count = param_count;
    try {
        once();  // warm-up
        std::vector<double> times;
        membytes::reset_peak();
        for (std::size_t i = 0; i < reps; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            once();
            const auto t1 = std::chrono::steady_clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        r.peak_bytes = membytes::peak();
        r.median_seconds = detail::median_of(times);
        std::vector<double> dev;
        for (double t : times) dev.push_back(std::abs(t - r.median_seconds));
        r.mad_seconds = detail::median_of(dev);
    } catch (const std::bad_alloc&) {
        r.oom = true;
    }
    return r;
}

// Whole-stack inference runners over a synthetic normalized (n, side, side)
// stack. Times exclude preprocessing by construction (the stack is prepared
// before the clock starts).

template <class S>
BenchResult bench_ours(net::ParamSet<S>& params, const net::NetworkConfig& cfg,
                       const Tensor<S>& stack, std::size_t reps) {
    const std::size_t n = stack.dim(0), side = stack.dim(1);
    const std::size_t radius = cfg.context_radius();
    const std::size_t len = cfg.window_len;
    auto once = [&]() {
        Tensor<S> window({len, side, side});
        for (std::size_t z = 0; z < n; ++z) {
            for (std::size_t j = 0; j < len; ++j) {
                const std::size_t src = std::clamp<std::ptrdiff_t>(
                    std::ptrdiff_t(z) + std::ptrdiff_t(j) - std::ptrdiff_t(radius),
                    0, std::ptrdiff_t(n - 1));
                std::copy_n(stack.data() + src * side * side, side * side,
                            window.data() + j * side * side);
            }
            net::predict_slice(params, cfg, window);
        }
    };
    return run_timed("ours", n, params.scalar_count(), reps, once);
}

template <class S>
BenchResult bench_unet2d(net::ParamSet<S>& params, const UnetConfig& cfg,
                         const Tensor<S>& stack, std::size_t reps) {
    const std::size_t n = stack.dim(0), side = stack.dim(1);
    auto once = [&]() {
        Tensor<S> x({1, 1, side, side});
        for (std::size_t z = 0; z < n; ++z) {
            std::copy_n(stack.data() + z * side * side, side * side, x.data());
            unet2d_forward(params, cfg, x);
        }
    };
    return run_timed("unet2d", n, params.scalar_count(), reps, once);
}

// processes the stack in 16-slice chunks (the comparison granularity); the
// tail chunk keeps whatever multiple of 4 remains
template <class S>
BenchResult bench_unet3d(net::ParamSet<S>& params, const UnetConfig& cfg,
                         const Tensor<S>& stack, std::size_t reps,
                         std::size_t chunk = 16) {
    const std::size_t n = stack.dim(0), side = stack.dim(1);
    auto once = [&]() {
        std::size_t at = 0;
        while (at < n) {
            std::size_t d = std::min(chunk, n - at);
            d -= d % 4;
            if (d == 0) break;  // tail smaller than one pooling unit is skipped
            Tensor<S> x({1, 1, d, side, side});
            std::copy_n(stack.data() + at * side * side, d * side * side, x.data());
            unet3d_forward(params, cfg, x);
            at += d;
        }
    };
    return run_timed("unet3d", n, params.scalar_count(), reps, once);
}

inline void write_bench_json(const std::vector<BenchResult>& rows,
                             const std::filesystem::path& path,
                             const std::string& machine) {
    nlohmann::json j;
    j["machine"] = machine;
    j["exclusive"] = true;
    j["includes_preprocessing"] = false;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row;
        row["model"] = r.model;
        row["n_slices"] = r.n_slices;
        row["median_seconds"] = r.median_seconds;
        row["mad_seconds"] = r.mad_seconds;
        row["peak_bytes"] = r.peak_bytes;
        row["param_count"] = r.param_count;
        row["oom"] = r.oom;
        j["rows"].push_back(row);
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

// ---- model comparison table -------------------------------------------------

struct ModelRow {
    std::string model;
    std::array<double, volio::kNumClasses> dice{};  // BG, GGO, high-opacity
    double seconds = 0;       // 16-slice inference
    std::size_t peak_bytes = 0;
};

namespace detail {

template <class S>
void dice_tally(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& truth,
                std::array<std::array<double, 3>, volio::kNumClasses>& tally) {
    for (std::size_t cls = 0; cls < volio::kNumClasses; ++cls) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred.data()[i] == cls, t = truth.data()[i] == cls;
            tally[cls][0] += p && t;
            tally[cls][1] += p && !t;
            tally[cls][2] += !p && t;
        }
    }
}

inline std::array<double, volio::kNumClasses> tally_to_dice(
    const std::array<std::array<double, 3>, volio::kNumClasses>& tally) {
    std::array<double, volio::kNumClasses> d{};
    for (std::size_t cls = 0; cls < volio::kNumClasses; ++cls) {
        const double tp = tally[cls][0], fp = tally[cls][1], fn = tally[cls][2];
        d[cls] = tp + fp + fn == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
    }
    return d;
}

}  // namespace detail

// Cohort-wide per-class dice for each trained model on the shared test set,
// plus 16-slice compute columns. All three models see identical slices.
template <class S>
std::vector<ModelRow> compare_models(net::ParamSet<S>& ours_params,
                                     const net::NetworkConfig& ours_cfg,
                                     net::ParamSet<S>& u2_params,
                                     net::ParamSet<S>& u3_params,
                                     const UnetConfig& unet_cfg,
                                     const std::vector<train::PatientSamples>& test,
                                     std::size_t bench_slices = 16,
                                     std::size_t reps = 3) {
    using Tally = std::array<std::array<double, 3>, volio::kNumClasses>;
    Tally t_ours{}, t_u2{}, t_u3{};

    for (const auto& ps : test) {
        const std::size_t zs = ps.pv.planes.dim(0), side = ps.pv.planes.dim(1);
        for (std::size_t z = 0; z < zs; ++z) {
            Tensor<std::uint8_t> truth = train::label_plane(ps.labels, z);

            prep::SliceWindow win = prep::window_at(ps.pv, z, ours_cfg.context_radius());
            Tensor<S> wt({win.pixels.dim(0), side, side});
            for (std::size_t i = 0; i < win.pixels.size(); ++i)
                wt.data()[i] = S(win.pixels.data()[i]);
            detail::dice_tally<S>(net::predict_slice(ours_params, ours_cfg, wt),
                                  truth, t_ours);

            Tensor<S> x({1, 1, side, side});
            for (std::size_t i = 0; i < side * side; ++i)
                x.data()[i] = S(ps.pv.planes.data()[z * side * side + i]);
            Tensor<S> logits = unet2d_forward(u2_params, unet_cfg, x);
            detail::dice_tally<S>(net::decode_labels(logits), truth, t_u2);
        }

        // 3D baseline sees the whole stack at once
        Tensor<S> vol({1, 1, zs, side, side});
        for (std::size_t i = 0; i < ps.pv.planes.size(); ++i)
            vol.data()[i] = S(ps.pv.planes.data()[i]);
        Tensor<S> logits5 = unet3d_forward(u3_params, unet_cfg, vol);
        Tensor<S> logits4({1, logits5.dim(1), zs * side, side});
        std::copy_n(logits5.data(), logits5.size(), logits4.data());
        Tensor<std::uint8_t> pred = net::decode_labels(logits4);
        Tensor<std::uint8_t> truth_all({zs * side * side});
        std::copy_n(ps.labels.data(), ps.labels.size(), truth_all.data());
        detail::dice_tally<S>(pred, truth_all, t_u3);
    }

    const std::size_t side = test.empty() ? 32 : test[0].pv.planes.dim(1);
    Tensor<S> stack({bench_slices, side, side});
    Rng rng(7);
    for (std::size_t i = 0; i < stack.size(); ++i)
        stack.data()[i] = S(rng.uniform());
    BenchResult b_ours = bench_ours(ours_params, ours_cfg, stack, reps);
    BenchResult b_u2 = bench_unet2d(u2_params, unet_cfg, stack, reps);
    BenchResult b_u3 = bench_unet3d(u3_params, unet_cfg, stack, reps);

    std::vector<ModelRow> rows(3);
    rows[0] = {"unet2d", detail::tally_to_dice(t_u2), b_u2.median_seconds,
               b_u2.peak_bytes};
    rows[1] = {"unet3d", detail::tally_to_dice(t_u3), b_u3.median_seconds,
               b_u3.peak_bytes};
    rows[2] = {"ours", detail::tally_to_dice(t_ours), b_ours.median_seconds,
               b_ours.peak_bytes};
    return rows;
}

inline void write_compare_csv(const std::vector<ModelRow>& rows,
                              const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "model,dice_bg,dice_ggo,dice_high,seconds_16_slices,peak_bytes\n";
    for (const auto& r : rows)
        out << r.model << ',' << r.dice[0] << ',' << r.dice[1] << ',' << r.dice[2]
            << ',' << r.seconds << ',' << r.peak_bytes << '\n';
}

}  // namespace lungquant::bench
