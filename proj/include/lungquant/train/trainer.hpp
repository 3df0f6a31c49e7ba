#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/rng.hpp"
#include "lungquant/net/dualnet.hpp"
#include "lungquant/preprocess.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/train/losses.hpp"
#include "lungquant/train/optim.hpp"
#include "lungquant/volio.hpp"

namespace lungquant::train {

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double lr = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> records;
    std::vector<std::size_t> lr_reductions;  // epochs where the lr was cut
    std::size_t best_epoch = 0;
    double best_val_loss = std::numeric_limits<double>::infinity();
    // cohort indices whose windows fed gradient steps (sorted, unique)
    std::vector<std::size_t> trained_patients;
};

inline void write_history_csv(const TrainHistory& h, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "epoch,train_loss,val_loss,lr\n";
    for (const auto& r : h.records)
        out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr
            << '\n';
}

// One patient's preprocessed stack plus its target-space labels.
struct PatientSamples {
    std::size_t cohort_index = 0;
    prep::PreprocessedVolume pv;
    Tensor<std::uint8_t> labels;  // (slices, S, S)
};

template <class S>
struct FoldOutput {
    net::ParamSet<S> params;  // lowest-validation-loss snapshot
    TrainHistory history;
};

inline Tensor<std::uint8_t> label_plane(const Tensor<std::uint8_t>& labels,
                                        std::size_t z) {
    const std::size_t h = labels.dim(1), w = labels.dim(2);
    Tensor<std::uint8_t> plane({h, w});
    std::copy_n(labels.data() + z * h * w, h * w, plane.data());
    return plane;
}

namespace detail {

// splitmix64 finalizer, chained so (seed, epoch, index) gives an independent
// stream per window per epoch
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    auto fin = [](std::uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    };
    return fin(fin(fin(a) ^ b) ^ c);
}

struct WindowRef {
    std::size_t patient = 0;  // index into the samples vector
    std::size_t slice = 0;
};

inline std::vector<WindowRef> all_windows(const std::vector<PatientSamples>& ps) {
    std::vector<WindowRef> w;
    for (std::size_t p = 0; p < ps.size(); ++p)
        for (std::size_t z = 0; z < ps[p].pv.planes.dim(0); ++z)
            w.push_back({p, z});
    return w;
}

// assembles (B, L, S, S) windows and (B, S, S) targets for one batch; windows
// are augmented when aug_base != 0 is passed as the per-epoch seed source
template <class S>
void fill_batch(const std::vector<PatientSamples>& ps,
                const std::vector<WindowRef>& refs, std::size_t begin,
                std::size_t count, std::size_t radius, bool augmented,
                std::uint64_t seed, std::size_t epoch, Tensor<S>& batch,
                Tensor<std::uint8_t>& target) {
    const std::size_t side = ps[refs[begin].patient].pv.planes.dim(1);
    const std::size_t len = 2 * radius + 1;
    batch.resize({count, len, side, side});
    target.resize({count, side, side});
    for (std::size_t b = 0; b < count; ++b) {
        const WindowRef& ref = refs[begin + b];
        prep::SliceWindow win = prep::window_at(ps[ref.patient].pv, ref.slice, radius);
        Tensor<std::uint8_t> lab = label_plane(ps[ref.patient].labels, ref.slice);
        if (augmented) {
            Rng rng(mix_seed(seed, epoch, begin + b));
            auto aug = prep::augment(win, lab, prep::AugmentParams::sample(rng));
            win = std::move(aug.first);
            lab = std::move(aug.second);
        }
        for (std::size_t i = 0; i < win.pixels.size(); ++i)
            batch.data()[b * win.pixels.size() + i] = S(win.pixels.data()[i]);
        std::copy_n(lab.data(), lab.size(), target.data() + b * lab.size());
    }
}

template <class S>
double mean_loss(std::vector<PatientSamples> const& ps,
                 const std::vector<WindowRef>& refs, std::size_t radius,
                 const net::NetworkConfig& cfg, net::ParamSet<S>& params,
                 LossKind kind, std::size_t batch_size) {
    double total = 0;
    Tensor<S> batch;
    Tensor<std::uint8_t> target;
    net::ForwardOptions<S> opts;
    opts.mode = net::Mode::kEval;
    for (std::size_t at = 0; at < refs.size(); at += batch_size) {
        const std::size_t n = std::min(batch_size, refs.size() - at);
        fill_batch(ps, refs, at, n, radius, false, 0, 0, batch, target);
        auto out = net::dual_forward(params, cfg, batch, opts, nullptr);
        total += double(loss_forward<S>(kind, out.s_out, target).total) * double(n);
    }
    return total / double(refs.size());
}

}  // namespace detail

// Core loop over preprocessed samples. Each epoch shuffles the window list,
// applies a freshly sampled augmentation to every training window, takes SGD
// steps per batch, then measures un-augmented validation loss to drive the
// plateau schedule. Returns the parameters from the best validation epoch.
template <class S>
FoldOutput<S> train_windows(const std::vector<PatientSamples>& train_set,
                            const std::vector<PatientSamples>& val_set,
                            const net::NetworkConfig& net_cfg,
                            const TrainConfig& cfg) {
    if (train_set.empty() || val_set.empty())
        throw DataError("training and validation sets must be non-empty");
    const std::size_t radius = net_cfg.context_radius();

    FoldOutput<S> out;
    out.params = net::init_dual_params<S>(net_cfg, cfg.seed);
    net::ParamSet<S> best = out.params;
    net::ParamSet<S> velocity = out.params.zeros_like();

    std::vector<detail::WindowRef> train_refs = detail::all_windows(train_set);
    const std::vector<detail::WindowRef> val_refs = detail::all_windows(val_set);
    PlateauState sched = make_plateau(cfg.lr0);

    for (const auto& p : train_set)
        out.history.trained_patients.push_back(p.cohort_index);
    std::sort(out.history.trained_patients.begin(), out.history.trained_patients.end());

    Tensor<S> batch;
    Tensor<std::uint8_t> target;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs && !sched.stop; ++epoch) {
        Rng order_rng(detail::mix_seed(cfg.seed, epoch, 0x0e11));
        order_rng.shuffle(train_refs);

        double train_loss = 0;
        net::ForwardOptions<S> opts;
        opts.mode = net::Mode::kTrain;
        for (std::size_t at = 0; at < train_refs.size(); at += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, train_refs.size() - at);
            detail::fill_batch(train_set, train_refs, at, n, radius, true, cfg.seed,
                               epoch, batch, target);
            try {
                net::NetTrace<S> trace;
                auto fwd = net::dual_forward(out.params, net_cfg, batch, opts, &trace);
                Tensor<S> d_logits;
                LossValue<S> lv =
                    loss_forward<S>(cfg.loss_kind, fwd.s_out, target, &d_logits);
                train_loss += double(lv.total) * double(n);
                net::ParamSet<S> grads =
                    net::dual_backward(out.params, net_cfg, trace, d_logits);
                sgd_step(out.params, grads, velocity, S(sched.lr), S(cfg.momentum),
                         S(cfg.weight_decay));
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                                   std::to_string(at / cfg.batch_size) + ": " +
                                   e.what());
            }
        }
        train_loss /= double(train_refs.size());

        const double val_loss = detail::mean_loss(val_set, val_refs, radius, net_cfg,
                                                  out.params, cfg.loss_kind,
                                                  cfg.batch_size);
        out.history.records.push_back({epoch, train_loss, val_loss, sched.lr});
        if (val_loss < out.history.best_val_loss) {
            out.history.best_val_loss = val_loss;
            out.history.best_epoch = epoch;
            best = out.params;
        }

        const double lr_before = sched.lr;
        plateau_update(sched, val_loss, cfg.plateau_factor, cfg.plateau_patience,
                       cfg.stop_lr);
        if (sched.lr != lr_before) out.history.lr_reductions.push_back(epoch);
    }
    out.params = std::move(best);
    return out;
}

inline PatientSamples load_patient(const volio::DatasetRecord& rec,
                                   std::size_t cohort_index,
                                   const prep::PrepOptions& prep_opts) {
    PatientSamples ps;
    ps.cohort_index = cohort_index;
    volio::CtVolume vol = volio::load_volume(rec.volume_path);
    ps.pv = prep::preprocess_volume(vol, prep_opts);
    volio::LabelMask mask = volio::load_mask(rec.mask_path);
    ps.labels = prep::preprocess_labels(mask, ps.pv.crop_box, prep_opts.target_size);
    return ps;
}

template <class S>
FoldOutput<S> train_fold(const FoldSplit& split, const volio::Dataset& data,
                         const net::NetworkConfig& net_cfg, const TrainConfig& cfg,
                         const prep::PrepOptions& prep_opts) {
    std::vector<PatientSamples> train_set, val_set;
    for (std::size_t i : split.train)
        train_set.push_back(load_patient(data.records.at(i), i, prep_opts));
    for (std::size_t i : split.val)
        val_set.push_back(load_patient(data.records.at(i), i, prep_opts));
    return train_windows<S>(train_set, val_set, net_cfg, cfg);
}

// Full-volume inference: preprocess, predict every slice, map labels back to
// source geometry. The returned mask has no lung plane (the model does not
// segment lungs).
template <class S>
volio::LabelMask predict_volume(net::ParamSet<S>& params,
                                const net::NetworkConfig& net_cfg,
                                const volio::CtVolume& volume,
                                const prep::PrepOptions& prep_opts) {
    prep::PreprocessedVolume pv = prep::preprocess_volume(volume, prep_opts);
    const std::size_t zs = pv.planes.dim(0), side = pv.planes.dim(1);
    Tensor<std::uint8_t> pred({zs, side, side});
    for (std::size_t z = 0; z < zs; ++z) {
        prep::SliceWindow win = prep::window_at(pv, z, net_cfg.context_radius());
        Tensor<S> input({win.pixels.dim(0), side, side});
        for (std::size_t i = 0; i < win.pixels.size(); ++i)
            input.data()[i] = S(win.pixels.data()[i]);
        Tensor<std::uint8_t> plane = net::predict_slice(params, net_cfg, input);
        std::copy_n(plane.data(), plane.size(), pred.data() + z * side * side);
    }
    return quant::map_prediction_to_source(pred, pv.crop_box, pv.source_shape,
                                           volume.spacing, volume.patient_id);
}

struct CrossValResult {
    std::vector<FoldSplit> folds;
    std::vector<std::filesystem::path> model_files;
    std::vector<std::filesystem::path> history_files;
    // prediction mask path per cohort index, each produced by the one fold
    // holding that patient in its test set
    std::vector<std::filesystem::path> prediction_files;
    std::vector<TrainHistory> histories;
};

// 5-fold protocol: train one model per fold, save fold{k}.weights, and write
// each test patient's predicted mask (lung plane copied from the reference
// mask so burden stays computable downstream).
template <class S>
CrossValResult cross_validate(const volio::Dataset& data,
                              const net::NetworkConfig& net_cfg,
                              const TrainConfig& cfg,
                              const prep::PrepOptions& prep_opts,
                              const std::filesystem::path& out_dir,
                              std::size_t k = 5,
                              std::size_t val_size = kDefaultValSize) {
    std::filesystem::create_directories(out_dir);
    CrossValResult res;
    res.folds = make_folds(data.records.size(), k, val_size, cfg.seed);
    res.prediction_files.resize(data.records.size());

    for (const FoldSplit& split : res.folds) {
        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = detail::mix_seed(cfg.seed, split.fold_index, 0xf01d);
        FoldOutput<S> trained = train_fold<S>(split, data, net_cfg, fold_cfg,
                                              prep_opts);

        const auto model_path =
            out_dir / ("fold" + std::to_string(split.fold_index) + ".weights");
        net::save_params(trained.params, model_path);
        res.model_files.push_back(model_path);

        const auto hist_path =
            out_dir / ("fold" + std::to_string(split.fold_index) + "_history.csv");
        write_history_csv(trained.history, hist_path);
        res.history_files.push_back(hist_path);
        res.histories.push_back(std::move(trained.history));

        for (std::size_t i : split.test) {
            const volio::DatasetRecord& rec = data.records.at(i);
            volio::CtVolume vol = volio::load_volume(rec.volume_path);
            volio::LabelMask pred =
                predict_volume(trained.params, net_cfg, vol, prep_opts);
            volio::LabelMask truth = volio::load_mask(rec.mask_path);
            pred.lung = truth.lung;
            const auto pred_path = out_dir / ("pred_" + rec.patient_id + ".mask");
            volio::save_mask(pred, pred_path);
            res.prediction_files.at(i) = pred_path;
        }
    }
    return res;
}

}  // namespace lungquant::train
