#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/rng.hpp"
#include "lungquant/net/params.hpp"
#include "lungquant/train/losses.hpp"

namespace lungquant::train {

struct TrainConfig {
    double lr0 = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-6;
    std::size_t batch_size = 32;
    double plateau_factor = 0.1;
    std::size_t plateau_patience = 10;
    double stop_lr = 1e-7;
    LossKind loss_kind = LossKind::kRmi;
    std::uint64_t seed = 0;
    std::size_t max_epochs = 500;
};

// SGD with momentum and decoupled-from-nothing L2 (decay folded into the
// gradient before the velocity update):
//   v <- momentum*v + (g + wd*p);  p <- p - lr*v
// Non-trainable entries are skipped.
template <class S>
void sgd_step(net::ParamSet<S>& params, const net::ParamSet<S>& grads,
              net::ParamSet<S>& velocity, S lr, S momentum, S weight_decay) {
    for (auto& e : params) {
        if (!e.trainable) continue;
        const Tensor<S>& g = grads.at(e.name);
        Tensor<S>& v = velocity.at(e.name);
        if (g.size() != e.value.size() || v.size() != e.value.size())
            throw DataError("gradient/velocity shape mismatch for " + e.name);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const S gi = g.data()[i];
            if (!std::isfinite(gi))
                throw NumericError("non-finite gradient for " + e.name);
            const S step = gi + weight_decay * e.value.data()[i];
            v.data()[i] = momentum * v.data()[i] + step;
            e.value.data()[i] -= lr * v.data()[i];
        }
    }
}

// Reduce-on-plateau: after `patience` consecutive epochs without a strict
// improvement of the monitored value, multiply the lr by `factor` and restart
// the count. Training stops once the lr reaches `stop_lr`; the comparison
// carries a one-ppb relative slack because four exact x0.1 steps from 1e-3
// land two ulps above 1e-7 in binary floating point.
struct PlateauState {
    double lr = 0;
    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    bool stop = false;
};

inline PlateauState make_plateau(double lr0) {
    PlateauState s;
    s.lr = lr0;
    return s;
}

inline void plateau_update(PlateauState& s, double value, double factor,
                           std::size_t patience, double stop_lr) {
    if (s.stop) return;
    if (value < s.best) {
        s.best = value;
        s.since_best = 0;
        return;
    }
    if (++s.since_best >= patience) {
        s.lr *= factor;
        s.since_best = 0;
        if (s.lr <= stop_lr * (1.0 + 1e-9)) s.stop = true;
    }
}

// k-fold split over patient indices: shuffled once (seeded Fisher-Yates),
// test folds take near-equal contiguous runs (the first n%k folds get one
// extra), the first val_size remaining indices become validation and the rest
// training.
struct FoldSplit {
    std::size_t fold_index = 0;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

inline constexpr std::size_t kDefaultValSize = 32;

inline std::vector<FoldSplit> make_folds(std::size_t n, std::size_t k,
                                         std::size_t val_size, std::uint64_t seed) {
    if (k < 2 || n < k) throw DataError("fold count must satisfy 2 <= k <= n");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);

    std::vector<FoldSplit> folds(k);
    const std::size_t base = n / k, extra = n % k;
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t len = base + (f < extra ? 1 : 0);
        folds[f].fold_index = f;
        folds[f].test.assign(order.begin() + start, order.begin() + start + len);
        std::vector<std::size_t> rest;
        rest.reserve(n - len);
        rest.insert(rest.end(), order.begin(), order.begin() + start);
        rest.insert(rest.end(), order.begin() + start + len, order.end());
        if (rest.size() <= val_size)
            throw DataError("not enough patients to form a training set");
        folds[f].val.assign(rest.begin(), rest.begin() + val_size);
        folds[f].train.assign(rest.begin() + val_size, rest.end());
        start += len;
    }
    return folds;
}

}  // namespace lungquant::train
