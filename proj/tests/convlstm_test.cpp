#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "lungquant/core/errors.hpp"
#include "lungquant/core/rng.hpp"
#include "lungquant/net/convlstm.hpp"
#include "test_util.hpp"

using namespace lungquant;
using testutil::contains;
using testutil::fd_slope;
using testutil::message_of;
using testutil::rel_gap;

namespace {

template <class S>
void fill_normal(Tensor<S>& t, Rng& rng, double sd = 1.0) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = S(rng.normal(0.0, sd));
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST_CASE("zero gate kernels leave a zero state at zero") {
    Rng rng(61);
    Tensor<double> x({1, 2, 4, 4}), h({1, 3, 4, 4}), c({1, 3, 4, 4});
    fill_normal(x, rng);
    h.zero();
    c.zero();
    Tensor<double> w({12, 5, 3, 3}), b({12});
    w.zero();
    b.zero();

    auto [h1, c1] = net::conv_lstm_step(x, h, c, w, b);
    for (std::size_t i = 0; i < h1.size(); ++i) {
        CHECK(h1[i] == 0.0);  // h' = sigmoid(0) * tanh(c'), c' = 0
        CHECK(c1[i] == 0.0);
    }
}

TEST_CASE("zero gate kernels halve the carried cell state") {
    Tensor<double> x({1, 1, 2, 2}), h({1, 2, 2, 2}), c({1, 2, 2, 2});
    x.fill(0.7);
    h.zero();
    for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.3 * double(i + 1);
    Tensor<double> w({8, 3, 3, 3}), b({8});
    w.zero();
    b.zero();

    auto [h1, c1] = net::conv_lstm_step(x, h, c, w, b);
    for (std::size_t i = 0; i < c.size(); ++i) {
        // all gate pre-activations are 0: i = f = o = 0.5, g = 0
        CHECK(c1[i] == 0.5 * c[i]);
        CHECK(h1[i] == 0.5 * std::tanh(0.5 * c[i]));
    }
}

TEST_CASE("gate channel blocks are packed input, forget, output, candidate") {
    Tensor<double> x({1, 1, 2, 2}), h({1, 1, 2, 2}), c({1, 1, 2, 2});
    x.fill(0.0);
    h.zero();
    c.fill(5.0);
    Tensor<double> w({4, 2, 3, 3}), b({4});
    w.zero();
    // saturate input open, forget closed, output neutral, candidate high
    b[0] = 20.0;
    b[1] = -20.0;
    b[2] = 0.0;
    b[3] = 20.0;

    auto [h1, c1] = net::conv_lstm_step(x, h, c, w, b);
    for (std::size_t i = 0; i < c1.size(); ++i) {
        CHECK(c1[i] == doctest::Approx(1.0).epsilon(1e-6));  // 0*5 + 1*tanh(20)
        CHECK(h1[i] == doctest::Approx(0.5 * std::tanh(1.0)).epsilon(1e-6));
    }
}

TEST_CASE("sequence forward equals repeated single steps from a zero state") {
    Rng rng(62);
    const std::size_t T = 4;
    std::vector<Tensor<double>> xs(T);
    for (auto& x : xs) {
        x.resize({2, 2, 3, 3});
        fill_normal(x, rng);
    }
    Tensor<double> w({8, 4, 3, 3}), b({8});
    fill_normal(w, rng, 0.3);
    fill_normal(b, rng, 0.1);

    Tensor<double> h({2, 2, 3, 3}), c({2, 2, 3, 3});
    h.zero();
    c.zero();
    for (std::size_t t = 0; t < T; ++t) {
        auto [hn, cn] = net::conv_lstm_step(xs[t], h, c, w, b);
        h = std::move(hn);
        c = std::move(cn);
    }

    Tensor<double> hf = net::convlstm_forward<double>(xs, w, b, nullptr);
    REQUIRE(hf.same_shape(h));
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(hf[i] == h[i]);

    net::LstmTrace<double> trace;
    Tensor<double> ht = net::convlstm_forward(xs, w, b, &trace);
    CHECK(trace.steps.size() == T);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(ht[i] == h[i]);
}

TEST_CASE("backpropagation through time agrees with finite differences") {
    Rng rng(63);
    const std::size_t T = 3;
    std::vector<Tensor<double>> xs(T);
    for (auto& x : xs) {
        x.resize({1, 2, 4, 4});
        fill_normal(x, rng);
    }
    Tensor<double> w({8, 4, 3, 3}), b({8});
    fill_normal(w, rng, 0.3);
    fill_normal(b, rng, 0.1);
    Tensor<double> probe({1, 2, 4, 4});
    fill_normal(probe, rng);

    auto value = [&] { return dot(net::convlstm_forward<double>(xs, w, b, nullptr), probe); };

    net::LstmTrace<double> trace;
    net::convlstm_forward(xs, w, b, &trace);
    Tensor<double> dw(w.dims()), db(b.dims());
    dw.zero();
    db.zero();
    std::vector<Tensor<double>> dxs = net::convlstm_backward(trace, w, probe, dw, db);
    REQUIRE(dxs.size() == T);

    for (std::size_t i = 0; i < w.size(); i += 7)
        CHECK(rel_gap(dw[i], fd_slope(w[i], value)) < 1e-4);
    for (std::size_t i = 0; i < b.size(); ++i)
        CHECK(rel_gap(db[i], fd_slope(b[i], value)) < 1e-4);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < xs[t].size(); i += 5)
            CHECK(rel_gap(dxs[t][i], fd_slope(xs[t][i], value)) < 1e-4);
}

TEST_CASE("non-finite cell input is rejected") {
    Tensor<double> x({1, 1, 2, 2}), h({1, 1, 2, 2}), c({1, 1, 2, 2});
    x.zero();
    h.zero();
    c.zero();
    x[2] = std::numeric_limits<double>::quiet_NaN();
    Tensor<double> w({4, 2, 3, 3}), b({4});
    w.zero();
    b.zero();
    CHECK(contains(
        message_of<NumericError>([&] { net::conv_lstm_step(x, h, c, w, b); }),
        "conv_lstm_step input"));
}
