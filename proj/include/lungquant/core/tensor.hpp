#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/membytes.hpp"

namespace lungquant {

// Dense row-major tensor, rank <= 5. Hot loops index through data() directly;
// at()/operator() are for setup and tests.
template <class S>
class Tensor {
public:
    using Storage = std::vector<S, membytes::TrackingAllocator<S>>;

    Tensor() = default;
    explicit Tensor(std::initializer_list<std::size_t> dims) { resize(dims); }
    explicit Tensor(const std::vector<std::size_t>& dims) { resize(dims); }

    void resize(std::initializer_list<std::size_t> dims) {
        resize(std::vector<std::size_t>(dims));
    }
    void resize(const std::vector<std::size_t>& dims) {
        dims_ = dims;
        data_.assign(count(dims), S(0));
    }

    static std::size_t count(const std::vector<std::size_t>& dims) {
        return std::accumulate(dims.begin(), dims.end(), std::size_t(1),
                               std::multiplies<>());
    }

    const std::vector<std::size_t>& dims() const { return dims_; }
    std::size_t dim(std::size_t i) const { return dims_.at(i); }
    std::size_t rank() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::size_t i) { return data_[i]; }
    const S& operator[](std::size_t i) const { return data_[i]; }

    S& at(std::size_t i0) { return data_[i0]; }
    S& at(std::size_t i0, std::size_t i1) { return data_[i0 * dims_[1] + i1]; }
    S& at(std::size_t i0, std::size_t i1, std::size_t i2) {
        return data_[(i0 * dims_[1] + i1) * dims_[2] + i2];
    }
    S& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
        return data_[((i0 * dims_[1] + i1) * dims_[2] + i2) * dims_[3] + i3];
    }
    const S& at(std::size_t i0) const { return data_[i0]; }
    const S& at(std::size_t i0, std::size_t i1) const { return data_[i0 * dims_[1] + i1]; }
    const S& at(std::size_t i0, std::size_t i1, std::size_t i2) const {
        return data_[(i0 * dims_[1] + i1) * dims_[2] + i2];
    }
    const S& at(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
        return data_[((i0 * dims_[1] + i1) * dims_[2] + i2) * dims_[3] + i3];
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(S(0)); }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    bool all_finite() const {
        for (const S& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void check_finite(const char* where) const {
        if (!all_finite())
            throw NumericError(std::string("non-finite values in ") + where);
    }

private:
    std::vector<std::size_t> dims_;
    Storage data_;
};

}  // namespace lungquant
