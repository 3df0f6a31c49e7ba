#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "lungquant/core/errors.hpp"
#include "lungquant/core/tensor.hpp"

namespace lungquant::net {

template <class S>
struct ParamEntry {
    std::string name;
    Tensor<S> value;
    bool trainable = true;  // false for batch-norm running statistics
};

// Named tensors in a fixed registration order. Gradients and optimizer state
// are ParamSets with the same names/shapes, so everything lines up by index.
template <class S>
class ParamSet {
public:
    Tensor<S>& add(const std::string& name, const std::vector<std::size_t>& dims,
                   bool trainable = true) {
        if (index_.count(name)) throw DataError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, Tensor<S>(dims), trainable});
        return entries_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<S>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter: " + name);
        return entries_[it->second].value;
    }
    const Tensor<S>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter: " + name);
        return entries_[it->second].value;
    }

    std::size_t count() const { return entries_.size(); }
    ParamEntry<S>& entry(std::size_t i) { return entries_[i]; }
    const ParamEntry<S>& entry(std::size_t i) const { return entries_[i]; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    ParamSet zeros_like() const {
        ParamSet out;
        for (const auto& e : entries_) out.add(e.name, e.value.dims(), e.trainable);
        return out;
    }

    std::size_t scalar_count(bool trainable_only = true) const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (!trainable_only || e.trainable) n += e.value.size();
        return n;
    }

    void check_finite() const {
        for (const auto& e : entries_) e.value.check_finite(e.name.c_str());
    }

private:
    std::vector<ParamEntry<S>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Weight container: named tensors with shape + scalar-width headers, all
// little-endian, version-tagged. Round-trips bit-exactly.
namespace detail {
inline constexpr char kWeightsMagic[8] = {'L', 'Q', 'W', 'T', 'S', '\0', '\0', '\0'};

template <class T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
void read_pod(std::istream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace detail

template <class S>
void save_params(const ParamSet<S>& params, const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write weights file " + path.string());
    out.write(detail::kWeightsMagic, 8);
    detail::write_pod(out, std::uint32_t(1));          // version
    detail::write_pod(out, std::uint32_t(sizeof(S)));  // scalar width
    detail::write_pod(out, std::uint64_t(params.count()));
    for (const auto& e : params) {
        detail::write_pod(out, std::uint32_t(e.name.size()));
        out.write(e.name.data(), std::streamsize(e.name.size()));
        detail::write_pod(out, std::uint8_t(e.trainable));
        detail::write_pod(out, std::uint32_t(e.value.rank()));
        for (std::size_t d : e.value.dims()) detail::write_pod(out, std::uint64_t(d));
        out.write(reinterpret_cast<const char*>(e.value.data()),
                  std::streamsize(e.value.size() * sizeof(S)));
    }
    if (!out) throw DataError("short write to weights file " + path.string());
}

template <class S>
ParamSet<S> load_params(const std::filesystem::path& path) {
    static_assert(std::endian::native == std::endian::little);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read weights file " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, detail::kWeightsMagic))
        throw DataError("not a weights file: " + path.string());
    std::uint32_t version = 0, width = 0;
    std::uint64_t count = 0;
    detail::read_pod(in, version);
    detail::read_pod(in, width);
    detail::read_pod(in, count);
    if (version != 1)
        throw DataError("unsupported weights version in " + path.string());
    if (width != sizeof(S))
        throw DataError("weights scalar width mismatch in " + path.string());
    ParamSet<S> params;
    for (std::uint64_t t = 0; t < count; ++t) {
        std::uint32_t name_len = 0;
        detail::read_pod(in, name_len);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        std::uint8_t trainable = 0;
        detail::read_pod(in, trainable);
        std::uint32_t rank = 0;
        detail::read_pod(in, rank);
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) {
            std::uint64_t v = 0;
            detail::read_pod(in, v);
            d = std::size_t(v);
        }
        if (!in) throw DataError("truncated weights file " + path.string());
        Tensor<S>& value = params.add(name, dims, trainable != 0);
        in.read(reinterpret_cast<char*>(value.data()),
                std::streamsize(value.size() * sizeof(S)));
        if (!in) throw DataError("truncated weights file " + path.string());
    }
    return params;
}

}  // namespace lungquant::net
