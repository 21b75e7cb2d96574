#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "ew/binary_io.hpp"
#include "ew/tensor.hpp"

namespace ew {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline std::vector<Tensor> tensors_of(const ParamList& ps) {
    std::vector<Tensor> out;
    for (const auto& p : ps) out.push_back(p.tensor);
    return out;
}

inline double grad_norm(const ParamList& ps) {
    double s = 0.0;
    for (const auto& p : ps)
        for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
}

inline std::size_t param_count(const ParamList& ps) {
    std::size_t n = 0;
    for (const auto& p : ps) n += p.tensor.numel();
    return n;
}

/// rank u32, extents u32, f64 payload.
inline void write_tensor(std::ostream& os, const Tensor& t) {
    io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(e));
    io::write_f64s(os, t.data());
}

inline Tensor read_tensor(std::istream& is) {
    const auto rank = io::read_u32(is);
    if (rank > 8) throw FormatError("tensor rank " + std::to_string(rank) + " is implausible");
    Shape s(rank);
    std::size_t n = 1;
    for (auto& e : s) {
        e = io::read_u32(is);
        n *= e;
    }
    return Tensor::from(std::move(s), io::read_f64s(is, n));
}

/// count u32, then per param: name, rank u32, extents u32, f64 payload.
inline void write_params(std::ostream& os, const ParamList& ps) {
    io::write_u32(os, static_cast<std::uint32_t>(ps.size()));
    for (const auto& p : ps) {
        io::write_string(os, p.name);
        io::write_u32(os, static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto e : p.tensor.shape()) io::write_u32(os, static_cast<std::uint32_t>(e));
        io::write_f64s(os, p.tensor.data());
    }
}

/// Reads values into an existing, identically-shaped parameter list.
inline void read_params_into(std::istream& is, ParamList& ps) {
    const auto n = io::read_u32(is);
    if (n != ps.size()) throw FormatError("parameter count mismatch: file has " + std::to_string(n));
    for (auto& p : ps) {
        const auto name = io::read_string(is);
        if (name != p.name) throw FormatError("parameter name mismatch: " + name + " vs " + p.name);
        const auto rank = io::read_u32(is);
        Shape s(rank);
        for (auto& e : s) e = io::read_u32(is);
        if (s != p.tensor.shape()) throw FormatError("parameter shape mismatch for " + name);
        auto vals = io::read_f64s(is, p.tensor.numel());
        auto dst = p.tensor.mutable_data();
        std::copy(vals.begin(), vals.end(), dst.begin());
    }
}

}  // namespace ew
