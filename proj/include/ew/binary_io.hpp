#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ew/errors.hpp"

// Little-endian primitives shared by every on-disk format (EWKV, EWNT, EWFU, EWST, stream files).
namespace ew::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
    std::array<char, 4> buf{};
    is.read(buf.data(), 4);
    if (!is || std::string_view(buf.data(), 4) != magic)
        throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
}

template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("unexpected end of file");
    return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_pod(os, v); }
inline std::uint32_t read_u32(std::istream& is) { return read_pod<std::uint32_t>(is); }
inline std::uint64_t read_u64(std::istream& is) { return read_pod<std::uint64_t>(is); }

inline void write_f64s(std::ostream& os, std::span<const double> xs) {
    os.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size_bytes()));
}

inline std::vector<double> read_f64s(std::istream& is, std::size_t n) {
    std::vector<double> out(n);
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw FormatError("truncated f64 payload");
    return out;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const auto n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw FormatError("truncated string");
    return s;
}

/// FNV-1a 64; used for config hashes and chunk fingerprints.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (auto b : bytes) {
        h ^= static_cast<std::uint64_t>(b);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s) { return fnv1a(std::as_bytes(std::span(s.data(), s.size()))); }

inline std::uint64_t fnv1a(std::span<const double> xs) { return fnv1a(std::as_bytes(xs)); }

}  // namespace ew::io
