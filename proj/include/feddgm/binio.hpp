#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "feddgm/error.hpp"

namespace feddgm::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError(what + ": truncated");
    return v;
}

inline void put_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5], const std::string& what) {
    char buf[4];
    if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0)
        throw FormatError(what + ": bad magic, expected " + std::string(magic, 4));
}

inline void put_doubles(std::ostream& out, const std::vector<double>& v) {
    put<std::uint64_t>(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> get_doubles(std::istream& in, const std::string& what) {
    const auto n = get<std::uint64_t>(in, what);
    if (n > (std::uint64_t(1) << 34)) throw FormatError(what + ": implausible length");
    std::vector<double> v(n);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
        throw FormatError(what + ": payload shorter than declared length");
    return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, const std::string& what) {
    const auto n = get<std::uint32_t>(in, what);
    if (n > (1u << 20)) throw FormatError(what + ": implausible string length");
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) throw FormatError(what + ": truncated string");
    return s;
}

} // namespace feddgm::binio
