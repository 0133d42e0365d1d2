#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "iisan/errors.hpp"

namespace iisan {

// Little-endian binary writers/readers (host is assumed little-endian;
// enforced with a static check on the builds we target).
static_assert(std::endian::native == std::endian::little, "little-endian host required");

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_pod(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_pod(os, v); }
inline void write_f64(std::ostream& os, double v) { write_pod(os, v); }

inline void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) throw DataError(std::string("unexpected end of file reading ") + what);
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v;
    read_bytes(is, &v, sizeof(T), what);
    return v;
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    return read_pod<std::uint32_t>(is, what);
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    return read_pod<std::uint64_t>(is, what);
}
inline double read_f64(std::istream& is, const char* what) { return read_pod<double>(is, what); }

inline void check_magic(std::istream& is, const char* magic, const char* what) {
    char buf[4];
    read_bytes(is, buf, 4, what);
    if (std::memcmp(buf, magic, 4) != 0)
        throw DataError(std::string("bad magic in ") + what + ", expected " + magic);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f << content;
}

}  // namespace iisan
