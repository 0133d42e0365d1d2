#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <string>

#include "iisan/errors.hpp"
#include "iisan/io.hpp"
#include "iisan/model.hpp"
#include "iisan/sha256.hpp"

namespace iisan {

// Trainable parameters only; frozen weights are reproduced from the seeds.
// Layout (little-endian): magic "DPCP", u32 version, 32-byte config digest,
// u64 tensor count, then per tensor: u32 name length, name, u32 ndim,
// u64 dims, f64 values.
inline void save_checkpoint(const std::string& path, const ItemModel& model) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("checkpoint: cannot write " + path);
    f.write("DPCP", 4);
    write_u32(f, 1);
    auto digest = Sha256::digest("ckpt|" + model.config_digest());
    write_bytes(f, digest.data(), digest.size());
    const auto params = model.trainable_params();
    write_u64(f, params.size());
    for (const auto& p : params) {
        write_u32(f, static_cast<std::uint32_t>(p.name.size()));
        write_bytes(f, p.name.data(), p.name.size());
        write_u32(f, static_cast<std::uint32_t>(p.tensor.ndim()));
        for (auto d : p.tensor.shape()) write_u64(f, d);
        for (double v : p.tensor.values()) write_f64(f, v);
    }
    if (!f) throw DataError("checkpoint: write failed for " + path);
}

inline void load_checkpoint(const std::string& path, ItemModel& model) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("checkpoint: cannot open " + path);
    check_magic(f, "DPCP", "checkpoint");
    const auto version = read_u32(f, "checkpoint version");
    if (version != 1)
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    std::array<std::uint8_t, 32> digest{};
    read_bytes(f, digest.data(), digest.size(), "checkpoint digest");
    if (digest != Sha256::digest("ckpt|" + model.config_digest()))
        throw ConfigError("checkpoint: config digest mismatch, model was built differently");
    auto params = model.trainable_params();
    const auto count = read_u64(f, "checkpoint count");
    if (count != params.size())
        throw DataError("checkpoint: tensor count mismatch");
    for (auto& p : params) {
        const auto name_len = read_u32(f, "checkpoint name length");
        std::string name(name_len, '\0');
        read_bytes(f, name.data(), name_len, "checkpoint name");
        if (name != p.name)
            throw DataError("checkpoint: expected tensor " + p.name + ", found " + name);
        const auto ndim = read_u32(f, "checkpoint ndim");
        if (ndim != p.tensor.ndim()) throw DataError("checkpoint: rank mismatch for " + p.name);
        for (auto d : p.tensor.shape())
            if (read_u64(f, "checkpoint dim") != d)
                throw DataError("checkpoint: shape mismatch for " + p.name);
        for (auto& v : p.tensor.mutable_values()) v = read_f64(f, "checkpoint value");
    }
}

}  // namespace iisan
