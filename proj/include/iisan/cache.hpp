#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "iisan/backbone.hpp"
#include "iisan/data.hpp"
#include "iisan/errors.hpp"
#include "iisan/io.hpp"
#include "iisan/sha256.hpp"

namespace iisan {

// Digest binding a cache file to the encoder pair that produced it.
inline std::array<std::uint8_t, 32> cache_digest(const EncoderConfig& text,
                                                 const EncoderConfig& image) {
    return Sha256::digest("cache|" + text.digest_string() + "||" + image.digest_string());
}

inline std::string cache_digest_hex(const EncoderConfig& text, const EncoderConfig& image) {
    return Sha256::hex_digest("cache|" + text.digest_string() + "||" + image.digest_string());
}

// Persistent map (item id, modality) -> HiddenStack.
//
// Layout (little-endian): magic "DPHS", u32 version, 32-byte config digest,
// u32 L, u32 d, u32 count, u32 value width (8 or 4), then count index entries
// (u32 item id, u32 modality, u64 payload offset) and the raw values.
class CacheStore {
public:
    static constexpr std::uint32_t kVersion = 1;

    static void build(const FrozenEncoder& text_enc, const FrozenEncoder& image_enc,
                      const std::vector<Item>& items, const std::string& path,
                      std::size_t value_width = 8) {
        if (value_width != 4 && value_width != 8)
            throw CacheError("cache: value width must be 4 or 8 bytes");
        const std::size_t L = text_enc.config().layers;
        const std::size_t d = text_enc.config().hidden_dim;
        if (image_enc.config().layers != L || image_enc.config().hidden_dim != d)
            throw ConfigError("cache: encoder layer/dim mismatch between modalities");
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw CacheError("cache: cannot write " + path);
        f.write("DPHS", 4);
        write_u32(f, kVersion);
        auto digest = cache_digest(text_enc.config(), image_enc.config());
        write_bytes(f, digest.data(), digest.size());
        write_u32(f, static_cast<std::uint32_t>(L));
        write_u32(f, static_cast<std::uint32_t>(d));
        write_u32(f, static_cast<std::uint32_t>(items.size() * 2));
        write_u32(f, static_cast<std::uint32_t>(value_width));

        const std::size_t record_values = (L + 1) * d;
        std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> index;
        std::uint64_t offset = 0;
        for (const auto& item : items) {
            for (std::uint32_t mod = 0; mod < 2; ++mod) {
                auto key = std::make_pair(item.id, mod);
                if (index.count(key)) throw CacheError("cache: duplicate item id " +
                                                       std::to_string(item.id));
                index[key] = offset;
                offset += record_values * value_width;
            }
        }
        for (const auto& [key, off] : index) {
            write_u32(f, key.first);
            write_u32(f, key.second);
            write_u64(f, off);
        }
        std::vector<char> payload(offset);
        for (const auto& item : items) {
            const HiddenStack text_hs = text_enc.encode_tokens(item.tokens);
            const HiddenStack image_hs = image_enc.encode_patches(item.patches);
            write_record(payload, index.at({item.id, 0}), text_hs, value_width);
            write_record(payload, index.at({item.id, 1}), image_hs, value_width);
        }
        write_bytes(f, payload.data(), payload.size());
        if (!f) throw CacheError("cache: write failed for " + path);
    }

    static CacheStore open(const std::string& path, const EncoderConfig& text,
                           const EncoderConfig& image) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CacheError("cache: cannot open " + path);
        CacheStore cs;
        {
            char buf[4];
            read_bytes(f, buf, 4, "cache magic");
            if (std::memcmp(buf, "DPHS", 4) != 0)
                throw CacheError("cache: bad magic in " + path);
        }
        const auto version = read_u32(f, "cache version");
        if (version != kVersion)
            throw CacheError("cache: unsupported version " + std::to_string(version));
        std::array<std::uint8_t, 32> digest{};
        read_bytes(f, digest.data(), digest.size(), "cache digest");
        if (digest != cache_digest(text, image))
            throw CacheError("cache: config drift, digest does not match live encoder configs");
        cs.layers_ = read_u32(f, "cache L");
        cs.dim_ = read_u32(f, "cache d");
        const auto count = read_u32(f, "cache count");
        cs.width_ = read_u32(f, "cache width");
        if (cs.width_ != 4 && cs.width_ != 8) throw CacheError("cache: bad value width");
        for (std::uint32_t i = 0; i < count; ++i) {
            const auto id = read_u32(f, "cache key id");
            const auto mod = read_u32(f, "cache key modality");
            const auto off = read_u64(f, "cache offset");
            cs.index_[{id, mod}] = off;
        }
        const std::size_t payload_bytes =
            static_cast<std::size_t>(count) * (cs.layers_ + 1) * cs.dim_ * cs.width_;
        cs.payload_.resize(payload_bytes);
        read_bytes(f, cs.payload_.data(), payload_bytes, "cache payload");
        return cs;
    }

    HiddenStack get(std::uint32_t item_id, Modality modality) const {
        const std::uint32_t mod = modality == Modality::text ? 0 : 1;
        auto it = index_.find({item_id, mod});
        if (it == index_.end())
            throw CacheError("cache miss: item " + std::to_string(item_id) + " (" +
                             modality_name(modality) + ")");
        HiddenStack hs;
        const char* p = payload_.data() + it->second;
        hs.layers.resize(layers_ + 1);
        for (auto& layer : hs.layers) {
            layer.resize(dim_);
            for (auto& v : layer) {
                if (width_ == 8) {
                    double dv;
                    std::memcpy(&dv, p, 8);
                    v = dv;
                    p += 8;
                } else {
                    float fv;
                    std::memcpy(&fv, p, 4);
                    v = static_cast<double>(fv);
                    p += 4;
                }
            }
        }
        return hs;
    }

    std::size_t count() const { return index_.size(); }
    std::size_t layers() const { return layers_; }
    std::size_t dim() const { return dim_; }
    std::size_t value_width() const { return width_; }

    // weight of the resident cache payload, for memory accounting
    std::size_t payload_bytes() const { return payload_.size(); }

    static std::size_t expected_file_bytes(std::size_t n_items, std::size_t L, std::size_t d,
                                           std::size_t width) {
        const std::size_t header = 4 + 4 + 32 + 4 * 4;
        const std::size_t index = n_items * 2 * (4 + 4 + 8);
        const std::size_t payload = n_items * 2 * (L + 1) * d * width;
        return header + index + payload;
    }

private:
    static void write_record(std::vector<char>& payload, std::uint64_t offset,
                             const HiddenStack& hs, std::size_t width) {
        char* p = payload.data() + offset;
        for (const auto& layer : hs.layers)
            for (double v : layer) {
                if (width == 8) {
                    std::memcpy(p, &v, 8);
                    p += 8;
                } else {
                    const float fv = static_cast<float>(v);
                    std::memcpy(p, &fv, 4);
                    p += 4;
                }
            }
    }

    std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> index_;
    std::vector<char> payload_;
    std::size_t layers_ = 0, dim_ = 0, width_ = 8;
};

}  // namespace iisan
