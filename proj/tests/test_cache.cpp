#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iisan/cache.hpp"
#include "iisan/model.hpp"
#include "iisan/rng.hpp"

using namespace iisan;

namespace {

EncoderConfig text_cfg() {
    EncoderConfig c;
    c.modality = Modality::text;
    c.layers = 2;
    c.hidden_dim = 8;
    c.heads = 2;
    c.seq_len = 4;
    c.vocab_or_patch_dim = 32;
    c.seed = 13;
    return c;
}

EncoderConfig image_cfg() {
    EncoderConfig c = text_cfg();
    c.modality = Modality::image;
    c.seq_len = 3;
    c.vocab_or_patch_dim = 5;
    return c;
}

std::vector<Item> sample_items(std::size_t n) {
    Rng rng(99);
    std::vector<Item> items;
    for (std::size_t i = 0; i < n; ++i) {
        Item it;
        it.id = static_cast<std::uint32_t>(i + 1);
        for (std::size_t t = 0; t < 4; ++t) it.tokens.push_back(rng.uniform_index(32));
        it.patches = Tensor::randn({3, 5}, rng, 1.0);
        items.push_back(std::move(it));
    }
    return items;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<char> file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("cache builds are byte-identical and sized as documented") {
    FrozenEncoder text(text_cfg()), image(image_cfg());
    auto items = sample_items(6);
    const std::string pa = temp_path("cache_a.bin"), pb = temp_path("cache_b.bin");
    CacheStore::build(text, image, items, pa);
    CacheStore::build(text, image, items, pb);
    CHECK(file_bytes(pa) == file_bytes(pb));
    CHECK(std::filesystem::file_size(pa) ==
          CacheStore::expected_file_bytes(items.size(), 2, 8, 8));

    const std::string p4 = temp_path("cache_w4.bin");
    CacheStore::build(text, image, items, p4, 4);
    CHECK(std::filesystem::file_size(p4) ==
          CacheStore::expected_file_bytes(items.size(), 2, 8, 4));
    for (const auto& p : {pa, pb, p4}) std::remove(p.c_str());
}

TEST_CASE("64-bit cached stacks are bit-exact against live encoders") {
    FrozenEncoder text(text_cfg()), image(image_cfg());
    auto items = sample_items(5);
    const std::string path = temp_path("cache_exact.bin");
    CacheStore::build(text, image, items, path);
    CacheStore cs = CacheStore::open(path, text_cfg(), image_cfg());
    CHECK(cs.count() == items.size() * 2);
    CHECK(cs.layers() == 2);
    CHECK(cs.dim() == 8);
    CHECK(cs.value_width() == 8);
    CHECK(cs.payload_bytes() == items.size() * 2 * 3 * 8 * 8);
    for (const auto& item : items) {
        CHECK(cs.get(item.id, Modality::text).layers == text.encode_tokens(item.tokens).layers);
        CHECK(cs.get(item.id, Modality::image).layers ==
              image.encode_patches(item.patches).layers);
    }
    std::remove(path.c_str());
}

TEST_CASE("32-bit cache stays within single-precision rounding") {
    FrozenEncoder text(text_cfg()), image(image_cfg());
    auto items = sample_items(4);
    const std::string path = temp_path("cache_f32.bin");
    CacheStore::build(text, image, items, path, 4);
    CacheStore cs = CacheStore::open(path, text_cfg(), image_cfg());
    for (const auto& item : items) {
        HiddenStack live = text.encode_tokens(item.tokens);
        HiddenStack cached = cs.get(item.id, Modality::text);
        REQUIRE(cached.layers.size() == live.layers.size());
        for (std::size_t l = 0; l < live.layers.size(); ++l)
            for (std::size_t j = 0; j < live.layers[l].size(); ++j) {
                const double rel = std::abs(cached.layers[l][j] - live.layers[l][j]) /
                                   std::max(1e-12, std::abs(live.layers[l][j]));
                CHECK(rel <= 1e-6);
            }
    }
    std::remove(path.c_str());
}

TEST_CASE("config drift and misses raise cache errors") {
    FrozenEncoder text(text_cfg()), image(image_cfg());
    auto items = sample_items(3);
    const std::string path = temp_path("cache_drift.bin");
    CacheStore::build(text, image, items, path);

    EncoderConfig drifted = text_cfg();
    drifted.seed = 14;
    CHECK_THROWS_AS(CacheStore::open(path, drifted, image_cfg()), CacheError);

    CacheStore cs = CacheStore::open(path, text_cfg(), image_cfg());
    CHECK_THROWS_AS(cs.get(42, Modality::text), CacheError);
    CHECK_THROWS_AS(cs.get(0, Modality::image), CacheError);
    std::remove(path.c_str());
}

TEST_CASE("malformed cache files are rejected") {
    CHECK_THROWS_AS(CacheStore::open(temp_path("missing_cache.bin"), text_cfg(), image_cfg()),
                    CacheError);
    const std::string path = temp_path("cache_garbage.bin");
    {
        std::ofstream f(path, std::ios::binary);
        f.write("XXXX0000", 8);
    }
    CHECK_THROWS_AS(CacheStore::open(path, text_cfg(), image_cfg()), CacheError);
    std::remove(path.c_str());

    FrozenEncoder text(text_cfg()), image(image_cfg());
    CHECK_THROWS_AS(CacheStore::build(text, image, sample_items(1), path, 2), CacheError);
    EncoderConfig mismatched = image_cfg();
    mismatched.hidden_dim = 4;
    mismatched.heads = 2;
    FrozenEncoder other(mismatched);
    CHECK_THROWS_AS(CacheStore::build(text, other, sample_items(1), path), ConfigError);
}

TEST_CASE("an empty cache is valid") {
    FrozenEncoder text(text_cfg()), image(image_cfg());
    const std::string path = temp_path("cache_empty.bin");
    CacheStore::build(text, image, {}, path);
    CacheStore cs = CacheStore::open(path, text_cfg(), image_cfg());
    CHECK(cs.count() == 0);
    CHECK(cs.payload_bytes() == 0);
    std::remove(path.c_str());
}

TEST_CASE("decoupled embeddings from cache match the live forward pass") {
    auto items = sample_items(4);
    const std::string path = temp_path("cache_equiv.bin");
    {
        FrozenEncoder text(text_cfg()), image(image_cfg());
        CacheStore::build(text, image, items, path);
    }
    MethodConfig mc;
    mc.method = Method::iisan;
    SeqEncoderConfig sc;
    sc.dim = 16;
    sc.heads = 2;
    ItemModel model(mc, text_cfg(), image_cfg(), IisanConfig{}, sc);
    CacheStore cs = CacheStore::open(path, text_cfg(), image_cfg());
    for (const auto& item : items) {
        Tensor live = model.item_embedding(nullptr, item);
        Tensor cached = model.item_embedding_from_stacks(
            nullptr, cs.get(item.id, Modality::text), cs.get(item.id, Modality::image));
        CHECK(live.values() == cached.values());  // bit-exact at 64-bit width
    }
    std::remove(path.c_str());
}

TEST_CASE("cache digest distinguishes encoder configurations") {
    CHECK(cache_digest_hex(text_cfg(), image_cfg()).size() == 64);
    EncoderConfig other = text_cfg();
    other.layers = 3;
    CHECK(cache_digest_hex(other, image_cfg()) != cache_digest_hex(text_cfg(), image_cfg()));
    CHECK(cache_digest(text_cfg(), image_cfg()) == cache_digest(text_cfg(), image_cfg()));
}
