#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iisan/errors.hpp"
#include "iisan/rng.hpp"
#include "iisan/tensor.hpp"

namespace iisan {

enum class Modality { text, image };

inline const char* modality_name(Modality m) { return m == Modality::text ? "text" : "image"; }

struct EncoderConfig {
    Modality modality = Modality::text;
    std::size_t layers = 4;
    std::size_t hidden_dim = 32;
    std::size_t heads = 2;
    std::size_t seq_len = 8;              // image default 10
    std::size_t vocab_or_patch_dim = 256;  // vocab size (text) or patch dim (image)
    std::uint64_t seed = 0;

    void validate() const {
        if (layers < 1) throw ConfigError("encoder: layers must be >= 1");
        if (seq_len < 1) throw ConfigError("encoder: seq_len must be >= 1");
        if (hidden_dim == 0 || heads == 0 || hidden_dim % heads != 0)
            throw ConfigError("encoder: hidden_dim " + std::to_string(hidden_dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (vocab_or_patch_dim == 0) throw ConfigError("encoder: vocab/patch dim must be > 0");
    }

    std::string digest_string() const {
        return std::string(modality_name(modality)) + "|L=" + std::to_string(layers) +
               "|d=" + std::to_string(hidden_dim) + "|h=" + std::to_string(heads) +
               "|s=" + std::to_string(seq_len) + "|v=" + std::to_string(vocab_or_patch_dim) +
               "|seed=" + std::to_string(seed);
    }
};

// Pooled per-layer backbone outputs {h_0 .. h_L}, h_0 from the embedding layer.
struct HiddenStack {
    std::vector<std::vector<double>> layers;  // L+1 entries of dimension d

    std::size_t depth() const { return layers.size(); }
    std::size_t dim() const { return layers.empty() ? 0 : layers[0].size(); }

    std::vector<Tensor> as_tensors() const {
        std::vector<Tensor> out;
        out.reserve(layers.size());
        for (const auto& l : layers) out.push_back(Tensor::from({1, l.size()}, l));
        return out;
    }

    static HiddenStack from_tensors(const std::vector<Tensor>& ts) {
        HiddenStack hs;
        for (const auto& t : ts) hs.layers.push_back(t.values());
        return hs;
    }
};

// Houlsby bottleneck inserted behind a sublayer output (residual inside).
struct AdapterBlock {
    Tensor w_down, b_down, w_up, b_up;

    static AdapterBlock init(std::size_t d, std::size_t r, Rng& rng) {
        AdapterBlock a;
        a.w_down = Tensor::randn({d, r}, rng, 0.02, true);
        a.b_down = Tensor::zeros({r}, true);
        a.w_up = Tensor::zeros({r, d}, true);  // identity start
        a.b_up = Tensor::zeros({d}, true);
        return a;
    }

    Tensor forward(Tape* tape, const Tensor& x) const {
        Tensor h = add(tape, matmul(tape, x, w_down), b_down);
        h = gelu(tape, h);
        h = add(tape, matmul(tape, h, w_up), b_up);
        return add(tape, x, h);
    }
};

// Low-rank delta on a frozen projection: W_eff = W + (alpha/r) * A * B.
struct LoraPair {
    Tensor a, b;
    double scaling = 2.0;

    static LoraPair init(std::size_t d, std::size_t rank, double alpha, Rng& rng) {
        LoraPair p;
        p.a = Tensor::randn({d, rank}, rng, 0.02, true);
        p.b = Tensor::zeros({rank, d}, true);  // zero-init: identity start
        p.scaling = alpha / static_cast<double>(rank);
        return p;
    }

    Tensor apply(Tape* tape, const Tensor& x, const Tensor& base_out) const {
        Tensor delta = scale(tape, matmul(tape, matmul(tape, x, a), b), scaling);
        return add(tape, base_out, delta);
    }
};

struct BlockAdaptors {
    std::optional<LoraPair> lora_q, lora_v;
    std::optional<AdapterBlock> post_attn, post_mlp;
};

struct EncoderAdaptors {
    std::vector<BlockAdaptors> blocks;
};

// Toy-scale pre-LN transformer encoder with deterministically seeded,
// frozen parameters. Trainability is toggled externally per method.
class FrozenEncoder {
public:
    struct Block {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };

    explicit FrozenEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, cfg_.modality == Modality::text ? 11 : 23));
        const std::size_t d = cfg_.hidden_dim;
        if (cfg_.modality == Modality::text) {
            embed_ = Tensor::randn({cfg_.vocab_or_patch_dim, d}, rng, 0.02);
        } else {
            embed_ = Tensor::randn({cfg_.vocab_or_patch_dim, d}, rng, 0.02);  // patch projection
        }
        pos_ = Tensor::randn({cfg_.seq_len, d}, rng, 0.02);
        blocks_.resize(cfg_.layers);
        for (auto& b : blocks_) {
            b.ln1_g = ones({d});
            b.ln1_b = Tensor::zeros({d});
            b.wq = Tensor::randn({d, d}, rng, 0.02);
            b.bq = Tensor::zeros({d});
            b.wk = Tensor::randn({d, d}, rng, 0.02);
            b.bk = Tensor::zeros({d});
            b.wv = Tensor::randn({d, d}, rng, 0.02);
            b.bv = Tensor::zeros({d});
            b.wo = Tensor::randn({d, d}, rng, 0.02);
            b.bo = Tensor::zeros({d});
            b.ln2_g = ones({d});
            b.ln2_b = Tensor::zeros({d});
            b.w1 = Tensor::randn({d, 4 * d}, rng, 0.02);
            b.b1 = Tensor::zeros({4 * d});
            b.w2 = Tensor::randn({4 * d, d}, rng, 0.02);
            b.b2 = Tensor::zeros({d});
        }
    }

    const EncoderConfig& config() const { return cfg_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    const Tensor& embed_table() const { return embed_; }
    const Tensor& pos_table() const { return pos_; }

    // Pooled (first-position) hidden states per layer, L+1 tensors of [1 x d].
    std::vector<Tensor> forward_tokens(Tape* tape, const std::vector<std::size_t>& tokens,
                                       const EncoderAdaptors* ad = nullptr) const {
        if (cfg_.modality != Modality::text)
            throw ConfigError("encoder: token input fed to image encoder");
        if (tokens.size() != cfg_.seq_len)
            throw DataError("encoder: expected " + std::to_string(cfg_.seq_len) + " tokens, got " +
                            std::to_string(tokens.size()));
        Tensor x = iisan::add(tape, embed_lookup(tape, embed_, tokens), pos_);
        return run_blocks(tape, x, ad);
    }

    std::vector<Tensor> forward_patches(Tape* tape, const Tensor& patches,
                                        const EncoderAdaptors* ad = nullptr) const {
        if (cfg_.modality != Modality::image)
            throw ConfigError("encoder: patch input fed to text encoder");
        if (patches.ndim() != 2 || patches.shape()[0] != cfg_.seq_len ||
            patches.shape()[1] != cfg_.vocab_or_patch_dim)
            throw DataError("encoder: patch matrix " + shape_str(patches.shape()) +
                            " does not match config " + std::to_string(cfg_.seq_len) + "x" +
                            std::to_string(cfg_.vocab_or_patch_dim));
        Tensor x = iisan::add(tape, matmul(tape, patches, embed_), pos_);
        return run_blocks(tape, x, ad);
    }

    HiddenStack encode_tokens(const std::vector<std::size_t>& tokens) const {
        Tape tape;
        return HiddenStack::from_tensors(forward_tokens(&tape, tokens));
    }

    HiddenStack encode_patches(const Tensor& patches) const {
        Tape tape;
        return HiddenStack::from_tensors(forward_patches(&tape, patches));
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> out;
        const std::string p = std::string(modality_name(cfg_.modality)) + ".";
        out.push_back({p + "embed", embed_});
        out.push_back({p + "pos", pos_});
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& b = blocks_[i];
            const std::string bp = p + "block" + std::to_string(i) + ".";
            out.push_back({bp + "ln1_g", b.ln1_g});
            out.push_back({bp + "ln1_b", b.ln1_b});
            out.push_back({bp + "wq", b.wq});
            out.push_back({bp + "bq", b.bq});
            out.push_back({bp + "wk", b.wk});
            out.push_back({bp + "bk", b.bk});
            out.push_back({bp + "wv", b.wv});
            out.push_back({bp + "bv", b.bv});
            out.push_back({bp + "wo", b.wo});
            out.push_back({bp + "bo", b.bo});
            out.push_back({bp + "ln2_g", b.ln2_g});
            out.push_back({bp + "ln2_b", b.ln2_b});
            out.push_back({bp + "w1", b.w1});
            out.push_back({bp + "b1", b.b1});
            out.push_back({bp + "w2", b.w2});
            out.push_back({bp + "b2", b.b2});
        }
        return out;
    }

    // BitFit's designated set: every bias vector plus layernorm shifts.
    std::vector<NamedParam> bias_params() const {
        std::vector<NamedParam> out;
        for (auto& p : params()) {
            auto dot = p.name.rfind('.');
            const std::string leaf = p.name.substr(dot + 1);
            if (leaf[0] == 'b' || leaf == "ln1_b" || leaf == "ln2_b") out.push_back(p);
        }
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params()) n += p.tensor.numel();
        return n;
    }

private:
    static Tensor ones(Shape shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (auto& v : t.mutable_values()) v = 1.0;
        return t;
    }

    Tensor attention(Tape* tape, const Tensor& x, const Block& b,
                     const BlockAdaptors* ad) const {
        const std::size_t d = cfg_.hidden_dim;
        const std::size_t dh = d / cfg_.heads;
        Tensor q = iisan::add(tape, matmul(tape, x, b.wq), b.bq);
        if (ad && ad->lora_q) q = ad->lora_q->apply(tape, x, q);
        Tensor k = iisan::add(tape, matmul(tape, x, b.wk), b.bk);
        Tensor v = iisan::add(tape, matmul(tape, x, b.wv), b.bv);
        if (ad && ad->lora_v) v = ad->lora_v->apply(tape, x, v);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            Tensor qh = slice(tape, q, 1, h * dh, dh);
            Tensor kh = slice(tape, k, 1, h * dh, dh);
            Tensor vh = slice(tape, v, 1, h * dh, dh);
            Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)),
                                  1.0 / std::sqrt(static_cast<double>(dh)));
            Tensor attn = softmax(tape, scores);
            heads.push_back(matmul(tape, attn, vh));
        }
        Tensor cat = concat(tape, heads, 1);
        return iisan::add(tape, matmul(tape, cat, b.wo), b.bo);
    }

    std::vector<Tensor> run_blocks(Tape* tape, Tensor x, const EncoderAdaptors* ad) const {
        std::vector<Tensor> pooled;
        pooled.push_back(slice(tape, x, 0, 0, 1));
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& b = blocks_[i];
            const BlockAdaptors* ba = ad && i < ad->blocks.size() ? &ad->blocks[i] : nullptr;
            Tensor a = iisan::add(tape, mul(tape, layernorm(tape, x), b.ln1_g), b.ln1_b);
            Tensor attn_out = attention(tape, a, b, ba);
            if (ba && ba->post_attn) attn_out = ba->post_attn->forward(tape, attn_out);
            x = iisan::add(tape, x, attn_out);
            Tensor m = iisan::add(tape, mul(tape, layernorm(tape, x), b.ln2_g), b.ln2_b);
            Tensor h = gelu(tape, iisan::add(tape, matmul(tape, m, b.w1), b.b1));
            Tensor mlp_out = iisan::add(tape, matmul(tape, h, b.w2), b.b2);
            if (ba && ba->post_mlp) mlp_out = ba->post_mlp->forward(tape, mlp_out);
            x = iisan::add(tape, x, mlp_out);
            pooled.push_back(slice(tape, x, 0, 0, 1));
        }
        return pooled;
    }

    EncoderConfig cfg_;
    Tensor embed_, pos_;
    std::vector<Block> blocks_;
};

inline FrozenEncoder init_encoder(const EncoderConfig& cfg) { return FrozenEncoder(cfg); }

}  // namespace iisan
