#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "iisan/adaptation.hpp"
#include "iisan/backbone.hpp"
#include "iisan/cache.hpp"
#include "iisan/data.hpp"
#include "iisan/errors.hpp"
#include "iisan/recsys.hpp"
#include "iisan/sha256.hpp"

namespace iisan {

enum class Method { fft, adapter, lora, bitfit, iisan, iisan_cached };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::fft: return "fft";
        case Method::adapter: return "adapter";
        case Method::lora: return "lora";
        case Method::bitfit: return "bitfit";
        case Method::iisan: return "iisan";
        case Method::iisan_cached: return "iisan_cached";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "fft") return Method::fft;
    if (s == "adapter") return Method::adapter;
    if (s == "lora") return Method::lora;
    if (s == "bitfit") return Method::bitfit;
    if (s == "iisan") return Method::iisan;
    if (s == "iisan_cached" || s == "iisan-cached") return Method::iisan_cached;
    throw ConfigError("unknown method: " + s);
}

// Embedded methods thread trainable tensors through the backbone graph, so
// precomputed hidden states cannot stand in for their forward pass.
inline bool cache_compatible(Method m) {
    return m == Method::iisan || m == Method::iisan_cached;
}

struct MethodConfig {
    Method method = Method::iisan;
    std::size_t adapter_bottleneck = 8;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    std::uint64_t seed = 0;

    std::string digest_string() const {
        return std::string(method_name(method)) + "|ra=" + std::to_string(adapter_bottleneck) +
               "|rl=" + std::to_string(lora_rank) + "|al=" + std::to_string(lora_alpha) +
               "|seed=" + std::to_string(seed);
    }
};

// One method instantiation over the shared backbone pair: the frozen (or
// selectively unfrozen) encoders, the method-specific trainable modules and
// the recommender head.
class ItemModel {
public:
    ItemModel(const MethodConfig& mcfg, const EncoderConfig& text_cfg,
              const EncoderConfig& image_cfg, const IisanConfig& iisan_cfg,
              const SeqEncoderConfig& seq_cfg)
        : mcfg_(mcfg),
          text_enc_(text_cfg),
          image_enc_(image_cfg),
          seq_enc_(seq_cfg),
          iisan_cfg_(iisan_cfg) {
        const std::size_t d = text_cfg.hidden_dim;
        if (image_cfg.hidden_dim != d)
            throw ConfigError("model: text and image hidden dims must match");
        if (text_cfg.layers != image_cfg.layers)
            throw ConfigError("model: text and image layer counts must match");
        Rng rng(derive_seed(mcfg.seed, 71));
        switch (mcfg_.method) {
            case Method::fft:
                for (auto& p : text_enc_.params()) p.tensor.set_requires_grad(true);
                for (auto& p : image_enc_.params()) p.tensor.set_requires_grad(true);
                init_epeft_head(d, rng);
                break;
            case Method::adapter: {
                auto make = [&](std::size_t layers) {
                    EncoderAdaptors ad;
                    ad.blocks.resize(layers);
                    for (auto& b : ad.blocks) {
                        b.post_attn = AdapterBlock::init(d, mcfg_.adapter_bottleneck, rng);
                        b.post_mlp = AdapterBlock::init(d, mcfg_.adapter_bottleneck, rng);
                    }
                    return ad;
                };
                text_adaptors_ = make(text_cfg.layers);
                image_adaptors_ = make(image_cfg.layers);
                init_epeft_head(d, rng);
                break;
            }
            case Method::lora: {
                auto make = [&](std::size_t layers) {
                    EncoderAdaptors ad;
                    ad.blocks.resize(layers);
                    for (auto& b : ad.blocks) {
                        b.lora_q = LoraPair::init(d, mcfg_.lora_rank, mcfg_.lora_alpha, rng);
                        b.lora_v = LoraPair::init(d, mcfg_.lora_rank, mcfg_.lora_alpha, rng);
                    }
                    return ad;
                };
                text_adaptors_ = make(text_cfg.layers);
                image_adaptors_ = make(image_cfg.layers);
                init_epeft_head(d, rng);
                break;
            }
            case Method::bitfit:
                for (auto& p : text_enc_.bias_params()) p.tensor.set_requires_grad(true);
                for (auto& p : image_enc_.bias_params()) p.tensor.set_requires_grad(true);
                init_epeft_head(d, rng);
                break;
            case Method::iisan:
            case Method::iisan_cached: {
                IisanConfig ic = iisan_cfg_;
                ic.hidden_dim = d;
                ic.seq_dim = seq_cfg.dim;
                ic.seed = mcfg.seed;
                iisan_cfg_ = ic;
                iisan_ = std::make_unique<IisanModel>(ic, text_cfg.layers);
                break;
            }
        }
    }

    Method method() const { return mcfg_.method; }
    const MethodConfig& method_config() const { return mcfg_; }
    const FrozenEncoder& text_encoder() const { return text_enc_; }
    const FrozenEncoder& image_encoder() const { return image_enc_; }
    const SeqEncoder& seq_encoder() const { return seq_enc_; }
    const IisanModel* iisan_model() const { return iisan_.get(); }
    std::size_t seq_dim() const { return seq_enc_.config().dim; }

    bool is_epeft() const { return !cache_compatible(mcfg_.method); }

    // item embedding via a live backbone forward pass
    Tensor item_embedding(Tape* tape, const Item& item) const {
        if (is_epeft()) {
            auto text_states = text_enc_.forward_tokens(tape, item.tokens, &text_adaptors_);
            auto image_states = image_enc_.forward_patches(tape, item.patches, &image_adaptors_);
            Tensor cat = concat(tape, {image_states.back(), text_states.back()}, 1);
            return add(tape, matmul(tape, cat, fl2_w_), fl2_b_);
        }
        auto text_states = text_enc_.forward_tokens(tape, item.tokens);
        auto image_states = image_enc_.forward_patches(tape, item.patches);
        return iisan_->forward_item(tape, text_states, image_states);
    }

    // item embedding from cached hidden states (decoupled methods only)
    Tensor item_embedding_from_stacks(Tape* tape, const HiddenStack& text,
                                      const HiddenStack& image) const {
        if (is_epeft())
            throw CacheError("cached hidden states are not applicable to embedded method " +
                             std::string(method_name(mcfg_.method)));
        return iisan_->forward_item(tape, text.as_tensors(), image.as_tensors());
    }

    Tensor user_forward(Tape* tape, const Tensor& seq_input, Rng* dropout_rng = nullptr) const {
        return seq_enc_.forward(tape, seq_input, dropout_rng);
    }

    std::vector<NamedParam> trainable_params() const {
        std::vector<NamedParam> out;
        switch (mcfg_.method) {
            case Method::fft:
                for (auto& p : text_enc_.params()) out.push_back(p);
                for (auto& p : image_enc_.params()) out.push_back(p);
                break;
            case Method::bitfit:
                for (auto& p : text_enc_.bias_params()) out.push_back(p);
                for (auto& p : image_enc_.bias_params()) out.push_back(p);
                break;
            case Method::adapter:
            case Method::lora:
                append_adaptor_params(out, "text", text_adaptors_);
                append_adaptor_params(out, "image", image_adaptors_);
                break;
            case Method::iisan:
            case Method::iisan_cached:
                for (auto& p : iisan_->params()) out.push_back(p);
                break;
        }
        if (is_epeft()) {
            out.push_back({"head.fl2_w", fl2_w_});
            out.push_back({"head.fl2_b", fl2_b_});
        }
        for (auto& p : seq_enc_.params()) out.push_back(p);
        return out;
    }

    // parameters that must stay bit-identical under this method
    std::vector<NamedParam> frozen_params() const {
        std::vector<NamedParam> out;
        if (mcfg_.method == Method::fft) return out;
        auto add_non_trainable = [&](const std::vector<NamedParam>& ps) {
            for (const auto& p : ps)
                if (!p.tensor.requires_grad()) out.push_back(p);
        };
        add_non_trainable(text_enc_.params());
        add_non_trainable(image_enc_.params());
        return out;
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& p : trainable_params()) n += p.tensor.numel();
        return n;
    }

    // resident weights for the memory breakdown; cached runs drop the backbone
    std::size_t resident_weight_bytes(bool cached_run) const {
        std::size_t n = 0;
        for (const auto& p : trainable_params()) n += p.tensor.bytes();
        if (!cached_run) {
            for (const auto& p : text_enc_.params())
                if (!p.tensor.requires_grad()) n += p.tensor.bytes();
            for (const auto& p : image_enc_.params())
                if (!p.tensor.requires_grad()) n += p.tensor.bytes();
        }
        return n;
    }

    std::string config_digest() const {
        std::string s = "model|" + mcfg_.digest_string() + "|" +
                        text_enc_.config().digest_string() + "|" +
                        image_enc_.config().digest_string() + "|" +
                        seq_enc_.config().digest_string();
        if (iisan_) {
            s += "|iisan:r=" + std::to_string(iisan_cfg_.bottleneck) +
                 ",intra=" + std::to_string(iisan_cfg_.use_intra) +
                 ",inter=" + std::to_string(iisan_cfg_.use_inter) +
                 ",text=" + std::to_string(iisan_cfg_.use_text) +
                 ",image=" + std::to_string(iisan_cfg_.use_image) + ",keep=";
            for (auto k : iisan_->plan().keep) s += std::to_string(k) + ".";
        }
        return Sha256::hex_digest(s);
    }

private:
    void init_epeft_head(std::size_t d, Rng& rng) {
        fl2_w_ = Tensor::randn({2 * d, seq_enc_.config().dim}, rng, 0.02, true);
        fl2_b_ = Tensor::zeros({seq_enc_.config().dim}, true);
    }

    static void append_adaptor_params(std::vector<NamedParam>& out, const std::string& prefix,
                                      const EncoderAdaptors& ad) {
        for (std::size_t i = 0; i < ad.blocks.size(); ++i) {
            const auto& b = ad.blocks[i];
            const std::string bp = prefix + ".block" + std::to_string(i) + ".";
            if (b.lora_q) {
                out.push_back({bp + "lora_q.a", b.lora_q->a});
                out.push_back({bp + "lora_q.b", b.lora_q->b});
            }
            if (b.lora_v) {
                out.push_back({bp + "lora_v.a", b.lora_v->a});
                out.push_back({bp + "lora_v.b", b.lora_v->b});
            }
            if (b.post_attn) {
                out.push_back({bp + "adapter_attn.w_down", b.post_attn->w_down});
                out.push_back({bp + "adapter_attn.b_down", b.post_attn->b_down});
                out.push_back({bp + "adapter_attn.w_up", b.post_attn->w_up});
                out.push_back({bp + "adapter_attn.b_up", b.post_attn->b_up});
            }
            if (b.post_mlp) {
                out.push_back({bp + "adapter_mlp.w_down", b.post_mlp->w_down});
                out.push_back({bp + "adapter_mlp.b_down", b.post_mlp->b_down});
                out.push_back({bp + "adapter_mlp.w_up", b.post_mlp->w_up});
                out.push_back({bp + "adapter_mlp.b_up", b.post_mlp->b_up});
            }
        }
    }

    MethodConfig mcfg_;
    FrozenEncoder text_enc_;
    FrozenEncoder image_enc_;
    SeqEncoder seq_enc_;
    IisanConfig iisan_cfg_;
    std::unique_ptr<IisanModel> iisan_;
    EncoderAdaptors text_adaptors_, image_adaptors_;
    Tensor fl2_w_, fl2_b_;
};

}  // namespace iisan
