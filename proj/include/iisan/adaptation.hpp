#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "iisan/backbone.hpp"
#include "iisan/errors.hpp"
#include "iisan/rng.hpp"
#include "iisan/tensor.hpp"

namespace iisan {

// Bottleneck block: down-project d->r, GELU, up-project r->d, residual.
struct SanBlock {
    Tensor w_down, b_down, w_up, b_up;

    static SanBlock init(std::size_t d, std::size_t r, Rng& rng) {
        SanBlock s;
        s.w_down = Tensor::randn({d, r}, rng, 0.02, true);
        s.b_down = Tensor::zeros({r}, true);
        s.w_up = Tensor::randn({r, d}, rng, 0.02, true);
        s.b_up = Tensor::zeros({d}, true);
        return s;
    }

    Tensor forward(Tape* tape, const Tensor& x) const {
        Tensor h = gelu(tape, add(tape, matmul(tape, x, w_down), b_down));
        h = add(tape, matmul(tape, h, w_up), b_up);
        return add(tape, x, h);
    }

    std::size_t param_count() const {
        return w_down.numel() + b_down.numel() + w_up.numel() + b_up.numel();
    }
};

enum class LayerDropPolicy { keep_all, keep_even, explicit_set };

// Which backbone blocks (1..L) feed SAN blocks.
struct LayerDropPlan {
    std::vector<std::size_t> keep;

    std::size_t size() const { return keep.size(); }
};

inline LayerDropPlan layerdrop_plan(std::size_t layers, LayerDropPolicy policy,
                                    std::vector<std::size_t> explicit_keep = {}) {
    LayerDropPlan plan;
    switch (policy) {
        case LayerDropPolicy::keep_all:
            for (std::size_t i = 1; i <= layers; ++i) plan.keep.push_back(i);
            break;
        case LayerDropPolicy::keep_even:
            for (std::size_t i = 2; i <= layers; i += 2) plan.keep.push_back(i);
            break;
        case LayerDropPolicy::explicit_set:
            plan.keep = std::move(explicit_keep);
            std::sort(plan.keep.begin(), plan.keep.end());
            plan.keep.erase(std::unique(plan.keep.begin(), plan.keep.end()), plan.keep.end());
            break;
    }
    if (plan.keep.empty()) throw ConfigError("layerdrop: empty keep set");
    for (auto i : plan.keep)
        if (i < 1 || i > layers)
            throw ConfigError("layerdrop: kept index " + std::to_string(i) + " outside 1.." +
                              std::to_string(layers));
    return plan;
}

enum class TowerKind { text_intra, image_intra, inter };

inline const char* tower_name(TowerKind k) {
    switch (k) {
        case TowerKind::text_intra: return "text_intra";
        case TowerKind::image_intra: return "image_intra";
        case TowerKind::inter: return "inter";
    }
    return "?";
}

// Ordered SAN blocks with learnable scalar gates. Intra towers gate the
// previous block output against the current hidden state (one gate per
// block after the first); the inter tower gates image against text at
// every block, with an ungated additive history term.
struct GatedTower {
    TowerKind kind = TowerKind::text_intra;
    std::vector<SanBlock> blocks;
    std::vector<Tensor> gates;  // raw pre-sigmoid scalars

    static GatedTower init(TowerKind kind, std::size_t d, std::size_t r,
                           const LayerDropPlan& plan, Rng& rng) {
        GatedTower t;
        t.kind = kind;
        for (std::size_t i = 0; i < plan.size(); ++i) t.blocks.push_back(SanBlock::init(d, r, rng));
        const std::size_t n_gates = kind == TowerKind::inter ? plan.size() : plan.size() - 1;
        for (std::size_t i = 0; i < n_gates; ++i)
            t.gates.push_back(Tensor::scalar(0.0, true));  // sigmoid(0) = 0.5
        return t;
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> out;
        const std::string p = std::string(tower_name(kind)) + ".";
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string bp = p + "sanb" + std::to_string(i) + ".";
            out.push_back({bp + "w_down", blocks[i].w_down});
            out.push_back({bp + "b_down", blocks[i].b_down});
            out.push_back({bp + "w_up", blocks[i].w_up});
            out.push_back({bp + "b_up", blocks[i].b_up});
        }
        for (std::size_t i = 0; i < gates.size(); ++i)
            out.push_back({p + "gate" + std::to_string(i), gates[i]});
        return out;
    }
};

namespace detail {

inline Tensor gate_blend(Tape* tape, const Tensor& raw_gate, const Tensor& when_one,
                         const Tensor& when_zero) {
    Tensor g = sigmoid(tape, raw_gate);  // in (0,1)
    Tensor one_minus = add(tape, scale(tape, g, -1.0), Tensor::scalar(1.0));
    return add(tape, mul(tape, when_one, g), mul(tape, when_zero, one_minus));
}

}  // namespace detail

// First SAN block consumes the pooled embedding h_0 alone; each later block j
// blends its predecessor's output with the j-th kept hidden state.
inline Tensor intra_forward(Tape* tape, const GatedTower& tower,
                            const std::vector<Tensor>& stack, const LayerDropPlan& plan) {
    if (tower.kind == TowerKind::inter)
        throw ConfigError("intra_forward: tower kind is inter");
    if (tower.blocks.size() != plan.size())
        throw ConfigError("intra_forward: tower has " + std::to_string(tower.blocks.size()) +
                          " blocks for a plan of " + std::to_string(plan.size()));
    if (plan.keep.back() >= stack.size())
        throw ConfigError("intra_forward: plan exceeds hidden stack depth");
    Tensor h = tower.blocks[0].forward(tape, stack[0]);
    for (std::size_t j = 1; j < plan.size(); ++j) {
        Tensor in = detail::gate_blend(tape, tower.gates[j - 1], h, stack[plan.keep[j]]);
        h = tower.blocks[j].forward(tape, in);
    }
    return h;
}

// First block blends the two modality embeddings (no history); later blocks
// add the previous output unweighted on top of the gated blend.
inline Tensor inter_forward(Tape* tape, const GatedTower& tower,
                            const std::vector<Tensor>& text_stack,
                            const std::vector<Tensor>& image_stack, const LayerDropPlan& plan) {
    if (tower.kind != TowerKind::inter)
        throw ConfigError("inter_forward: tower kind is not inter");
    if (tower.blocks.size() != plan.size())
        throw ConfigError("inter_forward: tower/plan size mismatch");
    if (text_stack.size() != image_stack.size() ||
        text_stack[0].cols() != image_stack[0].cols())
        throw ShapeError("inter_forward: modality stacks disagree: " +
                         shape_str(text_stack[0].shape()) + " vs " +
                         shape_str(image_stack[0].shape()));
    Tensor h = tower.blocks[0].forward(
        tape, detail::gate_blend(tape, tower.gates[0], image_stack[0], text_stack[0]));
    for (std::size_t j = 1; j < plan.size(); ++j) {
        const std::size_t i = plan.keep[j];
        Tensor blend = detail::gate_blend(tape, tower.gates[j], image_stack[i], text_stack[i]);
        h = tower.blocks[j].forward(tape, add(tape, blend, h));
    }
    return h;
}

struct IisanConfig {
    std::size_t hidden_dim = 32;
    std::size_t bottleneck = 8;
    std::size_t seq_dim = 64;
    LayerDropPolicy policy = LayerDropPolicy::keep_all;
    std::vector<std::size_t> explicit_keep;
    bool use_intra = true;
    bool use_inter = true;
    bool use_text = true;
    bool use_image = true;
    std::uint64_t seed = 0;
};

// The trainable adaptation state: up to three towers plus the fusion layer.
// Disabled towers own no parameters and contribute zero vectors to fusion;
// with all towers disabled (frozen-backbone ablation) the pooled last hidden
// states pass straight through to the fusion slots.
class IisanModel {
public:
    IisanModel(const IisanConfig& cfg, std::size_t backbone_layers) : cfg_(cfg) {
        if (!cfg_.use_text && !cfg_.use_image)
            throw ConfigError("iisan: at least one modality must be enabled");
        plan_ = layerdrop_plan(backbone_layers, cfg_.policy, cfg_.explicit_keep);
        Rng rng(derive_seed(cfg_.seed, 37));
        const std::size_t d = cfg_.hidden_dim;
        if (cfg_.use_intra && cfg_.use_text)
            text_tower_ = GatedTower::init(TowerKind::text_intra, d, cfg_.bottleneck, plan_, rng);
        if (cfg_.use_intra && cfg_.use_image)
            image_tower_ = GatedTower::init(TowerKind::image_intra, d, cfg_.bottleneck, plan_, rng);
        if (cfg_.use_inter && cfg_.use_text && cfg_.use_image)
            inter_tower_ = GatedTower::init(TowerKind::inter, d, cfg_.bottleneck, plan_, rng);
        fl_w_ = Tensor::randn({3 * d, cfg_.seq_dim}, rng, 0.02, true);
        fl_b_ = Tensor::zeros({cfg_.seq_dim}, true);
    }

    const IisanConfig& config() const { return cfg_; }
    const LayerDropPlan& plan() const { return plan_; }
    bool has_text_tower() const { return !text_tower_.blocks.empty(); }
    bool has_image_tower() const { return !image_tower_.blocks.empty(); }
    bool has_inter_tower() const { return !inter_tower_.blocks.empty(); }
    const GatedTower& text_tower() const { return text_tower_; }
    const GatedTower& image_tower() const { return image_tower_; }
    const GatedTower& inter_tower() const { return inter_tower_; }
    const Tensor& fusion_weight() const { return fl_w_; }
    const Tensor& fusion_bias() const { return fl_b_; }

    Tensor fuse_item(Tape* tape, const Tensor& e_image, const Tensor& e_inter,
                     const Tensor& e_text) const {
        const std::size_t d = cfg_.hidden_dim;
        if (e_image.cols() != d || e_inter.cols() != d || e_text.cols() != d)
            throw ShapeError("fuse_item: inputs must have dimension " + std::to_string(d));
        Tensor cat = concat(tape, {e_image, e_inter, e_text}, 1);
        return add(tape, matmul(tape, cat, fl_w_), fl_b_);
    }

    // text_stack / image_stack hold L+1 pooled states ([1 x d] each); either
    // may be empty when its modality is disabled.
    Tensor forward_item(Tape* tape, const std::vector<Tensor>& text_stack,
                        const std::vector<Tensor>& image_stack) const {
        const Tensor zero = Tensor::zeros({1, cfg_.hidden_dim});
        Tensor e_text = zero, e_image = zero, e_inter = zero;
        const bool any_tower = has_text_tower() || has_image_tower() || has_inter_tower();
        if (!any_tower) {
            // frozen-backbone ablation: last hidden states feed fusion directly
            if (cfg_.use_text) e_text = text_stack.back();
            if (cfg_.use_image) e_image = image_stack.back();
        } else {
            if (has_text_tower()) e_text = intra_forward(tape, text_tower_, text_stack, plan_);
            if (has_image_tower()) e_image = intra_forward(tape, image_tower_, image_stack, plan_);
            if (has_inter_tower())
                e_inter = inter_forward(tape, inter_tower_, text_stack, image_stack, plan_);
        }
        return fuse_item(tape, e_image, e_inter, e_text);
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> out;
        auto append = [&](const GatedTower& t) {
            for (auto& p : t.params()) out.push_back({"iisan." + p.name, p.tensor});
        };
        if (has_text_tower()) append(text_tower_);
        if (has_image_tower()) append(image_tower_);
        if (has_inter_tower()) append(inter_tower_);
        out.push_back({"iisan.fl_w", fl_w_});
        out.push_back({"iisan.fl_b", fl_b_});
        return out;
    }

private:
    IisanConfig cfg_;
    LayerDropPlan plan_;
    GatedTower text_tower_, image_tower_, inter_tower_;
    Tensor fl_w_, fl_b_;
};

}  // namespace iisan
