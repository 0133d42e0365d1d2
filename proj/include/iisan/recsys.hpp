#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "iisan/data.hpp"
#include "iisan/errors.hpp"
#include "iisan/rng.hpp"
#include "iisan/tensor.hpp"

namespace iisan {

struct SeqEncoderConfig {
    std::size_t dim = 64;
    std::size_t heads = 2;
    std::size_t blocks = 2;
    std::size_t max_len = 10;
    double dropout = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (dim == 0 || heads == 0 || dim % heads != 0)
            throw ConfigError("seq encoder: dim not divisible by heads");
        if (blocks == 0 || max_len == 0) throw ConfigError("seq encoder: empty configuration");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("seq encoder: dropout out of range");
    }

    std::string digest_string() const {
        return "seq|d=" + std::to_string(dim) + "|h=" + std::to_string(heads) +
               "|b=" + std::to_string(blocks) + "|n=" + std::to_string(max_len) +
               "|seed=" + std::to_string(seed);
    }
};

// Causal trainable transformer over item-embedding sequences. Output at
// position t depends only on positions <= t.
class SeqEncoder {
public:
    struct Block {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };

    explicit SeqEncoder(const SeqEncoderConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(cfg_.seed, 53));
        const std::size_t d = cfg_.dim;
        pos_ = Tensor::randn({cfg_.max_len, d}, rng, 0.02, true);
        blocks_.resize(cfg_.blocks);
        for (auto& b : blocks_) {
            b.ln1_g = ones({d});
            b.ln1_b = Tensor::zeros({d}, true);
            b.wq = Tensor::randn({d, d}, rng, 0.02, true);
            b.bq = Tensor::zeros({d}, true);
            b.wk = Tensor::randn({d, d}, rng, 0.02, true);
            b.bk = Tensor::zeros({d}, true);
            b.wv = Tensor::randn({d, d}, rng, 0.02, true);
            b.bv = Tensor::zeros({d}, true);
            b.wo = Tensor::randn({d, d}, rng, 0.02, true);
            b.bo = Tensor::zeros({d}, true);
            b.ln2_g = ones({d});
            b.ln2_b = Tensor::zeros({d}, true);
            b.w1 = Tensor::randn({d, 4 * d}, rng, 0.02, true);
            b.b1 = Tensor::zeros({4 * d}, true);
            b.w2 = Tensor::randn({4 * d, d}, rng, 0.02, true);
            b.b2 = Tensor::zeros({d}, true);
        }
    }

    const SeqEncoderConfig& config() const { return cfg_; }

    // x: [len x dim] item embeddings, len <= max_len. dropout_rng enables
    // (inverted) dropout on the residual branches during training.
    Tensor forward(Tape* tape, const Tensor& x, Rng* dropout_rng = nullptr) const {
        const std::size_t len = x.shape()[0];
        if (x.ndim() != 2 || x.shape()[1] != cfg_.dim || len > cfg_.max_len)
            throw ShapeError("seq encoder: input " + shape_str(x.shape()) + " incompatible with dim " +
                             std::to_string(cfg_.dim) + ", max_len " + std::to_string(cfg_.max_len));
        Tensor pos = slice(tape, pos_, 0, 0, len);
        Tensor h = add(tape, x, pos);
        Tensor causal = causal_mask(len);
        for (const auto& b : blocks_) {
            Tensor a = add(tape, mul(tape, layernorm(tape, h), b.ln1_g), b.ln1_b);
            Tensor attn_out = attention(tape, a, b, causal);
            attn_out = apply_dropout(tape, attn_out, dropout_rng);
            h = add(tape, h, attn_out);
            Tensor m = add(tape, mul(tape, layernorm(tape, h), b.ln2_g), b.ln2_b);
            Tensor ff = add(tape, matmul(tape, gelu(tape, add(tape, matmul(tape, m, b.w1), b.b1)),
                                         b.w2), b.b2);
            ff = apply_dropout(tape, ff, dropout_rng);
            h = add(tape, h, ff);
        }
        return h;
    }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> out;
        out.push_back({"seq.pos", pos_});
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& b = blocks_[i];
            const std::string bp = "seq.block" + std::to_string(i) + ".";
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

private:
    static Tensor ones(Shape shape) {
        Tensor t = Tensor::zeros(std::move(shape), true);
        for (auto& v : t.mutable_values()) v = 1.0;
        return t;
    }

    static Tensor causal_mask(std::size_t len) {
        Tensor m = Tensor::zeros({len, len});
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = i + 1; j < len; ++j) m.mutable_values()[i * len + j] = -1e30;
        return m;
    }

    Tensor apply_dropout(Tape* tape, const Tensor& x, Rng* rng) const {
        if (rng == nullptr || cfg_.dropout <= 0.0) return x;
        Tensor mask = Tensor::zeros(x.shape());
        const double keep = 1.0 - cfg_.dropout;
        for (auto& v : mask.mutable_values()) v = rng->uniform() < keep ? 1.0 / keep : 0.0;
        return mul(tape, x, mask);
    }

    Tensor attention(Tape* tape, const Tensor& x, const Block& b, const Tensor& causal) const {
        const std::size_t dh = cfg_.dim / cfg_.heads;
        Tensor q = add(tape, matmul(tape, x, b.wq), b.bq);
        Tensor k = add(tape, matmul(tape, x, b.wk), b.bk);
        Tensor v = add(tape, matmul(tape, x, b.wv), b.bv);
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < cfg_.heads; ++h) {
            Tensor qh = slice(tape, q, 1, h * dh, dh);
            Tensor kh = slice(tape, k, 1, h * dh, dh);
            Tensor vh = slice(tape, v, 1, h * dh, dh);
            Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)),
                                  1.0 / std::sqrt(static_cast<double>(dh)));
            scores = add(tape, scores, causal);
            heads.push_back(matmul(tape, softmax(tape, scores), vh));
        }
        Tensor cat = concat(tape, heads, 1);
        return add(tape, matmul(tape, cat, b.wo), b.bo);
    }

    SeqEncoderConfig cfg_;
    Tensor pos_;
    std::vector<Block> blocks_;
};

// dot-product score between one user state and one item embedding
inline Tensor score(Tape* tape, const Tensor& user_state, const Tensor& item_embedding) {
    if (user_state.numel() != item_embedding.numel())
        throw ShapeError("score: dimension mismatch " + shape_str(user_state.shape()) + " vs " +
                         shape_str(item_embedding.shape()));
    Tensor u = user_state.ndim() == 1
                   ? Tensor::from({1, user_state.numel()}, user_state.values(),
                                  user_state.requires_grad())
                   : user_state;
    Tensor prod = mul(tape, u, item_embedding);
    return sum_all(tape, prod);
}

// In-batch debiased cross-entropy over popularity-corrected logits.
//
// scores: [P x I] prediction rows over the batch item set; target_idx picks
// the positive column per row; admitted[r][j] marks candidates outside I_u
// (the target is always admitted); log_pop holds log p_j per column.
inline Tensor debiased_ce_loss(Tape* tape, const Tensor& scores,
                               const std::vector<std::size_t>& target_idx,
                               const std::vector<std::vector<char>>& admitted,
                               const std::vector<double>& log_pop) {
    const std::size_t rows = scores.shape()[0];
    const std::size_t cols = scores.shape()[1];
    if (target_idx.size() != rows || admitted.size() != rows || log_pop.size() != cols)
        throw ShapeError("debiased_ce_loss: metadata does not match scores " +
                         shape_str(scores.shape()));
    for (double lp : log_pop)
        if (!std::isfinite(lp)) throw DataError("debiased_ce_loss: non-positive popularity");
    Tensor debias = Tensor::zeros({cols});
    for (std::size_t j = 0; j < cols; ++j) debias.mutable_values()[j] = -log_pop[j];
    Tensor mask = Tensor::zeros({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        if (target_idx[r] >= cols) throw ShapeError("debiased_ce_loss: target index out of range");
        for (std::size_t j = 0; j < cols; ++j)
            if (!admitted[r][j] && j != target_idx[r]) mask.mutable_values()[r * cols + j] = -1e30;
    }
    Tensor logits = add(tape, add(tape, scores, debias), mask);
    Tensor probs = softmax(tape, logits);
    Tensor target_p = gather(tape, probs, target_idx);
    return scale(tape, mean_all(tape, log_op(tape, target_p)), -1.0);
}

// ---- evaluation -------------------------------------------------------------

struct EvalReport {
    double hr10 = 0.0;
    double ndcg10 = 0.0;
    std::vector<std::size_t> ranks;  // per user, 1-based
};

inline EvalReport report_from_ranks(std::vector<std::size_t> ranks) {
    EvalReport r;
    r.ranks = std::move(ranks);
    if (r.ranks.empty()) throw DataError("evaluate: empty split");
    double hr = 0.0, ndcg = 0.0;
    for (auto rank : r.ranks) {
        if (rank <= 10) {
            hr += 1.0;
            ndcg += 1.0 / std::log2(static_cast<double>(rank) + 1.0);
        }
    }
    r.hr10 = hr / static_cast<double>(r.ranks.size());
    r.ndcg10 = ndcg / static_cast<double>(r.ranks.size());
    return r;
}

// rank of target among all scores; ties broken toward the smaller item id
inline std::size_t rank_of_target(const std::vector<double>& scores, std::size_t target) {
    std::size_t rank = 1;
    const double ts = scores[target];
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (j == target) continue;
        if (scores[j] > ts || (scores[j] == ts && j < target)) ++rank;
    }
    return rank;
}

}  // namespace iisan
