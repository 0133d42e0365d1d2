#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <vector>

#include "iisan/cache.hpp"
#include "iisan/data.hpp"
#include "iisan/efficiency.hpp"
#include "iisan/model.hpp"
#include "iisan/optim.hpp"
#include "iisan/recsys.hpp"

namespace iisan {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 32;
    std::size_t epochs = 5;
    std::uint64_t seed = 0;
    std::size_t max_users = 0;  // 0 trains on the full user set
};

enum class EvalSplit { valid, test };

// Next-item training over leave-one-out splits. Batches left-pad user
// histories with the reserved pad id (a zero embedding row); pad positions
// never contribute loss rows.
class Trainer {
public:
    Trainer(ItemModel& model, const Dataset& ds, const SplitResult& split, const TrainConfig& cfg,
            const CacheStore* cache = nullptr)
        : model_(model), ds_(ds), split_(split), cfg_(cfg), cache_(cache), opt_(cfg.lr) {
        if (model_.method() == Method::iisan_cached && cache_ == nullptr)
            throw ConfigError("train: iisan_cached requires a hidden-state cache");
        if (cache_ != nullptr && model_.is_epeft())
            throw CacheError("cached hidden states are not applicable to embedded method " +
                             std::string(method_name(model_.method())));
        params_ = model_.trainable_params();
        opt_.register_params(params_);
    }

    const AdamState& optimizer() const { return opt_; }
    std::size_t trainable_count() const { return model_.trainable_count(); }

    EpochStats train_epoch(std::size_t epoch_index) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochStats stats;
        Rng order_rng(derive_seed(cfg_.seed, 1000 + epoch_index));
        Rng dropout_rng(derive_seed(cfg_.seed, 5000 + epoch_index));

        std::vector<std::size_t> user_idx;
        for (std::size_t i = 0; i < split_.users.size(); ++i)
            if (split_.users[i].train.size() >= 2) user_idx.push_back(i);
        order_rng.shuffle(user_idx);
        if (cfg_.max_users > 0 && user_idx.size() > cfg_.max_users)
            user_idx.resize(cfg_.max_users);

        double loss_sum = 0.0;
        std::size_t row_total = 0;
        const std::size_t max_len = model_.seq_encoder().config().max_len;
        for (std::size_t start = 0; start < user_idx.size(); start += cfg_.batch_size) {
            const std::size_t end = std::min(start + cfg_.batch_size, user_idx.size());

            // per-user context/target windows, capped at max_len predictions
            struct Window {
                const SplitUser* user;
                std::vector<std::uint32_t> ctx, tgt;
            };
            std::vector<Window> windows;
            std::map<std::uint32_t, std::size_t> col_of;
            for (std::size_t b = start; b < end; ++b) {
                const SplitUser& su = split_.users[user_idx[b]];
                const std::size_t k = std::min(su.train.size(), max_len + 1);
                Window w;
                w.user = &su;
                w.ctx.assign(su.train.end() - static_cast<std::ptrdiff_t>(k), su.train.end() - 1);
                w.tgt.assign(su.train.end() - static_cast<std::ptrdiff_t>(k) + 1, su.train.end());
                for (auto id : w.ctx) col_of.emplace(id, 0);
                for (auto id : w.tgt) col_of.emplace(id, 0);
                windows.push_back(std::move(w));
            }
            std::vector<std::uint32_t> batch_items;
            for (auto& [id, col] : col_of) {
                col = batch_items.size();
                batch_items.push_back(id);
            }

            Tape tape;
            std::vector<Tensor> embeds;
            embeds.reserve(batch_items.size());
            for (auto id : batch_items) embeds.push_back(embed_item(&tape, id));
            Tensor item_mat = concat(&tape, embeds, 0);
            Tensor item_mat_t = transpose(&tape, item_mat);

            std::size_t width = 0;
            for (const auto& w : windows) width = std::max(width, w.ctx.size());
            Tensor pad_row = Tensor::zeros({1, model_.seq_dim()});

            std::vector<Tensor> score_blocks;
            std::vector<std::size_t> target_idx;
            std::vector<std::vector<char>> admitted;
            for (const auto& w : windows) {
                const std::size_t pads = width - w.ctx.size();
                std::vector<Tensor> rows;
                rows.reserve(width);
                for (std::size_t i = 0; i < pads; ++i) rows.push_back(pad_row);
                for (auto id : w.ctx) rows.push_back(embeds[col_of.at(id)]);
                Tensor states = model_.user_forward(&tape, concat(&tape, rows, 0), &dropout_rng);
                Tensor scores = matmul(&tape, states, item_mat_t);
                score_blocks.push_back(slice(&tape, scores, 0, pads, w.ctx.size()));
                for (auto tid : w.tgt) {
                    target_idx.push_back(col_of.at(tid));
                    std::vector<char> adm(batch_items.size(), 0);
                    for (std::size_t j = 0; j < batch_items.size(); ++j)
                        adm[j] = batch_items[j] == tid || !w.user->interacted.count(batch_items[j]);
                    admitted.push_back(std::move(adm));
                }
            }
            Tensor all_scores = concat(&tape, score_blocks, 0);
            std::vector<double> log_pop;
            log_pop.reserve(batch_items.size());
            for (auto id : batch_items) log_pop.push_back(split_.popularity.log_prob(id));
            Tensor loss = debiased_ce_loss(&tape, all_scores, target_idx, admitted, log_pop);

            stats.peak_retained_bytes = std::max(stats.peak_retained_bytes, tape.retained_bytes());
            stats.peak_tape_nodes = std::max(stats.peak_tape_nodes, tape.node_count());
            GradMap grads = backward(tape, loss);
            opt_.step(params_, grads);
            loss_sum += loss.values()[0] * static_cast<double>(target_idx.size());
            row_total += target_idx.size();
        }
        stats.loss = row_total > 0 ? loss_sum / static_cast<double>(row_total) : 0.0;
        stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return stats;
    }

    std::vector<EpochStats> train(std::size_t epochs = 0) {
        std::vector<EpochStats> out;
        const std::size_t n = epochs > 0 ? epochs : cfg_.epochs;
        for (std::size_t e = 0; e < n; ++e) out.push_back(train_epoch(e));
        return out;
    }

    // ranks the held-out target against the full catalog, dropout off
    EvalReport evaluate(EvalSplit which) const {
        const std::size_t max_len = model_.seq_encoder().config().max_len;
        std::vector<std::vector<double>> item_emb(ds_.spec.num_items);
        for (std::uint32_t id = 1; id <= ds_.spec.num_items; ++id)
            item_emb[id - 1] = embed_item(nullptr, id).values();

        std::vector<std::size_t> ranks;
        ranks.reserve(split_.users.size());
        for (const auto& su : split_.users) {
            std::vector<std::uint32_t> ctx(su.train.begin(), su.train.end());
            std::uint32_t target = su.valid_target;
            if (which == EvalSplit::test) {
                ctx.push_back(su.valid_target);
                target = su.test_target;
            }
            if (ctx.size() > max_len) ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(max_len));
            std::vector<Tensor> rows;
            rows.reserve(ctx.size());
            for (auto id : ctx)
                rows.push_back(Tensor::from({1, model_.seq_dim()}, item_emb[id - 1]));
            Tensor states = model_.user_forward(nullptr, concat(nullptr, rows, 0), nullptr);
            const std::size_t dim = model_.seq_dim();
            const double* u = states.values().data() + (ctx.size() - 1) * dim;
            std::vector<double> scores(ds_.spec.num_items, 0.0);
            for (std::size_t j = 0; j < item_emb.size(); ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < dim; ++k) s += u[k] * item_emb[j][k];
                scores[j] = s;
            }
            ranks.push_back(rank_of_target(scores, target - 1));
        }
        return report_from_ranks(std::move(ranks));
    }

private:
    Tensor embed_item(Tape* tape, std::uint32_t id) const {
        if (cache_ != nullptr && cache_compatible(model_.method()))
            return model_.item_embedding_from_stacks(tape, cache_->get(id, Modality::text),
                                                     cache_->get(id, Modality::image));
        return model_.item_embedding(tape, ds_.item(id));
    }

    ItemModel& model_;
    const Dataset& ds_;
    const SplitResult& split_;
    TrainConfig cfg_;
    const CacheStore* cache_;
    AdamState opt_;
    std::vector<NamedParam> params_;
};

}  // namespace iisan
