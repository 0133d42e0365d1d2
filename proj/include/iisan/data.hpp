#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "iisan/errors.hpp"
#include "iisan/io.hpp"
#include "iisan/rng.hpp"
#include "iisan/sha256.hpp"
#include "iisan/tensor.hpp"

namespace iisan {

// Item id 0 is the reserved left-padding id; real items are 1..num_items.
constexpr std::uint32_t kPadItem = 0;

struct Item {
    std::uint32_t id = 0;
    std::vector<std::size_t> tokens;  // length text_seq, values < vocab
    Tensor patches;                   // image_seq x patch_dim
};

struct UserSequence {
    std::uint32_t id = 0;
    std::vector<std::uint32_t> items;  // chronological
};

struct GenSpec {
    std::size_t num_users = 1000;
    std::size_t num_items = 500;
    std::uint64_t seed = 7;
    std::size_t num_latent_clusters = 4;
    std::size_t text_seq = 8;
    std::size_t vocab = 256;
    std::size_t image_seq = 10;
    std::size_t patch_dim = 16;
    std::size_t max_seq = 11;           // n + 1 with n = 10
    double in_cluster_prob = 0.85;      // planted preference strength

    void validate() const {
        if (num_users == 0 || num_items == 0 || num_latent_clusters == 0)
            throw ConfigError("genspec: counts must be positive");
        if (num_latent_clusters > num_items)
            throw ConfigError("genspec: more clusters than items");
    }

    std::string digest_string() const {
        std::ostringstream os;
        os << "users=" << num_users << "|items=" << num_items << "|seed=" << seed
           << "|clusters=" << num_latent_clusters << "|text=" << text_seq << "/" << vocab
           << "|image=" << image_seq << "x" << patch_dim << "|max_seq=" << max_seq
           << "|p_in=" << in_cluster_prob;
        return os.str();
    }
};

struct Dataset {
    GenSpec spec;
    std::vector<Item> items;          // indexed by id - 1
    std::vector<UserSequence> users;
    std::vector<std::size_t> item_cluster;  // per item, for oracle baselines

    const Item& item(std::uint32_t id) const { return items.at(id - 1); }
};

// Items live in latent clusters; an item's within-cluster popularity rank is
// planted into its content (marker tokens, patch offsets) so content-aware
// models can recover both the cluster and a coarse popularity signal.
inline Dataset generate(const GenSpec& spec) {
    spec.validate();
    Dataset ds;
    ds.spec = spec;
    Rng rng(derive_seed(spec.seed, 1));
    const std::size_t C = spec.num_latent_clusters;
    const std::size_t tokens_per_cluster = std::max<std::size_t>(spec.vocab / C, 8);

    std::vector<Tensor> centers;
    std::vector<Tensor> quality_dirs;
    for (std::size_t c = 0; c < C; ++c) {
        centers.push_back(Tensor::randn({spec.image_seq, spec.patch_dim}, rng, 1.0));
        quality_dirs.push_back(Tensor::randn({1, spec.patch_dim}, rng, 1.0));
    }

    std::vector<std::size_t> cluster_rank(spec.num_items, 0);
    for (std::uint32_t id = 1; id <= spec.num_items; ++id) {
        const std::size_t c = (id - 1) % C;
        const std::size_t rank = (id - 1) / C;  // 0 = most popular of its cluster
        ds.item_cluster.push_back(c);
        cluster_rank[id - 1] = rank;
        Item item;
        item.id = id;
        const std::size_t base = (c * spec.vocab) / C;
        const std::size_t quality = static_cast<std::size_t>(std::log2(rank + 1.0));
        item.tokens.resize(spec.text_seq);
        item.tokens[0] = base;  // cluster marker
        if (spec.text_seq > 1)
            item.tokens[1] = std::min(spec.vocab - 1, base + 1 + quality);  // popularity marker
        for (std::size_t t = 2; t < spec.text_seq; ++t)
            item.tokens[t] = base + rng.uniform_index(std::min(tokens_per_cluster, spec.vocab - base));
        item.patches = Tensor::zeros({spec.image_seq, spec.patch_dim});
        const double q = static_cast<double>(quality);
        for (std::size_t i = 0; i < item.patches.numel(); ++i) {
            const std::size_t col = i % spec.patch_dim;
            item.patches.mutable_values()[i] = centers[c].values()[i] +
                                               0.5 * q * quality_dirs[c].values()[col] +
                                               rng.normal(0.0, 0.2);
        }
        ds.items.push_back(std::move(item));
    }

    // zipf(1.0) sampling weights per cluster
    std::vector<std::vector<std::uint32_t>> cluster_items(C);
    for (std::uint32_t id = 1; id <= spec.num_items; ++id)
        cluster_items[ds.item_cluster[id - 1]].push_back(id);
    std::vector<std::vector<double>> cluster_cdf(C);
    for (std::size_t c = 0; c < C; ++c) {
        double total = 0.0;
        for (std::size_t r = 0; r < cluster_items[c].size(); ++r) {
            total += 1.0 / static_cast<double>(cluster_rank[cluster_items[c][r] - 1] + 1);
            cluster_cdf[c].push_back(total);
        }
        for (auto& v : cluster_cdf[c]) v /= total;
    }
    auto sample_cluster_item = [&](std::size_t c) {
        const double u = rng.uniform();
        const auto& cdf = cluster_cdf[c];
        std::size_t lo = 0, hi = cdf.size() - 1;
        while (lo < hi) {
            const std::size_t mid = (lo + hi) / 2;
            if (cdf[mid] < u) lo = mid + 1; else hi = mid;
        }
        return cluster_items[c][lo];
    };

    for (std::uint32_t uid = 1; uid <= spec.num_users; ++uid) {
        UserSequence us;
        us.id = uid;
        const std::size_t c = rng.uniform_index(C);
        const std::size_t len = 3 + rng.uniform_index(spec.max_seq - 3 + 1);
        for (std::size_t t = 0; t < len; ++t) {
            if (rng.uniform() < spec.in_cluster_prob)
                us.items.push_back(sample_cluster_item(c));
            else
                us.items.push_back(static_cast<std::uint32_t>(1 + rng.uniform_index(spec.num_items)));
        }
        ds.users.push_back(std::move(us));
    }
    return ds;
}

// ---- leave-one-out split + popularity --------------------------------------

struct PopularityTable {
    std::vector<double> p;  // indexed by item id (0 unused), add-one smoothed

    double prob(std::uint32_t id) const { return p.at(id); }
    double log_prob(std::uint32_t id) const { return std::log(p.at(id)); }
};

struct SplitUser {
    std::uint32_t id = 0;
    std::vector<std::uint32_t> train;              // all but the last two
    std::uint32_t valid_target = 0, test_target = 0;
    std::unordered_set<std::uint32_t> interacted;  // I_u: the training item set
};

struct SplitResult {
    std::vector<SplitUser> users;
    PopularityTable popularity;
};

inline SplitResult split_and_popularity(const Dataset& ds) {
    SplitResult out;
    std::vector<std::size_t> counts(ds.spec.num_items + 1, 0);
    std::size_t total = 0;
    for (const auto& u : ds.users) {
        if (u.items.size() < 3)
            throw DataError("split: user " + std::to_string(u.id) + " has fewer than 3 items");
        SplitUser su;
        su.id = u.id;
        su.train.assign(u.items.begin(), u.items.end() - 2);
        su.valid_target = u.items[u.items.size() - 2];
        su.test_target = u.items.back();
        for (auto id : su.train) {
            counts[id]++;
            ++total;
            su.interacted.insert(id);
        }
        out.users.push_back(std::move(su));
    }
    out.popularity.p.assign(ds.spec.num_items + 1, 0.0);
    const double denom = static_cast<double>(total + ds.spec.num_items);
    for (std::uint32_t id = 1; id <= ds.spec.num_items; ++id)
        out.popularity.p[id] = static_cast<double>(counts[id] + 1) / denom;
    return out;
}

// ---- persistence ------------------------------------------------------------

inline std::string dataset_digest(const GenSpec& spec) {
    return Sha256::hex_digest("dataset|" + spec.digest_string());
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f.write("DPDS", 4);
    write_u32(f, 1);  // version
    auto digest = Sha256::digest("dataset|" + ds.spec.digest_string());
    write_bytes(f, digest.data(), digest.size());
    write_u64(f, ds.spec.num_users);
    write_u64(f, ds.spec.num_items);
    write_u64(f, ds.spec.seed);
    write_u64(f, ds.spec.num_latent_clusters);
    write_u64(f, ds.spec.text_seq);
    write_u64(f, ds.spec.vocab);
    write_u64(f, ds.spec.image_seq);
    write_u64(f, ds.spec.patch_dim);
    write_u64(f, ds.spec.max_seq);
    write_f64(f, ds.spec.in_cluster_prob);
    for (const auto& item : ds.items) {
        write_u32(f, item.id);
        for (auto t : item.tokens) write_pod<std::uint16_t>(f, static_cast<std::uint16_t>(t));
        for (double v : item.patches.values()) write_f64(f, v);
        write_u32(f, static_cast<std::uint32_t>(ds.item_cluster[item.id - 1]));
    }
    for (const auto& u : ds.users) {
        write_u32(f, u.id);
        write_u32(f, static_cast<std::uint32_t>(u.items.size()));
        for (auto id : u.items) write_u32(f, id);
    }
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open dataset " + path);
    check_magic(f, "DPDS", "dataset");
    const auto version = read_u32(f, "dataset version");
    if (version != 1) throw DataError("dataset: unsupported version " + std::to_string(version));
    std::array<std::uint8_t, 32> digest{};
    read_bytes(f, digest.data(), digest.size(), "dataset digest");
    Dataset ds;
    ds.spec.num_users = read_u64(f, "num_users");
    ds.spec.num_items = read_u64(f, "num_items");
    ds.spec.seed = read_u64(f, "seed");
    ds.spec.num_latent_clusters = read_u64(f, "clusters");
    ds.spec.text_seq = read_u64(f, "text_seq");
    ds.spec.vocab = read_u64(f, "vocab");
    ds.spec.image_seq = read_u64(f, "image_seq");
    ds.spec.patch_dim = read_u64(f, "patch_dim");
    ds.spec.max_seq = read_u64(f, "max_seq");
    ds.spec.in_cluster_prob = read_f64(f, "in_cluster_prob");
    auto expect = Sha256::digest("dataset|" + ds.spec.digest_string());
    if (expect != digest) throw DataError("dataset: digest mismatch (file corrupt or spec drift)");
    ds.items.resize(ds.spec.num_items);
    ds.item_cluster.resize(ds.spec.num_items);
    for (auto& item : ds.items) {
        item.id = read_u32(f, "item id");
        item.tokens.resize(ds.spec.text_seq);
        for (auto& t : item.tokens) t = read_pod<std::uint16_t>(f, "token");
        item.patches = Tensor::zeros({ds.spec.image_seq, ds.spec.patch_dim});
        for (auto& v : item.patches.mutable_values()) v = read_f64(f, "patch");
        ds.item_cluster[item.id - 1] = read_u32(f, "cluster");
    }
    ds.users.resize(ds.spec.num_users);
    for (auto& u : ds.users) {
        u.id = read_u32(f, "user id");
        u.items.resize(read_u32(f, "user len"));
        for (auto& id : u.items) id = read_u32(f, "user item");
    }
    return ds;
}

inline std::string dataset_manifest(const Dataset& ds) {
    std::ostringstream os;
    os << "{\n"
       << "  \"format\": \"DPDS v1\",\n"
       << "  \"digest\": \"" << dataset_digest(ds.spec) << "\",\n"
       << "  \"users\": " << ds.spec.num_users << ",\n"
       << "  \"items\": " << ds.spec.num_items << ",\n"
       << "  \"clusters\": " << ds.spec.num_latent_clusters << ",\n"
       << "  \"seed\": " << ds.spec.seed << ",\n"
       << "  \"text_seq\": " << ds.spec.text_seq << ",\n"
       << "  \"vocab\": " << ds.spec.vocab << ",\n"
       << "  \"image_seq\": " << ds.spec.image_seq << ",\n"
       << "  \"patch_dim\": " << ds.spec.patch_dim << ",\n"
       << "  \"max_seq\": " << ds.spec.max_seq << ",\n"
       << "  \"in_cluster_prob\": " << ds.spec.in_cluster_prob << "\n"
       << "}\n";
    return os.str();
}

}  // namespace iisan
