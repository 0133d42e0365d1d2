// Command-line harness: dataset generation, cache building, training,
// evaluation, profiling and TPME comparison, driven by a JSON config with
// flag overrides (flag > config file > built-in default).

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "iisan/checkpoint.hpp"
#include "iisan/data.hpp"
#include "iisan/efficiency.hpp"
#include "iisan/train.hpp"

using nlohmann::json;

namespace {

struct Options {
    std::string config_path;
    std::string dataset_path = "dataset.bin";
    std::string cache_path;
    std::string out_dir = "out";
    std::string out_file;
    std::string checkpoint_path;
    std::string split = "test";
    std::string method = "iisan";
    std::string layerdrop = "keep_all";
    std::vector<std::size_t> keep;

    iisan::GenSpec gen;
    std::size_t layers = 4, hidden_dim = 32, heads = 2;
    std::uint64_t backbone_seed = 1;
    std::size_t bottleneck = 8, lora_rank = 8;
    double lora_alpha = 16.0;
    bool use_intra = true, use_inter = true, use_text = true, use_image = true;
    std::size_t seq_dim = 64, seq_heads = 2, seq_blocks = 2, max_len = 10;
    double dropout = 0.1;
    double lr = 1e-3;
    std::size_t batch_size = 32, epochs = 5, max_users = 0;
    std::uint64_t seed = 0;
    std::size_t cache_width = 8;
    double alpha1 = 0.45, alpha2 = 0.10, alpha3 = 0.45;
    bool append = false;
};

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream f(path);
    if (!f) throw iisan::ConfigError("config file not found: " + path);
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw iisan::ConfigError("config parse error in " + path + ": " + e.what());
    }
}

// json value wins only when the flag was not given on the command line
template <typename T>
void override_from(const CLI::App& sub, const std::string& flag, const json& j,
                   const std::string& key, T& var) {
    const CLI::Option* opt = sub.get_option_no_throw(flag);
    if (opt == nullptr || opt->count() > 0) return;  // flag absent here or given explicitly
    const json* node = &j;
    std::string rest = key;
    for (auto dot = rest.find('.'); dot != std::string::npos; dot = rest.find('.')) {
        const std::string head = rest.substr(0, dot);
        rest = rest.substr(dot + 1);
        if (!node->contains(head)) return;
        node = &node->at(head);
    }
    if (!node->contains(rest)) return;
    try {
        var = node->at(rest).get<T>();
    } catch (const json::exception& e) {
        throw iisan::ConfigError("config key " + key + ": " + e.what());
    }
}

void add_dataset_flags(CLI::App* sub, Options& o) {
    sub->add_option("--dataset", o.dataset_path, "dataset file");
}

void add_model_flags(CLI::App* sub, Options& o) {
    sub->add_option("--method", o.method, "fft|adapter|lora|bitfit|iisan|iisan_cached");
    sub->add_option("--cache", o.cache_path, "hidden-state cache file");
    sub->add_option("--layers", o.layers, "backbone transformer blocks");
    sub->add_option("--hidden-dim", o.hidden_dim, "backbone hidden dim");
    sub->add_option("--heads", o.heads, "backbone attention heads");
    sub->add_option("--backbone-seed", o.backbone_seed, "backbone init seed");
    sub->add_option("--bottleneck", o.bottleneck, "adapter/SANB bottleneck r");
    sub->add_option("--lora-rank", o.lora_rank, "LoRA rank");
    sub->add_option("--lora-alpha", o.lora_alpha, "LoRA scaling alpha");
    sub->add_option("--layerdrop", o.layerdrop, "keep_all|keep_even|explicit");
    sub->add_option("--keep", o.keep, "explicit kept block indices");
    sub->add_option("--use-intra", o.use_intra, "enable intra-modal towers");
    sub->add_option("--use-inter", o.use_inter, "enable the inter-modal tower");
    sub->add_option("--use-text", o.use_text, "enable the text modality");
    sub->add_option("--use-image", o.use_image, "enable the image modality");
    sub->add_option("--seq-dim", o.seq_dim, "sequence encoder dim");
    sub->add_option("--dropout", o.dropout, "sequence encoder dropout");
    sub->add_option("--seed", o.seed, "method/training seed");
}

void add_train_flags(CLI::App* sub, Options& o) {
    sub->add_option("--lr", o.lr, "learning rate");
    sub->add_option("--batch-size", o.batch_size, "users per batch");
    sub->add_option("--epochs", o.epochs, "training epochs");
    sub->add_option("--max-users", o.max_users, "cap users per epoch (0 = all)");
}

void apply_config(const CLI::App& sub, const json& j, Options& o) {
    override_from(sub, "--dataset", j, "dataset", o.dataset_path);
    override_from(sub, "--cache", j, "cache", o.cache_path);
    override_from(sub, "--out-dir", j, "out_dir", o.out_dir);
    override_from(sub, "--method", j, "method.name", o.method);
    override_from(sub, "--bottleneck", j, "method.adapter_bottleneck", o.bottleneck);
    override_from(sub, "--lora-rank", j, "method.lora_rank", o.lora_rank);
    override_from(sub, "--lora-alpha", j, "method.lora_alpha", o.lora_alpha);
    override_from(sub, "--layers", j, "backbone.layers", o.layers);
    override_from(sub, "--hidden-dim", j, "backbone.hidden_dim", o.hidden_dim);
    override_from(sub, "--heads", j, "backbone.heads", o.heads);
    override_from(sub, "--backbone-seed", j, "backbone.seed", o.backbone_seed);
    override_from(sub, "--bottleneck", j, "adaptation.bottleneck", o.bottleneck);
    override_from(sub, "--layerdrop", j, "adaptation.layerdrop", o.layerdrop);
    override_from(sub, "--keep", j, "adaptation.keep", o.keep);
    override_from(sub, "--use-intra", j, "adaptation.use_intra", o.use_intra);
    override_from(sub, "--use-inter", j, "adaptation.use_inter", o.use_inter);
    override_from(sub, "--use-text", j, "adaptation.use_text", o.use_text);
    override_from(sub, "--use-image", j, "adaptation.use_image", o.use_image);
    override_from(sub, "--seq-dim", j, "seq_encoder.dim", o.seq_dim);
    override_from(sub, "--dropout", j, "seq_encoder.dropout", o.dropout);
    override_from(sub, "--lr", j, "train.lr", o.lr);
    override_from(sub, "--batch-size", j, "train.batch_size", o.batch_size);
    override_from(sub, "--epochs", j, "train.epochs", o.epochs);
    override_from(sub, "--seed", j, "train.seed", o.seed);
    override_from(sub, "--max-users", j, "train.max_users", o.max_users);
    override_from(sub, "--users", j, "gen.num_users", o.gen.num_users);
    override_from(sub, "--items", j, "gen.num_items", o.gen.num_items);
    override_from(sub, "--gen-seed", j, "gen.seed", o.gen.seed);
    override_from(sub, "--clusters", j, "gen.num_latent_clusters", o.gen.num_latent_clusters);
    override_from(sub, "--alpha1", j, "tpme.alpha1", o.alpha1);
    override_from(sub, "--alpha2", j, "tpme.alpha2", o.alpha2);
    override_from(sub, "--alpha3", j, "tpme.alpha3", o.alpha3);
}

iisan::LayerDropPolicy parse_policy(const std::string& s) {
    if (s == "keep_all") return iisan::LayerDropPolicy::keep_all;
    if (s == "keep_even") return iisan::LayerDropPolicy::keep_even;
    if (s == "explicit") return iisan::LayerDropPolicy::explicit_set;
    throw iisan::ConfigError("unknown layerdrop policy: " + s);
}

struct Built {
    iisan::Dataset dataset;
    iisan::SplitResult split;
    std::unique_ptr<iisan::ItemModel> model;
    std::unique_ptr<iisan::CacheStore> cache;
    iisan::TrainConfig tcfg;
};

Built build_run(const Options& o) {
    Built b;
    b.dataset = iisan::load_dataset(o.dataset_path);
    b.split = iisan::split_and_popularity(b.dataset);

    iisan::EncoderConfig text{iisan::Modality::text, o.layers, o.hidden_dim, o.heads,
                              b.dataset.spec.text_seq, b.dataset.spec.vocab, o.backbone_seed};
    iisan::EncoderConfig image{iisan::Modality::image, o.layers, o.hidden_dim, o.heads,
                               b.dataset.spec.image_seq, b.dataset.spec.patch_dim,
                               o.backbone_seed};
    iisan::MethodConfig mc;
    mc.method = iisan::parse_method(o.method);
    mc.adapter_bottleneck = o.bottleneck;
    mc.lora_rank = o.lora_rank;
    mc.lora_alpha = o.lora_alpha;
    mc.seed = o.seed;
    iisan::IisanConfig ic;
    ic.bottleneck = o.bottleneck;
    ic.policy = parse_policy(o.layerdrop);
    ic.explicit_keep = o.keep;
    ic.use_intra = o.use_intra;
    ic.use_inter = o.use_inter;
    ic.use_text = o.use_text;
    ic.use_image = o.use_image;
    iisan::SeqEncoderConfig sc;
    sc.dim = o.seq_dim;
    sc.heads = o.seq_heads;
    sc.blocks = o.seq_blocks;
    sc.max_len = o.max_len;
    sc.dropout = o.dropout;
    sc.seed = o.seed;

    b.model = std::make_unique<iisan::ItemModel>(mc, text, image, ic, sc);
    if (!o.cache_path.empty()) {
        // EPEFT + cache is rejected here with the cache-error exit code
        if (b.model->is_epeft())
            throw iisan::CacheError("cached hidden states are not applicable to embedded method " +
                                    o.method);
        b.cache = std::make_unique<iisan::CacheStore>(
            iisan::CacheStore::open(o.cache_path, text, image));
    }
    b.tcfg = {o.lr, o.batch_size, o.epochs, o.seed, o.max_users};
    return b;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw iisan::DataError("cannot write " + path);
    return f;
}

int cmd_gen_data(const Options& o) {
    iisan::Dataset ds = iisan::generate(o.gen);
    iisan::save_dataset(ds, o.dataset_path);
    const std::string manifest_path = o.out_file.empty()
                                          ? o.dataset_path + ".manifest.json"
                                          : o.out_file;
    open_out(manifest_path) << iisan::dataset_manifest(ds);
    std::cout << "wrote " << o.dataset_path << " (" << ds.spec.num_users << " users, "
              << ds.spec.num_items << " items, digest " << iisan::dataset_digest(ds.spec)
              << ")\n";
    return 0;
}

int cmd_build_cache(const Options& o) {
    iisan::Dataset ds = iisan::load_dataset(o.dataset_path);
    iisan::EncoderConfig text{iisan::Modality::text, o.layers, o.hidden_dim, o.heads,
                              ds.spec.text_seq, ds.spec.vocab, o.backbone_seed};
    iisan::EncoderConfig image{iisan::Modality::image, o.layers, o.hidden_dim, o.heads,
                               ds.spec.image_seq, ds.spec.patch_dim, o.backbone_seed};
    iisan::FrozenEncoder text_enc(text), image_enc(image);
    const std::string out = o.out_file.empty() ? "cache.bin" : o.out_file;
    iisan::CacheStore::build(text_enc, image_enc, ds.items, out, o.cache_width);
    std::cout << "wrote " << out << " (" << ds.items.size() * 2 << " records, digest "
              << iisan::cache_digest_hex(text, image) << ")\n";
    return 0;
}

int cmd_train(const Options& o) {
    Built b = build_run(o);
    std::filesystem::create_directories(o.out_dir);
    iisan::Trainer trainer(*b.model, b.dataset, b.split, b.tcfg, b.cache.get());
    const std::string digest = b.model->config_digest();

    auto csv = open_out(o.out_dir + "/epoch_stats.csv");
    csv << "config_digest,method,epoch,loss,wall_seconds,peak_retained_bytes,peak_tape_nodes\n";
    for (std::size_t e = 0; e < o.epochs; ++e) {
        iisan::EpochStats st = trainer.train_epoch(e);
        csv << digest << ',' << o.method << ',' << e << ',' << std::setprecision(12) << st.loss
            << ',' << st.wall_seconds << ',' << st.peak_retained_bytes << ','
            << st.peak_tape_nodes << '\n';
        std::cout << "epoch " << e << " loss " << st.loss << '\n';
    }
    iisan::save_checkpoint(o.out_dir + "/checkpoint.bin", *b.model);
    std::cout << "wrote " << o.out_dir << "/checkpoint.bin (digest " << digest << ")\n";
    return 0;
}

int cmd_eval(const Options& o) {
    Built b = build_run(o);
    if (!o.checkpoint_path.empty()) iisan::load_checkpoint(o.checkpoint_path, *b.model);
    iisan::Trainer trainer(*b.model, b.dataset, b.split, b.tcfg, b.cache.get());
    iisan::EvalSplit split;
    if (o.split == "valid") split = iisan::EvalSplit::valid;
    else if (o.split == "test") split = iisan::EvalSplit::test;
    else throw iisan::ConfigError("unknown split: " + o.split);
    iisan::EvalReport rep = trainer.evaluate(split);
    const std::string out = o.out_file.empty() ? "eval.csv" : o.out_file;
    auto csv = open_out(out);
    csv << "config_digest,method,split,hr10,ndcg10,seed\n";
    csv << b.model->config_digest() << ',' << o.method << ',' << o.split << ','
        << std::setprecision(12) << rep.hr10 << ',' << rep.ndcg10 << ',' << o.seed << '\n';
    std::cout << o.method << ' ' << o.split << " HR@10 " << rep.hr10 << " NDCG@10 " << rep.ndcg10
              << '\n';
    return 0;
}

int cmd_profile(const Options& o) {
    Built b = build_run(o);
    if (o.epochs < 3)
        throw iisan::ConfigError("profile: need at least 3 epochs, got " +
                                 std::to_string(o.epochs));
    std::filesystem::create_directories(o.out_dir);
    iisan::Trainer trainer(*b.model, b.dataset, b.split, b.tcfg, b.cache.get());
    std::vector<iisan::EpochStats> stats = trainer.train(o.epochs);
    std::size_t peak_act = 0;
    for (const auto& st : stats) peak_act = std::max(peak_act, st.peak_retained_bytes);
    iisan::MemoryBreakdown mb = iisan::memory_breakdown(*b.model, peak_act);
    iisan::CostSample cs =
        iisan::measure_epoch(o.method, stats, b.model->trainable_count(), mb);
    const std::string digest = b.model->config_digest();

    const std::string cost_path = o.out_dir + "/costs.csv";
    const bool fresh = !o.append || !std::filesystem::exists(cost_path);
    std::ofstream costs(cost_path, fresh ? std::ios::trunc : std::ios::app);
    if (!costs) throw iisan::DataError("cannot write " + cost_path);
    if (fresh) costs << "method,t_seconds,params,mem_bytes,config_digest\n";
    costs << cs.method << ',' << std::setprecision(12) << cs.t_seconds << ',' << cs.params << ','
          << cs.mem_bytes << ',' << digest << '\n';

    auto breakdown = open_out(o.out_dir + "/memory_breakdown_" + o.method + ".csv");
    breakdown << "config_digest,method,weights_bytes,grad_bytes,optimizer_bytes,"
                 "activation_bytes,total_bytes\n";
    breakdown << digest << ',' << o.method << ',' << mb.weights_bytes << ',' << mb.grad_bytes
              << ',' << mb.optimizer_bytes << ',' << mb.activation_bytes << ',' << mb.total()
              << '\n';
    std::cout << o.method << " t=" << cs.t_seconds << "s p=" << cs.params
              << " m=" << cs.mem_bytes << "B\n";
    return 0;
}

int cmd_tpme(const Options& o) {
    const std::string in = o.dataset_path;
    std::ifstream csv(in);
    if (!csv) throw iisan::DataError("cannot open " + in);
    std::string line;
    if (!std::getline(csv, line)) throw iisan::DataError("empty cost CSV " + in);
    std::vector<iisan::CostSample> samples;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string method, t, p, m;
        if (!std::getline(ls, method, ',') || !std::getline(ls, t, ',') ||
            !std::getline(ls, p, ',') || !std::getline(ls, m, ','))
            throw iisan::DataError("malformed cost row: " + line);
        try {
            samples.push_back({method, std::stod(t), std::stod(p), std::stod(m)});
        } catch (const std::exception&) {
            throw iisan::DataError("malformed cost row: " + line);
        }
    }
    iisan::TpmeWeights w{o.alpha1, o.alpha2, o.alpha3};
    std::vector<double> scores = iisan::tpme(samples, w);
    const std::string out = o.out_file.empty() ? "tpme.csv" : o.out_file;
    auto outf = open_out(out);
    outf << "method,tpme_percent\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        outf << samples[i].method << ',' << std::fixed << std::setprecision(2) << scores[i]
             << '\n';
        std::cout << samples[i].method << '\t' << std::fixed << std::setprecision(2) << scores[i]
                  << "%\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"decoupled-PEFT training engine and efficiency benchmark"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--config", o.config_path, "JSON config file");
    gen->add_option("--out", o.dataset_path, "output dataset file");
    gen->add_option("--manifest", o.out_file, "manifest path");
    gen->add_option("--users", o.gen.num_users, "number of users");
    gen->add_option("--items", o.gen.num_items, "number of items");
    gen->add_option("--gen-seed", o.gen.seed, "generation seed");
    gen->add_option("--clusters", o.gen.num_latent_clusters, "latent clusters");

    auto* cache = app.add_subcommand("build-cache", "precompute hidden-state cache");
    cache->add_option("--config", o.config_path, "JSON config file");
    add_dataset_flags(cache, o);
    cache->add_option("--out", o.out_file, "output cache file");
    cache->add_option("--width", o.cache_width, "value width in bytes (8 or 4)");
    cache->add_option("--layers", o.layers, "backbone transformer blocks");
    cache->add_option("--hidden-dim", o.hidden_dim, "backbone hidden dim");
    cache->add_option("--heads", o.heads, "backbone attention heads");
    cache->add_option("--backbone-seed", o.backbone_seed, "backbone init seed");

    auto* train = app.add_subcommand("train", "train one method");
    train->add_option("--config", o.config_path, "JSON config file");
    add_dataset_flags(train, o);
    add_model_flags(train, o);
    add_train_flags(train, o);
    train->add_option("--out-dir", o.out_dir, "output directory");

    auto* eval = app.add_subcommand("eval", "evaluate HR@10 / NDCG@10");
    eval->add_option("--config", o.config_path, "JSON config file");
    add_dataset_flags(eval, o);
    add_model_flags(eval, o);
    eval->add_option("--checkpoint", o.checkpoint_path, "checkpoint to load");
    eval->add_option("--split", o.split, "valid|test");
    eval->add_option("--out", o.out_file, "report CSV path");

    auto* profile = app.add_subcommand("profile", "measure (t, p, m) for one method");
    profile->add_option("--config", o.config_path, "JSON config file");
    add_dataset_flags(profile, o);
    add_model_flags(profile, o);
    add_train_flags(profile, o);
    profile->add_option("--out-dir", o.out_dir, "output directory");
    profile->add_flag("--append", o.append, "append to an existing costs.csv");

    auto* tpme = app.add_subcommand("tpme", "compare methods from a cost CSV");
    tpme->add_option("--config", o.config_path, "JSON config file");
    tpme->add_option("--input", o.dataset_path, "cost CSV (method,t_seconds,params,mem_bytes)")
        ->required();
    tpme->add_option("--out", o.out_file, "output CSV path");
    tpme->add_option("--alpha1", o.alpha1, "time weight");
    tpme->add_option("--alpha2", o.alpha2, "parameter weight");
    tpme->add_option("--alpha3", o.alpha3, "memory weight");

    CLI11_PARSE(app, argc, argv);

    try {
        CLI::App* sub = app.get_subcommands().front();
        apply_config(*sub, load_config(o.config_path), o);
        if (sub == gen) return cmd_gen_data(o);
        if (sub == cache) return cmd_build_cache(o);
        if (sub == train) return cmd_train(o);
        if (sub == eval) return cmd_eval(o);
        if (sub == profile) return cmd_profile(o);
        if (sub == tpme) return cmd_tpme(o);
    } catch (const iisan::ConfigError& e) {
        std::cerr << "error: config: " << e.what() << '\n';
        return 2;
    } catch (const iisan::DataError& e) {
        std::cerr << "error: data: " << e.what() << '\n';
        return 3;
    } catch (const iisan::CacheError& e) {
        std::cerr << "error: cache: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
