#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "iisan/efficiency.hpp"
#include "iisan/model.hpp"
#include "iisan/optim.hpp"
#include "iisan/rng.hpp"

using namespace iisan;

namespace {

std::vector<CostSample> make_samples(const std::vector<double>& t, const std::vector<double>& p,
                                     const std::vector<double>& m) {
    std::vector<CostSample> out;
    for (std::size_t i = 0; i < t.size(); ++i)
        out.push_back({"m" + std::to_string(i), t[i], p[i], m[i]});
    return out;
}

// shared across the three published benchmark scenes
const std::vector<double> kParamsM = {195, 5, 0.8, 0.4, 4, 4};
const std::vector<double> kMemGB = {46.76, 37.82, 39.07, 36.97, 8.32, 3.11};

void check_published(const std::vector<double>& minutes, const std::vector<double>& expected,
                     const std::vector<bool>& include) {
    auto got = tpme(make_samples(minutes, kParamsM, kMemGB));
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        if (!include[i]) continue;
        CHECK_MESSAGE(std::abs(got[i] - expected[i]) <= 0.05,
                      "method " << i << ": computed " << got[i] << " vs published " << expected[i]);
    }
}

ItemModel toy_model(Method m) {
    EncoderConfig text;
    text.layers = 2;
    text.hidden_dim = 8;
    text.heads = 2;
    text.seq_len = 4;
    text.vocab_or_patch_dim = 32;
    EncoderConfig image = text;
    image.modality = Modality::image;
    image.seq_len = 3;
    image.vocab_or_patch_dim = 5;
    MethodConfig mc;
    mc.method = m;
    mc.adapter_bottleneck = 4;
    mc.lora_rank = 4;
    SeqEncoderConfig sc;
    sc.dim = 16;
    sc.heads = 2;
    IisanConfig ic;
    ic.bottleneck = 4;
    return ItemModel(mc, text, image, ic, sc);
}

}  // namespace

TEST_CASE("published reference values reproduce within 0.05 points") {
    // Six methods per scene: full fine-tuning, adapter, lora, bitfit, the
    // decoupled approach, and its cached variant. Inputs are the published
    // per-method training minutes, trainable parameter counts (millions) and
    // peak memory (GB); expectations are the published composite percentages.
    SUBCASE("scene 1") {
        // The fourth published value (70.82) is inconsistent with its own
        // inputs, which yield 75.63; likely a typo in the source table, so
        // that single cell is excluded here.
        check_published({443, 354, 378, 403, 179, 22},
                        {100.0, 71.50, 75.14, 70.82, 22.34, 0.19},
                        {true, true, true, false, true, true});
    }
    SUBCASE("scene 2") {
        check_published({369, 295, 308, 287, 142, 18},
                        {100.0, 71.55, 74.28, 69.40, 21.46, 0.19},
                        {true, true, true, true, true, true});
    }
    SUBCASE("scene 3") {
        check_published({355, 296, 308, 288, 140, 19},
                        {100.0, 73.12, 75.80, 70.93, 21.77, 0.19},
                        {true, true, true, true, true, true});
    }
}

TEST_CASE("tpme properties over random sample sets") {
    Rng rng(2024);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t n = 2 + rng.uniform_index(5);
        std::vector<double> t, p, m;
        for (std::size_t i = 0; i < n; ++i) {
            t.push_back(rng.uniform(1.0, 500.0));
            p.push_back(rng.uniform(0.1, 200.0));
            m.push_back(rng.uniform(0.5, 50.0));
        }
        auto samples = make_samples(t, p, m);

        // appending a dominator and a dominated method pins the scale
        double tmax = 0, pmax = 0, mmax = 0;
        for (const auto& s : samples) {
            tmax = std::max(tmax, s.t_seconds);
            pmax = std::max(pmax, s.params);
            mmax = std::max(mmax, s.mem_bytes);
        }
        auto pinned = samples;
        pinned.push_back({"dominator", tmax * 2, pmax * 2, mmax * 2});
        pinned.push_back({"dominated", 0.0, 0.0, 0.0});
        auto scores = tpme(pinned);
        CHECK(scores[n] == doctest::Approx(100.0));
        CHECK(scores[n + 1] == doctest::Approx(0.0));
        for (double s : scores) {
            CHECK(s >= 0.0);
            CHECK(s <= 100.0);
        }

        // per-axis positive rescaling and shifts do not change the result
        auto base = tpme(samples);
        auto rescaled = samples;
        const double k = rng.uniform(0.1, 10.0);
        for (auto& s : rescaled) {
            s.t_seconds *= k;
            s.params = s.params * 3.0 + 7.0;
            s.mem_bytes += 100.0;
        }
        auto moved = tpme(rescaled);
        for (std::size_t i = 0; i < base.size(); ++i)
            CHECK(moved[i] == doctest::Approx(base[i]).epsilon(1e-9));
    }
}

TEST_CASE("a degenerate axis contributes nothing") {
    auto samples = make_samples({5, 5, 5}, {1, 2, 3}, {10, 30, 20});
    auto scores = tpme(samples);
    // only the parameter (0.10) and memory (0.45) axes remain
    CHECK(scores[0] == doctest::Approx(0.0));
    CHECK(scores[1] == doctest::Approx(100.0 * (0.10 * 0.5 + 0.45 * 1.0)));
    CHECK(scores[2] == doctest::Approx(100.0 * (0.10 * 1.0 + 0.45 * 0.5)));
    auto all_same = tpme(make_samples({1, 1}, {2, 2}, {3, 3}));
    CHECK(all_same[0] == 0.0);
    CHECK(all_same[1] == 0.0);
}

TEST_CASE("weight and sample validation") {
    auto samples = make_samples({1, 2}, {1, 2}, {1, 2});
    TpmeWeights bad;
    bad.alpha1 = 0.5;  // sums to 1.05
    CHECK_THROWS_AS(tpme(samples, bad), ConfigError);
    bad = {};
    bad.alpha1 = -0.1;
    bad.alpha2 = 0.65;
    CHECK_THROWS_AS(tpme(samples, bad), ConfigError);
    bad = {1.1, -0.05, -0.05};
    CHECK_THROWS_AS(tpme(samples, bad), ConfigError);
    CHECK_THROWS_AS(tpme({samples[0]}), ConfigError);
    CHECK_THROWS_AS(tpme({}), ConfigError);
    TpmeWeights skewed{0.0, 0.0, 1.0};
    auto mem_only = tpme(samples, skewed);
    CHECK(mem_only[0] == 0.0);
    CHECK(mem_only[1] == 100.0);
}

TEST_CASE("epoch measurement takes the post-warm-up median") {
    std::vector<EpochStats> epochs(5);
    epochs[0].wall_seconds = 10.0;  // warm-up, excluded
    epochs[1].wall_seconds = 3.0;
    epochs[2].wall_seconds = 1.0;
    epochs[3].wall_seconds = 2.0;
    epochs[4].wall_seconds = 50.0;
    MemoryBreakdown mem;
    mem.weights_bytes = 100;
    mem.activation_bytes = 20;
    CostSample cs = measure_epoch("iisan", epochs, 1234, mem);
    CHECK(cs.method == "iisan");
    CHECK(cs.t_seconds == doctest::Approx(2.5));  // median of {1,2,3,50}
    CHECK(cs.params == 1234.0);
    CHECK(cs.mem_bytes == 120.0);
    epochs.resize(2);
    CHECK_THROWS_AS(measure_epoch("iisan", epochs, 1, mem), ConfigError);
}

TEST_CASE("memory breakdown identities") {
    for (Method m : {Method::fft, Method::adapter, Method::lora, Method::bitfit, Method::iisan,
                     Method::iisan_cached}) {
        ItemModel model = toy_model(m);
        MemoryBreakdown mb = memory_breakdown(model, 4096);
        std::size_t trainable_bytes = 0;
        for (const auto& p : model.trainable_params()) trainable_bytes += p.tensor.bytes();
        CHECK(mb.grad_bytes == trainable_bytes);
        CHECK(mb.optimizer_bytes == 2 * trainable_bytes);
        CHECK(mb.activation_bytes == 4096);
        CHECK(mb.total() ==
              mb.weights_bytes + mb.grad_bytes + mb.optimizer_bytes + mb.activation_bytes);

        // the optimizer figure equals what Adam actually allocates
        AdamState opt;
        auto params = model.trainable_params();
        opt.register_params(params);
        CHECK(opt.moment_bytes() == mb.optimizer_bytes);

        const bool cached = m == Method::iisan_cached;
        CHECK(mb.weights_bytes == model.resident_weight_bytes(cached));
    }
    // only the cached variant drops the frozen backbone from residency
    CHECK(memory_breakdown(toy_model(Method::iisan), 0).weights_bytes >
          memory_breakdown(toy_model(Method::iisan_cached), 0).weights_bytes);
}

TEST_CASE("analytic cost model reproduces the qualitative efficiency story") {
    const ModelShape s;
    auto row = [&](Method m) { return analytic_cost(s, m); };
    const CostModelRow fft = row(Method::fft);
    const CostModelRow adapter = row(Method::adapter);
    const CostModelRow lora = row(Method::lora);
    const CostModelRow iisan = row(Method::iisan);
    const CostModelRow cached = row(Method::iisan_cached);

    // time: full fine-tuning slowest, embedded PEFT close behind, the
    // decoupled path roughly halves it and caching removes the backbone
    CHECK(fft.time > adapter.time);
    CHECK(adapter.time > lora.time);
    CHECK(std::abs(adapter.time - lora.time) / lora.time < 0.002);  // near tie
    CHECK(lora.time > 1.5 * iisan.time);
    CHECK(iisan.time > 1.5 * cached.time);

    // memory: embedded methods retain the backbone activations; the
    // decoupled path does not, and caching also evicts the frozen weights
    CHECK(fft.memory > adapter.memory);
    CHECK(std::abs(adapter.memory - lora.memory) / lora.memory < 0.01);
    CHECK(adapter.memory > 4.0 * iisan.memory);
    CHECK(iisan.memory > cached.memory);

    // parameters: full fine-tuning dwarfs everything else
    CHECK(fft.params > 1.9 * adapter.params);
    CHECK(fft.params > 1.9 * lora.params);
    CHECK(fft.params > 1.9 * iisan.params);
    CHECK(std::abs(adapter.params - iisan.params) / iisan.params < 0.1);
    CHECK(iisan.params == cached.params);

    // feeding the model rows through the composite metric puts full
    // fine-tuning at the top and the cached variant at the bottom
    std::vector<CostSample> samples;
    for (const auto& r : {fft, adapter, lora, iisan, cached})
        samples.push_back({r.method, r.time, r.params, r.memory});
    auto scores = tpme(samples);
    CHECK(scores[0] == doctest::Approx(100.0));
    for (std::size_t i = 1; i < scores.size(); ++i) CHECK(scores[i] < scores[i - 1]);
    CHECK(scores.back() < 1.0);  // not exactly 0: lora holds the parameter minimum
}

TEST_CASE("terms scale with the model shape") {
    ModelShape small;
    ModelShape big = small;
    big.layers *= 2;
    big.hidden_dim *= 2;
    const CostTerms ts = analytic_terms(small, Method::fft);
    const CostTerms tb = analytic_terms(big, Method::fft);
    CHECK(tb.FP > 4.0 * ts.FP);
    CHECK(tb.MW > 4.0 * ts.MW);
    CHECK(ts.BP == doctest::Approx(2.0 * ts.FP));
    CHECK(ts.bp == doctest::Approx(2.0 * ts.fp));
}
