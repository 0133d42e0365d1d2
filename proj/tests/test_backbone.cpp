#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "iisan/backbone.hpp"
#include "iisan/rng.hpp"

using namespace iisan;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
    const std::size_t r = t.ndim() == 2 ? t.shape()[0] : 1;
    const std::size_t c = t.cols();
    Mat m(r, std::vector<double>(c));
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) m[i][j] = t.values()[i * c + j];
    return m;
}

Mat mm(const Mat& a, const Mat& b) {
    Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
    return out;
}

Mat add_rowvec(Mat a, const std::vector<double>& b) {
    for (auto& row : a)
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    return a;
}

Mat add_mat(Mat a, const Mat& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    return a;
}

Mat layernorm_ref(const Mat& x, double eps = 1e-5) {
    Mat out = x;
    for (auto& row : out) {
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(row.size());
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(row.size());
        const double is = 1.0 / std::sqrt(var + eps);
        for (double& v : row) v = (v - mean) * is;
    }
    return out;
}

void softmax_rows(Mat& x) {
    for (auto& row : x) {
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
}

double gelu_ref(double x) {
    return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

// independent re-implementation of one pre-LN block over plain matrices
Mat block_ref(const FrozenEncoder::Block& b, const Mat& x, std::size_t heads) {
    const std::size_t d = x[0].size();
    const std::size_t dh = d / heads;
    auto ln1 = layernorm_ref(x);
    for (auto& row : ln1)
        for (std::size_t j = 0; j < d; ++j) row[j] = row[j] * b.ln1_g.at(j) + b.ln1_b.at(j);
    Mat q = add_rowvec(mm(ln1, to_mat(b.wq)), b.bq.values());
    Mat k = add_rowvec(mm(ln1, to_mat(b.wk)), b.bk.values());
    Mat v = add_rowvec(mm(ln1, to_mat(b.wv)), b.bv.values());
    Mat cat(x.size(), std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
        Mat scores(x.size(), std::vector<double>(x.size(), 0.0));
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t j = 0; j < x.size(); ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
                scores[i][j] = s / std::sqrt(static_cast<double>(dh));
            }
        softmax_rows(scores);
        for (std::size_t i = 0; i < x.size(); ++i)
            for (std::size_t c = 0; c < dh; ++c) {
                double s = 0.0;
                for (std::size_t j = 0; j < x.size(); ++j) s += scores[i][j] * v[j][h * dh + c];
                cat[i][h * dh + c] = s;
            }
    }
    Mat attn = add_rowvec(mm(cat, to_mat(b.wo)), b.bo.values());
    Mat x1 = add_mat(x, attn);
    auto ln2 = layernorm_ref(x1);
    for (auto& row : ln2)
        for (std::size_t j = 0; j < d; ++j) row[j] = row[j] * b.ln2_g.at(j) + b.ln2_b.at(j);
    Mat h1 = add_rowvec(mm(ln2, to_mat(b.w1)), b.b1.values());
    for (auto& row : h1)
        for (double& v2 : row) v2 = gelu_ref(v2);
    Mat mlp = add_rowvec(mm(h1, to_mat(b.w2)), b.b2.values());
    return add_mat(x1, mlp);
}

EncoderConfig small_text() {
    EncoderConfig cfg;
    cfg.modality = Modality::text;
    cfg.layers = 2;
    cfg.hidden_dim = 4;
    cfg.heads = 2;
    cfg.seq_len = 3;
    cfg.vocab_or_patch_dim = 16;
    cfg.seed = 42;
    return cfg;
}

}  // namespace

TEST_CASE("straight-line reference reproduces the encoder layer by layer") {
    const EncoderConfig cfg = small_text();
    FrozenEncoder enc(cfg);
    const std::vector<std::size_t> tokens = {3, 0, 15};
    HiddenStack hs = enc.encode_tokens(tokens);
    REQUIRE(hs.depth() == cfg.layers + 1);

    Mat x(cfg.seq_len, std::vector<double>(cfg.hidden_dim));
    for (std::size_t i = 0; i < cfg.seq_len; ++i)
        for (std::size_t j = 0; j < cfg.hidden_dim; ++j)
            x[i][j] = enc.embed_table().at(tokens[i], j) + enc.pos_table().at(i, j);
    for (std::size_t j = 0; j < cfg.hidden_dim; ++j)
        CHECK(hs.layers[0][j] == doctest::Approx(x[0][j]).epsilon(1e-12));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        x = block_ref(enc.blocks()[l], x, cfg.heads);
        for (std::size_t j = 0; j < cfg.hidden_dim; ++j)
            CHECK(hs.layers[l + 1][j] == doctest::Approx(x[0][j]).epsilon(1e-9));
    }
}

TEST_CASE("same config yields bit-identical weights and hidden states") {
    const EncoderConfig cfg = small_text();
    FrozenEncoder a(cfg), b(cfg);
    CHECK(a.embed_table().values() == b.embed_table().values());
    CHECK(a.blocks()[1].w1.values() == b.blocks()[1].w1.values());
    HiddenStack ha = a.encode_tokens({1, 2, 3});
    HiddenStack hb = b.encode_tokens({1, 2, 3});
    CHECK(ha.layers == hb.layers);
    EncoderConfig other = cfg;
    other.seed = 43;
    FrozenEncoder c(other);
    CHECK(a.embed_table().values() != c.embed_table().values());
}

TEST_CASE("invalid configurations are rejected") {
    EncoderConfig cfg = small_text();
    cfg.hidden_dim = 32;
    cfg.heads = 5;
    CHECK_THROWS_AS(FrozenEncoder{cfg}, ConfigError);
    cfg = small_text();
    cfg.layers = 0;
    CHECK_THROWS_AS(FrozenEncoder{cfg}, ConfigError);
    cfg = small_text();
    cfg.vocab_or_patch_dim = 0;
    CHECK_THROWS_AS(FrozenEncoder{cfg}, ConfigError);
}

TEST_CASE("wrong modality or length inputs are rejected") {
    FrozenEncoder text(small_text());
    CHECK_THROWS_AS(text.encode_patches(Tensor::zeros({3, 16})), ConfigError);
    CHECK_THROWS_AS(text.encode_tokens({1, 2}), DataError);

    EncoderConfig icfg = small_text();
    icfg.modality = Modality::image;
    icfg.seq_len = 5;
    icfg.vocab_or_patch_dim = 6;
    FrozenEncoder image(icfg);
    CHECK_THROWS_AS(image.encode_tokens({1, 2, 3, 4, 5}), ConfigError);
    CHECK_THROWS_AS(image.encode_patches(Tensor::zeros({4, 6})), DataError);
    Rng rng(0);
    HiddenStack hs = image.encode_patches(Tensor::randn({5, 6}, rng, 1.0));
    CHECK(hs.depth() == icfg.layers + 1);
    CHECK(hs.dim() == icfg.hidden_dim);
}

TEST_CASE("parameter counts match the closed form") {
    for (std::size_t d : {4u, 32u}) {
        EncoderConfig cfg = small_text();
        cfg.hidden_dim = d;
        cfg.heads = 2;
        FrozenEncoder enc(cfg);
        const std::size_t per_block = 12 * d * d + 13 * d;
        const std::size_t expected =
            cfg.vocab_or_patch_dim * d + cfg.seq_len * d + cfg.layers * per_block;
        CHECK(enc.param_count() == expected);
        CHECK(enc.params().size() == 2 + cfg.layers * 16);
    }
}

TEST_CASE("bias set is exactly 11 d values per block") {
    const EncoderConfig cfg = small_text();
    FrozenEncoder enc(cfg);
    std::size_t bias_values = 0;
    for (const auto& p : enc.bias_params()) {
        CHECK(p.tensor.ndim() == 1);  // biases and layernorm shifts are vectors
        bias_values += p.tensor.numel();
    }
    CHECK(bias_values == cfg.layers * 11 * cfg.hidden_dim);
}

TEST_CASE("a frozen forward pass records no tape nodes") {
    FrozenEncoder enc(small_text());
    Tape tape;
    auto pooled = enc.forward_tokens(&tape, {1, 2, 3});
    CHECK(pooled.size() == enc.config().layers + 1);
    CHECK(tape.node_count() == 0);
    CHECK(tape.retained_bytes() == 0);
}

TEST_CASE("unfreezing parameters makes the tape grow") {
    FrozenEncoder enc(small_text());
    auto params = enc.params();
    for (auto& p : params) p.tensor.set_requires_grad(true);
    Tape tape;
    enc.forward_tokens(&tape, {1, 2, 3});
    CHECK(tape.node_count() > 0);
    CHECK(tape.retained_bytes() > 0);
}

TEST_CASE("hidden stack tensors round-trip") {
    FrozenEncoder enc(small_text());
    HiddenStack hs = enc.encode_tokens({7, 8, 9});
    auto ts = hs.as_tensors();
    REQUIRE(ts.size() == hs.depth());
    CHECK(ts[0].shape() == Shape{1, enc.config().hidden_dim});
    HiddenStack back = HiddenStack::from_tensors(ts);
    CHECK(back.layers == hs.layers);
}

TEST_CASE("zero-initialized adapter leaves the forward pass unchanged") {
    Rng rng(5);
    AdapterBlock a = AdapterBlock::init(4, 2, rng);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0);
    Tensor y = a.forward(nullptr, x);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-12));
}

TEST_CASE("zero-initialized lora adds no delta") {
    Rng rng(5);
    LoraPair p = LoraPair::init(4, 2, 16.0, rng);
    Tensor x = Tensor::randn({3, 4}, rng, 1.0);
    Tensor base = Tensor::randn({3, 4}, rng, 1.0);
    Tensor y = p.apply(nullptr, x, base);
    CHECK(y.values() == base.values());
    CHECK(p.scaling == doctest::Approx(8.0));
}
