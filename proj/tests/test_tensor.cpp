#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "iisan/rng.hpp"
#include "iisan/tensor.hpp"

using namespace iisan;

namespace {

// central finite differences against the analytic gradients of loss_fn;
// loss_fn(nullptr) recomputes the forward value without taping
void check_grads(std::vector<Tensor> params,
                 const std::function<Tensor(Tape*)>& loss_fn, double tol = 1e-4) {
    Tape tape;
    Tensor loss = loss_fn(&tape);
    GradMap grads = backward(tape, loss);
    const double h = 1e-5;
    for (auto& p : params) {
        const auto* g = grads.find(p);
        REQUIRE_MESSAGE(g != nullptr, "missing gradient for a trainable input");
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double orig = p.values()[i];
            p.mutable_values()[i] = orig + h;
            const double lp = loss_fn(nullptr).item();
            p.mutable_values()[i] = orig - h;
            const double lm = loss_fn(nullptr).item();
            p.mutable_values()[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = (*g)[i];
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            CHECK_MESSAGE(std::abs(fd - an) / denom <= tol,
                          "fd " << fd << " vs analytic " << an << " at index " << i);
        }
    }
}

Tensor rand_t(Shape shape, Rng& rng, bool rg = true, double sd = 1.0) {
    return Tensor::randn(std::move(shape), rng, sd, rg);
}

// generic scalar reduction making every output element matter
Tensor weighted_sum(Tape* tape, const Tensor& t, const Tensor& w) {
    return sum_all(tape, mul(tape, t, w));
}

}  // namespace

TEST_CASE("matmul against identity and small example") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor out = matmul(nullptr, a, eye);
    CHECK(out.values() == a.values());
    Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
    Tensor ab = matmul(nullptr, a, b);
    CHECK(ab.at(0, 0) == 19);
    CHECK(ab.at(0, 1) == 22);
    CHECK(ab.at(1, 0) == 43);
    CHECK(ab.at(1, 1) == 50);
    CHECK_THROWS_AS(matmul(nullptr, a, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("softmax symmetry and normalization") {
    Tensor out = softmax(nullptr, Tensor::from({2}, {0.0, 0.0}));
    CHECK(out.at(0) == doctest::Approx(0.5));
    CHECK(out.at(1) == doctest::Approx(0.5));
    Rng rng(3);
    Tensor r = softmax(nullptr, rand_t({4, 7}, rng, false));
    for (std::size_t row = 0; row < 4; ++row) {
        double s = 0.0;
        for (std::size_t c = 0; c < 7; ++c) s += r.at(row, c);
        CHECK(s == doctest::Approx(1.0));
    }
}

TEST_CASE("layernorm output has mean 0 and variance 1") {
    Rng rng(5);
    Tensor x = rand_t({3, 16}, rng, false, 2.5);
    Tensor y = layernorm(nullptr, x);
    for (std::size_t r = 0; r < 3; ++r) {
        double mean = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 16; ++c) mean += y.at(r, c);
        mean /= 16.0;
        for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean);
        var /= 16.0;
        CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("finite differences validate every op gradient") {
    Rng rng(11);

    SUBCASE("matmul, both operands") {
        Tensor a = rand_t({3, 4}, rng), b = rand_t({4, 5}, rng);
        Tensor w = rand_t({3, 5}, rng, false);
        check_grads({a, b}, [&](Tape* t) { return weighted_sum(t, matmul(t, a, b), w); });
    }
    SUBCASE("add: same shape, row broadcast, scalar") {
        Tensor a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
        Tensor row = rand_t({4}, rng), c = rand_t({1}, rng);
        Tensor w = rand_t({3, 4}, rng, false);
        check_grads({a, b}, [&](Tape* t) { return weighted_sum(t, add(t, a, b), w); });
        check_grads({a, row}, [&](Tape* t) { return weighted_sum(t, add(t, a, row), w); });
        check_grads({a, c}, [&](Tape* t) { return weighted_sum(t, add(t, a, c), w); });
    }
    SUBCASE("mul: same shape, row broadcast, scalar") {
        Tensor a = rand_t({3, 4}, rng), b = rand_t({3, 4}, rng);
        Tensor row = rand_t({4}, rng), c = rand_t({1}, rng);
        Tensor w = rand_t({3, 4}, rng, false);
        check_grads({a, b}, [&](Tape* t) { return weighted_sum(t, mul(t, a, b), w); });
        check_grads({a, row}, [&](Tape* t) { return weighted_sum(t, mul(t, a, row), w); });
        check_grads({a, c}, [&](Tape* t) { return weighted_sum(t, mul(t, a, c), w); });
        check_grads({a, c}, [&](Tape* t) { return weighted_sum(t, mul(t, c, a), w); });
    }
    SUBCASE("scale") {
        Tensor a = rand_t({2, 6}, rng);
        Tensor w = rand_t({2, 6}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, scale(t, a, -2.75), w); });
    }
    SUBCASE("concat along rows and columns") {
        Tensor a = rand_t({2, 3}, rng), b = rand_t({1, 3}, rng), c = rand_t({3}, rng);
        Tensor w0 = rand_t({4, 3}, rng, false);
        check_grads({a, b, c},
                    [&](Tape* t) { return weighted_sum(t, concat(t, {a, b, c}, 0), w0); });
        Tensor d = rand_t({2, 2}, rng);
        Tensor w1 = rand_t({2, 5}, rng, false);
        check_grads({a, d}, [&](Tape* t) { return weighted_sum(t, concat(t, {a, d}, 1), w1); });
    }
    SUBCASE("slice along rows and columns") {
        Tensor a = rand_t({4, 6}, rng);
        Tensor w0 = rand_t({2, 6}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, slice(t, a, 0, 1, 2), w0); });
        Tensor w1 = rand_t({4, 3}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, slice(t, a, 1, 2, 3), w1); });
    }
    SUBCASE("transpose") {
        Tensor a = rand_t({3, 5}, rng);
        Tensor w = rand_t({5, 3}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, transpose(t, a), w); });
    }
    SUBCASE("softmax") {
        Tensor a = rand_t({3, 5}, rng);
        Tensor w = rand_t({3, 5}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, softmax(t, a), w); });
    }
    SUBCASE("layernorm") {
        Tensor a = rand_t({3, 8}, rng);
        Tensor w = rand_t({3, 8}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, layernorm(t, a), w); });
    }
    SUBCASE("gelu, relu, sigmoid, log") {
        Tensor a = rand_t({2, 7}, rng);
        Tensor w = rand_t({2, 7}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, gelu(t, a), w); });
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, sigmoid(t, a), w); });
        // keep relu inputs away from the kink and log inputs positive
        Tensor pos = Tensor::zeros({2, 7}, true);
        for (std::size_t i = 0; i < pos.numel(); ++i)
            pos.mutable_values()[i] = 0.5 + std::abs(rng.normal(0.0, 1.0));
        check_grads({pos}, [&](Tape* t) { return weighted_sum(t, relu(t, pos), w); });
        check_grads({pos}, [&](Tape* t) { return weighted_sum(t, log_op(t, pos), w); });
    }
    SUBCASE("embed_lookup") {
        Tensor table = rand_t({6, 4}, rng);
        std::vector<std::size_t> ids = {2, 0, 5, 2};
        Tensor w = rand_t({4, 4}, rng, false);
        check_grads({table},
                    [&](Tape* t) { return weighted_sum(t, embed_lookup(t, table, ids), w); });
    }
    SUBCASE("gather") {
        Tensor a = rand_t({4, 5}, rng);
        std::vector<std::size_t> idx = {1, 4, 0, 2};
        Tensor w = rand_t({4}, rng, false);
        check_grads({a}, [&](Tape* t) { return weighted_sum(t, gather(t, a, idx), w); });
    }
    SUBCASE("mean_all and sum_all") {
        Tensor a = rand_t({3, 4}, rng);
        check_grads({a}, [&](Tape* t) { return mean_all(t, a); });
        check_grads({a}, [&](Tape* t) { return sum_all(t, a); });
    }
}

TEST_CASE("three-layer MLP matches finite differences end to end") {
    Rng rng(17);
    Tensor x = rand_t({2, 6}, rng, false);
    Tensor w1 = rand_t({6, 8}, rng), b1 = rand_t({8}, rng, true, 0.1);
    Tensor w2 = rand_t({8, 8}, rng), b2 = rand_t({8}, rng, true, 0.1);
    Tensor w3 = rand_t({8, 3}, rng), b3 = rand_t({3}, rng, true, 0.1);
    auto loss = [&](Tape* t) {
        Tensor h = gelu(t, add(t, matmul(t, x, w1), b1));
        h = sigmoid(t, add(t, matmul(t, h, w2), b2));
        h = softmax(t, add(t, matmul(t, h, w3), b3));
        return mean_all(t, mul(t, h, h));
    };
    check_grads({w1, b1, w2, b2, w3, b3}, loss);
}

TEST_CASE("freeze pruning keeps fully frozen graphs off the tape") {
    Rng rng(7);
    Tensor a = rand_t({4, 4}, rng, false);
    Tensor b = rand_t({4, 4}, rng, false);
    Tape tape;
    Tensor h = gelu(&tape, matmul(&tape, a, b));
    h = softmax(&tape, layernorm(&tape, h));
    CHECK(tape.node_count() == 0);
    CHECK(tape.retained_bytes() == 0);
    CHECK(h.all_finite());
}

TEST_CASE("frozen matmul operand receives no gradient") {
    Rng rng(9);
    Tensor w = rand_t({3, 3}, rng, false);  // frozen
    Tensor x = rand_t({3, 3}, rng, true);
    Tape tape;
    Tensor loss = sum_all(&tape, matmul(&tape, w, x));
    GradMap grads = backward(tape, loss);
    CHECK(grads.size() == 1);
    CHECK(grads.contains(x));
    CHECK(!grads.contains(w));
}

TEST_CASE("identity loss on a bare trainable scalar") {
    Tensor x = Tensor::scalar(3.0, true);
    Tape tape;
    GradMap grads = backward(tape, x);
    REQUIRE(grads.find(x) != nullptr);
    CHECK((*grads.find(x))[0] == 1.0);
}

TEST_CASE("backward on a consumed tape throws") {
    Tensor x = Tensor::scalar(2.0, true);
    Tape tape;
    Tensor loss = mean_all(&tape, mul(&tape, x, x));
    backward(tape, loss);
    CHECK_THROWS_AS(backward(tape, loss), TapeError);
}

TEST_CASE("non-scalar loss is rejected") {
    Rng rng(1);
    Tensor x = rand_t({2, 2}, rng);
    Tape tape;
    Tensor y = mul(&tape, x, x);
    CHECK_THROWS_AS(backward(tape, y), TapeError);
}

TEST_CASE("identical seeds give bit-identical values and tape stats") {
    auto run = [] {
        Rng rng(123);
        Tensor a = Tensor::randn({5, 5}, rng, 1.0, true);
        Tensor b = Tensor::randn({5, 5}, rng, 1.0, false);
        Tape tape;
        Tensor out = softmax(&tape, gelu(&tape, matmul(&tape, a, b)));
        return std::make_tuple(out.values(), tape.node_count(), tape.retained_bytes());
    };
    CHECK(run() == run());
}

TEST_CASE("forward values stay finite on finite inputs") {
    Rng rng(21);
    Tensor a = rand_t({6, 6}, rng, false, 3.0);
    Tensor out = layernorm(nullptr, softmax(nullptr, gelu(nullptr, a)));
    CHECK(out.all_finite());
}

TEST_CASE("retained bytes accumulate input plus output sizes per node") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
    Tape tape;
    Tensor b = gelu(&tape, a);  // one node: 4 + 4 doubles
    CHECK(tape.node_count() == 1);
    CHECK(tape.retained_bytes() == 8 * sizeof(double));
    Tensor c = matmul(&tape, a, b);  // 4 + 4 + 4 doubles
    (void)c;
    CHECK(tape.node_count() == 2);
    CHECK(tape.retained_bytes() == 20 * sizeof(double));
}
