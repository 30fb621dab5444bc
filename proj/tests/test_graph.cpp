#include <cmath>

#include "doctest.h"
#include "edlab/error.hpp"
#include "edlab/gradcheck.hpp"
#include "edlab/graph.hpp"
#include "helpers.hpp"

using namespace edlab;

TEST_CASE("backward of sum and a frozen product") {
    Graph g;
    Var x = g.input(Tensor::vector({1, 2, 3}));
    Var s = sum(x);
    g.backward(s, {x});
    REQUIRE(g.grad(x));
    CHECK(g.grad(x)->data == std::vector<float>{1, 1, 1});

    Graph h;
    Var a = h.input(Tensor::vector({1, 2}));
    Var y = h.input(Tensor::vector({3, -4}));
    h.backward(sum(mul(a, y)), {a});
    CHECK(h.grad(a)->data == std::vector<float>{3, -4});
    CHECK(h.grad(y) == nullptr);
}

TEST_CASE("backward rejects non-scalar losses") {
    Graph g;
    Var x = g.input(Tensor::vector({1, 2}));
    CHECK_THROWS_AS(g.backward(scale(x, 2.0f), {x}), ContractError);
}

TEST_CASE("requested but unreachable tensors get zero gradient") {
    Graph g;
    Var x = g.input(Tensor::vector({1, 2}));
    Var unused = g.input(Tensor::vector({5}));
    g.backward(sum(x), {x, unused});
    REQUIRE(g.grad(unused));
    CHECK(g.grad(unused)->data == std::vector<float>{0});
}

TEST_CASE("shape mismatches raise dimension errors") {
    Graph g;
    Var a = g.input(Tensor({2, 3}));
    Var b = g.input(Tensor({3, 2}));
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(matmul(a, a), DimensionError);
    CHECK_THROWS_AS(concat(a, g.input(Tensor({3, 1}))), DimensionError);
    CHECK_THROWS_AS(reshape(a, {5}), DimensionError);
}

TEST_CASE("matmul values") {
    Graph g;
    Var a = g.input(Tensor::matrix(2, 2, {1, 2, 3, 4}));
    Var b = g.input(Tensor::matrix(2, 2, {5, 6, 7, 8}));
    CHECK(matmul(a, b).value().data == std::vector<float>{19, 22, 43, 50});
}

TEST_CASE("softmax rows") {
    Graph g;
    auto sm = [&](float x, float y) { return softmax_rows(g.input(Tensor::matrix(1, 2, {x, y}))).value().data; };
    auto r = sm(0, 0);
    CHECK(r[0] == doctest::Approx(0.5));
    CHECK(r[1] == doctest::Approx(0.5));
    r = sm(std::log(2.0f), 0);
    CHECK(r[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-6));
    CHECK(r[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    r = sm(1000, 0);
    CHECK(std::fabs(r[0] - 1.0f) <= 1e-6f);
    CHECK(std::fabs(r[1]) <= 1e-6f);
}

TEST_CASE("layer norm examples") {
    Graph g;
    Var one = g.input(Tensor::filled({3}, 1.0f));
    Var zero = g.input(Tensor({3}));
    const auto flat = layer_norm(g.input(Tensor::matrix(1, 3, {7, 7, 7})), one, zero).value().data;
    for (float v : flat) CHECK(v == 0.0f);

    Var one2 = g.input(Tensor::filled({2}, 1.0f));
    Var zero2 = g.input(Tensor({2}));
    const auto unit = layer_norm(g.input(Tensor::matrix(1, 2, {1, -1})), one2, zero2, 1e-12f).value().data;
    CHECK(unit[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(unit[1] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK_THROWS_AS(layer_norm(g.input(Tensor::matrix(1, 2, {1, -1})), one2, zero2, 0.0f), ContractError);
}

TEST_CASE("cross entropy examples") {
    Graph g;
    const std::vector<Token> t0{0};
    const Mask m1{1};
    Var uniform = g.input(Tensor({1, 4}));
    CHECK(cross_entropy(uniform, std::vector<Token>{2}, m1).value().data[0] ==
          doctest::Approx(std::log(4.0)).epsilon(1e-6));
    // The float32 result of exp(-20)-scale losses is checked against the
    // closed form 3 e^-20 / (1 + 3 e^-20).
    Var sharp = g.input(Tensor::matrix(1, 4, {20, 0, 0, 0}));
    const double expect = std::log1p(3.0 * std::exp(-20.0));
    CHECK(cross_entropy(sharp, t0, m1).value().data[0] == doctest::Approx(expect).epsilon(1e-3));

    // Masking picks one position.
    Var two = g.input(Tensor::matrix(2, 2, {0, 0, 3, 1}));
    const std::vector<Token> tt{0, 1};
    const float only_second = cross_entropy(two, tt, Mask{0, 1}).value().data[0];
    CHECK(only_second == doctest::Approx(std::log1p(std::exp(2.0))).epsilon(1e-6));

    CHECK_THROWS_AS(cross_entropy(two, tt, Mask{0, 0}), DegenerateInputError);
    CHECK_THROWS_AS(cross_entropy(two, std::vector<Token>{0, 5}, Mask{1, 1}), ContractError);
}

TEST_CASE("abs has a zero subgradient at the kink") {
    Graph g;
    Var x = g.input(Tensor::vector({-2, 0, 3}));
    g.backward(sum(abs(x)), {x});
    CHECK(g.grad(x)->data == std::vector<float>{-1, 0, 1});
}

TEST_CASE("with_row leaves other rows bitwise intact and routes gradients") {
    Graph g;
    const Tensor base = testutil::random_tensor({4, 3}, 5);
    Var b = g.input(base);
    Var r = g.input(Tensor::vector({1, 2, 3}));
    Var out = with_row(b, 2, r);
    for (std::size_t i : {0u, 1u, 3u})
        for (std::size_t j = 0; j < 3; ++j) CHECK(out.value().at(i, j) == base.at(i, j));
    g.backward(sum(out), {b, r});
    CHECK(g.grad(r)->data == std::vector<float>{1, 1, 1});
    CHECK(g.grad(b)->row(2)[0] == 0.0f);
    CHECK(g.grad(b)->row(1)[0] == 1.0f);
}

TEST_CASE("causal attention ignores the future") {
    const Tensor qkv = testutil::random_tensor({5, 12}, 9);
    Tensor changed = qkv;
    for (std::size_t j = 0; j < 12; ++j) changed.data[4 * 12 + j] += 1.0f;
    Graph g;
    const Tensor a = causal_self_attention(g.input(qkv), 2).value();
    const Tensor b = causal_self_attention(g.input(changed), 2).value();
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t j = 0; j < 4; ++j) CHECK(a.at(t, j) == b.at(t, j));
}

TEST_CASE("finite-difference suite passes on a few seeds") {
    GradCheckOptions opt;
    opt.seeds = 3;
    opt.max_coords = 64;
    std::size_t checks = 0;
    run_gradcheck_suite(opt, [&](const GradCheckResult& r) {
        CAPTURE(r.name);
        CAPTURE(r.seed);
        CHECK(r.rel_error < opt.tolerance);
        CHECK(r.coords > 0);
        ++checks;
    });
    CHECK(checks == 3 * gradcheck_names().size());
}
