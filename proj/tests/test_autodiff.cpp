#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "flowcal/adam.hpp"
#include "flowcal/autodiff.hpp"
#include "flowcal/rng.hpp"
#include "helpers.hpp"
#include "random_graphs.hpp"

using namespace flowcal;

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    REQUIRE(t.numel() == 6);
    REQUIRE_THROWS_AS(Tensor({2, 0}), ValidationError);
    REQUIRE_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ValidationError);
    REQUIRE_THROWS_AS(t.reshaped({4}), ValidationError);
    Tensor r = Tensor::from({4}, {1, 2, 3, 4}).reshaped({2, 2});
    REQUIRE(r.at(1, 0) == 3.0);
}

TEST_CASE("forward_eval: scalar square") {
    Graph g;
    const NodeId x = g.param("x", Tensor::scalar(3.0));
    const NodeId y = g.mul(x, x);
    g.forward();
    REQUIRE(g.value(y)[0] == 9.0);
    g.backward(y);
    REQUIRE(g.grad(x)[0] == 6.0); // d/dx x^2 = 2x
}

TEST_CASE("forward_eval: matmul shape") {
    Graph g;
    Rng rng(1);
    const NodeId a = g.param("a", testutil::random_tensor({2, 3}, rng));
    const NodeId b = g.param("b", testutil::random_tensor({3, 4}, rng));
    const NodeId c = g.matmul(a, b);
    REQUIRE(g.at(c).shape == Shape{2, 4});
    g.forward();
    // spot check one entry against a hand sum
    double expect = 0.0;
    for (int64_t k = 0; k < 3; ++k) expect += g.value(a).at(1, k) * g.value(b).at(k, 2);
    REQUIRE(g.value(c).at(1, 2) == Catch::Approx(expect).margin(1e-15));
}

TEST_CASE("forward_eval: impulse response sums to kernel sum") {
    Graph g;
    Tensor impulse({9});
    impulse[4] = 1.0;
    Tensor k = Tensor::from({5}, {0.2, -0.4, 1.0, 0.3, -0.1});
    const NodeId c = g.conv1d(g.constant(impulse), g.constant(k), 0);
    const NodeId s = g.sum(c);
    g.forward();
    double ksum = 0.0;
    for (int64_t i = 0; i < k.numel(); ++i) ksum += k[i];
    REQUIRE(g.value(s)[0] == Catch::Approx(ksum).margin(1e-15));
}

TEST_CASE("backward: gradient of half squared norm is the input") {
    Graph g;
    Rng rng(7);
    const Tensor x0 = testutil::random_tensor({5}, rng);
    const NodeId x = g.param("x", x0);
    const NodeId loss = g.scale_shift(g.sqnorm(x), 0.5, 0.0);
    g.forward();
    g.backward(loss);
    REQUIRE(max_abs_diff(g.grad(x), x0) < 1e-15);
}

TEST_CASE("backward: random 3-layer composite matches finite differences") {
    Graph g;
    Rng rng(42);
    const NodeId w1 = g.param("w1", testutil::random_tensor({3, 4}, rng));
    const NodeId w2 = g.param("w2", testutil::random_tensor({4, 4}, rng));
    const NodeId w3 = g.param("w3", testutil::random_tensor({4, 2}, rng));
    const NodeId x = g.constant(testutil::random_tensor({2, 3}, rng));
    const NodeId h1 = g.tanh(g.matmul(x, w1));
    const NodeId h2 = g.tanh(g.matmul(h1, w2));
    const NodeId loss = g.sqnorm(g.matmul(h2, w3));
    REQUIRE(testutil::graph_gradcheck(g, loss) < 1e-5);
}

TEST_CASE("backward: non-scalar loss rejected, forward must run first") {
    Graph g;
    const NodeId x = g.param("x", Tensor({3}));
    REQUIRE_THROWS_AS(g.backward(x), ValidationError);
    g.forward();
    REQUIRE_THROWS_AS(g.backward(x), ValidationError);
}

TEST_CASE("errors name the offending node") {
    Graph g;
    const NodeId a = g.param("a", Tensor({2, 3}));
    const NodeId b = g.param("b", Tensor({2, 4}));
    try {
        (void)g.matmul(a, b);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        REQUIRE(std::string(e.what()).find("matmul") != std::string::npos);
    }

    Graph g2;
    const NodeId x = g2.param("x", Tensor::scalar(-1.0));
    const NodeId l = g2.log(x);
    try {
        g2.forward();
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("node #" + std::to_string(l)) != std::string::npos);
        REQUIRE(msg.find("log") != std::string::npos);
    }
}

TEST_CASE("backward is deterministic bit for bit") {
    testutil::RandomGraph rg = testutil::make_random_graph(123);
    rg.g.forward();
    rg.g.backward(rg.loss);
    std::vector<Tensor> first;
    for (NodeId id : rg.g.trainable_params()) first.push_back(rg.g.grad(id));
    rg.g.forward();
    rg.g.backward(rg.loss);
    size_t i = 0;
    for (NodeId id : rg.g.trainable_params()) {
        const Tensor& again = rg.g.grad(id);
        for (int64_t k = 0; k < again.numel(); ++k) REQUIRE(again[k] == first[i][k]);
        ++i;
    }
}

TEST_CASE("gradient of a sum of losses is the sum of gradients") {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        Graph g;
        const Tensor x0 = testutil::random_tensor({4}, rng);
        const NodeId x = g.param("x", x0);
        const NodeId l1 = g.sqnorm(g.tanh(x));
        const NodeId l2 = g.sum(g.exp(g.tanh(x)));
        const NodeId both = g.add(l1, l2);
        g.forward();
        g.backward(l1);
        const Tensor g1 = g.grad(x);
        g.backward(l2);
        const Tensor g2 = g.grad(x);
        g.backward(both);
        const Tensor gb = g.grad(x);
        for (int64_t i = 0; i < 4; ++i)
            REQUIRE(gb[i] == Catch::Approx(g1[i] + g2[i]).margin(1e-14));
    }
}

TEST_CASE("every op kind passes a finite-difference check on random shapes") {
    // one focused mini-graph per op kind, several random trials each
    for (uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng(900 + seed);
        const int64_t m = 2 + static_cast<int64_t>(rng.below(3));
        const int64_t n = 2 + static_cast<int64_t>(rng.below(3));

        auto check = [&](auto&& build) {
            Graph g;
            const NodeId loss = build(g, rng);
            REQUIRE(testutil::graph_gradcheck(g, loss) < 1e-5);
        };

        check([&](Graph& g, Rng& r) { // add / sub with row broadcast
            const NodeId a = g.param("a", testutil::random_tensor({m, n}, r));
            const NodeId b = g.param("b", testutil::random_tensor({1, n}, r));
            return g.sqnorm(g.sub(g.add(a, b), g.param("c", testutil::random_tensor({m, n}, r))));
        });
        check([&](Graph& g, Rng& r) { // mul / div with broadcast
            const NodeId a = g.param("a", testutil::random_tensor({m, n}, r));
            const NodeId b = g.param("b", testutil::random_tensor({1, n}, r));
            const NodeId den = g.scale_shift(g.tanh(g.param("d", testutil::random_tensor({m, n}, r))), 0.4, 2.0);
            return g.sqnorm(g.div(g.mul(a, b), den));
        });
        check([&](Graph& g, Rng& r) { // matmul
            const NodeId a = g.param("a", testutil::random_tensor({m, 3}, r));
            const NodeId b = g.param("b", testutil::random_tensor({3, n}, r));
            return g.sqnorm(g.matmul(a, b));
        });
        check([&](Graph& g, Rng& r) { // conv1d on both tensor and kernel, middle axis
            const NodeId x = g.param("x", testutil::random_tensor({2, m + 2, n}, r));
            const NodeId k = g.param("k", testutil::random_tensor({3}, r));
            return g.sqnorm(g.conv1d(x, k, 1));
        });
        check([&](Graph& g, Rng& r) { // exp, log, tanh, sum chain
            const NodeId x = g.param("x", testutil::random_tensor({m, n}, r));
            const NodeId e = g.exp(g.tanh(x));
            const NodeId l = g.log(g.scale_shift(g.tanh(x), 0.4, 2.0));
            return g.add(g.sum(e), g.sqnorm(l));
        });
        check([&](Graph& g, Rng& r) { // reshape, slice, concat, scale_shift
            const NodeId x = g.param("x", testutil::random_tensor({m, 2 * n}, r));
            const NodeId s1 = g.slice(x, 1, 0, n);
            const NodeId s2 = g.slice(x, 1, n, n);
            const NodeId c = g.concat(g.scale_shift(s2, 1.5, -0.25), s1, 1);
            return g.sqnorm(g.reshape(c, {m * 2 * n}));
        });
    }
}

TEST_CASE("random composite graphs match finite differences") {
    for (uint64_t seed = 0; seed < 30; ++seed) {
        testutil::RandomGraph rg = testutil::make_random_graph(5000 + seed);
        INFO("graph seed " << seed);
        REQUIRE(testutil::graph_gradcheck(rg.g, rg.loss) < 1e-5);
    }
}

TEST_CASE("fd_gradient on closed forms") {
    SECTION("cube at 2 with step 1e-4") {
        auto fn = [](const std::vector<Tensor>& p) { return p[0][0] * p[0][0] * p[0][0]; };
        const auto g = fd_gradient(fn, {Tensor::scalar(2.0)}, 1e-4);
        REQUIRE(g[0][0] == Catch::Approx(12.0).margin(1e-6)); // O(step^2) truncation
    }
    SECTION("sum of exp at zero gives ones") {
        auto fn = [](const std::vector<Tensor>& p) {
            double s = 0.0;
            for (int64_t i = 0; i < p[0].numel(); ++i) s += std::exp(p[0][i]);
            return s;
        };
        const auto g = fd_gradient(fn, {Tensor({4})}, 1e-5);
        for (int64_t i = 0; i < 4; ++i) REQUIRE(g[0][i] == Catch::Approx(1.0).margin(1e-9));
    }
    SECTION("rejects bad step and non-finite values") {
        auto fn = [](const std::vector<Tensor>&) { return 1.0; };
        REQUIRE_THROWS_AS(fd_gradient(fn, {Tensor::scalar(0.0)}, 0.0), ValidationError);
        auto bad = [](const std::vector<Tensor>&) { return std::nan(""); };
        REQUIRE_THROWS_AS(fd_gradient(bad, {Tensor::scalar(0.0)}, 1e-5), DivergenceError);
    }
}

TEST_CASE("adam: zero gradient leaves parameters, bumps the counter") {
    Tensor w = Tensor::from({3}, {1.0, -2.0, 3.0});
    const Tensor g0({3});
    AdamState st = AdamState::for_params({&w});
    adam_step({&w}, {&g0}, st, 0.1);
    REQUIRE(st.step == 1);
    REQUIRE(w[0] == 1.0);
    REQUIRE(w[1] == -2.0);
    REQUIRE(w[2] == 3.0);
}

TEST_CASE("adam: first step moves by about -sign(g) * stepsize") {
    Tensor w({2});
    Tensor g = Tensor::from({2}, {0.3, -4.0});
    AdamState st = AdamState::for_params({&w});
    adam_step({&w}, {&g}, st, 0.05);
    // first-step closed form: -lr * g / (|g| + eps) up to bias terms
    REQUIRE(w[0] == Catch::Approx(-0.05).epsilon(1e-4));
    REQUIRE(w[1] == Catch::Approx(0.05).epsilon(1e-4));
}

TEST_CASE("adam: 200 steps solve a convex quadratic") {
    Rng rng(11);
    const Tensor target = testutil::random_tensor({6}, rng);
    Tensor w({6});
    AdamState st = AdamState::for_params({&w});
    for (int step = 0; step < 200; ++step) {
        Tensor grad({6});
        for (int64_t i = 0; i < 6; ++i) grad[i] = 2.0 * (w[i] - target[i]);
        adam_step({&w}, {&grad}, st, 0.05);
    }
    Tensor diff({6});
    for (int64_t i = 0; i < 6; ++i) diff[i] = w[i] - target[i];
    REQUIRE(norm2(diff) < 1e-3);
}

TEST_CASE("adam: non-finite gradient raises") {
    Tensor w({1});
    Tensor g = Tensor::from({1}, {std::numeric_limits<double>::infinity()});
    AdamState st = AdamState::for_params({&w});
    REQUIRE_THROWS_AS(adam_step({&w}, {&g}, st, 0.1), DivergenceError);
}
