#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <random>

#include "sis/nn.hpp"

using namespace sis;
using namespace sis::nn;

namespace {

Var random_leaf(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(shape);
    for (auto& v : t.data) v = u(rng);
    return leaf(std::move(t));
}

} // namespace

TEST_CASE("tensor shape checks") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeMismatch);
    CHECK(Tensor({2, 3}).data.size() == 6);
}

TEST_CASE("add/scale/relu gradients") {
    std::mt19937_64 rng(1);
    Var a = random_leaf({3, 4}, rng), b = random_leaf({3, 4}, rng);
    auto r = grad_check([&] { return sum(scale(add(relu(a), b), 0.7)); }, {a, b});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("reshape/concat0/gather gradients") {
    std::mt19937_64 rng(2);
    Var a = random_leaf({2, 6}, rng), b = random_leaf({1, 6}, rng);
    auto r = grad_check(
        [&] {
            Var c = concat0({reshape(a, {2, 6}), b});
            return sum(gather(c, {0, 5, 7, 17, 3}));
        },
        {a, b});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("max_over_sets picks maxima and routes gradient to first argmax") {
    Var a = leaf(Tensor({6}, {1.0, 5.0, 5.0, -2.0, 0.0, 3.0}));
    Var m = max_over_sets(a, {{0, 1, 2}, {3, 4, 5}});
    CHECK(m->value.data == std::vector<double>{5.0, 3.0});
    backward(sum(m));
    CHECK(a->grad == std::vector<double>{0, 1, 0, 0, 0, 1}); // index 1 beats tied index 2
}

TEST_CASE("max_stack is an elementwise max with subgradient to the first max") {
    std::mt19937_64 rng(3);
    Var a = random_leaf({2, 3}, rng), b = random_leaf({2, 3}, rng), c = random_leaf({2, 3}, rng);
    Var m = max_stack({a, b, c});
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(m->value.data[i] ==
              std::max({a->value.data[i], b->value.data[i], c->value.data[i]}));
    auto r = grad_check([&] { return sum(max_stack({a, b, c})); }, {a, b, c});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("fc gradients and values") {
    std::mt19937_64 rng(4);
    Var x = random_leaf({5}, rng), w = random_leaf({3, 5}, rng), b = random_leaf({3}, rng);
    Var y = fc(x, w, b);
    for (int o = 0; o < 3; ++o) {
        double want = b->value.data[o];
        for (int i = 0; i < 5; ++i) want += w->value.data[o * 5 + i] * x->value.data[i];
        CHECK(y->value.data[o] == Catch::Approx(want).epsilon(1e-12));
    }
    auto r = grad_check([&] { return sum(relu(fc(x, w, b))); }, {x, w, b});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("conv3d gradients, stride and padding") {
    std::mt19937_64 rng(5);
    Var x = random_leaf({2, 5, 4, 4}, rng);
    Var w = random_leaf({3, 2, 3, 3, 3}, rng);
    Var b = random_leaf({3}, rng);
    auto r = grad_check([&] { return sum(conv3d(x, w, b, {1, 1, 1}, {1, 1, 1})); }, {x, w, b});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("conv3d requires exact output division") {
    std::mt19937_64 rng(6);
    Var x = random_leaf({1, 5, 4, 4}, rng);
    Var w = random_leaf({1, 1, 2, 2, 2}, rng);
    Var b = random_leaf({1}, rng);
    CHECK_THROWS_AS(conv3d(x, w, b, {2, 2, 2}, {0, 0, 0}), ShapeMismatch);
    Var x2 = random_leaf({1, 4, 4, 4}, rng);
    Var y = conv3d(x2, w, b, {2, 2, 2}, {0, 0, 0});
    CHECK(y->value.shape == std::vector<int>{1, 2, 2, 2});
}

TEST_CASE("a 1x1x1 convolution equals a per-voxel fully-connected layer") {
    std::mt19937_64 rng(7);
    Var x = random_leaf({3, 2, 2, 2}, rng);
    Var w = random_leaf({4, 3, 1, 1, 1}, rng);
    Var b = random_leaf({4}, rng);
    Var y = conv3d(x, w, b, {1, 1, 1}, {0, 0, 0});
    Var wf = leaf(Tensor({4, 3}, w->value.data));
    for (int v = 0; v < 8; ++v) {
        Tensor xv({3});
        for (int c = 0; c < 3; ++c) xv.data[c] = x->value.data[c * 8 + v];
        Var yf = fc(leaf(std::move(xv)), wf, b);
        for (int o = 0; o < 4; ++o)
            CHECK(std::fabs(y->value.data[o * 8 + v] - yf->value.data[o]) < 1e-12);
    }
}

TEST_CASE("conv2d gradients") {
    std::mt19937_64 rng(8);
    Var x = random_leaf({2, 6, 6}, rng);
    Var w = random_leaf({3, 2, 2, 2}, rng);
    Var b = random_leaf({3}, rng);
    auto r = grad_check([&] { return sum(relu(conv2d(x, w, b, {2, 2}, {0, 0}))); }, {x, w, b});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("maxpool3d values and gradients") {
    std::mt19937_64 rng(9);
    Var x = random_leaf({2, 4, 4, 4}, rng);
    Var y = maxpool3d(x, {2, 2, 2}, {2, 2, 2}, {0, 0, 0});
    CHECK(y->value.shape == std::vector<int>{2, 2, 2, 2});
    auto r = grad_check([&]() -> Var { return sum(maxpool3d(x, {2, 2, 2}, {2, 2, 2}, {0, 0, 0})); },
                        {x});
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("cross entropy of uniform logits is ln C") {
    Var lg = leaf(Tensor({2, 4}, std::vector<double>(8, 0.3)));
    Var l = cross_entropy(lg, {0, 2});
    CHECK(l->value.data[0] == Catch::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("loss gradients") {
    std::mt19937_64 rng(10);
    SECTION("cross entropy with row weights") {
        Var lg = random_leaf({4, 3}, rng, -2.0, 2.0);
        auto r = grad_check(
            [&] { return cross_entropy(lg, {0, 2, 1, 1}, {0.5, 0.25, 0.125, 0.125}); }, {lg});
        CHECK(r.max_rel_error < 1e-4);
    }
    SECTION("huber both branches") {
        Var p = leaf(Tensor({4}, {0.1, 3.0, -2.5, -0.3}));
        std::vector<double> target{0.0, 0.5, 0.0, -0.1};
        Var l = huber(p, target, 1.0);
        // mean of 0.5*0.01, (2.5-0.5), (2.5-0.5), 0.5*0.04
        CHECK(l->value.data[0] == Catch::Approx((0.005 + 2.0 + 2.0 + 0.02) / 4.0).epsilon(1e-12));
        auto r = grad_check([&] { return huber(p, target, 1.0); }, {p});
        CHECK(r.max_rel_error < 1e-4);
    }
    SECTION("bce with logits") {
        Var lg = random_leaf({5}, rng, -3.0, 3.0);
        auto r = grad_check([&] { return bce_logits(lg, {1, 0, 1, 1, 0}); }, {lg});
        CHECK(r.max_rel_error < 1e-4);
        Var zero = leaf(Tensor({1}, {0.0}));
        CHECK(bce_logits(zero, {1})->value.data[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));
    }
}

TEST_CASE("gradient checker catches a wrong gradient (negative control)") {
    Var a = leaf(Tensor({3}, {0.4, -0.2, 0.9}));
    auto broken = [&] {
        Tensor out({1});
        for (double v : a->value.data) out.data[0] += v * v;
        return make_node(std::move(out), {a}, [a](Node& n) {
            for (std::size_t i = 0; i < 3; ++i)
                a->ensure_grad()[i] += n.grad[0] * a->value.data[i]; // missing factor 2
        });
    };
    auto r = grad_check(broken, {a});
    CHECK(r.max_rel_error > 1e-2);
}

TEST_CASE("sgd with zero momentum equals plain gradient descent bitwise") {
    auto run = [](double momentum) {
        ParamStore s;
        Var p = s.create("p", Tensor({2}, {1.0, -2.0}));
        TrainConfig cfg;
        cfg.learning_rate = 0.1;
        cfg.momentum = momentum;
        for (int step = 0; step < 5; ++step) {
            s.zero_grads();
            backward(sum(relu(p)));
            s.sgd_step(cfg, step);
        }
        return p->value.data;
    };
    auto manual = [] {
        std::vector<double> p{1.0, -2.0};
        for (int step = 0; step < 5; ++step)
            for (auto& v : p)
                if (v > 0) v -= 0.1;
        return p;
    };
    CHECK(run(0.0) == manual());
}

TEST_CASE("momentum accumulates velocity") {
    ParamStore s;
    Var p = s.create("p", Tensor({1}, {0.0}));
    TrainConfig cfg;
    cfg.learning_rate = 1.0;
    cfg.momentum = 0.5;
    for (int step = 0; step < 2; ++step) {
        s.zero_grads();
        Var l = make_node(Tensor({1}, {p->value.data[0]}), {p},
                          [p](Node& n) { p->ensure_grad()[0] += n.grad[0]; });
        backward(l);
        s.sgd_step(cfg, step);
    }
    // v1 = 1, p = -1; v2 = 0.5 + 1 = 1.5, p = -2.5
    CHECK(p->value.data[0] == Catch::Approx(-2.5).epsilon(1e-12));
}

TEST_CASE("learning rate decays by the configured factor") {
    TrainConfig cfg;
    cfg.learning_rate = 0.001;
    cfg.lr_decay_every = 100000;
    cfg.lr_decay_factor = 0.1;
    CHECK(cfg.lr_at(0) == Catch::Approx(0.001));
    CHECK(cfg.lr_at(99999) == Catch::Approx(0.001));
    CHECK(cfg.lr_at(100000) == Catch::Approx(0.0001));
    CHECK(cfg.lr_at(250000) == Catch::Approx(0.00001));
}

TEST_CASE("param store preserves insertion order and rejects duplicates") {
    ParamStore s;
    s.create("b", Tensor({1}));
    s.create("a", Tensor({1}));
    CHECK(s.names() == std::vector<std::string>{"b", "a"});
    CHECK_THROWS(s.create("a", Tensor({1})));
}

TEST_CASE("convolution results are bitwise identical across thread counts") {
    std::mt19937_64 rng(11);
    Var x = random_leaf({4, 8, 8, 8}, rng);
    Var w = random_leaf({8, 4, 3, 3, 3}, rng);
    Var b = random_leaf({8}, rng);
    auto run = [&](const char* threads) {
        setenv("SIS_THREADS", threads, 1);
        Var y = conv3d(x, w, b, {1, 1, 1}, {1, 1, 1});
        backward(sum(y));
        auto out = std::make_pair(y->value.data, x->grad);
        zero_grad(x);
        zero_grad(w);
        zero_grad(b);
        return out;
    };
    auto one = run("1");
    auto four = run("4");
    unsetenv("SIS_THREADS");
    CHECK(one.first == four.first);
    CHECK(one.second == four.second);
}
