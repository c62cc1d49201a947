#include <doctest.h>

#include <cmath>

#include "augsearch/autodiff.hpp"
#include "augsearch/errors.hpp"
#include "support/gradcheck.hpp"
#include "support/primitive_cases.hpp"
#include "support/random_graph.hpp"

using namespace augsearch;
using namespace augsearch::ad;
using augsearch::testing::gradcheck;

TEST_CASE("forward values of basic primitives") {
    Tape tape;
    CHECK(sigmoid(tape.constant(Tensor::scalar(0.0))).item() == 0.5);
    Var sm = softmax(tape.constant(Tensor::from({0.0, 0.0, 0.0})));
    for (double v : sm.value().values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    Var mm = matmul(tape.constant(Tensor::from({2, 2}, {1, 2, 3, 4})), tape.constant(Tensor::from({2, 1}, {1, 1})));
    CHECK(mm.value() == Tensor::from({2, 1}, {3, 7}));
}

TEST_CASE("exp derivative at 1 matches central difference") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(1.0));
    tape.backward(exp(x));
    const double h = 1e-5;
    const double fd = (std::exp(1.0 + h) - std::exp(1.0 - h)) / (2 * h);
    CHECK(tape.grad(x).item() == doctest::Approx(std::exp(1.0)).epsilon(1e-14));
    CHECK(std::abs(tape.grad(x).item() - fd) < 1e-8);
}

TEST_CASE("backward on simple losses") {
    SUBCASE("sum gives ones") {
        Tape tape;
        Var x = tape.leaf(Tensor::from({1.0, -2.0, 5.0}));
        tape.backward(sum(x));
        CHECK(tape.grad(x) == Tensor::from({1.0, 1.0, 1.0}));
    }
    SUBCASE("x*x at 3") {
        Tape tape;
        Var x = tape.leaf(Tensor::scalar(3.0));
        tape.backward(x * x);
        CHECK(tape.grad(x).item() == 6.0);
    }
    SUBCASE("constants receive nothing") {
        Tape tape;
        Var x = tape.leaf(Tensor::scalar(2.0));
        Var c = tape.constant(Tensor::scalar(4.0));
        tape.backward(x * c);
        CHECK(tape.grad(x).item() == 4.0);
        CHECK_FALSE(tape.has_grad(c));
    }
}

TEST_CASE("usage and shape errors") {
    Tape tape;
    Var x = tape.leaf(Tensor::from({1.0, 2.0}));
    Var y = tape.leaf(Tensor::from({1.0, 2.0, 3.0}));
    try {
        add(x, y);
        FAIL("expected a shape error");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[2]") != std::string::npos);
        CHECK(std::string(e.what()).find("[3]") != std::string::npos);
    }
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
    Var loss = sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), UsageError);
    CHECK_THROWS_AS(exp(x), UsageError);

    Tape t2;
    CHECK_THROWS_AS(exp(t2.leaf(Tensor::scalar(1000.0))), NumericError);
    CHECK_THROWS_AS(log(t2.leaf(Tensor::scalar(-1.0))), DomainError);
    Tape t3;
    CHECK_THROWS_AS(add(t2.leaf(Tensor::scalar(1.0)), t3.leaf(Tensor::scalar(1.0))), UsageError);
}

TEST_CASE("stop_grad severs exactly one path") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(3.0));
    Var s = stop_grad(x);
    CHECK(s.value() == x.value());
    tape.backward(x * s);
    CHECK(tape.grad(x).item() == 3.0);
}

TEST_CASE("X + M - stop_grad(M) passes unit gradients to both") {
    Tape tape;
    Var img = tape.leaf(Tensor::from({0.1, 0.7, 0.4}));
    Var m = tape.leaf(Tensor::scalar(0.3));
    Var out = img + (m - stop_grad(m));
    CHECK(out.value() == img.value());
    tape.backward(sum(out));
    CHECK(tape.grad(img) == Tensor::from({1.0, 1.0, 1.0}));
    CHECK(tape.grad(m).item() == 3.0);
}

TEST_CASE("straight_through forward is hard, backward is soft") {
    Tape tape;
    Var soft = tape.leaf(Tensor::from({0.2, 0.5, 0.3}));
    Var hard = tape.constant(Tensor::from({0.0, 1.0, 0.0}));
    Tensor w = Tensor::from({1.5, -2.0, 0.25});
    Var out = straight_through(hard, soft);
    CHECK(out.value() == hard.value());
    tape.backward(sum(out * tape.constant(w)));
    CHECK(tape.grad(soft) == w);

    Tape t2;
    Var s2 = t2.leaf(Tensor::from({0.2, 0.5}));
    CHECK_THROWS_AS(straight_through(t2.constant(Tensor::from({1.0})), s2), ShapeError);
}

TEST_CASE("straight_through with hard == soft is the identity") {
    Tape tape;
    Var x = tape.leaf(Tensor::from({0.2, -0.5}));
    Var out = straight_through(stop_grad(x), x);
    CHECK(out.value() == x.value());
    tape.backward(sum(out * out));
    CHECK(tape.grad(x) == Tensor::from({0.4, -1.0}));
}

TEST_CASE("one-hot hardening of softmax([1,2,3]) routes gradient through the softmax Jacobian") {
    const Tensor w = Tensor::from({0.3, -1.0, 2.0});
    auto f = [&](Tape& t, const std::vector<Var>& in) {
        Var soft = softmax(in[0]);
        Var hard = t.constant(argmax_one_hot(soft.value()));
        return sum(straight_through(hard, soft) * t.constant(w));
    };
    auto soft_only = [&](Tape& t, const std::vector<Var>& in) { return sum(softmax(in[0]) * t.constant(w)); };
    const std::vector<Tensor> x = {Tensor::from({1.0, 2.0, 3.0})};
    {
        Tape t;
        Var soft = softmax(t.leaf(x[0]));
        CHECK(straight_through(t.constant(argmax_one_hot(soft.value())), soft).value() == Tensor::from({0, 0, 1}));
    }
    const auto a = augsearch::testing::analytic_grads(f, x);
    const auto n = augsearch::testing::numeric_grads(soft_only, x);
    CHECK(augsearch::testing::compare_grads(a, n).max_rel_error < 1e-8);
}

TEST_CASE("each primitive matches finite differences") {
    for (const auto& c : augsearch::testing::primitive_cases(7)) {
        CAPTURE(c.name);
        const auto r = gradcheck(c.f, c.in);
        CHECK(r.checked > 0);
        CHECK(r.max_rel_error < 1e-5);
    }
}

TEST_CASE("cross_entropy values and label checks") {
    Tape tape;
    const int labels[] = {3};
    Var l = cross_entropy(tape.constant(Tensor(Shape{1, 10}, 0.0)), labels);
    CHECK(l.item() == doctest::Approx(std::log(10.0)).epsilon(1e-14));
    Tensor confident(Shape{1, 10}, 0.0);
    confident[3] = 100.0;
    CHECK(cross_entropy(tape.constant(confident), labels).item() < 1e-6);
    const int bad[] = {10};
    CHECK_THROWS_AS(cross_entropy(tape.constant(confident), bad), DomainError);
}

TEST_CASE("random composite graphs match finite differences") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
        const int depth = 1 + static_cast<int>(rng.below(8));
        const auto g = augsearch::testing::make_random_graph(rng, depth);
        const auto inputs = augsearch::testing::random_graph_inputs(rng);
        const auto r = gradcheck(
            [&](Tape& t, const std::vector<Var>& in) { return augsearch::testing::build_random_graph(g, t, in); },
            inputs);
        CAPTURE(trial);
        CHECK(r.max_rel_error < 1e-5);
    }
}
