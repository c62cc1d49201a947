#include <doctest.h>

#include <cmath>
#include <string>

#include "augsearch/errors.hpp"
#include "augsearch/rng.hpp"
#include "augsearch/transforms.hpp"
#include "support/gradcheck.hpp"

using namespace augsearch;
using namespace augsearch::transforms;

namespace {

Tensor random_image(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

double m01_for(const TransformSpec& s, double native) {
    return (native - s.range->low) / (s.range->high - s.range->low);
}

}  // namespace

TEST_CASE("registry order and ranges") {
    const auto reg = registry();
    REQUIRE(reg.size() == 14);
    const char* names[] = {"ShearX",   "ShearY",     "TranslateX", "TranslateY",   "Rotate", "Solarize", "Posterize",
                           "Contrast", "Color",      "Brightness", "Sharpness", "AutoContrast", "Invert", "Equalize"};
    for (std::size_t i = 0; i < reg.size(); ++i) {
        CHECK(reg[i].name == names[i]);
        CHECK(static_cast<std::size_t>(reg[i].kind) == i);
        CHECK(find(names[i]) == reg[i].kind);
    }
    CHECK_FALSE(find("Identity").has_value());
    CHECK(spec(Kind::Rotate).range->low == -30.0);
    CHECK(spec(Kind::Rotate).range->high == 30.0);
    CHECK_FALSE(spec(Kind::Invert).range.has_value());
    CHECK_FALSE(spec(Kind::AutoContrast).range.has_value());
    CHECK_FALSE(spec(Kind::Equalize).range.has_value());
    CHECK_FALSE(spec(Kind::Solarize).magnitude_differentiable);
    CHECK_FALSE(spec(Kind::Posterize).magnitude_differentiable);
}

TEST_CASE("scale_magnitude") {
    CHECK(scale_magnitude(spec(Kind::Rotate), 0.5) == 0.0);
    CHECK(scale_magnitude(spec(Kind::Posterize), 1.0) == 8.0);
    CHECK(scale_magnitude(spec(Kind::Brightness), 0.0) == -0.4);
    CHECK_THROWS_AS(scale_magnitude(spec(Kind::Invert), 0.5), UsageError);
}

TEST_CASE("shape and range preservation for all transforms") {
    Rng rng(11);
    const Tensor img = random_image(rng, {3, 9, 7});
    for (const auto& s : registry()) {
        for (double m : {0.02, 0.3, 0.77, 0.98}) {
            CAPTURE(s.name);
            CAPTURE(m);
            const Tensor out = apply_value(s, img, m);
            CHECK(out.shape() == img.shape());
            for (double v : out.values()) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
}

TEST_CASE("batched application matches per-image application") {
    Rng rng(5);
    const Tensor batch = random_image(rng, {3, 3, 6, 6});
    const Tensor m = Tensor::from({0.1, 0.5, 0.85});
    for (const auto& s : registry()) {
        CAPTURE(s.name);
        ad::Tape tape;
        const Tensor out = apply(s, tape.constant(batch), tape.constant(m)).value();
        for (std::size_t b = 0; b < 3; ++b) {
            Tensor img(Shape{3, 6, 6});
            std::copy_n(batch.data() + b * 108, 108, img.data());
            const Tensor one = apply_value(s, img, m[b]);
            for (std::size_t i = 0; i < 108; ++i) CHECK(out[b * 108 + i] == one[i]);
        }
    }
}

TEST_CASE("neutral magnitudes reproduce the input") {
    Rng rng(3);
    const Tensor img = random_image(rng, {3, 8, 8});
    const std::pair<Kind, double> neutral[] = {
        {Kind::Rotate, 0.0},   {Kind::ShearX, 0.0},    {Kind::ShearY, 0.0},     {Kind::TranslateX, 0.0},
        {Kind::TranslateY, 0.0}, {Kind::Contrast, 1.0}, {Kind::Sharpness, 1.0}, {Kind::Color, 1.0},
        {Kind::Brightness, 0.0},
    };
    for (const auto& [k, native] : neutral) {
        const auto& s = spec(k);
        CAPTURE(s.name);
        const Tensor out = apply_value(s, img, m01_for(s, native));
        CHECK(max_abs_diff(out, img) < 1e-6);
    }
}

TEST_CASE("Invert is an exact involution") {
    Rng rng(9);
    const Tensor img = random_image(rng, {3, 5, 5});
    const Tensor once = apply_value(spec(Kind::Invert), img, 0.5);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(once[i] == 1.0 - img[i]);
    CHECK(apply_value(spec(Kind::Invert), once, 0.5) == img);
}

TEST_CASE("reference values of individual kernels") {
    SUBCASE("Solarize inverts above the threshold") {
        const Tensor img = Tensor::from({1, 1, 3}, {0.2, 0.7, 0.9});
        const Tensor out = apply_value(spec(Kind::Solarize), img, m01_for(spec(Kind::Solarize), 0.8));
        CHECK(out[0] == 0.2);
        CHECK(out[1] == 0.7);
        CHECK(out[2] == doctest::Approx(0.1).epsilon(1e-12));
    }
    SUBCASE("Posterize to two bits keeps the top bits of the byte value") {
        const Tensor img = Tensor::from({1, 1, 3}, {100.0 / 255, 200.0 / 255, 63.0 / 255});
        const Tensor out = apply_value(spec(Kind::Posterize), img, 0.0);
        CHECK(out[0] == doctest::Approx(64.0 / 255));
        CHECK(out[1] == doctest::Approx(192.0 / 255));
        CHECK(out[2] == 0.0);
    }
    SUBCASE("Posterize at eight bits is byte quantization") {
        const Tensor img = Tensor::from({1, 1, 2}, {0.5, 0.25});
        const Tensor out = apply_value(spec(Kind::Posterize), img, 1.0);
        CHECK(out[0] == doctest::Approx(128.0 / 255));
        CHECK(out[1] == doctest::Approx(64.0 / 255));
    }
    SUBCASE("TranslateX shifts by a fraction of the width with zero fill") {
        Tensor img(Shape{1, 1, 4}, 0.0);
        img[0] = 0.25;
        img[1] = 0.5;
        img[2] = 0.75;
        img[3] = 1.0;
        const Tensor out = apply_value(spec(Kind::TranslateX), img, m01_for(spec(Kind::TranslateX), 0.25));
        CHECK(out == Tensor::from({1, 1, 4}, {0.0, 0.25, 0.5, 0.75}));
    }
    SUBCASE("Rotate keeps the center pixel fixed") {
        Rng rng(1);
        const Tensor img = random_image(rng, {1, 3, 3});
        const auto& s = spec(Kind::Rotate);
        CHECK(apply_value(s, img, 0.5) == img);
        const Tensor out = apply_value(s, img, 1.0);
        CHECK(out[4] == doctest::Approx(img[4]).epsilon(1e-12));
    }
    SUBCASE("AutoContrast stretches each channel to [0,1]") {
        const Tensor img = Tensor::from({1, 1, 3}, {0.2, 0.4, 0.6});
        const Tensor out = apply_value(spec(Kind::AutoContrast), img, 0.5);
        CHECK(out[0] == 0.0);
        CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(out[2] == 1.0);
        const Tensor flat(Shape{1, 2, 2}, 0.3);
        CHECK(apply_value(spec(Kind::AutoContrast), flat, 0.5) == flat);
    }
    SUBCASE("Equalize spreads a two-level image to the extremes") {
        Tensor img(Shape{1, 32, 32}, 0.2);
        for (std::size_t i = 512; i < 1024; ++i) img[i] = 0.4;
        const Tensor out = apply_value(spec(Kind::Equalize), img, 0.5);
        CHECK(out[0] == 0.0);
        CHECK(out[1023] == 1.0);
        // Too few pixels for a nonzero histogram step: unchanged.
        Tensor small(Shape{1, 4, 4}, 0.2);
        for (std::size_t i = 8; i < 16; ++i) small[i] = 0.4;
        CHECK(apply_value(spec(Kind::Equalize), small, 0.5) == small);
        const Tensor flat(Shape{1, 2, 2}, 0.3);
        CHECK(apply_value(spec(Kind::Equalize), flat, 0.5) == flat);
    }
    SUBCASE("Color at zero is grayscale") {
        const Tensor img = Tensor::from({3, 1, 1}, {1.0, 0.0, 0.0});
        const Tensor out = apply_value(spec(Kind::Color), img, 0.0);
        for (double v : out.values()) CHECK(v == doctest::Approx(0.299));
    }
}

TEST_CASE("rank and magnitude-count errors") {
    ad::Tape tape;
    CHECK_THROWS_AS(apply_value(spec(Kind::Invert), Tensor(Shape{4, 4}, 0.5), 0.5), ShapeError);
    CHECK_THROWS_AS(apply(spec(Kind::Rotate), tape.constant(Tensor(Shape{2, 1, 4, 4}, 0.5)),
                          tape.constant(Tensor::from({0.5}))),
                    ShapeError);
}

TEST_CASE("straight-through magnitude paths give unit per-pixel gradients") {
    Rng rng(21);
    const Tensor img = random_image(rng, {3, 6, 5});
    for (Kind k : {Kind::Solarize, Kind::Posterize}) {
        CAPTURE(spec(k).name);
        ad::Tape tape;
        ad::Var m = tape.leaf(Tensor::from({0.4}));
        ad::Var out = apply(spec(k), tape.constant(img), m);
        tape.backward(ad::sum(out));
        CHECK(tape.grad(m).item() == static_cast<double>(img.size()));
    }
    // Per image within a batch.
    ad::Tape tape;
    const Tensor batch = random_image(rng, {2, 3, 4, 4});
    ad::Var m = tape.leaf(Tensor::from({0.2, 0.9}));
    tape.backward(ad::sum(apply(spec(Kind::Solarize), tape.constant(batch), m)));
    CHECK(tape.grad(m) == Tensor::from({48.0, 48.0}));
}

TEST_CASE("magnitude gradients match central finite differences") {
    Rng rng(77);
    for (const auto& s : registry()) {
        if (!s.range || !s.magnitude_differentiable) continue;
        for (int trial = 0; trial < 5; ++trial) {
            // Interior values keep the clamp inactive so the kernel is smooth
            // around the probe point.
            const Tensor img = random_image(rng, {3, 7, 6}, 0.3, 0.7);
            const double m0 = 0.15 + 0.7 * rng.uniform();
            Tensor w(img.shape());
            for (auto& v : w.values()) v = rng.uniform() - 0.5;
            augsearch::testing::Builder f = [&](ad::Tape& t, const std::vector<ad::Var>& in) {
                return ad::sum(apply(s, t.constant(img), in[0]) * t.constant(w));
            };
            const auto a = augsearch::testing::analytic_grads(f, {Tensor::from({m0})});
            const auto n = augsearch::testing::numeric_grads(f, {Tensor::from({m0})}, 1e-6);
            CAPTURE(s.name);
            CAPTURE(trial);
            CAPTURE(a[0][0]);
            CAPTURE(n[0][0]);
            CHECK(std::abs(a[0][0] - n[0][0]) <= 1e-3 * std::max(std::abs(n[0][0]), 1e-3));
        }
    }
}

TEST_CASE("input-pixel gradients match central finite differences") {
    Rng rng(31);
    for (const auto& s : registry()) {
        // Integer-native kernels pass gradients straight through instead.
        if (s.kind == Kind::Posterize || s.kind == Kind::Equalize) continue;
        const Tensor img = random_image(rng, {3, 5, 5}, 0.3, 0.7);
        const double m0 = s.kind == Kind::Solarize ? 0.9 : 0.35;
        Tensor w(img.shape());
        for (auto& v : w.values()) v = rng.uniform() - 0.5;
        augsearch::testing::Builder f = [&](ad::Tape& t, const std::vector<ad::Var>& in) {
            return ad::sum(apply(s, in[0], t.constant(Tensor::from({m0}))) * t.constant(w));
        };
        CAPTURE(s.name);
        const auto r = augsearch::testing::gradcheck(f, {img});
        CHECK(r.max_rel_error < 1e-5);
    }
}

TEST_CASE("integer-native kernels pass input gradients straight through") {
    Rng rng(4);
    const Tensor img = random_image(rng, {1, 4, 4});
    for (Kind k : {Kind::Posterize, Kind::Equalize}) {
        ad::Tape tape;
        ad::Var x = tape.leaf(img);
        tape.backward(ad::sum(apply(spec(k), x, tape.constant(Tensor::from({0.5})))));
        CHECK(tape.grad(x) == Tensor(img.shape(), 1.0));
    }
}

TEST_CASE("non-finite input reports the transform") {
    Tensor img(Shape{1, 2, 2}, 0.5);
    img[1] = std::nan("");
    try {
        apply_value(spec(Kind::Contrast), img, 0.5);
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("Contrast") != std::string::npos);
    }
}
