#pragma once

// One small graph per tape primitive, each reduced to a scalar through fixed
// readout weights, for finite-difference checks.

#include <cmath>
#include <vector>

#include "augsearch/autodiff.hpp"
#include "augsearch/rng.hpp"
#include "gradcheck.hpp"

namespace augsearch::testing {

struct PrimitiveCase {
    const char* name;
    Builder f;
    std::vector<Tensor> in;
};

inline std::vector<PrimitiveCase> primitive_cases(std::uint64_t seed) {
    using namespace ad;
    Rng rng(seed);
    auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.values()) v = lo + (hi - lo) * rng.uniform();
        return t;
    };
    auto readout = [](Tape& t, const Var& v) {
        Tensor w(v.shape());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + static_cast<double>(i));
        return sum(v * t.constant(w));
    };
    return {
        {"add-broadcast", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, v[0] + v[1]); },
         {rnd({3, 4}), rnd({4})}},
        {"sub", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, v[0] - v[1]); },
         {rnd({3, 4}), rnd({3, 1})}},
        {"mul", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, v[0] * v[1]); },
         {rnd({3, 4}), rnd({3, 4})}},
        {"div", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, v[0] / v[1]); },
         {rnd({3, 4}), rnd({3, 4}, 0.5, 2.0)}},
        {"matmul", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, matmul(v[0], v[1])); },
         {rnd({3, 4}), rnd({4, 2})}},
        {"exp", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, exp(v[0])); }, {rnd({3, 4})}},
        {"log", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, log(v[0])); },
         {rnd({3, 4}, 0.2, 3.0)}},
        {"sigmoid", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, sigmoid(v[0] * 3.0)); },
         {rnd({3, 4})}},
        {"softmax", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, softmax(v[0])); }, {rnd({3, 4})}},
        {"sum-axis", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, sum(v[0], 1)); }, {rnd({3, 4})}},
        {"mean-axis", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, mean(v[0], 0, true)); },
         {rnd({3, 4})}},
        {"broadcast", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, broadcast_to(v[0], {2, 3, 4})); },
         {rnd({3, 1})}},
        {"slice", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, slice(v[0], 1, 1, 3)); },
         {rnd({3, 4})}},
        {"select", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, select(v[0], 0, 2)); },
         {rnd({3, 4})}},
        {"concat",
         [readout](Tape& t, const std::vector<Var>& v) {
             const Var p[] = {v[0], v[1]};
             return readout(t, concat(p, 0));
         },
         {rnd({3, 4}), rnd({2, 4})}},
        {"clamp", [readout](Tape& t, const std::vector<Var>& v) { return readout(t, clamp(v[0], -0.5, 0.5)); },
         {rnd({3, 4})}},
        {"weighted_sum",
         [readout](Tape& t, const std::vector<Var>& v) {
             const Var xs[] = {v[1], v[2]};
             return readout(t, weighted_sum(v[0], xs));
         },
         {rnd({2}), rnd({3, 4}), rnd({3, 4})}},
        {"conv2d",
         [readout](Tape& t, const std::vector<Var>& v) { return readout(t, conv2d(v[0], v[1], v[2], 2, 1)); },
         {rnd({2, 2, 5, 5}), rnd({3, 2, 3, 3}), rnd({3})}},
        {"cross_entropy",
         [](Tape&, const std::vector<Var>& v) {
             const int labels[] = {2, 0};
             return cross_entropy(v[0], labels);
         },
         {rnd({2, 3})}},
    };
}

}  // namespace augsearch::testing
