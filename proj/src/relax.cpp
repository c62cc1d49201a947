#include "augsearch/relax.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "augsearch/errors.hpp"

namespace augsearch::relax {

using ad::Var;

Temperature::Temperature(double t) : t_(t) {
    if (!(t > 0.0) || !std::isfinite(t)) {
        throw DomainError("temperature must be positive and finite, got " + std::to_string(t));
    }
}

double gumbel_from_uniform(double u) {
    u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
    return -std::log(-std::log(u));
}

Tensor sample_gumbel(const Shape& shape, Rng& rng) {
    Tensor g(shape);
    for (double& v : g.values()) v = gumbel_from_uniform(rng.uniform());
    return g;
}

Tensor sample_uniform(const Shape& shape, Rng& rng) {
    Tensor u(shape);
    for (double& v : u.values()) v = std::clamp(rng.uniform(), kUniformClamp, 1.0 - kUniformClamp);
    return u;
}

CategoricalDraw gumbel_softmax_hard(const Var& logits, Temperature t, const Tensor& gumbel) {
    if (logits.shape().size() != 1 || logits.size() < 2) {
        throw ShapeError("gumbel_softmax_hard: logits must be a vector of length >= 2, got " +
                         to_string(logits.shape()));
    }
    if (gumbel.shape() != logits.shape()) {
        throw ShapeError("gumbel_softmax_hard: noise " + to_string(gumbel.shape()) + " vs logits " +
                         to_string(logits.shape()));
    }
    ad::Tape& tape = logits.tape();
    Var perturbed = logits + tape.constant(gumbel);
    // argmax of (logits + g) / t does not depend on t; take it before scaling.
    const Tensor& pv = perturbed.value();
    const std::size_t index =
        static_cast<std::size_t>(std::max_element(pv.data(), pv.data() + pv.size()) - pv.data());
    Var soft = ad::softmax(perturbed * (1.0 / t.value()));
    Tensor one_hot(logits.shape());
    one_hot[index] = 1.0;
    Var hard = ad::straight_through(tape.constant(std::move(one_hot)), soft);
    return {soft, hard, index};
}

CategoricalDraw gumbel_softmax_hard(const Var& logits, Temperature t, Rng& rng) {
    return gumbel_softmax_hard(logits, t, sample_gumbel(logits.shape(), rng));
}

Tensor pad_logits(const Tensor& pi, double pad_value) {
    if (pi.rank() != 2) throw ShapeError("pad_logits: expected N x K logits, got " + to_string(pi.shape()));
    const std::size_t n = pi.dim(0), k = pi.dim(1);
    if (k > n) {
        throw ConfigError("pad_logits: K = " + std::to_string(k) + " layers exceeds N = " + std::to_string(n) +
                          " transforms");
    }
    Tensor out(Shape{n, n}, pad_value);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out.at(i, j) = pi.at(i, j);
    return out;
}

Var pad_logits(const Var& pi, double pad_value) {
    const Shape& s = pi.shape();
    if (s.size() != 2) throw ShapeError("pad_logits: expected N x K logits, got " + to_string(s));
    const std::size_t n = s[0], k = s[1];
    if (k > n) {
        throw ConfigError("pad_logits: K = " + std::to_string(k) + " layers exceeds N = " + std::to_string(n) +
                          " transforms");
    }
    if (k == n) return pi;
    const Var parts[] = {pi, pi.tape().constant(Tensor(Shape{n, n - k}, pad_value))};
    return ad::concat(parts, 1);
}

Var sinkhorn_normalize(const Var& m, int iterations) {
    const Shape& s = m.shape();
    if (s.size() != 2 || s[0] != s[1]) throw ShapeError("sinkhorn_normalize: expected a square matrix, got " + to_string(s));
    if (iterations < 0) throw DomainError("sinkhorn_normalize: negative iteration count");
    for (double v : m.value().values()) {
        if (!(v > 0.0)) throw DomainError("sinkhorn_normalize: non-positive entry " + std::to_string(v));
    }
    Var x = m;
    for (int l = 0; l < iterations; ++l) {
        x = x / ad::sum(x, 1, true);
        x = x / ad::sum(x, 0, true);
    }
    return x;
}

PermutationDraw gumbel_sinkhorn_sample(const Var& pi, Temperature t, int iterations, const Tensor& gumbel) {
    if (iterations < 1) throw DomainError("gumbel_sinkhorn_sample: needs at least one Sinkhorn iteration");
    ad::Tape& tape = pi.tape();
    Var padded = pad_logits(pi);
    const std::size_t n = padded.shape()[0];
    const std::size_t k = pi.shape()[1];
    if (gumbel.shape() != Shape{n, n}) {
        throw ShapeError("gumbel_sinkhorn_sample: noise " + to_string(gumbel.shape()) + " for padded matrix " +
                         to_string(padded.shape()));
    }
    Var z = (padded + tape.constant(gumbel)) * (1.0 / t.value());
    Var positive = ad::clamp(ad::exp(z), kSinkhornFloor, std::numeric_limits<double>::max());
    Var dsm = sinkhorn_normalize(positive, iterations);
    Var soft = k == n ? dsm : ad::slice(dsm, 1, 0, k);

    const Tensor& sv = soft.value();
    Tensor one_hot(Shape{n, k});
    std::vector<std::size_t> rows(k);
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t best = 0;
        for (std::size_t r = 1; r < n; ++r)
            if (sv.at(r, c) > sv.at(best, c)) best = r;
        rows[c] = best;
        one_hot.at(best, c) = 1.0;
    }
    Var hard = ad::straight_through(tape.constant(std::move(one_hot)), soft);
    return {soft, hard, std::move(rows)};
}

PermutationDraw gumbel_sinkhorn_sample(const Var& pi, Temperature t, int iterations, Rng& rng) {
    const std::size_t n = pi.shape().at(0);
    return gumbel_sinkhorn_sample(pi, t, iterations, sample_gumbel(Shape{n, n}, rng));
}

Var sample_magnitude(const Var& low, const Var& high, const Tensor& eps) {
    if (low.shape() != high.shape() || eps.shape() != low.shape()) {
        throw ShapeError("sample_magnitude: bounds " + to_string(low.shape()) + "/" + to_string(high.shape()) +
                         " with noise " + to_string(eps.shape()));
    }
    Var sl = ad::sigmoid(low);
    Var sh = ad::sigmoid(high);
    return (sh - sl) * low.tape().constant(eps) + sl;
}

Var sample_magnitude(const Var& low, const Var& high, Rng& rng) {
    return sample_magnitude(low, high, sample_uniform(low.shape(), rng));
}

Var sample_magnitude_gaussian(const Var& mean, const Var& std, const Tensor& eps) {
    if (mean.shape() != std.shape() || eps.shape() != mean.shape()) {
        throw ShapeError("sample_magnitude_gaussian: mean " + to_string(mean.shape()) + ", std " +
                         to_string(std.shape()) + ", noise " + to_string(eps.shape()));
    }
    for (double s : std.value().values()) {
        if (!(s > 0.0)) throw DomainError("sample_magnitude_gaussian: non-positive std " + std::to_string(s));
    }
    Var m = mean + std * mean.tape().constant(eps);
    return ad::clamp(m, kGaussianMagnitudeEdge, 1.0 - kGaussianMagnitudeEdge);
}

Var sample_magnitude_gaussian(const Var& mean, const Var& std, Rng& rng) {
    Tensor eps(mean.shape());
    for (double& v : eps.values()) v = rng.normal();
    return sample_magnitude_gaussian(mean, std, eps);
}

bool has_repeated_row(const std::vector<std::size_t>& rows) {
    for (std::size_t a = 0; a < rows.size(); ++a)
        for (std::size_t b = a + 1; b < rows.size(); ++b)
            if (rows[a] == rows[b]) return true;
    return false;
}

}  // namespace augsearch::relax
